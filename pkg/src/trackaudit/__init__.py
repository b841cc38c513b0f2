"""Differential audit of third-party tracking on hyper-partisan websites."""

__version__ = "0.1.0"
