"""Registrable-domain (eTLD+1) lookup against the vendored public-suffix snapshot."""

from __future__ import annotations

import ipaddress
import re
from functools import lru_cache
from importlib import resources

__all__ = [
    "DomainError",
    "SuffixOnlyHost",
    "PublicSuffixList",
    "registrable_domain",
    "psl_version",
]


class DomainError(ValueError):
    pass


class SuffixOnlyHost(DomainError):
    """The hostname is itself a public suffix and has no registrable part."""


_LABEL = re.compile(r"^[^\s./:@?#]+$")


def _to_unicode(label: str) -> str:
    if label.startswith("xn--"):
        try:
            return label.encode("ascii").decode("idna")
        except UnicodeError:
            return label
    return label


class PublicSuffixList:
    def __init__(self, text: str):
        self.rules: set[str] = set()
        self.wildcards: set[str] = set()
        self.exceptions: set[str] = set()
        self.version = "unknown"
        for raw in text.splitlines():
            line = raw.strip()
            if line.startswith("// VERSION:"):
                self.version = line.split(":", 1)[1].strip()
            if not line or line.startswith("//"):
                continue
            rule = line.split()[0].lower()
            if rule.startswith("!"):
                self.exceptions.add(rule[1:])
            elif rule.startswith("*."):
                self.wildcards.add(rule[2:])
            else:
                self.rules.add(rule)

    def suffix_length(self, labels: list[str]) -> int:
        """Number of trailing labels forming the public suffix (prevailing rule)."""
        n = len(labels)
        best = 1  # implicit "*" rule
        for i in range(n):
            candidate = ".".join(labels[i:])
            if candidate in self.exceptions:
                return n - i - 1
            size = n - i
            if candidate in self.rules and size > best:
                best = size
            parent = ".".join(labels[i + 1:])
            if i + 1 < n and parent in self.wildcards and size > best:
                best = size
        return best

    def registrable_domain(self, hostname: str) -> str:
        if hostname is None or not hostname.strip():
            raise DomainError("empty hostname")
        host = hostname.strip().lower()
        if host.startswith("[") and host.endswith("]"):
            host = host[1:-1]
        try:
            return str(ipaddress.ip_address(host))
        except ValueError:
            pass
        if host.endswith("."):
            host = host[:-1]
        labels = host.split(".")
        if any(not _LABEL.match(lab) for lab in labels):
            raise DomainError(f"invalid hostname: {hostname!r}")
        keyed = [_to_unicode(lab) for lab in labels]
        n_suffix = self.suffix_length(keyed)
        if n_suffix >= len(labels):
            raise SuffixOnlyHost(f"suffix-only host: {hostname!r}")
        return ".".join(labels[-(n_suffix + 1):])


@lru_cache(maxsize=1)
def default_list() -> PublicSuffixList:
    text = resources.files("trackaudit.data").joinpath("public_suffix_list.dat").read_text("utf-8")
    return PublicSuffixList(text)


def psl_version() -> str:
    return default_list().version


@lru_cache(maxsize=65536)
def registrable_domain(hostname: str) -> str:
    """Return the eTLD+1 of ``hostname``; IP literals come back unchanged.

    Raises DomainError for empty or malformed input and SuffixOnlyHost when
    the name is a bare public suffix such as ``co.uk``.
    """
    return default_list().registrable_domain(hostname)
