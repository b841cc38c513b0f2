"""Party and category labeling of cookies, tracker prevalence and persona/HPW overlap."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .crawllog import CookieRecord, CrawlLog

log = logging.getLogger(__name__)

CATEGORIES = ("first-party", "advertising", "analytics", "content", "social", "other")
LIST_CATEGORIES = ("advertising", "analytics", "content", "social")


class ClassifyError(ValueError):
    pass


@dataclass(frozen=True)
class BlockList:
    entries: Mapping[str, frozenset[str]]
    version: str = "unversioned"
    _index: dict[str, str] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index: dict[str, str] = {}
        for category, domains in self.entries.items():
            if category not in LIST_CATEGORIES:
                raise ClassifyError(f"unknown block-list category {category!r}")
            for d in sorted(domains):
                if d in index:
                    log.warning("%s listed under %s and %s; keeping %s", d, index[d], category, index[d])
                    continue
                index[d] = category
        object.__setattr__(self, "_index", index)

    def category_of(self, domain: str) -> str | None:
        return self._index.get(domain)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "BlockList":
        cats = doc.get("categories", {})
        return cls({k: frozenset(v) for k, v in cats.items()}, str(doc.get("version", "unversioned")))

    @classmethod
    def load(cls, path: str | Path) -> "BlockList":
        return cls.from_dict(json.loads(Path(path).read_text("utf-8")))


def label_cookie(c: CookieRecord, bl: BlockList) -> str:
    if c.owner == c.site:
        return "first-party"
    return bl.category_of(c.owner) or "other"


def category_counts(log_: CrawlLog, bl: BlockList) -> dict[str, Counter]:
    """Per-visit cookie counts broken down by category, keyed by visit_id."""
    out: dict[str, Counter] = {v.visit_id: Counter() for v in log_.visits}
    for c in log_.cookies:
        out.setdefault(c.visit_id, Counter())[label_cookie(c, bl)] += 1
    return out


def site_category_means(crawls: Iterable[CrawlLog], bl: BlockList) -> dict[str, dict[str, float]]:
    """Mean cookies per visit for each site and category, over all given logs."""
    totals: dict[str, Counter] = defaultdict(Counter)
    visits: Counter = Counter()
    for lg in crawls:
        counts = category_counts(lg, bl)
        site_of = {v.visit_id: v.site for v in lg.visits}
        for vid, ctr in counts.items():
            site = site_of.get(vid)
            if site is None:
                continue
            totals[site].update(ctr)
            visits[site] += 1
    return {
        s: {cat: totals[s][cat] / visits[s] for cat in CATEGORIES}
        for s in sorted(visits)
    }


@dataclass(frozen=True)
class TrackerEntry:
    rank: int
    domain: str
    web_prevalence: float


@dataclass(frozen=True)
class TrackerList:
    entries: tuple[TrackerEntry, ...]

    def __post_init__(self):
        ranks = sorted(e.rank for e in self.entries)
        if ranks != list(range(1, len(ranks) + 1)):
            raise ClassifyError("tracker ranks must be unique and contiguous from 1")
        for e in self.entries:
            if not 0.0 <= e.web_prevalence <= 1.0:
                raise ClassifyError(f"prevalence of {e.domain} outside [0, 1]")
        object.__setattr__(self, "entries", tuple(sorted(self.entries, key=lambda e: e.rank)))

    @property
    def domains(self) -> list[str]:
        return [e.domain for e in self.entries]

    @classmethod
    def load(cls, path: str | Path) -> "TrackerList":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls(tuple(
            TrackerEntry(int(r["rank"]), r["domain"].strip(), float(r["prevalence"])) for r in rows
        ))


def _sites_with_owner(crawls: Iterable[CrawlLog]) -> tuple[dict[str, set[str]], dict[str, str]]:
    owners: dict[str, set[str]] = defaultdict(set)
    leans: dict[str, str] = {}
    for lg in crawls:
        for v in lg.visits:
            owners.setdefault(v.site, set())
            leans.setdefault(v.site, v.lean if v.lean != "none" else lg.lean)
        for c in lg.cookies:
            owners[c.site].add(c.owner)
            leans.setdefault(c.site, lg.lean)
    return owners, leans


@dataclass(frozen=True)
class Prevalence:
    fractions: dict[str, dict[str, float]]      # domain -> lean -> fraction of sites
    ratios: dict[str, dict[str, float | None]]  # domain -> lean -> fraction / web prevalence
    n_sites: dict[str, int]


def prevalence(crawls: Iterable[CrawlLog], tl: TrackerList, leans: tuple[str, ...] = ("left", "right")) -> Prevalence:
    """Fraction of sites per lean where each listed tracker set at least one cookie."""
    owners, site_lean = _sites_with_owner(crawls)
    partition = {lean: [s for s in sorted(owners) if site_lean.get(s) == lean] for lean in leans}
    for lean, sites in partition.items():
        if not sites:
            raise ClassifyError(f"no sites for lean {lean!r}")
    fractions: dict[str, dict[str, float]] = {}
    ratios: dict[str, dict[str, float | None]] = {}
    for e in tl.entries:
        fractions[e.domain] = {}
        ratios[e.domain] = {}
        for lean, sites in partition.items():
            frac = sum(1 for s in sites if e.domain in owners[s] and e.domain != s) / len(sites)
            fractions[e.domain][lean] = frac
            ratios[e.domain][lean] = frac / e.web_prevalence if e.web_prevalence > 0 else None
    return Prevalence(fractions, ratios, {k: len(v) for k, v in partition.items()})


def third_parties(crawls: Iterable[CrawlLog]) -> set[str]:
    return {c.owner for lg in crawls for c in lg.cookies if c.owner != c.site}


def match_rate(crawls: Iterable[CrawlLog], tl: TrackerList) -> dict[str, float]:
    """Agreement between listed trackers and third parties observed on the crawled sites.

    Both directions are reported: the share of listed trackers observed, and
    the share of observed third parties that are listed.
    """
    observed = third_parties(crawls)
    listed = set(tl.domains)
    common = observed & listed
    return {
        "common": len(common),
        "listed": len(listed),
        "observed": len(observed),
        "listed_matched": len(common) / len(listed) if listed else 0.0,
        "observed_matched": len(common) / len(observed) if observed else 0.0,
    }


def overlap(persona_domains: Iterable[str], hpw_domains: Iterable[str]) -> float:
    """Share of the persona's third parties that are met again on HPWs."""
    pset = set(persona_domains)
    if not pset:
        raise ClassifyError("persona domain set is empty")
    return len(pset & set(hpw_domains)) / len(pset)
