"""RTB win-notification detection and cleartext charge-price extraction (USD CPM)."""

from __future__ import annotations

import json
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence
from urllib.parse import unquote, urlsplit

import numpy as np

from .crawllog import CrawlLog
from .psl import DomainError, registrable_domain
from .stats import EmpiricalDistribution

DEFAULT_PARAMS = ("price", "cpm", "wp", "winprice", "auction_price", "wprc")
DEFAULT_VALUE_REGEX = r"^\d+(\.\d+)?$"
DEFAULT_CAP = 100.0
_MACRO = re.compile(r"^\$\{[A-Z0-9_:]+\}$|^\$\{.*\}$|^%%.*%%$|^\[[A-Z_]+\]$")


@dataclass(frozen=True)
class PricePatternSet:
    params: tuple[str, ...] = DEFAULT_PARAMS
    value_regex: str = DEFAULT_VALUE_REGEX
    cap: float = DEFAULT_CAP

    def __post_init__(self):
        if not self.params:
            raise ValueError("price pattern set is empty")
        object.__setattr__(self, "params", tuple(p.lower() for p in self.params))

    @property
    def value_pattern(self) -> re.Pattern:
        return re.compile(self.value_regex)

    @classmethod
    def load(cls, path: str | Path) -> "PricePatternSet":
        doc = json.loads(Path(path).read_text("utf-8"))
        return cls(
            tuple(doc.get("params", DEFAULT_PARAMS)),
            doc.get("value_regex", DEFAULT_VALUE_REGEX),
            float(doc.get("cap", DEFAULT_CAP)),
        )


@dataclass(frozen=True)
class PriceEvent:
    bidder: str
    cpm: float
    raw_param: str
    site: str
    persona_label: str
    lean: str
    visit_id: str


@dataclass
class WinTally:
    matches: int = 0
    opaque: int = 0
    over_cap: int = 0
    macros: int = 0
    duplicates: int = 0
    opaque_by_lean: dict[str, int] = field(default_factory=lambda: defaultdict(int))

    def merge(self, other: "WinTally") -> None:
        self.matches += other.matches
        self.opaque += other.opaque
        self.over_cap += other.over_cap
        self.macros += other.macros
        self.duplicates += other.duplicates
        for k, v in other.opaque_by_lean.items():
            self.opaque_by_lean[k] += v


def detect_wins(
    log: CrawlLog, patterns: PricePatternSet | None = None, tally: WinTally | None = None
) -> list[PriceEvent]:
    """One PriceEvent per win notification carrying a cleartext numeric price.

    Non-numeric values (encrypted prices) are only counted in ``tally``.
    Repeated (bidder, visit, param) notifications are kept once.
    """
    patterns = patterns or PricePatternSet()
    tally = tally if tally is not None else WinTally()
    value_ok = patterns.value_pattern
    site_lean = {v.visit_id: (v.lean if v.lean != "none" else log.lean) for v in log.visits}
    seen: set[tuple] = set()
    out = []
    for ev in log.events:
        if ev.kind != "request":
            continue
        parts = urlsplit(ev.url)
        if not parts.query:
            continue
        for pair in parts.query.split("&"):
            name, sep, value = pair.partition("=")
            if not sep or unquote(name).lower() not in patterns.params:
                continue
            value = unquote(value)
            tally.matches += 1
            lean = site_lean.get(ev.visit_id, log.lean)
            if _MACRO.match(value):
                tally.macros += 1
                continue
            if not value_ok.match(value):
                tally.opaque += 1
                tally.opaque_by_lean[lean] += 1
                continue
            cpm = float(value)
            if not 0.0 <= cpm <= patterns.cap:
                tally.over_cap += 1
                continue
            try:
                bidder = registrable_domain(parts.hostname or "")
            except DomainError:
                bidder = parts.hostname or ""
            raw = f"{name}={value}"
            key = (bidder, ev.visit_id, raw)
            if key in seen:
                tally.duplicates += 1
                continue
            seen.add(key)
            out.append(PriceEvent(bidder, cpm, raw, ev.site, log.persona_label, lean, ev.visit_id))
    return out


def _describe(values: Sequence[float]) -> dict:
    ecdf = EmpiricalDistribution(values)
    q1, med, q3 = np.quantile(ecdf.samples, [0.25, 0.5, 0.75])
    return {
        "n": ecdf.n,
        "median": float(med),
        "q1": float(q1),
        "q3": float(q3),
        "ecdf": ecdf.steps(),
    }


def price_summary(events: Iterable[PriceEvent]) -> dict:
    """Median, quartiles and ECDF per lean and per persona-lean group.

    Groups with no events are absent. ``median_ratio`` and
    ``top_quartile_ratio`` compare right to left and are present only when
    both leans have events (and, for the quartile ratio, at least two each).
    """
    by_lean: dict[str, list[float]] = defaultdict(list)
    by_group: dict[str, list[float]] = defaultdict(list)
    for e in events:
        by_lean[e.lean].append(e.cpm)
        tag = {"left": "L", "right": "R"}.get(e.lean, "N")
        by_group[f"{tag}:{e.persona_label}"].append(e.cpm)
    out: dict = {
        "lean": {k: _describe(v) for k, v in sorted(by_lean.items())},
        "persona": {k: _describe(v) for k, v in sorted(by_group.items())},
    }
    left, right = out["lean"].get("left"), out["lean"].get("right")
    if left and right and left["median"] > 0:
        out["median_ratio"] = right["median"] / left["median"]
    if left and right and left["n"] >= 2 and right["n"] >= 2:
        top_l = [v for v in by_lean["left"] if v >= left["q3"]]
        top_r = [v for v in by_lean["right"] if v >= right["q3"]]
        if np.mean(top_l) > 0:
            out["top_quartile_ratio"] = float(np.mean(top_r) / np.mean(top_l))
        if left["q3"] > 0:
            out["q3_ratio"] = right["q3"] / left["q3"]
    return out
