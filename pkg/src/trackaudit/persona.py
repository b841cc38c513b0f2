"""Demographic personas: incremental building, maturity, compound merging, archives."""

from __future__ import annotations

import json
import random
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .crawllog import CookieRecord, CrawlLog

FORMAT_VERSION = 1
DEFAULT_MATURITY_THRESHOLD = 50

FEATURE_INITIAL = {"young": "Y", "senior": "S", "woman": "W", "man": "M"}
INITIAL_FEATURE = {v: k for k, v in FEATURE_INITIAL.items()}
FEATURE_AXIS = {"young": "age", "senior": "age", "woman": "gender", "man": "gender"}
STANDARD_LABELS = ("baseline", "Y", "S", "W", "M", "YW", "YM", "SW", "SM")


class PersonaError(ValueError):
    pass


class MissingCrawl(PersonaError, KeyError):
    def __init__(self, site: str):
        super().__init__(f"no crawl for listed site {site!r}")
        self.site = site


def label_for(demographics: Iterable[str]) -> str:
    """Persona acronym, age initial first: {"senior", "woman"} -> "SW"."""
    feats = sorted(demographics, key=lambda f: (FEATURE_AXIS[f] != "age", f))
    return "".join(FEATURE_INITIAL[f] for f in feats) or "baseline"


def demographics_for(label: str) -> frozenset[str]:
    if label == "baseline":
        return frozenset()
    try:
        return frozenset(INITIAL_FEATURE[ch] for ch in label)
    except KeyError:
        raise PersonaError(f"unknown persona label {label!r}") from None


@dataclass(frozen=True)
class DemographicSpec:
    feature: str
    site_list: tuple[str, ...]

    def __post_init__(self):
        if self.feature not in FEATURE_INITIAL:
            raise PersonaError(f"unknown demographic feature {self.feature!r}")
        if not self.site_list:
            raise PersonaError("site_list is empty")
        if len(set(self.site_list)) != len(self.site_list):
            raise PersonaError("site_list contains duplicates")
        object.__setattr__(self, "site_list", tuple(self.site_list))

    @classmethod
    def load(cls, path: str | Path) -> "DemographicSpec":
        data = json.loads(Path(path).read_text("utf-8"))
        return cls(data["feature"], tuple(data["site_list"]))


@dataclass(frozen=True)
class Persona:
    label: str
    demographics: frozenset[str] = frozenset()
    jar: tuple[CookieRecord, ...] = ()
    history: tuple[str, ...] = ()
    matured: bool = False
    created_at: int = 0
    matured_at: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.label == "baseline" and (self.jar or self.history or self.demographics):
            raise PersonaError("baseline persona must have empty jar, history and demographics")
        unknown = set(self.demographics) - set(FEATURE_AXIS)
        if unknown:
            raise PersonaError(f"unknown demographic feature(s) {sorted(unknown)}")
        if len(self.demographics) > 2:
            raise PersonaError("a persona carries at most two demographic features")
        if len({FEATURE_AXIS[f] for f in self.demographics}) != len(self.demographics):
            raise PersonaError("demographic features must lie on distinct axes")

    @property
    def is_baseline(self) -> bool:
        return self.label == "baseline"

    def third_party_owners(self) -> set[str]:
        return third_party_owners(self.jar, self.history)

    def browser_state(self) -> dict[tuple[str, str], str]:
        """Cookie state a browser would hold after loading the jar.

        Later observations of the same (owner, name) overwrite earlier ones.
        """
        state: dict[tuple[str, str], str] = {}
        for c in self.jar:
            state[(c.owner, c.name)] = c.value
        return state


def baseline_persona() -> Persona:
    return Persona("baseline")


def third_party_owners(jar: Iterable[CookieRecord], first_parties: Iterable[str]) -> set[str]:
    fp = set(first_parties)
    return {c.owner for c in jar if c.owner not in fp and c.owner != c.site}


def maturity(p: Persona, threshold: int = DEFAULT_MATURITY_THRESHOLD) -> bool:
    return len(p.third_party_owners()) >= threshold


def _site_cookies(crawl: CrawlLog, site: str) -> list[CookieRecord]:
    return [c for c in crawl.cookies if c.site == site]


def _visit_order(spec: DemographicSpec, order: Sequence[str] | None, seed: int | None) -> list[str]:
    if order is not None:
        if sorted(order) != sorted(spec.site_list):
            raise PersonaError("visit order must be a permutation of the site list")
        return list(order)
    sites = list(spec.site_list)
    if seed is not None:
        random.Random(seed).shuffle(sites)
    return sites


def _crawl_for(crawls: Mapping[str, CrawlLog], site: str) -> CrawlLog:
    try:
        return crawls[site]
    except KeyError:
        raise MissingCrawl(site) from None


def growth_curve(
    spec: DemographicSpec,
    crawls: Mapping[str, CrawlLog],
    *,
    order: Sequence[str] | None = None,
    seed: int | None = None,
) -> list[tuple[int, int]]:
    """Distinct third-party cookie owners seen after each visit, 1-indexed."""
    sites = _visit_order(spec, order, seed)
    first_parties = set(sites)
    seen: set[str] = set()
    curve = []
    for i, site in enumerate(sites, start=1):
        seen |= third_party_owners(_site_cookies(_crawl_for(crawls, site), site), first_parties)
        curve.append((i, len(seen)))
    return curve


def maturity_point(curve: Sequence[tuple[int, int]], threshold: int = DEFAULT_MATURITY_THRESHOLD) -> int | None:
    for i, n in curve:
        if n >= threshold:
            return i
    return None


def build_persona(
    spec: DemographicSpec,
    crawls: Mapping[str, CrawlLog],
    *,
    order: Sequence[str] | None = None,
    seed: int | None = None,
    threshold: int = DEFAULT_MATURITY_THRESHOLD,
) -> Persona:
    """Accumulate cookies over the spec's sites in visit order (stateful crawl).

    ``crawls`` maps each listed site to the log of its visit. ``order`` or
    ``seed`` pick a different visit order; the resulting distinct-owner set
    does not depend on it.
    """
    sites = _visit_order(spec, order, seed)
    jar: list[CookieRecord] = []
    for site in sites:
        jar.extend(_site_cookies(_crawl_for(crawls, site), site))
    curve = growth_curve(spec, crawls, order=sites)
    point = maturity_point(curve, threshold)
    return Persona(
        label=FEATURE_INITIAL[spec.feature],
        demographics=frozenset([spec.feature]),
        jar=tuple(jar),
        history=tuple(sites),
        matured=point is not None,
        created_at=max((c.timestamp for c in jar), default=0),
        matured_at=point,
    )


def merge_compound(a: Persona, b: Persona, seed: int, *, threshold: int = DEFAULT_MATURITY_THRESHOLD) -> Persona:
    """Combine an age persona and a gender persona into a two-feature persona.

    Site visits from both histories are replayed in a seeded riffle that keeps
    each persona's own visit order.
    """
    for p in (a, b):
        if p.is_baseline or len(p.demographics) != 1:
            raise PersonaError(f"{p.label!r} is not a single-feature persona")
    axes = {FEATURE_AXIS[f] for f in a.demographics | b.demographics}
    if len(axes) != 2:
        raise PersonaError(f"cannot merge {a.label!r} and {b.label!r}: same demographic axis")

    def by_site(p: Persona) -> list[tuple[str, list[CookieRecord]]]:
        groups: dict[str, list[CookieRecord]] = defaultdict(list)
        for c in p.jar:
            groups[c.site].append(c)
        return [(site, groups.get(site, [])) for site in p.history]

    queues = [by_site(a), by_site(b)]
    picks = [0] * len(queues[0]) + [1] * len(queues[1])
    random.Random(seed).shuffle(picks)
    pos = [0, 0]
    history: list[str] = []
    jar: list[CookieRecord] = []
    for which in picks:
        site, cookies = queues[which][pos[which]]
        pos[which] += 1
        history.append(site)
        jar.extend(cookies)
    demographics = a.demographics | b.demographics
    owners = third_party_owners(jar, history)
    return Persona(
        label=label_for(demographics),
        demographics=demographics,
        jar=tuple(jar),
        history=tuple(history),
        matured=len(owners) >= threshold,
        created_at=max(a.created_at, b.created_at),
    )


# -- archives --------------------------------------------------------------


def _cookie_dict(c: CookieRecord) -> dict:
    return {
        "owner": c.owner, "name": c.name, "value": c.value, "source": c.source,
        "visit_id": c.visit_id, "site": c.site, "timestamp": c.timestamp,
    }


def dumps_archive(p: Persona) -> bytes:
    doc = {
        "format_version": FORMAT_VERSION,
        "label": p.label,
        "demographics": sorted(p.demographics),
        "history": list(p.history),
        "jar": [_cookie_dict(c) for c in p.jar],
        "matured": p.matured,
        "created_at": p.created_at,
    }
    return (json.dumps(doc, sort_keys=True, indent=1, ensure_ascii=False) + "\n").encode("utf-8")


def loads_archive(data: bytes | str) -> Persona:
    doc = json.loads(data)
    if doc.get("format_version") != FORMAT_VERSION:
        raise PersonaError(f"unsupported archive format {doc.get('format_version')!r}")
    return Persona(
        label=doc["label"],
        demographics=frozenset(doc["demographics"]),
        jar=tuple(CookieRecord(**c) for c in doc["jar"]),
        history=tuple(doc["history"]),
        matured=bool(doc["matured"]),
        created_at=int(doc["created_at"]),
    )


def save_archive(p: Persona, path: str | Path) -> None:
    Path(path).write_bytes(dumps_archive(p))


def load_archive(path: str | Path) -> Persona:
    return loads_archive(Path(path).read_bytes())


def load_archives(path: str | Path) -> dict[str, Persona]:
    """Load a single archive file or every ``*.json`` archive in a directory, keyed by label."""
    path = Path(path)
    files = sorted(path.glob("*.json")) if path.is_dir() else [path]
    out = {}
    for f in files:
        p = load_archive(f)
        out[p.label] = p
    return out
