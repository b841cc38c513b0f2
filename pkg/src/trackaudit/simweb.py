"""Seeded synthetic web: hyper-partisan sites, trackers, syncs and RTB wins with ground truth.

Every random draw comes from a stream keyed by (master seed, purpose, site,
persona, run), so output does not depend on generation order.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import string
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence
from urllib.parse import quote

import numpy as np
from scipy import stats as sps

from .crawllog import CookieRecord, CrawlLog, HttpEvent, Visit
from .persona import (
    FEATURE_AXIS,
    FEATURE_INITIAL,
    DemographicSpec,
    Persona,
    baseline_persona,
    build_persona,
    demographics_for,
    merge_compound,
)

LEANS = ("left", "right")
TRACKER_CATEGORIES = ("advertising", "analytics", "content", "social", "other")
SYNTHETIC_PREFIX = {
    "advertising": "adserv",
    "analytics": "metricsbeacon",
    "content": "cdnmedia",
    "social": "sharewidget",
    "other": "misctag",
}
ENCODINGS = ("plain", "url-encoded", "base64", "md5-hex", "sha1-hex")
EPOCH_MS = 1_543_622_400_000  # 2018-12-01T00:00:00Z
VISIT_SPACING_MS = 60_000
FIXTURE_NAMES = ("paper-shaped", "null-world", "planted-sync", "planted-prices")

_ALNUM = string.ascii_letters + string.digits
_B64ISH = _ALNUM + "+/"


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


# -- configuration ---------------------------------------------------------


@dataclass(frozen=True)
class TrackerSpec:
    domain: str
    category: str
    embed: Mapping[str, float]
    weight: float = 1.0
    id_style: str = "alnum"  # alnum | b64 | composite
    exact: bool = False  # embed on exactly round(p * n) sites instead of per-site coin flips


@dataclass(frozen=True)
class DemographicSites:
    n_sites: int = 10
    third_parties_per_site: int = 12
    pool_size: int = 60
    shared_fraction: float = 0.3


@dataclass(frozen=True)
class EcosystemConfig:
    seed: int = 0
    n_left: int = 164
    n_right: int = 392
    cookie_mean: float = 60.0
    cookie_dispersion: float = 0.5
    cookie_distribution: str = "negative-binomial"  # or "fixed": every site gets the lean mean
    lean_multiplier: Mapping[str, float] = field(default_factory=lambda: {"left": 1.0, "right": 1.0})
    first_party_share: float = 0.25
    trackers: tuple[TrackerSpec, ...] = ()
    unranked_fraction: float = 0.0
    rank_buckets: tuple[tuple[int, int, float], ...] = ((1, 5_000_000, 1.0),)
    unranked_multiplier: float = 1.0
    sync_chains: Mapping[str, float] = field(default_factory=lambda: {"left": 0.0, "right": 0.0})
    sync_encodings: Mapping[str, float] = field(default_factory=lambda: {"plain": 1.0})
    sync_redirect_fraction: float = 0.5
    price_family: str = "none"  # none | lognormal | replay
    price_median: Mapping[str, float] = field(default_factory=dict)
    price_sigma: Mapping[str, float] = field(default_factory=dict)
    price_values: Mapping[str, tuple[float, ...]] = field(default_factory=dict)
    wins_per_site: Mapping[str, float] = field(default_factory=lambda: {"left": 0.0, "right": 0.0})
    opaque_fraction: float = 0.0
    bidders: tuple[str, ...] = ()
    demographics: Mapping[str, DemographicSites] = field(default_factory=dict)
    persona_response: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    personas: tuple[str, ...] = ("baseline",)
    runs: Mapping[str, int] = field(default_factory=lambda: {"baseline": 2, "persona": 5})
    name: str = "custom"

    def __post_init__(self):
        def prob(name, v):
            if not 0.0 <= float(v) <= 1.0:
                raise ConfigError(name, f"probability {v!r} outside [0, 1]")

        def nonneg(name, v):
            if float(v) < 0 or math.isnan(float(v)):
                raise ConfigError(name, f"must be non-negative, got {v!r}")

        if self.n_left < 0 or self.n_right < 0:
            raise ConfigError("sites", "site counts must be non-negative")
        nonneg("cookies.mean", self.cookie_mean)
        if self.cookie_dispersion <= 0:
            raise ConfigError("cookies.dispersion", "must be positive")
        if self.cookie_distribution not in ("negative-binomial", "fixed"):
            raise ConfigError("cookies.distribution", f"unknown distribution {self.cookie_distribution!r}")
        for lean in LEANS:
            nonneg(f"cookies.lean_multiplier.{lean}", self.lean_multiplier.get(lean, 1.0))
            nonneg(f"sync.chains_per_site.{lean}", self.sync_chains.get(lean, 0.0))
            nonneg(f"prices.wins_per_site.{lean}", self.wins_per_site.get(lean, 0.0))
        prob("cookies.first_party_share", self.first_party_share)
        prob("ranks.unranked_fraction", self.unranked_fraction)
        prob("sync.redirect_fraction", self.sync_redirect_fraction)
        prob("prices.opaque_fraction", self.opaque_fraction)
        nonneg("ranks.unranked_multiplier", self.unranked_multiplier)
        domains = set()
        for t in self.trackers:
            if t.category not in TRACKER_CATEGORIES:
                raise ConfigError(f"trackers.{t.domain}.category", f"unknown category {t.category!r}")
            if t.domain in domains:
                raise ConfigError(f"trackers.{t.domain}", "duplicate tracker domain")
            domains.add(t.domain)
            for lean in LEANS:
                prob(f"trackers.{t.domain}.embed.{lean}", t.embed.get(lean, 0.0))
            if t.weight <= 0:
                raise ConfigError(f"trackers.{t.domain}.weight", "must be positive")
            if t.id_style not in ("alnum", "b64", "composite"):
                raise ConfigError(f"trackers.{t.domain}.id_style", f"unknown style {t.id_style!r}")
        for lo, hi, mult in self.rank_buckets:
            if not 1 <= lo <= hi:
                raise ConfigError("ranks.buckets", f"bad bucket range {lo}-{hi}")
            nonneg("ranks.buckets.multiplier", mult)
        for enc, w in self.sync_encodings.items():
            if enc not in ENCODINGS:
                raise ConfigError("sync.encodings", f"unknown encoding {enc!r}")
            nonneg(f"sync.encodings.{enc}", w)
        if any(self.sync_chains.get(lean, 0) > 0 for lean in LEANS) and sum(self.sync_encodings.values()) <= 0:
            raise ConfigError("sync.encodings", "weights sum to zero")
        if self.price_family not in ("none", "lognormal", "replay"):
            raise ConfigError("prices.family", f"unknown family {self.price_family!r}")
        if self.price_family == "lognormal":
            for lean in LEANS:
                if self.price_median.get(lean, 0) <= 0:
                    raise ConfigError(f"prices.median.{lean}", "must be positive")
                nonneg(f"prices.sigma.{lean}", self.price_sigma.get(lean, 0.0))
        if self.price_family == "replay":
            for lean in LEANS:
                vals = self.price_values.get(lean, ())
                if any(v < 0 for v in vals):
                    raise ConfigError(f"prices.values.{lean}", "prices must be non-negative")
        if self.price_family != "none" and not self.bidders:
            raise ConfigError("prices.bidders", "at least one bidder domain is required")
        for feat, d in self.demographics.items():
            if feat not in FEATURE_INITIAL:
                raise ConfigError(f"personas.demographics.{feat}", "unknown demographic feature")
            if d.n_sites < 1 or d.third_parties_per_site < 0 or d.pool_size < d.third_parties_per_site:
                raise ConfigError(f"personas.demographics.{feat}", "inconsistent site/pool sizes")
            prob(f"personas.demographics.{feat}.shared_fraction", d.shared_fraction)
        for key, table in self.persona_response.items():
            for owner, mult in table.items():
                nonneg(f"personas.response.{key}.{owner}", mult)
        for label in self.personas:
            try:
                feats = demographics_for(label)
            except ValueError:
                raise ConfigError("personas.crawl", f"unknown persona {label!r}") from None
            missing = feats - set(self.demographics)
            if missing:
                raise ConfigError("personas.crawl", f"{label!r} needs demographic sites for {sorted(missing)}")
        for kind in ("baseline", "persona"):
            if int(self.runs.get(kind, 1)) < 1:
                raise ConfigError(f"runs.{kind}", "must be >= 1")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "EcosystemConfig":
        known = {"name", "seed", "sites", "cookies", "trackers", "ranks", "sync", "prices", "personas", "runs"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown config field")
        sites = doc.get("sites", {})
        cookies = doc.get("cookies", {})
        ranks = doc.get("ranks", {})
        sync = doc.get("sync", {})
        prices = doc.get("prices", {})
        personas = doc.get("personas", {})
        tdoc = doc.get("trackers", {})
        trackers = [
            TrackerSpec(
                domain=t["domain"], category=t.get("category", "other"),
                embed=dict(t.get("embed", {})), weight=float(t.get("weight", 1.0)),
                id_style=t.get("id_style", "alnum"), exact=bool(t.get("exact", False)),
            )
            for t in tdoc.get("listed", [])
        ]
        for category, spec in tdoc.get("synthetic", {}).items():
            if category not in SYNTHETIC_PREFIX:
                raise ConfigError(f"trackers.synthetic.{category}", "unknown category")
            for i in range(int(spec.get("count", 0))):
                styles = ("alnum", "b64", "composite")
                trackers.append(TrackerSpec(
                    domain=f"{SYNTHETIC_PREFIX[category]}{i + 1:03d}.com", category=category,
                    embed=dict(spec.get("embed", {})), weight=float(spec.get("weight", 1.0)),
                    id_style=styles[i % 3],
                ))
        try:
            return cls(
                name=str(doc.get("name", "custom")),
                seed=int(doc.get("seed", 0)),
                n_left=int(sites.get("left", 164)),
                n_right=int(sites.get("right", 392)),
                cookie_mean=float(cookies.get("mean", 60.0)),
                cookie_dispersion=float(cookies.get("dispersion", 0.5)),
                cookie_distribution=cookies.get("distribution", "negative-binomial"),
                lean_multiplier={k: float(v) for k, v in cookies.get("lean_multiplier", {}).items()},
                first_party_share=float(cookies.get("first_party_share", 0.25)),
                trackers=tuple(trackers),
                unranked_fraction=float(ranks.get("unranked_fraction", 0.0)),
                rank_buckets=tuple((int(a), int(b), float(m)) for a, b, m in ranks.get("buckets", [[1, 5_000_000, 1.0]])),
                unranked_multiplier=float(ranks.get("unranked_multiplier", 1.0)),
                sync_chains={k: float(v) for k, v in sync.get("chains_per_site", {}).items()},
                sync_encodings={k: float(v) for k, v in sync.get("encodings", {"plain": 1.0}).items()},
                sync_redirect_fraction=float(sync.get("redirect_fraction", 0.5)),
                price_family=prices.get("family", "none"),
                price_median={k: float(v) for k, v in prices.get("median", {}).items()},
                price_sigma={k: float(v) for k, v in prices.get("sigma", {}).items()},
                price_values={k: tuple(float(x) for x in v) for k, v in prices.get("values", {}).items()},
                wins_per_site={k: float(v) for k, v in prices.get("wins_per_site", {}).items()},
                opaque_fraction=float(prices.get("opaque_fraction", 0.0)),
                bidders=tuple(prices.get("bidders", ())),
                demographics={
                    feat: DemographicSites(**spec) for feat, spec in personas.get("demographics", {}).items()
                },
                persona_response={k: dict(v) for k, v in personas.get("response", {}).items()},
                personas=tuple(personas.get("crawl", ["baseline"])),
                runs={k: int(v) for k, v in doc.get("runs", {"baseline": 2, "persona": 5}).items()},
            )
        except (TypeError, KeyError) as exc:
            raise ConfigError("config", f"malformed section: {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "EcosystemConfig":
        return cls.from_dict(json.loads(Path(path).read_text("utf-8")))

    def runs_for(self, label: str) -> int:
        return int(self.runs.get("baseline" if label == "baseline" else "persona", 1))

    def multiplier(self, persona_label: str, owner: str) -> float:
        """Cookie multiplier a persona gets from an owner.

        A table keyed by the persona label wins; otherwise the tables of the
        persona's features multiply. ``"*"`` matches every owner.
        """
        def lookup(table):
            return float(table.get(owner, table.get("*", 1.0)))

        if persona_label == "baseline":
            return 1.0
        if persona_label in self.persona_response:
            return lookup(self.persona_response[persona_label])
        m = 1.0
        for feat in demographics_for(persona_label):
            for key in (feat, FEATURE_INITIAL[feat]):
                if key in self.persona_response:
                    m *= lookup(self.persona_response[key])
                    break
        return m


def fixture_path(name: str) -> Path:
    from importlib import resources

    return Path(str(resources.files("trackaudit.fixtures").joinpath(f"{name}.cfg")))


def load_config(name_or_path: str | Path) -> EcosystemConfig:
    """Load a config file, or a shipped fixture by name (``paper-shaped``...)."""
    if str(name_or_path) in FIXTURE_NAMES:
        return EcosystemConfig.load(fixture_path(str(name_or_path)))
    return EcosystemConfig.load(name_or_path)


# -- random streams --------------------------------------------------------


def stream(seed: int, *keys: Any) -> np.random.Generator:
    digest = hashlib.sha256("\x1f".join(map(str, keys)).encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 32, 4)]
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, *words]))


def _token(rng: np.random.Generator, n: int, alphabet: str = _ALNUM) -> str:
    idx = rng.integers(0, len(alphabet), size=n)
    return "".join(alphabet[i] for i in idx)


def _stochastic_round(rng: np.random.Generator, x: float) -> int:
    base = math.floor(x)
    return int(base + (rng.random() < x - base))


# -- the generated web -----------------------------------------------------


@dataclass(frozen=True)
class SiteSpec:
    domain: str
    lean: str
    rank: int | None
    trackers: tuple[str, ...]
    planted_cookies: Mapping[str, int]  # owner -> baseline cookies per visit
    sync_rate: float
    win_rate: float
    planted_prices: tuple[float, ...] = ()  # replay family: cleartext prices of every visit


@dataclass(frozen=True)
class SyntheticWeb:
    config: EcosystemConfig
    sites: tuple[SiteSpec, ...]
    tracker_index: Mapping[str, TrackerSpec]
    demographic_sites: Mapping[str, tuple[str, ...]]
    demographic_third_parties: Mapping[str, Mapping[str, tuple[str, ...]]]

    def sites_for(self, lean: str | None) -> list[SiteSpec]:
        return [s for s in self.sites if lean is None or s.lean == lean]


@dataclass(frozen=True)
class GroundTruthManifest:
    sites: dict[str, dict]
    tracker_coverage: dict[str, dict[str, int]]
    persona_expected_delta: dict[str, dict[str, float]]
    config_name: str
    seed: int
    demographic_third_parties: dict[str, dict[str, list[str]]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config_name,
            "seed": self.seed,
            "sites": self.sites,
            "tracker_coverage": self.tracker_coverage,
            "persona_expected_delta": self.persona_expected_delta,
            "demographic_third_parties": self.demographic_third_parties,
        }


def _assign_rank(cfg: EcosystemConfig, rng: np.random.Generator) -> tuple[int | None, float]:
    if rng.random() < cfg.unranked_fraction:
        return None, cfg.unranked_multiplier
    lo, hi, mult = cfg.rank_buckets[int(rng.integers(0, len(cfg.rank_buckets)))]
    rank = int(round(math.exp(rng.uniform(math.log(lo), math.log(hi + 1))))) if hi > lo else lo
    return min(max(rank, lo), hi), mult


def _site_name(lean: str, i: int) -> str:
    return f"{lean}news{i + 1:03d}.com"


def generate(config: EcosystemConfig) -> tuple[SyntheticWeb, GroundTruthManifest]:
    """Lay out sites, embedded trackers and per-owner baseline cookie counts.

    Per-site cookie volume is negative-binomial: gamma intensities drawn by
    stratified quantiles, scaled so each lean's expected mean equals
    ``cookie_mean * lean_multiplier``, then Poisson counts split across owners.
    """
    cfg = config
    seed = cfg.seed
    tracker_index = {t.domain: t for t in cfg.trackers}
    sites: list[SiteSpec] = []
    for lean, n in (("left", cfg.n_left), ("right", cfg.n_right)):
        if n == 0:
            continue
        names = [_site_name(lean, i) for i in range(n)]
        exact = {}
        for t in cfg.trackers:
            if t.exact:
                order = stream(seed, "exact-embed", t.domain, lean).permutation(n)
                exact[t.domain] = {names[i] for i in order[: int(round(t.embed.get(lean, 0.0) * n))]}
        layout = []
        for name in names:
            rng = stream(seed, "site", name)
            rank, rank_mult = _assign_rank(cfg, rng)
            embedded = tuple(
                t.domain for t in cfg.trackers
                if (rng.random() < t.embed.get(lean, 0.0) if not t.exact else name in exact[t.domain])
            )
            layout.append((name, rank, rank_mult, embedded))

        lean_rng = stream(seed, "lean-strata", lean)
        strata = (lean_rng.permutation(n) + lean_rng.random(n)) / n
        shape = cfg.cookie_dispersion
        quantiles = sps.gamma.ppf(np.clip(strata, 1e-12, 1 - 1e-12), a=shape, scale=1.0 / shape)
        raw = quantiles * np.array([m for _, _, m, _ in layout])
        fixed = np.array([1 + len(emb) for *_, emb in layout], dtype=float)
        target = cfg.cookie_mean * cfg.lean_multiplier.get(lean, 1.0) - fixed.mean()
        if target < 0:
            raise ConfigError("cookies.mean", f"too small for the {fixed.mean():.1f} trackers embedded per {lean} site")
        scale = target / raw.mean() if raw.mean() > 0 else 0.0
        intensity = raw * scale
        replay = cfg.price_values.get(lean, ()) if cfg.price_family == "replay" else ()

        for i, ((name, rank, _, embedded), lam) in enumerate(zip(layout, intensity)):
            rng = stream(seed, "site-cookies", name)
            if cfg.cookie_distribution == "fixed":
                extras = int(round(cfg.cookie_mean * cfg.lean_multiplier.get(lean, 1.0))) - 1 - len(embedded)
                if extras < 0:
                    raise ConfigError("cookies.mean", f"{name} embeds more trackers than its fixed cookie count")
            else:
                extras = int(rng.poisson(lam))
            owners = [name] + list(embedded)
            if embedded:
                tw = np.array([tracker_index[d].weight for d in embedded])
                weights = np.concatenate([[cfg.first_party_share], (1 - cfg.first_party_share) * tw / tw.sum()])
            else:
                weights = np.array([1.0])
            split = rng.multinomial(extras, weights / weights.sum())
            planted = {o: 1 + int(k) for o, k in zip(owners, split)}
            sites.append(SiteSpec(
                domain=name, lean=lean, rank=rank, trackers=embedded, planted_cookies=planted,
                sync_rate=cfg.sync_chains.get(lean, 0.0) if embedded else 0.0,
                win_rate=cfg.wins_per_site.get(lean, 0.0),
                planted_prices=tuple(replay[i::n]),
            ))

    demo_sites, demo_tps = _demographic_layout(cfg)
    web = SyntheticWeb(cfg, tuple(sites), tracker_index, demo_sites, demo_tps)
    return web, _manifest(web)


def _demographic_layout(cfg: EcosystemConfig):
    sites: dict[str, tuple[str, ...]] = {}
    tps: dict[str, dict[str, tuple[str, ...]]] = {}
    hpw_pool = sorted(t.domain for t in cfg.trackers)
    for feat, d in sorted(cfg.demographics.items()):
        rng = stream(cfg.seed, "demographic", feat)
        n_shared = min(int(round(d.shared_fraction * d.pool_size)), len(hpw_pool))
        shared = list(rng.choice(hpw_pool, size=n_shared, replace=False)) if n_shared else []
        own = [f"{feat}trk{i + 1:03d}.net" for i in range(d.pool_size - n_shared)]
        pool = sorted(shared + own)
        names = tuple(f"{feat}portal{i + 1:02d}.com" for i in range(d.n_sites))
        sites[feat] = names
        tps[feat] = {
            name: tuple(sorted(rng.choice(pool, size=d.third_parties_per_site, replace=False)))
            for name in names
        }
    return sites, tps


def _manifest(web: SyntheticWeb) -> GroundTruthManifest:
    cfg = web.config
    site_doc = {}
    coverage: dict[str, dict[str, int]] = {t.domain: {"left": 0, "right": 0} for t in cfg.trackers}
    for s in web.sites:
        site_doc[s.domain] = {
            "lean": s.lean, "rank": s.rank, "trackers": list(s.trackers),
            "planted_cookies": dict(s.planted_cookies),
            "cookie_total": sum(s.planted_cookies.values()),
            "sync_rate": s.sync_rate, "win_rate": s.win_rate,
            "planted_prices": list(s.planted_prices),
        }
        for t in s.trackers:
            coverage[t][s.lean] += 1
    deltas: dict[str, dict[str, float]] = {}
    for label in cfg.personas:
        if label == "baseline":
            continue
        deltas[label] = {}
        for lean in LEANS:
            base = exp = 0.0
            for s in web.sites_for(lean):
                for owner, c in s.planted_cookies.items():
                    base += c
                    exp += c * cfg.multiplier(label, owner)
            if base > 0:
                deltas[label][lean] = 100.0 * (exp - base) / base
    demo = {feat: {site: list(tps) for site, tps in by_site.items()}
            for feat, by_site in web.demographic_third_parties.items()}
    return GroundTruthManifest(site_doc, coverage, deltas, cfg.name, cfg.seed, demo)


# -- personas from simulated demographic browsing ----------------------------


def simulate_building_crawl(web: SyntheticWeb, feature: str, site: str) -> CrawlLog:
    """Log of one stateful persona-building visit to a demographic site."""
    rng = stream(web.config.seed, "building", feature, site)
    vid = f"build-{feature}-{site}"
    t0 = EPOCH_MS - 86_400_000 + web.demographic_sites[feature].index(site) * VISIT_SPACING_MS
    page = f"https://www.{site}/"
    events = [HttpEvent("request", page, vid, site, t0)]
    cookies = [CookieRecord(site, "session", _token(rng, 22), "header", vid, site, t0 + 1)]
    t = t0 + 2
    for tp in web.demographic_third_parties[feature][site]:
        url = f"https://pixel.{tp}/px?cb={int(rng.integers(10**8, 10**9))}"
        events.append(HttpEvent("request", url, vid, site, t, referrer=page))
        cookies.append(CookieRecord(tp, "uid", _token(rng, 20), "script", vid, site, t + 1))
        t += 2
    return CrawlLog(
        persona_label=f"build:{FEATURE_INITIAL[feature]}", lean="none", run_index=1,
        visits=(Visit(vid, site),), events=tuple(events), cookies=tuple(cookies),
    )


def build_personas(web: SyntheticWeb, labels: Sequence[str] | None = None) -> dict[str, Persona]:
    """Build every persona the config crawls with (or ``labels``)."""
    cfg = web.config
    labels = list(labels if labels is not None else cfg.personas)
    singles: dict[str, Persona] = {}
    for feat in sorted(cfg.demographics):
        spec = DemographicSpec(feat, web.demographic_sites[feat])
        crawls = {s: simulate_building_crawl(web, feat, s) for s in spec.site_list}
        order_seed = int(stream(cfg.seed, "visit-order", feat).integers(0, 2**31))
        singles[feat] = build_persona(spec, crawls, seed=order_seed)
    out: dict[str, Persona] = {}
    for label in labels:
        if label == "baseline":
            out[label] = baseline_persona()
            continue
        feats = sorted(demographics_for(label), key=lambda f: FEATURE_AXIS[f] != "age")
        if len(feats) == 1:
            out[label] = singles[feats[0]]
        else:
            merge_seed = int(stream(cfg.seed, "merge", label).integers(0, 2**31))
            out[label] = merge_compound(singles[feats[0]], singles[feats[1]], merge_seed)
    return out


# -- HPW crawling ----------------------------------------------------------


@dataclass
class CrawlTruth:
    persona_label: str
    run_index: int
    lean: str | None
    cookies_per_site: dict[str, int] = field(default_factory=dict)
    syncs: list[dict] = field(default_factory=list)
    prices: list[dict] = field(default_factory=list)
    opaque: int = 0

    def to_dict(self) -> dict:
        return {
            "persona_label": self.persona_label, "run_index": self.run_index, "lean": self.lean,
            "cookies_per_site": self.cookies_per_site, "syncs": self.syncs,
            "prices": self.prices, "opaque": self.opaque,
        }


def _tracker_id(rng: np.random.Generator, style: str) -> tuple[str, str]:
    """(cookie value, embedded ID) for a tracker's user-ID cookie."""
    if style == "b64":
        ident = _token(rng, 22, _B64ISH)
        return ident, ident
    if style == "composite":
        ident = _token(rng, 18)
        return f"id={ident}|t={int(rng.integers(1_500_000_000, 1_600_000_000))}", ident
    ident = _token(rng, 20)
    return ident, ident


def _encode(ident: str, encoding: str) -> str:
    data = ident.encode("utf-8")
    if encoding == "url-encoded":
        return quote(ident, safe="")
    if encoding == "base64":
        return base64.b64encode(data).decode().rstrip("=")
    if encoding == "md5-hex":
        return hashlib.md5(data).hexdigest()
    if encoding == "sha1-hex":
        return hashlib.sha1(data).hexdigest()
    return ident


def _filler_value(rng: np.random.Generator, i: int) -> str:
    kind = i % 5
    if kind == 0:
        return str(int(rng.integers(0, 2)))
    if kind == 1:
        return str(EPOCH_MS + int(rng.integers(0, 10**7)))
    if kind == 2:
        return ("en-US", "true", "false", "1")[int(rng.integers(0, 4))]
    return _token(rng, int(rng.integers(3, 9)))


def _visit(
    web: SyntheticWeb, site: SiteSpec, persona: Persona, run_index: int, t0: int,
    state: Mapping[tuple[str, str], str], truth: CrawlTruth,
) -> tuple[list[HttpEvent], list[CookieRecord], Visit]:
    cfg = web.config
    rng = stream(cfg.seed, "visit", site.domain, persona.label, run_index)
    vid = f"{persona.label}-r{run_index}-{site.domain}"
    page = f"https://www.{site.domain}/"
    events: list[HttpEvent] = [HttpEvent("request", page, vid, site.domain, t0)]
    cookies: list[CookieRecord] = []
    ids: dict[str, str] = {}
    t = t0 + 1
    for owner, base in site.planted_cookies.items():
        n = base if persona.is_baseline else _stochastic_round(rng, base * cfg.multiplier(persona.label, owner))
        if n == 0:
            continue
        first_party = owner == site.domain
        if not first_party:
            url = f"https://tag.{owner}/t.js?v={int(rng.integers(1, 99))}&cb={int(rng.integers(10**8, 10**9))}"
            events.append(HttpEvent("request", url, vid, site.domain, t, referrer=page))
            events.append(HttpEvent("response", url, vid, site.domain, t + 1, referrer=page,
                                    headers=(("Content-Type", "application/javascript"),)))
            t += 2
            style = web.tracker_index[owner].id_style if owner in web.tracker_index else "alnum"
            value, ident = _tracker_id(rng, style)
            if (owner, "uid") in state:
                value = state[(owner, "uid")]
                ident = value.split("|")[0].removeprefix("id=")
            ids[owner] = ident
            cookies.append(CookieRecord(owner, "uid", value, "script", vid, site.domain, t))
        else:
            cookies.append(CookieRecord(owner, "session", _token(rng, 24), "header", vid, site.domain, t))
        for i in range(1, n):
            source = "header" if i % 2 else "script"
            cookies.append(CookieRecord(owner, f"c{i}", _filler_value(rng, i), source, vid, site.domain, t))
        t += 1
    truth.cookies_per_site[site.domain] = truth.cookies_per_site.get(site.domain, 0) + len(cookies)

    # cookie-sync chains from trackers that set an ID this visit
    senders = [d for d in site.trackers if d in ids]
    n_chains = _stochastic_round(rng, site.sync_rate) if senders else 0
    encodings = sorted(cfg.sync_encodings)
    enc_w = np.array([cfg.sync_encodings[e] for e in encodings])
    pool = sorted(web.tracker_index)
    for _ in range(n_chains):
        d1 = senders[int(rng.integers(0, len(senders)))]
        partners = [d for d in pool if d != d1]
        if not partners:
            break
        d2 = partners[int(rng.integers(0, len(partners)))]
        enc = encodings[int(rng.choice(len(encodings), p=enc_w / enc_w.sum()))]
        carried = _encode(ids[d1], enc)
        if carried == ids[d1]:
            enc = "plain"
        target = f"https://match.{d2}/setuid?partner={d1.split('.')[0]}&puid={carried}&n={int(rng.integers(1, 10**6))}"
        if rng.random() < cfg.sync_redirect_fraction:
            start = f"https://sync.{d1}/redir?dest={d2.split('.')[0]}&n={int(rng.integers(1, 10**6))}"
            events.append(HttpEvent("request", start, vid, site.domain, t, referrer=page))
            events.append(HttpEvent("redirect", start, vid, site.domain, t + 1, referrer=page, location=target))
            events.append(HttpEvent("request", target, vid, site.domain, t + 2, referrer=page))
            form = "redirect"
            t += 3
        else:
            events.append(HttpEvent("request", target, vid, site.domain, t, referrer=page))
            form = "request"
            t += 1
        truth.syncs.append({
            "visit_id": vid, "site": site.domain, "sender": d1, "receiver": d2,
            "id": ids[d1], "encoding": enc, "carrier_url": target, "form": form,
        })

    # RTB win notifications; replayed prices are emitted verbatim on every visit
    if cfg.price_family == "replay":
        f = cfg.opaque_fraction
        n_opaque = _stochastic_round(rng, len(site.planted_prices) * f / (1 - f)) if f < 1 else 0
        plan = [(False, p) for p in site.planted_prices] + [(True, None)] * n_opaque
    elif cfg.price_family == "lognormal":
        plan = [(rng.random() < cfg.opaque_fraction, None)
                for _ in range(_stochastic_round(rng, site.win_rate))]
    else:
        plan = []
    for opaque, replayed in plan:
        bidder = cfg.bidders[int(rng.integers(0, len(cfg.bidders)))]
        auction = _token(rng, 8)
        if opaque:
            url = f"https://win.{bidder}/imp?auc={auction}&wp={_token(rng, 24, string.ascii_letters)}"
            truth.opaque += 1
        else:
            value = replayed if replayed is not None else _draw_price(cfg, site.lean, rng)
            text = f"{value:.4f}"
            price = float(text)
            url = f"https://win.{bidder}/imp?auc={auction}&price={text}&sz=300x250"
            truth.prices.append({
                "visit_id": vid, "site": site.domain, "bidder": bidder, "cpm": price, "url": url,
            })
        events.append(HttpEvent("request", url, vid, site.domain, t, referrer=page))
        t += 1
    return events, cookies, Visit(vid, site.domain, site.lean, site.rank)


def _draw_price(cfg: EcosystemConfig, lean: str, rng: np.random.Generator) -> float:
    median = cfg.price_median[lean]
    sigma = cfg.price_sigma.get(lean, 0.0)
    return median * math.exp(sigma * rng.standard_normal())


def simulate_crawl(
    web: SyntheticWeb, persona: Persona, run_index: int = 1, lean: str | None = None
) -> CrawlLog:
    return simulate_crawl_with_truth(web, persona, run_index, lean)[0]


def simulate_crawl_with_truth(
    web: SyntheticWeb, persona: Persona, run_index: int = 1, lean: str | None = None
) -> tuple[CrawlLog, CrawlTruth]:
    """Stateless crawl of the HPWs of one lean (or all) with a loaded persona.

    Each visit starts from the persona's archived cookie state; nothing
    carries over between sites.
    """
    state = persona.browser_state()
    truth = CrawlTruth(persona.label, run_index, lean)
    events: list[HttpEvent] = []
    cookies: list[CookieRecord] = []
    visits: list[Visit] = []
    for pos, site in enumerate(web.sites_for(lean)):
        t0 = EPOCH_MS + (run_index - 1) * 10**10 + pos * VISIT_SPACING_MS
        ev, ck, visit = _visit(web, site, persona, run_index, t0, state, truth)
        events.extend(ev)
        cookies.extend(ck)
        visits.append(visit)
    log = CrawlLog(
        persona_label=persona.label, lean=lean or "none", run_index=run_index,
        visits=tuple(visits), events=tuple(events), cookies=tuple(cookies),
    )
    return log, truth


def crawl_name(label: str, lean: str | None, run_index: int) -> str:
    return f"{label}_{lean or 'all'}_run{run_index}"


def check_truth(web: SyntheticWeb, log: CrawlLog, truth: CrawlTruth) -> list[str]:
    """Independent substring scan confirming a crawl's truth record; returns problems."""
    problems = []
    counts: dict[str, int] = defaultdict(int)
    for c in log.cookies:
        counts[c.site] += 1
    if dict(counts) != {s: n for s, n in truth.cookies_per_site.items() if n}:
        problems.append("cookie counts differ from truth")
    if truth.persona_label == "baseline":
        for s in web.sites_for(truth.lean):
            if counts.get(s.domain, 0) != sum(s.planted_cookies.values()):
                problems.append(f"{s.domain}: baseline cookies differ from planted counts")
    urls: dict[str, list[str]] = defaultdict(list)
    for ev in log.events:
        if ev.kind == "request":
            urls[ev.visit_id].append(ev.url)
    values: dict[str, list[str]] = defaultdict(list)
    for c in log.cookies:
        values[(c.visit_id, c.owner)].append(c.value)
    for s in truth.syncs:
        carried = _encode(s["id"], s["encoding"])
        if s["carrier_url"] not in urls[s["visit_id"]] or carried not in s["carrier_url"]:
            problems.append(f"sync {s['sender']}->{s['receiver']} in {s['visit_id']} not in log")
        if not any(s["id"] in v for v in values[(s["visit_id"], s["sender"])]):
            problems.append(f"sync ID of {s['sender']} not set in {s['visit_id']}")
    for p in truth.prices:
        if p["url"] not in urls[p["visit_id"]] or f"price={p['cpm']:.4f}" not in p["url"]:
            problems.append(f"price {p['cpm']} in {p['visit_id']} not in log")
    opaque = sum(1 for us in urls.values() for u in us if "&wp=" in u)
    if opaque != truth.opaque:
        problems.append(f"opaque wins: log has {opaque}, truth says {truth.opaque}")
    return problems
