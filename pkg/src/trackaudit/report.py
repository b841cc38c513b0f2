"""End-to-end audit pipeline writing a deterministic report bundle."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import traceback
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .classify import CATEGORIES, BlockList, TrackerList, label_cookie, match_rate, overlap, prevalence
from .crawllog import CrawlLog, CrawlSet, lean_tag, serialize, write_crawl_log
from .csync import SyncEvent, SyncParams, detect_syncs, sync_rate
from .nmf import NmfError, build_profile_matrix, select_k
from .persona import Persona, dumps_archive, load_archives, save_archive
from .psl import psl_version
from .rtbprice import PriceEvent, PricePatternSet, WinTally, detect_wins, price_summary
from .stats import DEFAULT_RANK_EDGES, EmpiricalDistribution, pairwise_ks_matrix, percent_delta, rank_buckets

log = logging.getLogger(__name__)

MODES = ("simulate", "ingest")
SINGLE_FEATURE = ("Y", "S", "W", "M")


class AuditError(RuntimeError):
    pass


class AuditFailed(AuditError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def fixture_file(name: str) -> Path:
    return Path(str(resources.files("trackaudit.fixtures").joinpath(name)))


@dataclass(frozen=True)
class AuditConfig:
    mode: str
    out: Path
    crawls: Path | None = None
    sim_config: str | Path | None = None
    personas: Path | None = None
    blocklist: Path | None = None
    trackers: Path | None = None
    patterns: Path | None = None
    seed: int | None = None
    nmf_k: tuple[int, int] = (2, 10)
    nmf_runs: int = 50
    min_id_len: int = 10
    distinct: bool = False
    alpha: float = 0.01
    rank_edges: tuple[int, ...] = DEFAULT_RANK_EDGES
    baseline_runs: int | None = None
    persona_runs: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise AuditError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "simulate" and (self.sim_config is None or self.crawls is not None):
            raise AuditError("simulate mode takes a simulator config and no crawl directory")
        if self.mode == "ingest" and (self.crawls is None or self.sim_config is not None):
            raise AuditError("ingest mode takes a crawl directory and no simulator config")
        if self.nmf_runs < 2:
            raise AuditError("nmf_runs must be at least 2")
        object.__setattr__(self, "out", Path(self.out))

    def analysis_params(self) -> dict:
        """Parameters that shape the results; paths and input mode excluded."""
        return {
            "nmf_k": list(self.nmf_k), "nmf_runs": self.nmf_runs, "min_id_len": self.min_id_len,
            "distinct": self.distinct, "alpha": self.alpha, "rank_edges": list(self.rank_edges),
        }


@dataclass
class ReportBundle:
    root: Path
    summary: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    files: list[str] = field(default_factory=list)

    def path(self, *parts: str) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        rel = p.relative_to(self.root).as_posix()
        if rel not in self.files:
            self.files.append(rel)
        return p


# -- small writers ----------------------------------------------------------


def _fmt(v: Any) -> Any:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else v


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def write_json(path: Path, obj: Any) -> None:
    text = json.dumps(_jsonable(obj), sort_keys=True, indent=1, ensure_ascii=False)
    path.write_text(text + "\n", encoding="utf-8")


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- provenance -------------------------------------------------------------


def data_hash(crawls: Iterable[CrawlLog]) -> str:
    h = hashlib.sha256()
    for lg in crawls:
        h.update(serialize(lg))
    return h.hexdigest()


def version_and_provenance(
    cfg: AuditConfig | None = None,
    *,
    seed: int | None = None,
    sim_config: Mapping | None = None,
    inputs: Mapping[str, str] | None = None,
    data: str | None = None,
) -> dict:
    """Tool version, seed, config and input fingerprints, plus a hash over all of it."""
    params = cfg.analysis_params() if cfg else {}
    if sim_config is not None:
        params["simulation"] = sim_config
    config_hash = hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()
    record = {
        "tool": "trackaudit",
        "version": __version__,
        "seed": seed if seed is not None else (cfg.seed if cfg else None),
        "config_hash": config_hash,
        "public_suffix_list": psl_version(),
        "inputs": dict(sorted((inputs or {}).items())),
        "data_hash": data,
    }
    record["provenance_hash"] = hashlib.sha256(json.dumps(record, sort_keys=True).encode()).hexdigest()
    return record


# -- per-module report writers ---------------------------------------------


def _visit_lean(lg: CrawlLog, v) -> str:
    return v.lean if v.lean != "none" else lg.lean


def site_cookie_values(crawls: CrawlSet, *, distinct: bool = False) -> dict[str, dict[str, float]]:
    """Group ``"L:Y"``-style label -> site -> mean cookies per visit over runs."""
    totals: dict[str, dict[str, float]] = defaultdict(lambda: defaultdict(float))
    counts: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    for lg in crawls:
        by_visit = lg.cookies_by_visit()
        for v in lg.visits:
            cookies = by_visit.get(v.visit_id, [])
            n = len({(c.owner, c.name) for c in cookies}) if distinct else len(cookies)
            g = f"{lean_tag(_visit_lean(lg, v))}:{lg.persona_label}"
            totals[g][v.site] += n
            counts[g][v.site] += 1
    return {
        g: {s: totals[g][s] / counts[g][s] for s in sorted(totals[g])}
        for g in sorted(totals)
    }


def classify_report(bundle: ReportBundle, crawls: CrawlSet, bl: BlockList, tl: TrackerList,
                    personas: Mapping[str, Persona]) -> dict:
    rows = []
    cat_sum: dict[tuple[str, str], Counter] = defaultdict(Counter)
    cat_n: dict[tuple[str, str], int] = defaultdict(int)
    tp_per_site: dict[str, list[int]] = defaultdict(list)
    any_baseline = any(lg.is_baseline for lg in crawls)
    for lg in crawls:
        by_visit = lg.cookies_by_visit()
        for v in lg.visits:
            cookies = by_visit.get(v.visit_id, [])
            counts = Counter(label_cookie(c, bl) for c in cookies)
            lean = _visit_lean(lg, v)
            rows.append([lg.persona_label, lean, lg.run_index, v.site, v.rank, len(cookies)]
                        + [counts.get(c, 0) for c in CATEGORIES])
            cat_sum[(lg.persona_label, lean)].update(counts)
            cat_n[(lg.persona_label, lean)] += 1
            if lg.is_baseline or not any_baseline:
                tp_per_site[lean].append(len({c.owner for c in cookies if c.owner != v.site}))
    write_csv(bundle.path("classify", "site_cookies.csv"),
              ["persona", "lean", "run", "site", "rank", "total", *CATEGORIES], rows)
    write_csv(bundle.path("classify", "category_means.csv"),
              ["persona", "lean", "category", "mean_per_visit"],
              [[p, lean, c, cat_sum[(p, lean)].get(c, 0) / cat_n[(p, lean)]]
               for (p, lean) in sorted(cat_sum) for c in CATEGORIES])

    leans = tuple(sorted({lean for _, lean in cat_n} & {"left", "right"}))
    out: dict = {"third_parties_per_site": {k: float(np.mean(v)) for k, v in sorted(tp_per_site.items())}}
    if leans:
        prev = prevalence(crawls, tl, leans=leans)
        write_csv(bundle.path("classify", "prevalence.csv"),
                  ["rank", "domain", "web_prevalence", *[f"{lean}_fraction" for lean in leans],
                   *[f"{lean}_ratio" for lean in leans]],
                  [[e.rank, e.domain, e.web_prevalence,
                    *[prev.fractions[e.domain][lean] for lean in leans],
                    *[prev.ratios[e.domain][lean] for lean in leans]] for e in tl.entries])
        out["prevalence_sites"] = prev.n_sites
    mr = match_rate(crawls, tl)
    write_json(bundle.path("classify", "match_rate.json"), mr)
    out["match_rate"] = mr
    hpw = {c.owner for lg in crawls for c in lg.cookies if c.owner != c.site}
    ov_rows = []
    for label, p in sorted(personas.items()):
        owners = p.third_party_owners()
        if owners:
            ov_rows.append([label, len(owners), len(hpw), overlap(owners, hpw)])
    write_csv(bundle.path("classify", "overlap.csv"),
              ["persona", "persona_third_parties", "hpw_third_parties", "overlap"], ov_rows)
    return out


def _sync_dict(e: SyncEvent, lg: CrawlLog) -> dict:
    return {
        "persona": lg.persona_label, "lean": lg.lean, "run": lg.run_index,
        "site": e.site, "visit_id": e.visit_id, "timestamp": e.timestamp,
        "sender": e.sender, "receiver": e.receiver, "carrier_url": e.carrier_url,
        "match_location": e.match_location, "id": e.id.raw, "encoding": e.id.encoding,
        "matched_value": e.id.value, "source_owner": e.id.source_cookie[0],
        "source_name": e.id.source_cookie[1],
    }


def write_csync(events_file: Path, crawls: CrawlSet, personas: Mapping[str, Persona],
                params: SyncParams) -> dict:
    """Sync events as JSONL at ``events_file``; sync_rate.csv and sync_summary.csv beside it."""
    all_events: list[SyncEvent] = []
    lines = []
    for lg in crawls:
        jar = personas[lg.persona_label].jar if lg.persona_label in personas else ()
        events = detect_syncs(lg, jar, params)
        all_events.extend(events)
        lines.extend(json.dumps(_sync_dict(e, lg), sort_keys=True, separators=(",", ":")) for e in events)
    d = events_file.parent
    d.mkdir(parents=True, exist_ok=True)
    events_file.write_text("".join(x + "\n" for x in lines), encoding="utf-8")
    rate = sync_rate(all_events, crawls)
    cols = ["persona", "lean", "run", "site", "syncs", "third_party_requests", "syncs_per_request"]
    write_csv(d / "sync_rate.csv", cols, [[r[c] for c in cols] for r in rate.rows])
    write_csv(d / "sync_summary.csv",
              ["persona", "lean", "visits", "mean_syncs", "mean_syncs_per_request"],
              [[p, lean, s["visits"], s["mean_syncs"], s["mean_syncs_per_request"]]
               for (p, lean), s in rate.summary.items()])
    by_enc = Counter(e.id.encoding for e in all_events)
    return {"total": len(all_events), "lean_means": rate.lean_means, "by_encoding": dict(sorted(by_enc.items()))}


def csync_report(bundle: ReportBundle, crawls: CrawlSet, personas: Mapping[str, Persona],
                 params: SyncParams) -> dict:
    bundle.path("csync", "sync_rate.csv")
    bundle.path("csync", "sync_summary.csv")
    return write_csync(bundle.path("csync", "sync_events.jsonl"), crawls, personas, params)


def write_prices(events_file: Path, crawls: CrawlSet, patterns: PricePatternSet) -> dict:
    """Win events as CSV at ``events_file``; ecdf.csv and summary.json beside it."""
    tally = WinTally()
    events: list[tuple[PriceEvent, int]] = []
    for lg in crawls:
        events.extend((e, lg.run_index) for e in detect_wins(lg, patterns, tally))
    folder = events_file.parent
    folder.mkdir(parents=True, exist_ok=True)
    write_csv(events_file,
              ["persona", "lean", "run", "site", "visit_id", "bidder", "cpm", "raw_param"],
              [[e.persona_label, e.lean, run, e.site, e.visit_id, e.bidder, e.cpm, e.raw_param]
               for e, run in events])
    summary = price_summary(e for e, _ in events)
    ecdf_rows = []
    for scope in ("lean", "persona"):
        for group, d in summary[scope].items():
            ecdf_rows.extend([scope, group, x, f] for x, f in d["ecdf"])
    write_csv(folder / "ecdf.csv", ["scope", "group", "cpm", "cdf"], ecdf_rows)
    compact = {
        scope: {g: {k: v for k, v in d.items() if k != "ecdf"} for g, d in summary[scope].items()}
        for scope in ("lean", "persona")
    }
    for k in ("median_ratio", "top_quartile_ratio", "q3_ratio"):
        if k in summary:
            compact[k] = summary[k]
    compact["tally"] = {
        "matches": tally.matches, "cleartext": len(events), "opaque": tally.opaque,
        "over_cap": tally.over_cap, "macros": tally.macros, "duplicates": tally.duplicates,
        "opaque_by_lean": dict(sorted(tally.opaque_by_lean.items())),
    }
    write_json(folder / "summary.json", compact)
    return compact


def prices_report(bundle: ReportBundle, crawls: CrawlSet, patterns: PricePatternSet) -> dict:
    bundle.path("prices", "ecdf.csv")
    bundle.path("prices", "summary.json")
    return write_prices(bundle.path("prices", "win_events.csv"), crawls, patterns)


def stats_report(bundle: ReportBundle, crawls: CrawlSet, *, distinct: bool = False,
                 alpha: float = 0.01, rank_edges: Sequence[int] = DEFAULT_RANK_EDGES) -> dict:
    values = site_cookie_values(crawls, distinct=distinct)
    ranks = crawls.site_ranks()
    leans = crawls.site_leans()
    write_csv(bundle.path("stats", "per_site.csv"), ["group", "site", "lean", "rank", "mean_cookies"],
              [[g, s, leans.get(s, "none"), ranks.get(s), v] for g, sv in values.items() for s, v in sv.items()])
    plot: dict = {"cdf": {}, "percent_delta": [], "rank_buckets": {}}
    cdf_rows = []
    for g, sv in values.items():
        steps = EmpiricalDistribution(list(sv.values())).steps()
        plot["cdf"][g] = steps
        cdf_rows.extend([g, x, f] for x, f in steps)
    write_csv(bundle.path("stats", "cdf.csv"), ["group", "cookies", "cdf"], cdf_rows)

    ks_rows = []
    if len(values) >= 2:
        km = pairwise_ks_matrix({g: list(sv.values()) for g, sv in values.items()}, alpha)
        for i, a in enumerate(km.labels):
            for j, b in enumerate(km.labels):
                ks_rows.append([a, b, km.statistic[i, j], km.p_value[i, j], bool(km.significant[i, j])])
    write_csv(bundle.path("stats", "ks_matrix.csv"),
              ["group_a", "group_b", "statistic", "p_value", "significant"], ks_rows)

    delta_rows = []
    for g, sv in values.items():
        tag, _, persona = g.partition(":")
        base = values.get(f"{tag}:baseline")
        if persona == "baseline" or base is None:
            continue
        common = sorted(set(sv) & set(base))
        if not common:
            continue
        pm = float(np.mean([sv[s] for s in common]))
        bm = float(np.mean([base[s] for s in common]))
        if bm <= 0:
            continue
        lean = {"L": "left", "R": "right"}.get(tag, "none")
        d = percent_delta(pm, bm)
        delta_rows.append([persona, lean, len(common), pm, bm, d])
        plot["percent_delta"].append({"persona": persona, "lean": lean, "percent_delta": d})
    write_csv(bundle.path("stats", "percent_delta.csv"),
              ["persona", "lean", "sites", "persona_mean", "baseline_mean", "percent_delta"], delta_rows)

    bucket_rows = []
    by_persona: dict[str, dict[str, float]] = defaultdict(dict)
    for g, sv in values.items():
        by_persona[g.partition(":")[2]].update(sv)
    buckets_out = {}
    for persona, sv in sorted(by_persona.items()):
        rb = rank_buckets(sv, ranks, leans, rank_edges)
        buckets_out[persona] = rb
        for b, per_lean in rb.items():
            for lean, s in per_lean.items():
                bucket_rows.append([persona, b, lean, s["n"], s["mean"], s["q1"], s["median"], s["q3"]])
    plot["rank_buckets"] = buckets_out
    write_csv(bundle.path("stats", "rank_buckets.csv"),
              ["persona", "bucket", "lean", "sites", "mean", "q1", "median", "q3"], bucket_rows)
    write_json(bundle.path("stats", "plot_data.json"), plot)
    return {"groups": values, "percent_delta": delta_rows, "rank_buckets": buckets_out}


def nmf_report(bundle: ReportBundle, crawls: CrawlSet, bl: BlockList, *, k_range=(2, 10),
               runs: int = 50, seed: int = 0) -> dict:
    out = {}
    for cat in CATEGORIES:
        d = ("nmf", cat)
        try:
            pm = build_profile_matrix(crawls, cat, bl)
        except NmfError as exc:
            write_json(bundle.path(*d, "skipped.json"), {"reason": str(exc)})
            continue
        nz = pm.nonzero()
        write_csv(bundle.path(*d, "matrix.csv"), ["row", *pm.col_labels],
                  [[r, *row] for r, row in zip(pm.row_labels, pm.A.tolist())])
        lo, hi = max(2, k_range[0]), min(k_range[1], *nz.A.shape)
        info = {"zero_rows": list(pm.zero_rows), "rows": len(nz.row_labels), "columns": len(nz.col_labels)}
        if lo > hi or len(nz.row_labels) < 3:
            info["skipped"] = f"matrix {nz.A.shape} too small for k in [{lo}, {hi}]"
            write_json(bundle.path(*d, "skipped.json"), info)
            out[cat] = info
            continue
        sel = select_k(nz, (lo, hi), runs=runs, seed=seed)
        best = sel.results[sel.best_k]
        write_csv(bundle.path(*d, "select_k.csv"), ["k", "cophenetic", "residual"],
                  [[k, c, r] for k, (c, r) in sorted(sel.scores.items())])
        write_csv(bundle.path(*d, "B.csv"), ["row", *[f"k{j + 1}" for j in range(sel.best_k)]],
                  [[r, *row] for r, row in zip(nz.row_labels, best.best.B.tolist())])
        write_csv(bundle.path(*d, "C.csv"), ["component", *nz.col_labels],
                  [[f"k{j + 1}", *row] for j, row in enumerate(best.best.C.tolist())])
        write_csv(bundle.path(*d, "consensus.csv"), ["row", *nz.row_labels],
                  [[r, *row] for r, row in zip(nz.row_labels, best.consensus.tolist())])
        write_csv(bundle.path(*d, "clusters.csv"), ["row", "cluster"],
                  sorted(best.cluster_assignment.items(), key=lambda kv: nz.row_labels.index(kv[0])))
        info.update(best_k=sel.best_k, cophenetic=best.cophenetic, residual=best.residual,
                    clusters=best.cluster_assignment, lean_purity=lean_purity(best.cluster_assignment))
        write_json(bundle.path(*d, "result.json"), info)
        out[cat] = info
    return out


def lean_purity(assignment: Mapping[str, int]) -> float:
    """Share of rows whose cluster's majority lean tag is their own."""
    members: dict[int, Counter] = defaultdict(Counter)
    for row, cl in assignment.items():
        members[cl][row.partition(":")[0]] += 1
    hit = sum(c.most_common(1)[0][1] for c in members.values())
    return hit / len(assignment) if assignment else 0.0


# -- summary ----------------------------------------------------------------


def _ratio(a: float | None, b: float | None) -> float | None:
    if a is None or b is None or b == 0:
        return None
    return a / b


def summarize_findings(classify: dict, csync: dict, prices: dict, stats: dict, nmf: dict) -> list[dict]:
    groups = stats["groups"]
    has_base = any(g.endswith(":baseline") for g in groups)

    def lean_mean(tag: str) -> float | None:
        vals: dict[str, list[float]] = defaultdict(list)
        for g, sv in groups.items():
            t, _, persona = g.partition(":")
            if t == tag and (persona == "baseline" or not has_base):
                for s, v in sv.items():
                    vals[s].append(v)
        return float(np.mean([np.mean(v) for v in vals.values()])) if vals else None

    left, right = lean_mean("L"), lean_mean("R")
    tps = classify.get("third_parties_per_site", {})
    deltas = stats["percent_delta"]
    best = max(deltas, key=lambda r: r[5]) if deltas else None
    single = {lean: [r[5] for r in deltas if r[0] in SINGLE_FEATURE and r[1] == lean] for lean in ("left", "right")}

    base_buckets = stats["rank_buckets"].get("baseline") or next(iter(stats["rank_buckets"].values()), {})
    medians = {b: float(np.median([s["median"] for s in per.values()])) for b, per in base_buckets.items()}
    ranked = [b for b in medians if b != "unranked"]
    nmf_cat = "advertising" if "best_k" in nmf.get("advertising", {}) else next(
        (c for c, i in nmf.items() if "best_k" in i), None)
    sl = csync["lean_means"]
    return [
        {"id": 1, "finding": "right vs left cookies per site",
         "metric": "right_left_cookie_ratio", "value": _ratio(right, left),
         "detail": {"left_mean": left, "right_mean": right,
                    "third_party_ratio": _ratio(tps.get("right"), tps.get("left"))}},
        {"id": 2, "finding": "persona cookies vs baseline",
         "metric": "max_percent_delta", "value": best[5] if best else None,
         "detail": {"persona": best[0], "lean": best[1]} if best else {}},
        {"id": 3, "finding": "cookies by site rank",
         "metric": "top_vs_bottom_bucket_median_ratio",
         "value": _ratio(medians[ranked[0]], medians[ranked[-1]]) if len(ranked) >= 2 else None,
         "detail": {"bucket_medians": medians}},
        {"id": 4, "finding": "single-feature personas vs baseline",
         "metric": "mean_single_feature_delta",
         "value": float(np.mean(single["left"] + single["right"])) if single["left"] + single["right"] else None,
         "detail": {lean: (float(np.mean(v)) if v else None) for lean, v in single.items()}},
        {"id": 5, "finding": "persona clusters by cookie domains",
         "metric": "selected_k", "value": nmf[nmf_cat]["best_k"] if nmf_cat else None,
         "detail": ({"category": nmf_cat, "cophenetic": nmf[nmf_cat]["cophenetic"],
                     "lean_purity": nmf[nmf_cat]["lean_purity"]} if nmf_cat else {})},
        {"id": 6, "finding": "cookie synchronizations right vs left",
         "metric": "right_left_sync_ratio", "value": _ratio(sl.get("right"), sl.get("left")),
         "detail": {"total_syncs": csync["total"], "lean_means": sl}},
        {"id": 7, "finding": "ad prices right vs left",
         "metric": "right_left_median_price_ratio", "value": prices.get("median_ratio"),
         "detail": {"top_quartile_ratio": prices.get("top_quartile_ratio"),
                    "cleartext_prices": prices["tally"]["cleartext"],
                    "opaque_prices": prices["tally"]["opaque"]}},
    ]


def write_summary(bundle: ReportBundle, findings: list[dict]) -> None:
    write_json(bundle.path("summary.json"), {"findings": findings})
    write_csv(bundle.path("summary.csv"), ["id", "finding", "metric", "value"],
              [[f["id"], f["finding"], f["metric"], f["value"]] for f in findings])
    lines = []
    for f in findings:
        v = f["value"]
        shown = "n/a" if v is None else (f"{v:.4g}" if isinstance(v, float) else str(v))
        lines.append(f"{f['id']}. {f['finding']}: {f['metric']} = {shown}")
    bundle.path("summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- simulation stage ---------------------------------------------------------


def simulate_to_dir(sim_cfg, out: Path, *, personas_dir: Path | None = None,
                    baseline_runs: int | None = None, persona_runs: int | None = None) -> dict:
    """Generate a synthetic web and write crawl logs, archives and ground truth under ``out``."""
    from . import simweb

    web, manifest = simweb.generate(sim_cfg)
    existing = load_archives(personas_dir) if personas_dir and Path(personas_dir).is_dir() else {}
    needed = [p for p in sim_cfg.personas if p not in existing]
    personas = {**existing, **simweb.build_personas(web, needed)} if needed else dict(existing)
    pdir = Path(personas_dir) if personas_dir else out / "personas"
    pdir.mkdir(parents=True, exist_ok=True)
    for label in sim_cfg.personas:
        if label not in existing:
            save_archive(personas[label], pdir / f"{label}.json")
    crawl_dir = out / "crawls"
    truth_dir = out / "simulation" / "truth"
    crawl_dir.mkdir(parents=True, exist_ok=True)
    truth_dir.mkdir(parents=True, exist_ok=True)
    problems = {}
    for label in sim_cfg.personas:
        n = sim_cfg.runs_for(label)
        if label == "baseline" and baseline_runs:
            n = baseline_runs
        if label != "baseline" and persona_runs:
            n = persona_runs
        for run in range(1, n + 1):
            for lean in ("left", "right"):
                if not web.sites_for(lean):
                    continue
                lg, truth = simweb.simulate_crawl_with_truth(web, personas[label], run, lean)
                name = simweb.crawl_name(label, lean, run)
                write_crawl_log(lg, crawl_dir / f"{name}.jsonl")
                write_json(truth_dir / f"{name}.json", truth.to_dict())
                issues = simweb.check_truth(web, lg, truth)
                if issues:
                    problems[name] = issues
    write_json(out / "simulation" / "manifest.json", manifest.to_dict())
    write_json(out / "simulation" / "self_check.json", {"ok": not problems, "problems": problems})
    return {"web": web, "manifest": manifest, "personas": personas, "self_check_ok": not problems}


# -- orchestration ----------------------------------------------------------


def resolve_seed(flag: int | None, default: int | None) -> int | None:
    env = os.environ.get("AUDIT_SEED")
    if env not in (None, ""):
        return int(env)
    return flag if flag is not None else default


def _load_nonempty(path: Path) -> CrawlSet:
    crawls = CrawlSet.load_dir(path)
    if not len(crawls):
        raise AuditError(f"no crawl logs in {path}")
    return crawls


def _raise(exc: Exception):
    raise exc


def run_audit(cfg: AuditConfig) -> ReportBundle:
    """Run every stage and write the report bundle under ``cfg.out``.

    A failing stage leaves earlier outputs in place, writes ``failure.json``
    and raises AuditFailed.
    """
    from . import simweb

    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise AuditError(f"output directory {out} is not writable")
    bundle = ReportBundle(out)
    done: list[str] = []

    def stage(name, fn, *args, **kwargs):
        log.info("stage %s", name)
        try:
            result = fn(*args, **kwargs)
        except Exception as exc:
            write_json(out / "failure.json", {
                "stage": name, "error": type(exc).__name__, "message": str(exc),
                "completed_stages": done, "traceback": traceback.format_exc().splitlines()[-3:],
            })
            raise AuditFailed(name, exc) from exc
        done.append(name)
        return result

    failure = out / "failure.json"
    if failure.exists():
        failure.unlink()

    sim_doc = None
    personas: dict[str, Persona] = {}
    if cfg.mode == "simulate":
        sim_cfg = stage("config", simweb.load_config, cfg.sim_config)
        seed = resolve_seed(cfg.seed, sim_cfg.seed)
        sim_cfg = dataclasses.replace(sim_cfg, seed=seed)
        sim_doc = json.loads(json.dumps(dataclasses.asdict(sim_cfg), sort_keys=True, default=list))
        sim = stage("simulate", simulate_to_dir, sim_cfg, out,
                    personas_dir=cfg.personas, baseline_runs=cfg.baseline_runs,
                    persona_runs=cfg.persona_runs)
        if not sim["self_check_ok"]:
            stage("self-check", _raise, AuditError("simulated logs disagree with their ground truth; "
                                                   "see simulation/self_check.json"))
        personas = sim["personas"]
        crawl_dir = out / "crawls"
    else:
        seed = resolve_seed(cfg.seed, 0)
        crawl_dir = cfg.crawls
        if cfg.personas:
            personas = stage("persona", load_archives, cfg.personas)
    crawls = stage("load", _load_nonempty, crawl_dir)

    bl_path = cfg.blocklist or fixture_file("blocklist.json")
    tl_path = cfg.trackers or fixture_file("trackers.csv")
    pat_path = cfg.patterns or fixture_file("price_patterns.json")
    bl = stage("classify", BlockList.load, bl_path)
    tl = stage("classify", TrackerList.load, tl_path)
    patterns = stage("prices", PricePatternSet.load, pat_path)
    inputs = {
        "blocklist": bl.version,
        "trackers_sha256": _sha256_file(tl_path)[:16],
        "patterns_sha256": _sha256_file(pat_path)[:16],
    }
    if personas:
        inputs["personas_sha256"] = hashlib.sha256(
            b"".join(dumps_archive(p) for _, p in sorted(personas.items()))
        ).hexdigest()[:16]
    prov = version_and_provenance(cfg, seed=seed, sim_config=sim_doc, inputs=inputs, data=data_hash(crawls))
    write_json(bundle.path("provenance.json"), prov)
    bundle.provenance = prov

    cls = stage("classify", classify_report, bundle, crawls, bl, tl, personas)
    syn = stage("csync", csync_report, bundle, crawls, personas, SyncParams(min_id_length=cfg.min_id_len))
    pri = stage("prices", prices_report, bundle, crawls, patterns)
    sts = stage("stats", stats_report, bundle, crawls, distinct=cfg.distinct, alpha=cfg.alpha,
                rank_edges=cfg.rank_edges)
    nm = stage("nmf", nmf_report, bundle, crawls, bl, k_range=cfg.nmf_k, runs=cfg.nmf_runs, seed=seed or 0)
    findings = stage("summary", summarize_findings, cls, syn, pri, sts, nm)
    write_summary(bundle, findings)
    bundle.summary = {"findings": findings}
    return bundle
