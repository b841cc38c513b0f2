"""``audit`` command line."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .report import (
    AuditConfig,
    AuditError,
    AuditFailed,
    ReportBundle,
    classify_report,
    fixture_file,
    nmf_report,
    resolve_seed,
    run_audit,
    simulate_to_dir,
    stats_report,
    write_csync,
    write_json,
    write_prices,
)

log = logging.getLogger("trackaudit")


def _k_range(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition("..")
    try:
        return (int(lo), int(hi)) if sep else (int(lo), int(lo))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected K or LO..HI, got {text!r}") from None


def _load_crawls(path):
    from .crawllog import CrawlSet

    return CrawlSet.load_dir(path)


def cmd_simulate(args) -> int:
    from . import simweb
    import dataclasses

    cfg = simweb.load_config(args.config)
    cfg = dataclasses.replace(cfg, seed=resolve_seed(args.seed, cfg.seed))
    res = simulate_to_dir(cfg, Path(args.out), personas_dir=Path(args.personas) if args.personas else None,
                          baseline_runs=args.baseline_runs, persona_runs=args.persona_runs)
    if not res["self_check_ok"]:
        log.error("simulation self-check failed; see simulation/self_check.json")
        return 1
    return 0


def cmd_ingest(args) -> int:
    from .convert import read_sqlite
    from .crawllog import write_crawl_log

    src, out = Path(args.from_sqlite), Path(args.out)
    if src.is_dir():
        out.mkdir(parents=True, exist_ok=True)
        for p in sorted(src.iterdir()):
            if p.suffix in (".sqlite", ".db"):
                write_crawl_log(read_sqlite(p), out / f"{p.stem}.jsonl")
    else:
        write_crawl_log(read_sqlite(src), out)
    return 0


def cmd_persona_build(args) -> int:
    from .persona import DemographicSpec, build_persona, save_archive

    spec = DemographicSpec.load(args.spec)
    crawls = {}
    for lg in _load_crawls(args.crawls):
        for site in lg.sites():
            crawls.setdefault(site, lg)
    p = build_persona(spec, crawls, seed=args.seed, threshold=args.threshold)
    save_archive(p, args.out)
    log.info("%s: %d cookies, %d third parties, matured=%s", p.label, len(p.jar),
             len(p.third_party_owners()), p.matured)
    return 0


def _personas(path):
    from .persona import load_archives

    return load_archives(path) if path else {}


def cmd_classify(args) -> int:
    from .classify import BlockList, TrackerList

    bundle = ReportBundle(Path(args.report))
    res = classify_report(bundle, _load_crawls(args.crawls), BlockList.load(args.blocklist),
                          TrackerList.load(args.trackers), _personas(args.personas))
    write_json(bundle.path("classify", "summary.json"), res)
    return 0


def cmd_csync(args) -> int:
    from .csync import SyncParams

    res = write_csync(Path(args.out), _load_crawls(args.crawls), _personas(args.jar),
                      SyncParams(min_id_length=args.min_id_len))
    print(json.dumps({"syncs": res["total"], "lean_means": res["lean_means"]}, sort_keys=True))
    return 0


def cmd_prices(args) -> int:
    from .rtbprice import PricePatternSet

    res = write_prices(Path(args.out), _load_crawls(args.crawls), PricePatternSet.load(args.patterns))
    brief = {k: res[k] for k in ("median_ratio", "top_quartile_ratio", "q3_ratio") if k in res}
    brief["medians"] = {lean: d["median"] for lean, d in res["lean"].items()}
    brief["opaque"] = res["tally"]["opaque"]
    print(json.dumps(brief, sort_keys=True))
    return 0


def cmd_stats(args) -> int:
    bundle = ReportBundle(Path(args.out))
    stats_report(bundle, _load_crawls(args.crawls), distinct=args.distinct, alpha=args.alpha)
    return 0


def cmd_nmf(args) -> int:
    from .classify import BlockList

    bundle = ReportBundle(Path(args.out))
    res = nmf_report(bundle, _load_crawls(args.crawls), BlockList.load(args.blocklist),
                     k_range=args.k, runs=args.runs, seed=resolve_seed(args.seed, 0))
    print(json.dumps({c: i.get("best_k") for c, i in res.items()}, sort_keys=True))
    return 0


def cmd_run(args) -> int:
    cfg = AuditConfig(
        mode="simulate" if args.config else "ingest",
        out=Path(args.out),
        crawls=Path(args.crawls) if args.crawls else None,
        sim_config=args.config,
        personas=Path(args.personas) if args.personas else None,
        blocklist=Path(args.blocklist) if args.blocklist else None,
        trackers=Path(args.trackers) if args.trackers else None,
        patterns=Path(args.patterns) if args.patterns else None,
        seed=args.seed,
        nmf_k=args.k,
        nmf_runs=args.runs,
        min_id_len=args.min_id_len,
        distinct=args.distinct,
        alpha=args.alpha,
        baseline_runs=args.baseline_runs,
        persona_runs=args.persona_runs,
    )
    bundle = run_audit(cfg)
    print((bundle.root / "summary.txt").read_text("utf-8"), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="audit", description="Differential audit of tracking on hyper-partisan websites.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def crawls_arg(p, required=True):
        p.add_argument("--crawls", required=required, help="directory of crawl logs (*.jsonl, *.sqlite)")

    def sim_runs(p):
        p.add_argument("--baseline-runs", type=int, help="override the config's baseline run count")
        p.add_argument("--persona-runs", type=int, help="override the config's per-persona run count")

    p = sub.add_parser("simulate", help="generate a synthetic web and crawl it")
    p.add_argument("--config", required=True, help="simulator config file or fixture name (e.g. paper-shaped)")
    p.add_argument("--personas", help="persona archive directory; missing personas are built and saved here")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed (AUDIT_SEED wins over both)")
    sim_runs(p)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("ingest", help="convert a table-layout crawl database to a canonical log")
    p.add_argument("--from-sqlite", required=True, help="database file, or directory of them")
    p.add_argument("--out", required=True, help="output .jsonl file (directory when converting a directory)")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("persona", help="persona operations")
    psub = p.add_subparsers(dest="persona_command", required=True)
    b = psub.add_parser("build", help="build a persona archive from demographic-site crawls")
    b.add_argument("--spec", required=True, help="demographic spec JSON {feature, site_list}")
    crawls_arg(b)
    b.add_argument("--out", required=True, help="archive file to write")
    b.add_argument("--seed", type=int, help="shuffle the visit order with this seed")
    b.add_argument("--threshold", type=int, default=50, help="maturity threshold (distinct third parties)")
    b.set_defaults(fn=cmd_persona_build)

    p = sub.add_parser("classify", help="label cookies and compute tracker prevalence")
    p.add_argument("--blocklist", default=str(fixture_file("blocklist.json")))
    p.add_argument("--trackers", default=str(fixture_file("trackers.csv")))
    crawls_arg(p)
    p.add_argument("--personas", help="persona archives, for persona/HPW overlap")
    p.add_argument("--report", required=True, help="output directory")
    p.set_defaults(fn=cmd_classify)

    p = sub.add_parser("csync", help="detect cookie synchronization")
    crawls_arg(p)
    p.add_argument("--jar", help="persona archive (or directory); applied to crawls with the same label")
    p.add_argument("--min-id-len", type=int, default=10)
    p.add_argument("--out", required=True, help="sync events .jsonl; sync_rate.csv and sync_summary.csv go next to it")
    p.set_defaults(fn=cmd_csync)

    p = sub.add_parser("prices", help="extract cleartext RTB charge prices")
    crawls_arg(p)
    p.add_argument("--patterns", default=str(fixture_file("price_patterns.json")))
    p.add_argument("--out", required=True, help="win events .csv; ecdf.csv and summary.json go next to it")
    p.set_defaults(fn=cmd_prices)

    p = sub.add_parser("stats", help="ECDFs, KS matrix, deltas vs baseline, rank buckets")
    crawls_arg(p)
    p.add_argument("--out", required=True)
    p.add_argument("--distinct", action="store_true", help="count distinct (owner, name) cookies per visit")
    p.add_argument("--alpha", type=float, default=0.01)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("nmf", help="persona clustering by cookie domains")
    crawls_arg(p)
    p.add_argument("--blocklist", default=str(fixture_file("blocklist.json")))
    p.add_argument("--k", type=_k_range, default=(2, 10), help="K or LO..HI (default 2..10)")
    p.add_argument("--runs", type=int, default=50, help="factorizations per k")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_nmf)

    p = sub.add_parser("run", help="full audit: simulate or ingest, then every analysis")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="simulate from this config file or fixture name")
    src.add_argument("--crawls", help="ingest this directory of crawl logs")
    p.add_argument("--personas", help="persona archive directory")
    p.add_argument("--blocklist")
    p.add_argument("--trackers")
    p.add_argument("--patterns")
    p.add_argument("--out", required=True, help="report bundle directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=_k_range, default=(2, 10))
    p.add_argument("--runs", type=int, default=50, help="NMF factorizations per k")
    p.add_argument("--min-id-len", type=int, default=10)
    p.add_argument("--distinct", action="store_true")
    p.add_argument("--alpha", type=float, default=0.01)
    sim_runs(p)
    p.set_defaults(fn=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except AuditFailed as exc:
        print(f"audit: {exc} (see failure.json)", file=sys.stderr)
        return 2
    except (AuditError, ValueError, OSError) as exc:
        print(f"audit: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
