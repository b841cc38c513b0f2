import json
import subprocess
import sys
from pathlib import Path

import pytest

from trackaudit import cli, simweb
from trackaudit.convert import write_sqlite
from trackaudit.crawllog import read_crawl_log, serialize
from trackaudit.persona import load_archive
from trackaudit.report import AuditConfig, AuditError, AuditFailed, run_audit
from conftest import load_json, write_config

SUBCOMMANDS = ["simulate", "ingest", "persona", "classify", "csync", "prices", "stats", "nmf", "run"]
FAST = ["--k", "2..3", "--runs", "3"]


def audit(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def mini_run(tmp_path_factory):
    """One full simulate-mode audit of the tiny ecosystem."""
    root = tmp_path_factory.mktemp("mini")
    cfg = write_config(root / "mini.cfg")
    out = root / "report"
    assert audit("run", "--config", cfg, "--out", out, *FAST) == 0
    return cfg, out


def test_help_lists_every_subcommand():
    res = subprocess.run([sys.executable, "-m", "trackaudit.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for name in SUBCOMMANDS:
        assert name in res.stdout


@pytest.mark.parametrize("name", SUBCOMMANDS)
def test_subcommand_help(name, capsys):
    with pytest.raises(SystemExit) as exc:
        audit(name, "--help")
    assert exc.value.code == 0
    assert "--" in capsys.readouterr().out


def test_run_needs_exactly_one_input(tmp_path):
    with pytest.raises(SystemExit):
        audit("run", "--out", tmp_path)
    with pytest.raises(SystemExit):
        audit("run", "--config", "x", "--crawls", "y", "--out", tmp_path)
    with pytest.raises(AuditError):
        AuditConfig(mode="simulate", out=tmp_path)
    with pytest.raises(AuditError):
        AuditConfig(mode="ingest", out=tmp_path, crawls=tmp_path, sim_config="paper-shaped")


def test_bundle_layout(mini_run):
    _, out = mini_run
    for rel in ["provenance.json", "summary.json", "summary.csv", "summary.txt",
                "classify/site_cookies.csv", "classify/prevalence.csv", "classify/match_rate.json",
                "csync/sync_events.jsonl", "csync/sync_rate.csv", "prices/win_events.csv",
                "prices/summary.json", "stats/cdf.csv", "stats/ks_matrix.csv", "stats/percent_delta.csv",
                "stats/rank_buckets.csv", "stats/plot_data.json", "simulation/manifest.json",
                "simulation/self_check.json"]:
        assert (out / rel).is_file(), rel
    assert not (out / "failure.json").exists()
    assert load_json(out / "simulation" / "self_check.json")["ok"]
    findings = load_json(out / "summary.json")["findings"]
    assert [f["id"] for f in findings] == list(range(1, 8))
    assert len((out / "summary.txt").read_text().splitlines()) == 7
    assert sorted(p.name for p in (out / "personas").iterdir()) == ["W.json", "Y.json", "YW.json", "baseline.json"]


def test_provenance_contents(mini_run):
    _, out = mini_run
    prov = load_json(out / "provenance.json")
    assert prov["seed"] == 3
    assert prov["tool"] == "trackaudit" and prov["version"]
    assert len(prov["provenance_hash"]) == 64


def test_same_inputs_same_hash_changed_seed_new_hash(mini_run, tmp_path):
    cfg, out = mini_run
    assert audit("run", "--config", cfg, "--out", tmp_path / "again", *FAST) == 0
    assert audit("run", "--config", cfg, "--out", tmp_path / "seed9", "--seed", 9, *FAST) == 0
    h = load_json(out / "provenance.json")["provenance_hash"]
    assert load_json(tmp_path / "again" / "provenance.json")["provenance_hash"] == h
    other = load_json(tmp_path / "seed9" / "provenance.json")
    assert other["seed"] == 9 and other["provenance_hash"] != h


def test_audit_seed_env_overrides_flag(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "c.cfg", personas={"demographics": {}, "crawl": ["baseline"]})
    monkeypatch.setenv("AUDIT_SEED", "77")
    assert audit("simulate", "--config", cfg, "--out", tmp_path / "a", "--seed", 5) == 0
    assert load_json(tmp_path / "a" / "simulation" / "manifest.json")["seed"] == 77
    assert audit("run", "--config", cfg, "--out", tmp_path / "b", "--seed", 5, *FAST) == 0
    assert load_json(tmp_path / "b" / "provenance.json")["seed"] == 77


def test_subcommands_compose_to_run(mini_run, tmp_path):
    _, out = mini_run
    crawls, personas = out / "crawls", out / "personas"
    assert audit("classify", "--crawls", crawls, "--personas", personas, "--report", tmp_path) == 0
    assert audit("csync", "--crawls", crawls, "--jar", personas, "--out", tmp_path / "csync" / "sync_events.jsonl") == 0
    assert audit("prices", "--crawls", crawls, "--out", tmp_path / "prices" / "win_events.csv") == 0
    assert audit("stats", "--crawls", crawls, "--out", tmp_path) == 0
    assert audit("nmf", "--crawls", crawls, "--out", tmp_path, "--seed", 3, *FAST) == 0
    compared = 0
    for sub in ("classify", "csync", "prices", "stats", "nmf"):
        for f in sorted((out / sub).rglob("*")):
            if f.is_file() and f.name not in ("summary.json",):
                twin = tmp_path / f.relative_to(out)
                assert twin.read_bytes() == f.read_bytes(), f.relative_to(out)
                compared += 1
    assert compared > 20


def test_prices_cli_output(mini_run, tmp_path, capsys):
    _, out = mini_run
    assert audit("prices", "--crawls", out / "crawls", "--out", tmp_path / "w.csv") == 0
    brief = json.loads(capsys.readouterr().out)
    assert set(brief["medians"]) == {"left", "right"}
    assert (tmp_path / "summary.json").is_file() and (tmp_path / "ecdf.csv").is_file()


def test_null_world_summary(tmp_path):
    out = tmp_path / "null"
    assert audit("run", "--config", "null-world", "--out", out, *FAST) == 0
    findings = {f["id"]: f for f in load_json(out / "summary.json")["findings"]}
    assert findings[6]["detail"]["total_syncs"] == 0
    assert findings[7]["detail"]["cleartext_prices"] == 0
    assert findings[7]["value"] is None
    assert findings[2]["value"] is None and findings[4]["value"] is None
    assert (out / "csync" / "sync_events.jsonl").read_text() == ""
    groups = {line.split(",")[0] for line in (out / "stats" / "per_site.csv").read_text().splitlines()[1:]}
    assert groups == {"L:baseline", "R:baseline"}
    assert findings[1]["value"] == pytest.approx(1.0, abs=0.15)


def test_failure_manifest_keeps_partial_outputs(tmp_path):
    cfg = write_config(tmp_path / "c.cfg", personas={"demographics": {}, "crawl": ["baseline"]})
    bad = tmp_path / "patterns.json"
    bad.write_text('{"params": []}')
    out = tmp_path / "out"
    assert audit("run", "--config", cfg, "--patterns", bad, "--out", out, *FAST) == 2
    failure = load_json(out / "failure.json")
    assert failure["stage"] == "prices"
    assert failure["completed_stages"][:3] == ["config", "simulate", "load"]
    assert list((out / "crawls").glob("*.jsonl"))


def test_failure_on_malformed_crawls(tmp_path):
    crawls = tmp_path / "crawls"
    crawls.mkdir()
    (crawls / "bad.jsonl").write_text("not json\n" * 5)
    with pytest.raises(AuditFailed) as exc:
        run_audit(AuditConfig(mode="ingest", out=tmp_path / "out", crawls=crawls, nmf_k=(2, 3), nmf_runs=3))
    assert exc.value.stage == "load"
    assert load_json(tmp_path / "out" / "failure.json")["stage"] == "load"


def test_empty_crawl_dir_fails_cleanly(tmp_path):
    (tmp_path / "crawls").mkdir()
    assert audit("run", "--crawls", tmp_path / "crawls", "--out", tmp_path / "out", *FAST) == 2
    assert load_json(tmp_path / "out" / "failure.json")["stage"] == "load"


def test_missing_config_is_reported(tmp_path):
    assert audit("simulate", "--config", tmp_path / "nope.cfg", "--out", tmp_path / "o") == 1


def test_ingest_converts_sqlite(mini_run, tmp_path):
    _, out = mini_run
    src = sorted((out / "crawls").glob("*.jsonl"))[0]
    lg = read_crawl_log(src)
    write_sqlite(lg, tmp_path / "one.sqlite")
    assert audit("ingest", "--from-sqlite", tmp_path / "one.sqlite", "--out", tmp_path / "one.jsonl") == 0
    assert (tmp_path / "one.jsonl").read_bytes() == serialize(lg)
    (tmp_path / "dbs").mkdir()
    write_sqlite(lg, tmp_path / "dbs" / "a.sqlite")
    assert audit("ingest", "--from-sqlite", tmp_path / "dbs", "--out", tmp_path / "conv") == 0
    assert (tmp_path / "conv" / "a.jsonl").read_bytes() == serialize(lg)


def test_persona_build(tmp_path):
    from conftest import tiny_config

    web, _ = simweb.generate(tiny_config())
    sites = web.demographic_sites["young"]
    crawl_dir = tmp_path / "building"
    crawl_dir.mkdir()
    from trackaudit.crawllog import write_crawl_log

    for s in sites:
        write_crawl_log(simweb.simulate_building_crawl(web, "young", s), crawl_dir / f"{s}.jsonl")
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"feature": "young", "site_list": list(sites)}))
    assert audit("persona", "build", "--spec", spec, "--crawls", crawl_dir, "--out", tmp_path / "Y.json",
                 "--seed", 1) == 0
    p = load_archive(tmp_path / "Y.json")
    assert p.label == "Y" and p.jar and sorted(p.history) == sorted(sites)


def test_simulate_reuses_persona_archives(tmp_path):
    cfg = write_config(tmp_path / "c.cfg")
    pdir = tmp_path / "personas"
    assert audit("simulate", "--config", cfg, "--personas", pdir, "--out", tmp_path / "a") == 0
    before = {p.name: p.read_bytes() for p in pdir.iterdir()}
    assert audit("simulate", "--config", cfg, "--personas", pdir, "--out", tmp_path / "b") == 0
    assert {p.name: p.read_bytes() for p in pdir.iterdir()} == before
    a = sorted((tmp_path / "a" / "crawls").iterdir())
    b = sorted((tmp_path / "b" / "crawls").iterdir())
    assert [x.read_bytes() for x in a] == [y.read_bytes() for y in b]
