import json
from pathlib import Path

import pytest

from trackaudit import simweb

DATA = Path(__file__).parent / "data"

_acceptance_lines: list[str] = []


def record_acceptance(line: str) -> None:
    print(line)
    _acceptance_lines.append(line)


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


def tiny_doc(**sections) -> dict:
    """A small ecosystem config document; keyword arguments replace whole sections."""
    doc = {
        "name": "tiny",
        "seed": 3,
        "sites": {"left": 12, "right": 18},
        "cookies": {"mean": 20.0, "dispersion": 1.0, "lean_multiplier": {"left": 1.0, "right": 1.2}},
        "trackers": {
            "listed": [
                {"domain": "doubleclick.net", "category": "advertising", "embed": {"left": 0.6, "right": 0.8}},
                {"domain": "google-analytics.com", "category": "analytics", "embed": {"left": 0.7, "right": 0.7},
                 "id_style": "composite"},
                {"domain": "criteo.com", "category": "advertising", "embed": {"left": 0.3, "right": 0.5},
                 "id_style": "b64"},
                {"domain": "facebook.com", "category": "social", "embed": {"left": 0.5, "right": 0.5}},
                {"domain": "misctag001.com", "category": "other", "embed": {"left": 0.4, "right": 0.4}},
            ]
        },
        "sync": {"chains_per_site": {"left": 1.0, "right": 2.0},
                 "encodings": {"plain": 1, "url-encoded": 1, "base64": 1, "md5-hex": 1, "sha1-hex": 1}},
        "prices": {"family": "lognormal", "median": {"left": 0.5, "right": 0.7}, "sigma": {"left": 0.3, "right": 0.3},
                   "wins_per_site": {"left": 1.0, "right": 1.0}, "opaque_fraction": 0.3,
                   "bidders": ["adnxs.com", "criteo.com"]},
        "personas": {
            "demographics": {
                "young": {"n_sites": 6, "third_parties_per_site": 12, "pool_size": 60, "shared_fraction": 0.3},
                "woman": {"n_sites": 6, "third_parties_per_site": 12, "pool_size": 60, "shared_fraction": 0.3},
            },
            "response": {"W": {"*": 1.15}},
            "crawl": ["baseline", "Y", "W", "YW"],
        },
        "runs": {"baseline": 1, "persona": 1},
    }
    doc.update(sections)
    return doc


def tiny_config(**sections) -> simweb.EcosystemConfig:
    return simweb.EcosystemConfig.from_dict(tiny_doc(**sections))


def write_config(path, **sections) -> Path:
    path = Path(path)
    path.write_text(json.dumps(tiny_doc(**sections), indent=1), encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def tiny_web():
    return simweb.generate(tiny_config())


@pytest.fixture(scope="session")
def tiny_personas(tiny_web):
    return simweb.build_personas(tiny_web[0])


@pytest.fixture(scope="session")
def tiny_crawls(tiny_web, tiny_personas):
    """(log, truth) for every persona and lean of the tiny web, run 1."""
    web, _ = tiny_web
    out = []
    for label, p in tiny_personas.items():
        for lean in ("left", "right"):
            out.append(simweb.simulate_crawl_with_truth(web, p, 1, lean))
    return out


def load_json(path):
    return json.loads(Path(path).read_text("utf-8"))
