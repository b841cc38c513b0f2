"""Canonical crawl-log data model, line-delimited JSON parser and serializer.

A log file holds one JSON object per line, discriminated by ``record_type``:

* ``meta`` with ``meta="log"``: header carrying persona_label, lean, run_index
* ``meta`` with ``meta="visit"``: declares a visit_id, its site, lean and rank
* ``http``: an HttpEvent
* ``cookie``: a CookieRecord
"""

from __future__ import annotations

import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Mapping, Sequence
from urllib.parse import urlsplit

log = logging.getLogger(__name__)

KINDS = ("request", "response", "redirect")
SOURCES = ("script", "header")
LEANS = ("left", "right", "none")
MAX_MALFORMED_FRACTION = 0.10

# run counts per crawl setup; exceeding them only warns
MAX_RUNS = {"baseline": 2, "persona": 5}


class CrawlLogError(ValueError):
    pass


class CrawlLogParseError(CrawlLogError):
    def __init__(self, message: str, issues: Sequence["ParseIssue"] = ()):
        super().__init__(message)
        self.issues = tuple(issues)


class SiteNotInLog(CrawlLogError, KeyError):
    pass


def _is_absolute_url(url: str) -> bool:
    if not isinstance(url, str):
        return False
    parts = urlsplit(url)
    return bool(parts.scheme) and bool(parts.netloc)


@dataclass(frozen=True, slots=True)
class HttpEvent:
    kind: str
    url: str
    visit_id: str
    site: str
    timestamp: int
    referrer: str | None = None
    location: str | None = None
    headers: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CrawlLogError(f"unknown event kind {self.kind!r}")
        if not _is_absolute_url(self.url):
            raise CrawlLogError(f"url is not absolute: {self.url!r}")
        if self.kind == "redirect" and not self.location:
            raise CrawlLogError("redirect event without location")
        if not self.visit_id:
            raise CrawlLogError("empty visit_id")
        if not isinstance(self.timestamp, int) or isinstance(self.timestamp, bool):
            raise CrawlLogError("timestamp must be integer milliseconds")

    @property
    def host(self) -> str:
        return urlsplit(self.url).hostname or ""


@dataclass(frozen=True, slots=True)
class CookieRecord:
    owner: str
    name: str
    value: str
    source: str
    visit_id: str
    site: str
    timestamp: int

    def __post_init__(self):
        if self.source not in SOURCES:
            raise CrawlLogError(f"unknown cookie source {self.source!r}")
        if not self.owner or not self.site:
            raise CrawlLogError("cookie owner and site must be non-empty")
        if not self.visit_id:
            raise CrawlLogError("empty visit_id")
        if not isinstance(self.timestamp, int) or isinstance(self.timestamp, bool):
            raise CrawlLogError("timestamp must be integer milliseconds")

    @property
    def is_third_party(self) -> bool:
        return self.owner != self.site


@dataclass(frozen=True, slots=True)
class Visit:
    visit_id: str
    site: str
    lean: str = "none"
    rank: int | None = None

    def __post_init__(self):
        if not self.visit_id:
            raise CrawlLogError("empty visit_id")
        if self.lean not in LEANS:
            raise CrawlLogError(f"unknown lean {self.lean!r}")


@dataclass(frozen=True, slots=True)
class ParseIssue:
    line: int
    message: str


@dataclass(frozen=True)
class CrawlLog:
    persona_label: str = "unknown"
    lean: str = "none"
    run_index: int = 1
    visits: tuple[Visit, ...] = ()
    events: tuple[HttpEvent, ...] = ()
    cookies: tuple[CookieRecord, ...] = ()
    issues: tuple[ParseIssue, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.lean not in LEANS:
            raise CrawlLogError(f"unknown lean {self.lean!r}")
        if self.run_index < 1:
            raise CrawlLogError("run_index must be >= 1")

    @property
    def is_baseline(self) -> bool:
        return self.persona_label == "baseline"

    def sites(self) -> list[str]:
        seen = dict.fromkeys(v.site for v in self.visits)
        for rec in self.cookies:
            seen.setdefault(rec.site)
        for ev in self.events:
            seen.setdefault(ev.site)
        return list(seen)

    def visit_index(self) -> dict[str, Visit]:
        return {v.visit_id: v for v in self.visits}

    def site_lean(self, site: str) -> str:
        for v in self.visits:
            if v.site == site and v.lean != "none":
                return v.lean
        return self.lean

    def cookies_by_visit(self) -> dict[str, list[CookieRecord]]:
        out: dict[str, list[CookieRecord]] = defaultdict(list)
        for rec in self.cookies:
            out[rec.visit_id].append(rec)
        return out

    def events_by_visit(self) -> dict[str, list[HttpEvent]]:
        out: dict[str, list[HttpEvent]] = defaultdict(list)
        for ev in self.events:
            out[ev.visit_id].append(ev)
        return out

    def lint(self) -> list[str]:
        """Soft consistency checks; problems are returned, never raised."""
        warnings = []
        declared = {v.visit_id for v in self.visits}
        used = {r.visit_id for r in self.events} | {r.visit_id for r in self.cookies}
        undeclared = used - declared
        if undeclared:
            warnings.append(f"{len(undeclared)} visit_id(s) not declared by a visit record")
        kind = "baseline" if self.is_baseline else "persona"
        if self.run_index > MAX_RUNS[kind]:
            warnings.append(
                f"run_index {self.run_index} exceeds the {MAX_RUNS[kind]} runs expected for a {kind} crawl"
            )
        return warnings


def cookie_count(log: CrawlLog, site: str, *, distinct: bool = False) -> int:
    """Cookie observations attributed to visits of ``site`` (both channels).

    Repeated observations are counted every time; ``distinct=True`` collapses
    them to unique (owner, name) pairs instead.
    """
    if site not in set(log.sites()):
        raise SiteNotInLog(site)
    records = [c for c in log.cookies if c.site == site]
    if distinct:
        return len({(c.owner, c.name) for c in records})
    return len(records)


# -- serialization ---------------------------------------------------------


def _dumps(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _event_record(ev: HttpEvent) -> dict:
    return {
        "record_type": "http",
        "kind": ev.kind,
        "url": ev.url,
        "referrer": ev.referrer,
        "location": ev.location,
        "headers": [list(h) for h in ev.headers],
        "visit_id": ev.visit_id,
        "site": ev.site,
        "timestamp": ev.timestamp,
    }


def _cookie_record(c: CookieRecord) -> dict:
    return {
        "record_type": "cookie",
        "owner": c.owner,
        "name": c.name,
        "value": c.value,
        "source": c.source,
        "visit_id": c.visit_id,
        "site": c.site,
        "timestamp": c.timestamp,
    }


def iter_lines(crawl: CrawlLog) -> Iterator[str]:
    yield _dumps({
        "record_type": "meta",
        "meta": "log",
        "persona_label": crawl.persona_label,
        "lean": crawl.lean,
        "run_index": crawl.run_index,
    })
    for v in crawl.visits:
        yield _dumps({
            "record_type": "meta",
            "meta": "visit",
            "visit_id": v.visit_id,
            "site": v.site,
            "lean": v.lean,
            "rank": v.rank,
        })
    for ev in crawl.events:
        yield _dumps(_event_record(ev))
    for c in crawl.cookies:
        yield _dumps(_cookie_record(c))


def serialize(crawl: CrawlLog) -> bytes:
    return "".join(line + "\n" for line in iter_lines(crawl)).encode("utf-8")


def write_crawl_log(crawl: CrawlLog, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in iter_lines(crawl):
            fh.write(line)
            fh.write("\n")


# -- parsing ---------------------------------------------------------------


def _opt_str(rec: dict, key: str) -> str | None:
    val = rec.get(key)
    if val is not None and not isinstance(val, str):
        raise CrawlLogError(f"{key} must be a string or null")
    return val


def _req_str(rec: dict, key: str) -> str:
    val = rec.get(key)
    if not isinstance(val, str):
        raise CrawlLogError(f"missing or non-string field {key!r}")
    return val


def _parse_record(rec: dict):
    rtype = rec.get("record_type")
    if rtype == "http":
        headers = rec.get("headers") or []
        if not all(isinstance(h, (list, tuple)) and len(h) == 2 for h in headers):
            raise CrawlLogError("headers must be [name, value] pairs")
        return HttpEvent(
            kind=_req_str(rec, "kind"),
            url=_req_str(rec, "url"),
            visit_id=_req_str(rec, "visit_id"),
            site=_req_str(rec, "site"),
            timestamp=rec.get("timestamp"),
            referrer=_opt_str(rec, "referrer"),
            location=_opt_str(rec, "location"),
            headers=tuple((str(n), str(v)) for n, v in headers),
        )
    if rtype == "cookie":
        return CookieRecord(
            owner=_req_str(rec, "owner"),
            name=_req_str(rec, "name"),
            value=_req_str(rec, "value"),
            source=_req_str(rec, "source"),
            visit_id=_req_str(rec, "visit_id"),
            site=_req_str(rec, "site"),
            timestamp=rec.get("timestamp"),
        )
    if rtype == "meta":
        meta = rec.get("meta")
        if meta == "visit":
            rank = rec.get("rank")
            if rank is not None and (not isinstance(rank, int) or rank < 1):
                raise CrawlLogError("rank must be a positive integer or null")
            return Visit(
                visit_id=_req_str(rec, "visit_id"),
                site=_req_str(rec, "site"),
                lean=rec.get("lean", "none"),
                rank=rank,
            )
        if meta == "log":
            run_index = rec.get("run_index", 1)
            if not isinstance(run_index, int) or run_index < 1:
                raise CrawlLogError("run_index must be an integer >= 1")
            lean = rec.get("lean", "none")
            if lean not in LEANS:
                raise CrawlLogError(f"unknown lean {lean!r}")
            return ("header", _req_str(rec, "persona_label"), lean, run_index)
        raise CrawlLogError(f"unknown meta record {meta!r}")
    raise CrawlLogError(f"unknown record_type {rtype!r}")


def parse_crawl_log(stream: bytes | IO[bytes] | IO[str] | Iterable) -> CrawlLog:
    """Parse a canonical line-delimited log.

    Malformed lines are skipped and recorded in ``CrawlLog.issues`` with their
    1-based line number. More than 10% malformed lines fails the whole parse.
    """
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    header = ("unknown", "none", 1)
    visits: list[Visit] = []
    events: list[HttpEvent] = []
    cookies: list[CookieRecord] = []
    issues: list[ParseIssue] = []
    n_records = 0
    for lineno, raw in enumerate(stream, start=1):
        if isinstance(raw, (bytes, bytearray)):
            try:
                raw = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                n_records += 1
                issues.append(ParseIssue(lineno, f"invalid UTF-8: {exc}"))
                continue
        line = raw.strip()
        if not line:
            continue
        n_records += 1
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise CrawlLogError("record is not an object")
            item = _parse_record(rec)
        except (ValueError, TypeError) as exc:
            issues.append(ParseIssue(lineno, str(exc)))
            continue
        if isinstance(item, HttpEvent):
            events.append(item)
        elif isinstance(item, CookieRecord):
            cookies.append(item)
        elif isinstance(item, Visit):
            visits.append(item)
        else:
            header = item[1:]
    if n_records and len(issues) > MAX_MALFORMED_FRACTION * n_records:
        raise CrawlLogParseError(
            f"{len(issues)} of {n_records} lines malformed (limit {MAX_MALFORMED_FRACTION:.0%})",
            issues,
        )
    for issue in issues:
        log.warning("line %d skipped: %s", issue.line, issue.message)
    return CrawlLog(
        persona_label=header[0],
        lean=header[1],
        run_index=header[2],
        visits=tuple(visits),
        events=tuple(events),
        cookies=tuple(cookies),
        issues=tuple(issues),
    )


def read_crawl_log(path: str | Path) -> CrawlLog:
    with open(path, "rb") as fh:
        return parse_crawl_log(fh)


# -- collections of logs ---------------------------------------------------


def lean_tag(lean: str) -> str:
    return {"left": "L", "right": "R"}.get(lean, "N")


@dataclass(frozen=True)
class CrawlSet:
    """An ordered, read-only collection of crawl logs."""

    logs: tuple[CrawlLog, ...]

    def __iter__(self):
        return iter(self.logs)

    def __len__(self):
        return len(self.logs)

    @classmethod
    def of(cls, logs: Iterable[CrawlLog]) -> "CrawlSet":
        return cls(tuple(logs))

    @classmethod
    def load_dir(cls, path: str | Path) -> "CrawlSet":
        """Load every ``*.jsonl`` log (and ``*.sqlite`` table dump) in a directory."""
        from .convert import read_sqlite

        root = Path(path)
        logs = []
        for p in sorted(root.iterdir()):
            if p.suffix == ".jsonl":
                logs.append(read_crawl_log(p))
            elif p.suffix in (".sqlite", ".db"):
                logs.append(read_sqlite(p))
        logs.sort(key=lambda lg: (lg.persona_label, lg.lean, lg.run_index))
        return cls(tuple(logs))

    def personas(self) -> list[str]:
        return list(dict.fromkeys(lg.persona_label for lg in self.logs))

    def for_persona(self, label: str) -> "CrawlSet":
        return CrawlSet(tuple(lg for lg in self.logs if lg.persona_label == label))

    def site_leans(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for lg in self.logs:
            for v in lg.visits:
                if v.lean != "none":
                    out.setdefault(v.site, v.lean)
            for s in lg.sites():
                if lg.lean != "none":
                    out.setdefault(s, lg.lean)
        return out

    def site_ranks(self) -> dict[str, int | None]:
        out: dict[str, int | None] = {}
        for lg in self.logs:
            for v in lg.visits:
                if out.get(v.site) is None:
                    out[v.site] = v.rank
        return out

    def visit_index(self) -> dict[str, tuple[CrawlLog, Visit]]:
        out = {}
        for lg in self.logs:
            for v in lg.visits:
                out[v.visit_id] = (lg, v)
        return out

    def sites_by_lean(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = defaultdict(list)
        for site, lean in sorted(self.site_leans().items()):
            out[lean].append(site)
        return dict(out)


def per_site_mean(crawls: Iterable[CrawlLog], metric) -> dict[str, float]:
    """Average ``metric(cookies_of_visit)`` over every visit of each site.

    ``metric`` receives the list of CookieRecords of one visit.
    """
    totals: dict[str, float] = defaultdict(float)
    counts: dict[str, int] = defaultdict(int)
    for lg in crawls:
        by_visit = lg.cookies_by_visit()
        visits = lg.visits or tuple(
            Visit(vid, recs[0].site) for vid, recs in by_visit.items()
        )
        for v in visits:
            totals[v.site] += metric(by_visit.get(v.visit_id, []))
            counts[v.site] += 1
    return {s: totals[s] / counts[s] for s in totals}


def group_site_values(
    values: Mapping[str, float], leans: Mapping[str, str]
) -> dict[str, list[float]]:
    out: dict[str, list[float]] = defaultdict(list)
    for site in sorted(values):
        out[leans.get(site, "none")].append(values[site])
    return dict(out)
