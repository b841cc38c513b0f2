"""Cookie-synchronization detection: cookie IDs carried in URLs to other third parties."""

from __future__ import annotations

import base64
import hashlib
import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence
from urllib.parse import quote, unquote, urlsplit

from .crawllog import CookieRecord, CrawlLog, CrawlSet, HttpEvent
from .psl import DomainError, registrable_domain

ENCODINGS = ("plain", "url-encoded", "base64", "md5-hex", "sha1-hex")
LOCATIONS = ("query-param", "path-segment", "referrer")
DEFAULT_MIN_ID_LENGTH = 10
DEFAULT_DELIMITERS = "&=:;|,%"
DEFAULT_DENYLIST = frozenset({"true", "false", "null", "undefined", "none", "nan"})

_LOCALE = re.compile(r"^[a-z]{2,3}([-_][A-Za-z]{2,4})?([-_][A-Za-z]{2})?$")
_TIMESTAMP = re.compile(r"^\d{10}(\d{3})?(\.\d+)?$")
_HEX = re.compile(r"^[0-9a-fA-F]{32}$|^[0-9a-fA-F]{40}$")


@dataclass(frozen=True)
class SyncParams:
    min_id_length: int = DEFAULT_MIN_ID_LENGTH
    delimiters: str = DEFAULT_DELIMITERS
    denylist: frozenset[str] = DEFAULT_DENYLIST

    def __post_init__(self):
        if self.min_id_length < 8:
            raise ValueError("min_id_length must be at least 8")


@dataclass(frozen=True, order=True)
class CandidateId:
    value: str                      # the string as it would appear in a URL
    source_cookie: tuple[str, str]  # (owner, name)
    encoding: str = "plain"
    raw: str = field(default="", compare=False)  # underlying plain ID


@dataclass(frozen=True)
class SyncEvent:
    id: CandidateId
    sender: str
    receiver: str
    carrier_url: str
    site: str
    visit_id: str
    match_location: str
    timestamp: int = 0

    def key(self):
        return (self.id.raw, self.id.source_cookie, self.sender, self.receiver, self.carrier_url)


def is_denied(token: str, params: SyncParams) -> bool:
    return (
        token.lower() in params.denylist
        or bool(_LOCALE.match(token))
        or bool(_TIMESTAMP.match(token))
    )


def split_value(value: str, delimiters: str = DEFAULT_DELIMITERS) -> list[str]:
    if not delimiters:
        return [value] if value else []
    pattern = "[" + re.escape(delimiters) + "]+"
    return [t for t in re.split(pattern, value) if t]


def encode_variants(raw: str) -> list[tuple[str, str]]:
    """(encoding, string) forms of an ID that are looked for in URLs."""
    out = [("plain", raw)]
    quoted = quote(raw, safe="")
    if quoted != raw:
        out.append(("url-encoded", quoted))
    data = raw.encode("utf-8")
    for enc in (base64.b64encode(data).decode(), base64.urlsafe_b64encode(data).decode()):
        out.append(("base64", enc))
        out.append(("base64", enc.rstrip("=")))
    out.append(("md5-hex", hashlib.md5(data).hexdigest()))
    out.append(("sha1-hex", hashlib.sha1(data).hexdigest()))
    seen = set()
    unique = []
    for enc, s in out:
        if s not in seen:
            seen.add(s)
            unique.append((enc, s))
    return unique


def extract_ids(jar: Iterable[CookieRecord], min_id_length: int = DEFAULT_MIN_ID_LENGTH,
                params: SyncParams | None = None) -> list[CandidateId]:
    """Split cookie values on delimiters and expand every long, non-trivial
    piece into its encoding variants."""
    params = params or SyncParams(min_id_length=min_id_length)
    found: dict[tuple, CandidateId] = {}
    for c in jar:
        for token in split_value(c.value, params.delimiters):
            if len(token) < params.min_id_length or is_denied(token, params):
                continue
            for enc, s in encode_variants(token):
                cand = CandidateId(s, (c.owner, c.name), enc, token)
                found.setdefault((s, cand.source_cookie), cand)
    return sorted(found.values())


class CandidateIndex:
    """Lookup from URL token to the candidate IDs it could be.

    An index built on top of ``base`` sees the base entries without copying them.
    """

    def __init__(self, params: SyncParams, base: "CandidateIndex | None" = None):
        self.params = params
        self.base = base
        self.by_token: dict[str, list[CandidateId]] = {}
        self._seen: set[tuple] = set()

    def _known(self, key: tuple) -> bool:
        return key in self._seen or (self.base is not None and self.base._known(key))

    def add(self, cookies: Iterable[CookieRecord]) -> None:
        for cand in extract_ids(cookies, params=self.params):
            key = (cand.value, cand.source_cookie)
            if self._known(key):
                continue
            self._seen.add(key)
            self.by_token.setdefault(cand.value, []).append(cand)

    def _get(self, token: str) -> list[CandidateId]:
        own = self.by_token.get(token, [])
        if self.base is None:
            return own
        inherited = self.base._get(token)
        return inherited + own if inherited else own

    def lookup(self, token: str) -> list[CandidateId]:
        hits = self._get(token)
        if not hits and _HEX.match(token):
            hits = self._get(token.lower())
        return hits


def url_tokens(url: str, delimiters: str = DEFAULT_DELIMITERS) -> list[tuple[str, str]]:
    """(location, token) pairs worth matching against candidate IDs."""
    parts = urlsplit(url)
    out = []
    for pair in parts.query.split("&") if parts.query else []:
        _, _, value = pair.partition("=")
        if not value:
            continue
        out.append(("query-param", value))
        decoded = unquote(value)
        if decoded != value:
            out.append(("query-param", decoded))
        for piece in split_value(decoded, delimiters):
            if piece != decoded:
                out.append(("query-param", piece))
    for seg in parts.path.split("/"):
        if not seg:
            continue
        out.append(("path-segment", seg))
        decoded = unquote(seg)
        if decoded != seg:
            out.append(("path-segment", decoded))
        for piece in split_value(decoded, delimiters):
            if piece != decoded:
                out.append(("path-segment", piece))
    return out


def _domain(url: str | None) -> str | None:
    if not url:
        return None
    host = urlsplit(url).hostname
    if not host:
        return None
    try:
        return registrable_domain(host)
    except DomainError:
        return None


def _scan(
    ev: HttpEvent, index: CandidateIndex, out: dict[tuple, SyncEvent]
) -> None:
    if ev.kind == "request":
        receiver = _domain(ev.url)
        carriers = [(ev.url, None)]
        if ev.referrer:
            carriers.append((ev.referrer, "referrer"))
        fixed_sender = None
    elif ev.kind == "redirect":
        receiver = _domain(ev.location)
        carriers = [(ev.location, None)]
        fixed_sender = _domain(ev.url)
    else:
        return
    if receiver is None or receiver == ev.site:
        return
    for carrier, loc_override in carriers:
        for location, token in url_tokens(carrier, index.params.delimiters):
            for cand in index.lookup(token):
                sender = fixed_sender or cand.source_cookie[0]
                if sender == receiver or cand.source_cookie[0] == receiver:
                    continue
                event = SyncEvent(
                    id=cand, sender=sender, receiver=receiver, carrier_url=carrier,
                    site=ev.site, visit_id=ev.visit_id,
                    match_location=loc_override or location, timestamp=ev.timestamp,
                )
                out.setdefault(event.key(), event)


def detect_syncs(
    log: CrawlLog, jar: Sequence[CookieRecord] = (), params: SyncParams | None = None
) -> list[SyncEvent]:
    """Find cookie IDs that reach a third party other than the one that set them.

    ``jar`` holds cookies the browser carried into every visit (a persona
    archive); cookies seen in a visit join the candidate pool once their
    timestamp is reached. Visits are independent of each other.
    """
    params = params or SyncParams()
    base = CandidateIndex(params)
    base.add(jar)
    cookies = log.cookies_by_visit()
    found: dict[tuple, SyncEvent] = {}
    for vid, events in sorted(log.events_by_visit().items()):
        index = CandidateIndex(params, base)
        pending = sorted(cookies.get(vid, []), key=lambda c: c.timestamp)
        i = 0
        for ev in sorted(events, key=lambda e: e.timestamp):
            j = i
            while j < len(pending) and pending[j].timestamp <= ev.timestamp:
                j += 1
            if j > i:
                index.add(pending[i:j])
                i = j
            _scan(ev, index, found)
    return sorted(found.values(), key=lambda e: (e.visit_id, e.timestamp, e.carrier_url, e.key()))


@dataclass(frozen=True)
class SyncRate:
    rows: list[dict]                      # one per (persona, lean, run, site)
    summary: dict[tuple[str, str], dict]  # (persona, lean) -> mean per-site counts
    lean_means: dict[str, float]


def sync_rate(events: Iterable[SyncEvent], crawls: CrawlSet | Iterable[CrawlLog]) -> SyncRate:
    """Per-site sync counts for every crawl, raw and per third-party request."""
    crawls = crawls if isinstance(crawls, CrawlSet) else CrawlSet.of(crawls)
    per_visit: dict[str, int] = defaultdict(int)
    for e in events:
        per_visit[e.visit_id] += 1
    rows = []
    for lg in crawls:
        tp_requests: dict[str, int] = defaultdict(int)
        for ev in lg.events:
            if ev.kind == "request" and _domain(ev.url) not in (None, ev.site):
                tp_requests[ev.visit_id] += 1
        for v in lg.visits:
            lean = v.lean if v.lean != "none" else lg.lean
            n = per_visit.get(v.visit_id, 0)
            tp = tp_requests.get(v.visit_id, 0)
            rows.append({
                "persona": lg.persona_label, "lean": lean, "run": lg.run_index,
                "site": v.site, "syncs": n, "third_party_requests": tp,
                "syncs_per_request": n / tp if tp else 0.0,
            })
    groups: dict[tuple[str, str], list[dict]] = defaultdict(list)
    by_lean: dict[str, list[int]] = defaultdict(list)
    for r in rows:
        groups[(r["persona"], r["lean"])].append(r)
        by_lean[r["lean"]].append(r["syncs"])
    summary = {
        key: {
            "visits": len(rs),
            "mean_syncs": sum(r["syncs"] for r in rs) / len(rs),
            "mean_syncs_per_request": sum(r["syncs_per_request"] for r in rs) / len(rs),
        }
        for key, rs in sorted(groups.items())
    }
    lean_means = {lean: sum(v) / len(v) for lean, v in sorted(by_lean.items())}
    return SyncRate(rows, summary, lean_means)
