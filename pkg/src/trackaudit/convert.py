"""Converter between canonical logs and a table-per-type SQLite layout.

The layout follows the OpenWPM instrument tables (``site_visits``,
``http_requests``, ``http_responses``, ``http_redirects``,
``javascript_cookies``, ``profile_cookies``) plus a one-row ``crawl`` table
holding the persona label, lean and run index. Rows across the event tables
(and across the two cookie tables) are ordered by ``(time_stamp, id)``.
"""

from __future__ import annotations

import json
import sqlite3
from pathlib import Path
from urllib.parse import urlsplit

from .crawllog import CookieRecord, CrawlLog, HttpEvent, Visit
from .psl import registrable_domain

SCHEMA = """
CREATE TABLE crawl (persona_label TEXT NOT NULL, lean TEXT NOT NULL, run_index INTEGER NOT NULL);
CREATE TABLE site_visits (visit_id TEXT PRIMARY KEY, site_url TEXT NOT NULL, site_rank INTEGER, lean TEXT);
CREATE TABLE http_requests (id INTEGER PRIMARY KEY, visit_id TEXT, url TEXT, top_level_url TEXT,
    referrer TEXT, headers TEXT, time_stamp INTEGER);
CREATE TABLE http_responses (id INTEGER PRIMARY KEY, visit_id TEXT, url TEXT, referrer TEXT,
    location TEXT, headers TEXT, time_stamp INTEGER);
CREATE TABLE http_redirects (id INTEGER PRIMARY KEY, visit_id TEXT, old_request_url TEXT,
    new_request_url TEXT, referrer TEXT, headers TEXT, time_stamp INTEGER);
CREATE TABLE javascript_cookies (id INTEGER PRIMARY KEY, visit_id TEXT, host TEXT, name TEXT,
    value TEXT, time_stamp INTEGER);
CREATE TABLE profile_cookies (id INTEGER PRIMARY KEY, visit_id TEXT, baseDomain TEXT, host TEXT,
    name TEXT, value TEXT, creationTime INTEGER);
"""


def write_sqlite(crawl: CrawlLog, path: str | Path) -> None:
    path = Path(path)
    if path.exists():
        path.unlink()
    con = sqlite3.connect(path)
    try:
        con.executescript(SCHEMA)
        con.execute("INSERT INTO crawl VALUES (?, ?, ?)",
                    (crawl.persona_label, crawl.lean, crawl.run_index))
        con.executemany(
            "INSERT INTO site_visits VALUES (?, ?, ?, ?)",
            [(v.visit_id, f"https://{v.site}/", v.rank, v.lean) for v in crawl.visits],
        )
        sites = {v.visit_id: v.site for v in crawl.visits}
        for i, ev in enumerate(crawl.events, start=1):
            headers = json.dumps([list(h) for h in ev.headers])
            if ev.kind == "request":
                top = f"https://{sites.get(ev.visit_id, ev.site)}/"
                con.execute("INSERT INTO http_requests VALUES (?, ?, ?, ?, ?, ?, ?)",
                            (i, ev.visit_id, ev.url, top, ev.referrer, headers, ev.timestamp))
            elif ev.kind == "response":
                con.execute("INSERT INTO http_responses VALUES (?, ?, ?, ?, ?, ?, ?)",
                            (i, ev.visit_id, ev.url, ev.referrer, ev.location, headers, ev.timestamp))
            else:
                con.execute("INSERT INTO http_redirects VALUES (?, ?, ?, ?, ?, ?, ?)",
                            (i, ev.visit_id, ev.url, ev.location, ev.referrer, headers, ev.timestamp))
        for i, c in enumerate(crawl.cookies, start=1):
            if c.source == "script":
                con.execute("INSERT INTO javascript_cookies VALUES (?, ?, ?, ?, ?, ?)",
                            (i, c.visit_id, c.owner, c.name, c.value, c.timestamp))
            else:
                con.execute("INSERT INTO profile_cookies VALUES (?, ?, ?, ?, ?, ?, ?)",
                            (i, c.visit_id, c.owner, c.owner, c.name, c.value, c.timestamp))
        con.commit()
    finally:
        con.close()


def _host_domain(host: str) -> str:
    return registrable_domain(host.lstrip("."))


def _site_of(url: str) -> str:
    return registrable_domain(urlsplit(url).hostname or url)


def read_sqlite(path: str | Path) -> CrawlLog:
    """Import a table-layout crawl database as a CrawlLog."""
    con = sqlite3.connect(f"file:{Path(path)}?mode=ro", uri=True)
    try:
        tables = {r[0] for r in con.execute("SELECT name FROM sqlite_master WHERE type='table'")}
        header = ("unknown", "none", 1)
        if "crawl" in tables:
            row = con.execute("SELECT persona_label, lean, run_index FROM crawl LIMIT 1").fetchone()
            if row:
                header = (row[0], row[1] or "none", int(row[2]))
        visits = []
        for vid, site_url, rank, lean in con.execute(
            "SELECT visit_id, site_url, site_rank, lean FROM site_visits ORDER BY rowid"
        ):
            visits.append(Visit(str(vid), _site_of(site_url), lean or "none",
                                int(rank) if rank is not None else None))
        site_of_visit = {v.visit_id: v.site for v in visits}

        rows = []
        if "http_requests" in tables:
            for i, vid, url, ref, hdr, ts in con.execute(
                "SELECT id, visit_id, url, referrer, headers, time_stamp FROM http_requests"
            ):
                rows.append((ts, i, "request", str(vid), url, ref, None, hdr))
        if "http_responses" in tables:
            for i, vid, url, ref, loc, hdr, ts in con.execute(
                "SELECT id, visit_id, url, referrer, location, headers, time_stamp FROM http_responses"
            ):
                rows.append((ts, i, "response", str(vid), url, ref, loc, hdr))
        if "http_redirects" in tables:
            for i, vid, old, new, ref, hdr, ts in con.execute(
                "SELECT id, visit_id, old_request_url, new_request_url, referrer, headers, time_stamp "
                "FROM http_redirects"
            ):
                rows.append((ts, i, "redirect", str(vid), old, ref, new, hdr))
        rows.sort(key=lambda r: (r[0], r[1]))
        events = tuple(
            HttpEvent(
                kind=kind, url=url, visit_id=vid, site=site_of_visit[vid], timestamp=int(ts),
                referrer=ref, location=loc,
                headers=tuple((str(n), str(v)) for n, v in json.loads(hdr or "[]")),
            )
            for ts, _, kind, vid, url, ref, loc, hdr in rows
        )

        crows = []
        if "javascript_cookies" in tables:
            for i, vid, host, name, value, ts in con.execute(
                "SELECT id, visit_id, host, name, value, time_stamp FROM javascript_cookies"
            ):
                crows.append((ts, i, "script", str(vid), host, name, value))
        if "profile_cookies" in tables:
            for i, vid, host, name, value, ts in con.execute(
                "SELECT id, visit_id, host, name, value, creationTime FROM profile_cookies"
            ):
                crows.append((ts, i, "header", str(vid), host, name, value))
        crows.sort(key=lambda r: (r[0], r[1]))
        cookies = tuple(
            CookieRecord(
                owner=_host_domain(host), name=name, value=value or "", source=src,
                visit_id=vid, site=site_of_visit[vid], timestamp=int(ts),
            )
            for ts, _, src, vid, host, name, value in crows
        )
    finally:
        con.close()
    return CrawlLog(
        persona_label=header[0], lean=header[1], run_index=header[2],
        visits=tuple(visits), events=events, cookies=cookies,
    )
