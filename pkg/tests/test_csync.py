import base64
import hashlib
import random
import string
from urllib.parse import quote

import pytest
from hypothesis import given, settings, strategies as st

from trackaudit.crawllog import CookieRecord, CrawlLog, HttpEvent, Visit
from trackaudit.csync import (
    SyncParams,
    detect_syncs,
    encode_variants,
    extract_ids,
    sync_rate,
)

SITE = "news.com"
VID = "p-r1-news.com"


def cookie(owner, value, name="uid", ts=1):
    return CookieRecord(owner, name, value, "script", VID, SITE, ts)


def req(url, ts=10, referrer=None):
    return HttpEvent("request", url, VID, SITE, ts, referrer=referrer)


def one_visit(events, cookies=()):
    return CrawlLog("p", "left", 1, (Visit(VID, SITE, "left"),), tuple(events), tuple(cookies))


def truth_keys(truth):
    return {(s["visit_id"], s["sender"], s["receiver"], s["id"]) for s in truth.syncs}


def found_keys(events):
    return {(e.visit_id, e.sender, e.receiver, e.id.raw) for e in events}


# extract_ids

def test_delimiter_split_yields_plain_candidate():
    cands = extract_ids([cookie("a.com", "uid=ABCD1234EFGH5678")], 10)
    plain = [c for c in cands if c.encoding == "plain"]
    assert [c.value for c in plain] == ["ABCD1234EFGH5678"]


@pytest.mark.parametrize("value", ["en-US", "true", "false", "1543622400123", "short", "null"])
def test_trivial_values_give_no_candidates(value):
    assert extract_ids([cookie("a.com", value)], 8) == []


def test_denylist_is_configurable():
    params = SyncParams(min_id_length=8, denylist=frozenset({"abcdefghijk"}))
    assert extract_ids([cookie("a.com", "ABCDEFGHIJK")], params=params) == []


def test_min_id_length_floor():
    with pytest.raises(ValueError):
        SyncParams(min_id_length=7)


def test_recovers_100_planted_ids():
    rng = random.Random(11)
    alphabet = string.ascii_letters + string.digits
    planted, jar = set(), []
    wrappers = ["{}", "uid={}", "{}|t=1543622400", "v=1&id={}&x=ab", "GA1:{}", "a,{};b"]
    for i in range(100):
        ident = "".join(rng.choice(alphabet) for _ in range(16))
        planted.add(ident)
        jar.append(cookie(f"t{i}.com", wrappers[i % len(wrappers)].format(ident), name=f"c{i}"))
        jar.append(cookie(f"t{i}.com", "en-US", name=f"lang{i}"))
    got = {c.raw for c in extract_ids(jar, 10)}
    assert planted <= got
    assert not got - planted - {"1543622400"}


def test_encoding_variants_are_the_standard_transforms():
    raw = "ab/cd+ef=gh12"
    forms = dict((s, enc) for enc, s in encode_variants(raw))
    assert forms[raw] == "plain"
    assert forms[quote(raw, safe="")] == "url-encoded"
    assert forms[base64.b64encode(raw.encode()).decode()] == "base64"
    assert forms[base64.b64encode(raw.encode()).decode().rstrip("=")] == "base64"
    assert forms[hashlib.md5(raw.encode()).hexdigest()] == "md5-hex"
    assert forms[hashlib.sha1(raw.encode()).hexdigest()] == "sha1-hex"


# detect_syncs

def test_no_third_party_requests_no_events():
    lg = one_visit([req(f"https://www.{SITE}/")], [cookie("tracker.com", "ZZZZ1234567890")])
    assert detect_syncs(lg) == []


def test_id_sent_back_to_setter_is_not_a_sync():
    ident = "ZZZZ1234567890ab"
    lg = one_visit([req(f"https://px.tracker.com/p?u={ident}")], [cookie("tracker.com", ident)])
    assert detect_syncs(lg) == []


def test_id_to_first_party_is_not_a_sync():
    ident = "ZZZZ1234567890ab"
    lg = one_visit([req(f"https://www.{SITE}/p?u={ident}")], [cookie("tracker.com", ident)])
    assert detect_syncs(lg) == []


@pytest.mark.parametrize("encoding", ["plain", "url-encoded", "base64", "md5-hex", "sha1-hex"])
def test_each_encoding_detected(encoding):
    ident = "Ab+c/d1234567890xyz"
    carried = {
        "plain": ident,
        "url-encoded": quote(ident, safe=""),
        "base64": base64.b64encode(ident.encode()).decode().rstrip("="),
        "md5-hex": hashlib.md5(ident.encode()).hexdigest().upper(),
        "sha1-hex": hashlib.sha1(ident.encode()).hexdigest(),
    }[encoding]
    if encoding == "plain":
        ident = "Abcd1234567890xyz"
        carried = ident
    lg = one_visit([req(f"https://match.partner.net/s?puid={carried}&n=1")], [cookie("tracker.com", ident)])
    [ev] = detect_syncs(lg)
    assert (ev.sender, ev.receiver, ev.id.raw) == ("tracker.com", "partner.net", ident)
    assert ev.id.encoding == encoding
    assert ev.match_location == "query-param"


def test_path_segment_match():
    ident = "Abcd1234567890xyz"
    lg = one_visit([req(f"https://partner.net/sync/{ident}/px.gif")], [cookie("tracker.com", ident)])
    [ev] = detect_syncs(lg)
    assert ev.match_location == "path-segment"


def test_cookie_set_after_request_is_not_used():
    ident = "Abcd1234567890xyz"
    lg = one_visit([req(f"https://partner.net/s?u={ident}", ts=5)], [cookie("tracker.com", ident, ts=9)])
    assert detect_syncs(lg) == []
    assert len(detect_syncs(lg, jar=[cookie("tracker.com", ident)])) == 1


def test_redirect_attributes_sender_and_receiver():
    ident = "Abcd1234567890xyz"
    target = f"https://match.partner.net/setuid?puid={ident}"
    start = "https://sync.redirector.com/r?dest=partner"
    events = [
        req(start, ts=10),
        HttpEvent("redirect", start, VID, SITE, 11, location=target),
    ]
    lg = one_visit(events, [cookie("tracker.com", ident)])
    [ev] = detect_syncs(lg)
    assert (ev.sender, ev.receiver, ev.carrier_url) == ("redirector.com", "partner.net", target)


def test_one_event_per_id_sender_receiver_url():
    ident = "Abcd1234567890xyz"
    url = f"https://partner.net/s?a={ident}&b={ident}"
    lg = one_visit([req(url, ts=10), req(url, ts=12)], [cookie("tracker.com", ident)])
    assert len(detect_syncs(lg)) == 1


def test_events_are_order_independent_and_closed(tiny_crawls, tiny_personas):
    for log, _ in tiny_crawls[:4]:
        jar = tiny_personas[log.persona_label].jar
        events = detect_syncs(log, jar)
        shuffled = CrawlLog(log.persona_label, log.lean, log.run_index, log.visits,
                            tuple(reversed(log.events)), tuple(reversed(log.cookies)))
        assert detect_syncs(shuffled, jar) == events
        by_visit = log.cookies_by_visit()
        for e in events:
            pool = list(jar) + by_visit.get(e.visit_id, [])
            assert e.id.raw in {c.raw for c in extract_ids(pool)}
            assert e.sender != e.receiver


def test_planted_chains_found_exactly(tiny_crawls, tiny_personas):
    truth_all, found_all = set(), set()
    for log, truth in tiny_crawls:
        truth_all |= truth_keys(truth)
        found_all |= found_keys(detect_syncs(log, tiny_personas[log.persona_label].jar))
    assert truth_all
    assert found_all == truth_all


_url_chars = string.ascii_letters + string.digits + "-_."


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.text(_url_chars, min_size=1, max_size=8),
                          st.text(_url_chars + "%/", min_size=0, max_size=40)), min_size=1, max_size=5))
def test_random_urls_without_ids_give_no_events(pairs):
    ident = "QQQQ9999ZZZZ8888"
    query = "&".join(f"{k}={v}" for k, v in pairs)
    url = f"https://fuzz.example.org/{pairs[0][1]}?{query}"
    forms = {s for _, s in encode_variants(ident)}
    if any(f in url or f.lower() in url.lower() for f in forms):
        return
    lg = one_visit([req(url)], [cookie("tracker.com", ident)])
    assert detect_syncs(lg) == []


# sync_rate

def test_zero_events_zero_rates(tiny_crawls):
    logs = [lg for lg, _ in tiny_crawls]
    rate = sync_rate([], logs)
    assert all(r["syncs"] == 0 and r["syncs_per_request"] == 0.0 for r in rate.rows)
    assert set(rate.lean_means.values()) == {0.0}


def test_single_site_three_events():
    ids = ["Abcd1234567890xy1", "Abcd1234567890xy2", "Abcd1234567890xy3"]
    lg = one_visit([req(f"https://partner.net/s?u={i}", ts=10 + n) for n, i in enumerate(ids)],
                   [cookie("tracker.com", i, name=f"c{n}") for n, i in enumerate(ids)])
    rate = sync_rate(detect_syncs(lg), [lg])
    [row] = rate.rows
    assert row["syncs"] == 3
    assert row["third_party_requests"] == 3
    assert row["syncs_per_request"] == 1.0
