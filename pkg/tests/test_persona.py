import pytest
from hypothesis import given, settings, strategies as st

from trackaudit import simweb
from trackaudit.crawllog import CookieRecord, CrawlLog, Visit
from trackaudit.persona import (
    DemographicSpec,
    MissingCrawl,
    Persona,
    PersonaError,
    baseline_persona,
    build_persona,
    demographics_for,
    dumps_archive,
    growth_curve,
    label_for,
    load_archive,
    load_archives,
    loads_archive,
    maturity,
    maturity_point,
    merge_compound,
    save_archive,
)
from conftest import tiny_config


def site_log(site, owners, feature="woman"):
    vid = f"b-{site}"
    cookies = [CookieRecord(site, "sid", "s" * 12, "header", vid, site, 1)]
    cookies += [CookieRecord(o, "uid", f"{o}-id", "script", vid, site, 2 + i) for i, o in enumerate(owners)]
    return CrawlLog("build", "none", 1, (Visit(vid, site),), (), tuple(cookies))


def demo_web(feature, n_sites, per_site, pool, shared=0.0, seed=11):
    cfg = tiny_config(
        seed=seed,
        personas={"demographics": {feature: {"n_sites": n_sites, "third_parties_per_site": per_site,
                                             "pool_size": pool, "shared_fraction": shared}},
                  "response": {}, "crawl": ["baseline", simweb.FEATURE_INITIAL[feature]]},
    )
    return simweb.generate(cfg)


def build_from_web(web, feature, **kw):
    spec = DemographicSpec(feature, web.demographic_sites[feature])
    crawls = {s: simweb.simulate_building_crawl(web, feature, s) for s in spec.site_list}
    return spec, crawls, build_persona(spec, crawls, **kw)


def test_labels():
    assert label_for({"senior", "woman"}) == "SW"
    assert label_for({"man", "young"}) == "YM"
    assert label_for(set()) == "baseline"
    assert demographics_for("SW") == {"senior", "woman"}


def test_empty_spec_rejected():
    with pytest.raises(PersonaError):
        DemographicSpec("woman", ())


def test_duplicate_sites_rejected():
    with pytest.raises(PersonaError):
        DemographicSpec("woman", ("a.com", "a.com"))


def test_missing_crawl_names_site():
    spec = DemographicSpec("woman", ("a.com", "b.com"))
    with pytest.raises(MissingCrawl) as err:
        build_persona(spec, {"a.com": site_log("a.com", ["t1.com"])})
    assert "b.com" in str(err.value)


def test_baseline():
    p = baseline_persona()
    assert p.jar == () and p.history == () and not p.matured
    with pytest.raises(PersonaError):
        Persona("baseline", jar=(CookieRecord("a.com", "n", "v", "script", "v", "a.com", 1),))


def test_persona_invariants():
    with pytest.raises(PersonaError):
        Persona("YS", frozenset({"young", "senior"}))
    with pytest.raises(PersonaError):
        Persona("X", frozenset({"young", "woman", "man"}))


def _jar(n_owners, site="hpw.com"):
    return tuple(CookieRecord(f"t{i}.com", "id", "v", "script", "v1", site, i) for i in range(n_owners))


@pytest.mark.parametrize("n,expected", [(49, False), (50, True)])
def test_maturity_boundary(n, expected):
    p = Persona("W", frozenset({"woman"}), _jar(n), ("hpw.com",))
    assert maturity(p) is expected


def test_first_party_owners_do_not_count():
    sites = tuple(f"s{i}.com" for i in range(200))
    jar = tuple(CookieRecord(s, "id", "v", "script", "v", s, 1) for s in sites)
    p = Persona("W", frozenset({"woman"}), jar, sites)
    assert maturity(p) is False


def test_maturity_threshold_parameter():
    p = Persona("W", frozenset({"woman"}), _jar(10), ("hpw.com",))
    assert maturity(p, threshold=10) and not maturity(p, threshold=11)


def test_growth_single_and_flat():
    spec = DemographicSpec("woman", ("a.com",))
    owners = [f"t{i}.com" for i in range(7)]
    assert growth_curve(spec, {"a.com": site_log("a.com", owners)}) == [(1, 7)]
    spec2 = DemographicSpec("woman", ("a.com", "b.com"))
    crawls = {"a.com": site_log("a.com", owners), "b.com": site_log("b.com", owners)}
    assert growth_curve(spec2, crawls) == [(1, 7), (2, 7)]


def test_woman_jar_matches_set_union_oracle():
    web, manifest = demo_web("woman", n_sites=10, per_site=12, pool=30, shared=0.3)
    layout = manifest.demographic_third_parties["woman"]
    # pairs of sites drawing 12 of 30 share 40% of their third parties on average
    sites = list(layout)
    pair_overlap = [len(set(layout[a]) & set(layout[b])) / 12 for i, a in enumerate(sites) for b in sites[i + 1:]]
    assert 0.3 < sum(pair_overlap) / len(pair_overlap) < 0.5
    spec, crawls, p = build_from_web(web, "woman")
    oracle = set().union(*map(set, layout.values())) - set(sites)
    assert p.third_party_owners() == oracle
    assert growth_curve(spec, crawls)[-1][1] == len(oracle)


def test_youth_curve_plateaus_below_100():
    web, manifest = demo_web("young", n_sites=20, per_site=14, pool=90)
    spec, crawls, _ = build_from_web(web, "young")
    curve = growth_curve(spec, crawls)
    values = [n for _, n in curve]
    assert values == sorted(values)
    assert values[-1] < 100
    assert values[-1] <= 90  # bounded by the demographic's tracker pool
    assert values[-1] - values[-6] < (values[4] - 0) / 3  # late visits add little


@settings(max_examples=40, deadline=None)
@given(st.randoms(use_true_random=False))
def test_order_insensitive_owner_set(rnd):
    web, _ = demo_web("man", n_sites=8, per_site=10, pool=40)
    spec, crawls, p = build_from_web(web, "man")
    order = list(spec.site_list)
    rnd.shuffle(order)
    q = build_persona(spec, crawls, order=order)
    assert q.third_party_owners() == p.third_party_owners()
    assert q.history == tuple(order)
    curve = growth_curve(spec, crawls, order=order)
    assert all(a[1] <= b[1] for a, b in zip(curve, curve[1:]))


def test_merge_compound():
    web, _ = simweb.generate(tiny_config())
    s = build_from_web(web, "young")[2]
    w = build_from_web(web, "woman")[2]
    yw = merge_compound(s, w, seed=5)
    assert yw.label == "YW" and yw.demographics == {"young", "woman"}
    assert sorted(yw.history) == sorted(s.history + w.history)
    # each persona's own visit order survives the interleave
    assert [h for h in yw.history if h in s.history] == list(s.history)
    assert [h for h in yw.history if h in w.history] == list(w.history)
    assert sorted(yw.jar, key=repr) == sorted(s.jar + w.jar, key=repr)
    assert merge_compound(s, w, seed=5) == yw
    with pytest.raises(PersonaError):
        merge_compound(s, baseline_persona(), seed=1)
    with pytest.raises(PersonaError):
        merge_compound(w, w, seed=1)


def test_merge_same_axis_rejected():
    web, _ = simweb.generate(tiny_config(personas={
        "demographics": {f: {"n_sites": 3, "third_parties_per_site": 4, "pool_size": 10}
                         for f in ("young", "senior")},
        "response": {}, "crawl": ["baseline"]}))
    y = build_from_web(web, "young")[2]
    s = build_from_web(web, "senior")[2]
    with pytest.raises(PersonaError):
        merge_compound(y, s, seed=0)


def test_archive_round_trip(tmp_path, tiny_personas):
    for label, p in tiny_personas.items():
        data = dumps_archive(p)
        q = loads_archive(data)
        assert q == p and dumps_archive(q) == data
        save_archive(p, tmp_path / f"{label}.json")
        assert load_archive(tmp_path / f"{label}.json") == p
    assert set(load_archives(tmp_path)) == set(tiny_personas)


def test_archive_version_checked():
    with pytest.raises(PersonaError):
        loads_archive('{"format_version": 99}')


def test_browser_state_last_observation_wins():
    jar = (CookieRecord("t.com", "uid", "old", "script", "v1", "a.com", 1),
           CookieRecord("t.com", "uid", "new", "script", "v2", "b.com", 2))
    p = Persona("W", frozenset({"woman"}), jar, ("a.com", "b.com"))
    assert p.browser_state() == {("t.com", "uid"): "new"}


def test_maturity_point():
    assert maturity_point([(1, 20), (2, 49), (3, 50), (4, 70)]) == 3
    assert maturity_point([(1, 20)]) is None
