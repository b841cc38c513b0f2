import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special, stats as sps

from trackaudit.stats import (
    EmpiricalDistribution,
    StatsError,
    bucket_labels,
    kolmogorov_sf,
    ks_statistic,
    ks_two_sample,
    pairwise_ks_matrix,
    percent_delta,
    rank_bucket,
    rank_buckets,
)


def brute_force_ks(a, b):
    best = 0.0
    for x in list(a) + list(b):
        fa = sum(v <= x for v in a) / len(a)
        fb = sum(v <= x for v in b) / len(b)
        best = max(best, abs(fa - fb))
    return best


samples = st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=60)


def test_identical_samples():
    r = ks_two_sample([1, 2, 3], [1, 2, 3])
    assert r.statistic == 0.0 and r.p_value == 1.0


def test_disjoint_supports():
    assert ks_two_sample([1, 2, 3], [10, 20, 30]).statistic == 1.0


def test_empty_sample_rejected():
    with pytest.raises(StatsError):
        ks_two_sample([], [1.0])


def test_matches_brute_force_on_random_pairs():
    rng = random.Random(2)
    for _ in range(50):
        a = [round(rng.gauss(0, 1), 2) for _ in range(100)]
        b = [round(rng.gauss(0.2, 1.3), 2) for _ in range(100)]
        assert abs(ks_statistic(a, b) - brute_force_ks(a, b)) <= 1e-12


def test_agrees_with_scipy_statistic_and_asymptotic_pvalue():
    rng = np.random.default_rng(8)
    for n1, n2 in [(30, 45), (100, 100), (164, 392), (7, 500)]:
        a, b = rng.normal(size=n1), rng.normal(0.3, size=n2)
        r = ks_two_sample(a, b)
        assert r.statistic == pytest.approx(sps.ks_2samp(a, b).statistic, abs=1e-12)
        lam = math.sqrt(n1 * n2 / (n1 + n2)) * r.statistic
        assert r.p_value == pytest.approx(special.kolmogorov(lam), abs=1e-10)
        assert (r.n1, r.n2) == (n1, n2)


@pytest.mark.parametrize("lam", [0.05, 0.3, 0.7, 0.99, 1.0, 1.5, 3.0])
def test_kolmogorov_series_against_scipy(lam):
    assert kolmogorov_sf(lam) == pytest.approx(special.kolmogorov(lam), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(samples, samples)
def test_symmetric_and_bounded(a, b):
    r1, r2 = ks_two_sample(a, b), ks_two_sample(b, a)
    assert r1.statistic == r2.statistic
    assert 0.0 <= r1.statistic <= 1.0 and 0.0 <= r1.p_value <= 1.0


@settings(max_examples=100, deadline=None)
@given(samples, samples)
def test_invariant_under_increasing_transform(a, b):
    f = lambda xs: [math.atan(x / 1e5) * 3 + 7 for x in xs]  # noqa: E731
    # strictly increasing up to float rounding; skip collapsing cases
    if len(set(f(a + b))) != len(set(a + b)):
        return
    assert ks_statistic(a, b) == ks_statistic(f(a), f(b))


@settings(max_examples=50, deadline=None)
@given(samples)
def test_ecdf_monotone_right_continuous(xs):
    e = EmpiricalDistribution(xs)
    grid = sorted(set(xs))
    vals = e(grid)
    assert np.all(np.diff(vals) > 0)
    assert vals[-1] == 1.0
    assert e(grid[0] - 1) == 0.0
    assert e(grid[0]) == pytest.approx(sum(x == grid[0] for x in xs) / len(xs))


def test_ecdf_steps():
    assert EmpiricalDistribution([3, 1, 1, 2]).steps() == [(1.0, 0.5), (2.0, 0.75), (3.0, 1.0)]


def test_matrix_identical_groups():
    m = pairwise_ks_matrix({"a": [1, 2, 3], "b": [1, 2, 3]})
    assert m.statistic[0, 1] == 0.0 and not m.significant[0, 1]


def test_matrix_shape_symmetry_and_mask():
    rng = np.random.default_rng(1)
    labels = [f"{lean}:{p}" for lean in "LR" for p in ("baseline", "Y", "S", "W", "M", "YW", "YM", "SW", "SM")]
    groups = {lab: rng.normal(i % 3, size=40) for i, lab in enumerate(labels)}
    m = pairwise_ks_matrix(groups)
    assert m.statistic.shape == (18, 18)
    assert np.array_equal(m.statistic, m.statistic.T)
    assert np.all(np.diag(m.statistic) == 0)
    assert np.array_equal(m.significant, m.p_value < 0.01)
    assert m.significant.any() and not m.significant.all()


def test_matrix_errors():
    with pytest.raises(StatsError):
        pairwise_ks_matrix({"a": [1]})
    with pytest.raises(StatsError, match="'R:Y'"):
        pairwise_ks_matrix({"L:Y": [1.0], "R:Y": []})


@pytest.mark.parametrize("p,b,want", [(115, 100, 15.0), (7, 7, 0.0), (95, 100, -5.0)])
def test_percent_delta(p, b, want):
    assert percent_delta(p, b) == pytest.approx(want)


def test_percent_delta_zero_baseline():
    with pytest.raises(StatsError):
        percent_delta(3, 0)


def test_all_unranked():
    out = rank_buckets({"a.com": 1.0, "b.com": 2.0}, {})
    assert list(out) == ["unranked"]
    assert out["unranked"]["all"]["median"] == 1.5


def test_default_edges_five_buckets():
    assert bucket_labels() == ["1-10K", "10K-100K", "100K-1M", ">1M", "unranked"]
    ranks = {"a": 5, "b": 50_000, "c": 500_000, "d": 5_000_000, "e": None}
    out = rank_buckets({s: 1.0 for s in ranks}, ranks)
    assert list(out) == bucket_labels()


def test_bucket_boundaries():
    assert rank_bucket(10_000) == "1-10K"
    assert rank_bucket(10_001) == "10K-100K"
    assert rank_bucket(1_000_001) == ">1M"


def test_bad_edges():
    with pytest.raises(StatsError):
        rank_buckets({"a": 1.0}, {"a": 3}, edges=(100, 50))


def test_split_by_lean():
    out = rank_buckets({"a": 1.0, "b": 3.0}, {"a": 10, "b": 20}, {"a": "left", "b": "right"})
    assert set(out["1-10K"]) == {"left", "right"}


def test_planted_rank_trend_is_monotone():
    from trackaudit import simweb
    from trackaudit.crawllog import cookie_count
    from conftest import tiny_config

    cfg = tiny_config(
        sites={"left": 200, "right": 200},
        cookies={"mean": 40.0, "dispersion": 4.0, "lean_multiplier": {"left": 1.0, "right": 1.2}},
        ranks={"unranked_fraction": 0.15, "unranked_multiplier": 0.3,
               "buckets": [[1, 10000, 2.0], [10001, 100000, 1.4], [100001, 1000000, 1.0],
                           [1000001, 10000000, 0.6]]},
    )
    web, _ = simweb.generate(cfg)
    base = simweb.build_personas(web, ["baseline"])["baseline"]
    log = simweb.simulate_crawl(web, base, 1)
    values = {s: cookie_count(log, s) for s in log.sites()}
    ranks = {v.site: v.rank for v in log.visits}
    leans = {v.site: v.lean for v in log.visits}
    out = rank_buckets(values, ranks, leans)
    assert list(out) == bucket_labels()
    for lean in ("left", "right"):
        meds = [out[b][lean]["median"] for b in bucket_labels()]
        assert all(x > y for x, y in zip(meds, meds[1:])), meds
