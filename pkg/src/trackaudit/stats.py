"""Differential statistics: ECDFs, two-sample KS tests, deltas vs baseline, rank buckets."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

KS_SERIES_TERMS = 100
DEFAULT_ALPHA = 0.01
DEFAULT_RANK_EDGES = (10_000, 100_000, 1_000_000)


class StatsError(ValueError):
    pass


class EmpiricalDistribution:
    """Right-continuous step ECDF over a finite sample."""

    def __init__(self, samples: Sequence[float]):
        self.samples = np.sort(np.asarray(samples, dtype=float))
        self.n = len(self.samples)

    def __call__(self, x):
        if self.n == 0:
            raise StatsError("empty sample")
        return np.searchsorted(self.samples, x, side="right") / self.n

    def steps(self) -> list[tuple[float, float]]:
        """(value, F(value)) at each distinct sample value."""
        values, counts = np.unique(self.samples, return_counts=True)
        cum = np.cumsum(counts) / self.n
        return list(zip(values.tolist(), cum.tolist()))

    def quantile(self, q: float) -> float:
        return float(np.quantile(self.samples, q))


@dataclass(frozen=True)
class KsResult:
    statistic: float
    p_value: float
    n1: int
    n2: int


def kolmogorov_sf(lam: float, terms: int = KS_SERIES_TERMS) -> float:
    """Survival function of the Kolmogorov distribution, P(K > lam).

    Uses the alternating series for lam >= 1 and the equivalent Jacobi-theta
    form below that, where the alternating series converges too slowly.
    """
    if lam <= 0:
        return 1.0
    if lam >= 1.0:
        s = 0.0
        for j in range(1, terms + 1):
            s += (-1) ** (j - 1) * math.exp(-2.0 * j * j * lam * lam)
        p = 2.0 * s
    else:
        s = 0.0
        for j in range(1, terms + 1):
            s += math.exp(-((2 * j - 1) ** 2) * math.pi ** 2 / (8.0 * lam * lam))
        p = 1.0 - math.sqrt(2.0 * math.pi) / lam * s
    return min(1.0, max(0.0, p))


def ks_statistic(a: Sequence[float], b: Sequence[float]) -> float:
    x = np.sort(np.asarray(a, dtype=float))
    y = np.sort(np.asarray(b, dtype=float))
    if len(x) == 0 or len(y) == 0:
        raise StatsError("KS test needs two non-empty samples")
    grid = np.concatenate([x, y])
    fx = np.searchsorted(x, grid, side="right") / len(x)
    fy = np.searchsorted(y, grid, side="right") / len(y)
    return float(np.max(np.abs(fx - fy)))


def ks_two_sample(a: Sequence[float], b: Sequence[float]) -> KsResult:
    """Two-sided two-sample KS test with the asymptotic p-value."""
    d = ks_statistic(a, b)
    n1, n2 = len(a), len(b)
    en = n1 * n2 / (n1 + n2)
    return KsResult(d, kolmogorov_sf(math.sqrt(en) * d), n1, n2)


@dataclass(frozen=True)
class KsMatrix:
    labels: tuple[str, ...]
    statistic: np.ndarray
    p_value: np.ndarray
    significant: np.ndarray
    alpha: float


def pairwise_ks_matrix(groups: Mapping[str, Sequence[float]], alpha: float = DEFAULT_ALPHA) -> KsMatrix:
    if len(groups) < 2:
        raise StatsError("need at least two groups")
    for label, samples in groups.items():
        if len(samples) == 0:
            raise StatsError(f"group {label!r} is empty")
    labels = tuple(groups)
    n = len(labels)
    stat = np.zeros((n, n))
    pval = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            r = ks_two_sample(groups[labels[i]], groups[labels[j]])
            stat[i, j] = stat[j, i] = r.statistic
            pval[i, j] = pval[j, i] = r.p_value
    return KsMatrix(labels, stat, pval, pval < alpha, alpha)


def percent_delta(persona_value: float, baseline_value: float) -> float:
    if baseline_value <= 0:
        raise StatsError("baseline value must be positive")
    return 100.0 * (persona_value - baseline_value) / baseline_value


def summarize(values: Sequence[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=float)
    q1, med, q3 = np.quantile(arr, [0.25, 0.5, 0.75])
    return {"n": int(arr.size), "mean": float(arr.mean()), "q1": float(q1),
            "median": float(med), "q3": float(q3)}


def _fmt_rank(r: int) -> str:
    if r >= 1_000_000 and r % 1_000_000 == 0:
        return f"{r // 1_000_000}M"
    if r >= 1000 and r % 1000 == 0:
        return f"{r // 1000}K"
    return str(r)


def bucket_labels(edges: Sequence[int] = DEFAULT_RANK_EDGES) -> list[str]:
    labels, lo = [], 1
    for e in edges:
        labels.append(f"{_fmt_rank(lo)}-{_fmt_rank(e)}")
        lo = e
    labels.append(f">{_fmt_rank(lo)}")
    labels.append("unranked")
    return labels


def rank_bucket(rank: int | None, edges: Sequence[int] = DEFAULT_RANK_EDGES) -> str:
    labels = bucket_labels(edges)
    if rank is None:
        return "unranked"
    for label, e in zip(labels, edges):
        if rank <= e:
            return label
    return labels[len(edges)]


def rank_buckets(
    values: Mapping[str, float],
    ranks: Mapping[str, int | None],
    leans: Mapping[str, str] | None = None,
    edges: Sequence[int] = DEFAULT_RANK_EDGES,
) -> dict[str, dict[str, dict[str, float]]]:
    """Median and quartiles of per-site values per rank bucket and lean.

    Sites without a rank form the "unranked" bucket. Buckets with no sites
    are left out. Rank ``r`` falls in the first bucket whose upper edge is >= r.
    """
    if any(b <= a for a, b in zip(edges, edges[1:])) or (edges and edges[0] < 1):
        raise StatsError("bucket edges must be positive and strictly increasing")
    leans = leans or {}
    grouped: dict[str, dict[str, list[float]]] = {}
    for site in sorted(values):
        b = rank_bucket(ranks.get(site), edges)
        grouped.setdefault(b, {}).setdefault(leans.get(site, "all"), []).append(values[site])
    order = bucket_labels(edges)
    return {
        b: {lean: summarize(v) for lean, v in sorted(grouped[b].items())}
        for b in order if b in grouped
    }
