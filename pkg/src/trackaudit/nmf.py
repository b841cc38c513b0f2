"""Persona x domain cookie-profile matrices, multiplicative-update NMF and consensus model selection."""

from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.cluster.hierarchy import cophenet, fcluster, linkage
from scipy.spatial.distance import squareform

from .classify import CATEGORIES, BlockList, label_cookie
from .crawllog import CrawlLog, lean_tag
from .persona import STANDARD_LABELS

DENOM_EPS = 1e-9
VALUE_FLOOR = 1e-12
DEFAULT_RUNS = 50
DEFAULT_K_RANGE = (2, 10)
# model-selection scores closer than these count as ties
COPHENETIC_TIE = 1e-9
RESIDUAL_RTOL = 1e-6
RESIDUAL_ATOL = 1e-9
OBJECTIVE_ROUNDOFF = 64 * np.finfo(float).eps


class NmfError(ValueError):
    pass


class ObjectiveIncreased(AssertionError):
    pass


@dataclass(frozen=True)
class ProfileMatrix:
    A: np.ndarray
    row_labels: tuple[str, ...]
    col_labels: tuple[str, ...]
    cookie_type: str
    zero_rows: tuple[str, ...] = ()

    @property
    def t(self) -> int:
        return CATEGORIES.index(self.cookie_type) + 1

    def nonzero(self) -> "ProfileMatrix":
        """Drop all-zero rows (personas without cookies of this type)."""
        keep = [i for i, lab in enumerate(self.row_labels) if lab not in self.zero_rows]
        return ProfileMatrix(self.A[keep], tuple(self.row_labels[i] for i in keep),
                             self.col_labels, self.cookie_type, ())


def _row_sort_key(label: str):
    tag, _, persona = label.partition(":")
    rank = STANDARD_LABELS.index(persona) if persona in STANDARD_LABELS else len(STANDARD_LABELS)
    return (tag, rank, persona)


def normalize_rows(counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts, dtype=float)
    sums = counts.sum(axis=1, keepdims=True)
    out = np.zeros_like(counts)
    nz = sums[:, 0] > 0
    out[nz] = counts[nz] / sums[nz]
    return out


def build_profile_matrix(
    crawls: Iterable[CrawlLog], cookie_type: str, bl: BlockList, *, split_lean: bool = True
) -> ProfileMatrix:
    """Row-normalized share of each row's cookies injected by each domain.

    Rows are personas, tagged with the lean of the visited sites
    (``"L:Y"``, ``"R:SM"``) unless ``split_lean`` is false.
    """
    if cookie_type not in CATEGORIES:
        raise NmfError(f"unknown cookie type {cookie_type!r}")
    counts: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    rows: set[str] = set()
    for lg in crawls:
        site_lean = {v.site: v.lean for v in lg.visits}
        for site in lg.sites():
            lean = site_lean.get(site, lg.lean)
            rows.add(f"{lean_tag(lean)}:{lg.persona_label}" if split_lean else lg.persona_label)
        for c in lg.cookies:
            if label_cookie(c, bl) != cookie_type:
                continue
            lean = site_lean.get(c.site, lg.lean)
            row = f"{lean_tag(lean)}:{lg.persona_label}" if split_lean else lg.persona_label
            counts[row][c.owner] += 1
    if not rows:
        raise NmfError("no personas in the crawl set")
    cols = sorted({d for r in counts.values() for d in r})
    if not cols:
        raise NmfError(f"no {cookie_type} cookies in the crawl set")
    row_labels = tuple(sorted(rows, key=_row_sort_key))
    raw = np.array([[counts[r].get(d, 0) for d in cols] for r in row_labels], dtype=float)
    zero = tuple(r for r, s in zip(row_labels, raw.sum(axis=1)) if s == 0)
    return ProfileMatrix(normalize_rows(raw), row_labels, tuple(cols), cookie_type, zero)


@dataclass(frozen=True)
class FactorModel:
    B: np.ndarray
    C: np.ndarray
    k: int
    residual: float
    iterations: int
    seed: int
    objective: tuple[float, ...] = field(default=(), repr=False, compare=False)


def _matrix(A) -> np.ndarray:
    M = np.asarray(A.A if isinstance(A, ProfileMatrix) else A, dtype=float)
    if M.ndim != 2:
        raise NmfError("matrix must be two-dimensional")
    if (M < 0).any():
        raise NmfError("matrix has negative entries")
    return M


def _uniform_open0(rng: np.random.Generator, shape) -> np.ndarray:
    # uniform on (0, 1]
    return 1.0 - rng.random(shape)


def _row_keyed_basis(A: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Initial basis whose rows depend only on (seed, row contents).

    Identical rows start identical, and the row-wise update keeps them so.
    """
    B = np.empty((A.shape[0], k))
    for i, row in enumerate(A):
        digest = hashlib.sha256(np.ascontiguousarray(row).tobytes()).digest()
        words = [int.from_bytes(digest[j:j + 4], "little") for j in range(0, 16, 4)]
        B[i] = _uniform_open0(np.random.default_rng([seed, *words]), k)
    return B


def factorize(
    A,
    k: int,
    seed: int = 0,
    max_iters: int = 2000,
    tol: float = 1e-8,
    *,
    row_keyed_init: bool = False,
    debug: bool = False,
    track_objective: bool = False,
) -> FactorModel:
    """Lee-Seung multiplicative updates for min ||A - BC||_F^2 with B, C >= 0.

    Stops when the relative decrease of the objective falls below ``tol`` or
    after ``max_iters`` sweeps. With ``debug`` every sweep asserts that the
    objective did not go up.
    """
    M = _matrix(A)
    p, c = M.shape
    if not 1 <= k <= min(p, c):
        raise NmfError(f"k={k} outside [1, {min(p, c)}]")
    if tol <= 0:
        raise NmfError("tol must be positive")
    rng = np.random.default_rng(seed)
    C = _uniform_open0(rng, (k, c))
    B = _row_keyed_basis(M, k, seed) if row_keyed_init else _uniform_open0(rng, (p, k))

    prev = float(np.sum((M - B @ C) ** 2))
    # rises smaller than float round-off in the objective do not count
    slack = OBJECTIVE_ROUNDOFF * float(np.sum(M * M))
    history = [prev] if track_objective else []
    it = 0
    for it in range(1, max_iters + 1):
        C *= (B.T @ M) / (B.T @ B @ C + DENOM_EPS)
        np.maximum(C, VALUE_FLOOR, out=C)
        B *= (M @ C.T) / (B @ (C @ C.T) + DENOM_EPS)
        np.maximum(B, VALUE_FLOOR, out=B)
        cur = float(np.sum((M - B @ C) ** 2))
        if track_objective:
            history.append(cur)
        if debug and cur > prev * (1 + 1e-12) + slack:
            raise ObjectiveIncreased(f"objective rose from {prev!r} to {cur!r} at iteration {it}")
        if prev == 0.0 or (prev - cur) / prev < tol:
            prev = cur
            break
        prev = cur
    return FactorModel(B, C, k, float(np.sqrt(prev)), it, seed, tuple(history))


@dataclass(frozen=True)
class ConsensusResult:
    consensus: np.ndarray
    cophenetic: float
    k: int
    runs: int
    cluster_assignment: dict[str, int]
    best: FactorModel
    residuals: tuple[float, ...] = field(repr=False, default=())

    @property
    def residual(self) -> float:
        return self.best.residual


def cophenetic_correlation(consensus: np.ndarray) -> tuple[float, np.ndarray]:
    """Correlation between 1 - consensus and average-linkage cophenetic distances.

    Returns the coefficient and the linkage matrix. A consensus with no spread
    in its distances is perfectly stable and scores 1.
    """
    dist = 1.0 - consensus
    np.fill_diagonal(dist, 0.0)
    condensed = squareform(np.clip((dist + dist.T) / 2, 0.0, 1.0), checks=False)
    Z = linkage(condensed, method="average")
    if condensed.size < 2 or np.ptp(condensed) == 0.0:
        return 1.0, Z
    coph = cophenet(Z)
    if np.ptp(coph) == 0.0:
        return 1.0, Z
    return float(np.corrcoef(condensed, coph)[0, 1]), Z


def _run_seed(seed: int, k: int, run: int) -> int:
    return int(np.random.SeedSequence([seed, k, run]).generate_state(1)[0])


def consensus_cluster(
    A,
    k: int,
    runs: int = DEFAULT_RUNS,
    seed: int = 0,
    *,
    row_labels: Sequence[str] | None = None,
    max_iters: int = 1000,
    tol: float = 1e-6,
) -> ConsensusResult:
    """Consensus over ``runs`` seeded factorizations; rows cluster by argmax of B."""
    if runs < 2:
        raise NmfError("consensus needs at least two runs")
    M = _matrix(A)
    if row_labels is None:
        row_labels = A.row_labels if isinstance(A, ProfileMatrix) else tuple(str(i) for i in range(M.shape[0]))
    p = M.shape[0]
    conn = np.zeros((p, p))
    best: FactorModel | None = None
    residuals = []
    for r in range(runs):
        model = factorize(M, k, _run_seed(seed, k, r), max_iters, tol, row_keyed_init=True)
        labels = np.argmax(model.B, axis=1)
        conn += labels[:, None] == labels[None, :]
        residuals.append(model.residual)
        if best is None or model.residual < best.residual:
            best = model
    consensus = conn / runs
    coph, Z = cophenetic_correlation(consensus)
    if p > 1:
        raw = fcluster(Z, t=k, criterion="maxclust")
    else:
        raw = np.array([1])
    relabel: dict[int, int] = {}
    assignment = {}
    for lab, cl in zip(row_labels, raw):
        assignment[lab] = relabel.setdefault(int(cl), len(relabel))
    return ConsensusResult(consensus, coph, k, runs, assignment, best, tuple(residuals))


@dataclass(frozen=True)
class SelectKResult:
    best_k: int
    scores: dict[int, tuple[float, float]]  # k -> (cophenetic, residual)
    results: dict[int, ConsensusResult]


def _better(cand: tuple[float, float, int], cur: tuple[float, float, int]) -> bool:
    coph_c, res_c, k_c = cand
    coph_b, res_b, k_b = cur
    if abs(coph_c - coph_b) > COPHENETIC_TIE:
        return coph_c > coph_b
    if abs(res_c - res_b) > RESIDUAL_ATOL + RESIDUAL_RTOL * max(res_c, res_b):
        return res_c < res_b
    return k_c < k_b


def select_k(
    A,
    k_range: tuple[int, int] = DEFAULT_K_RANGE,
    runs: int = DEFAULT_RUNS,
    seed: int = 0,
    **kwargs,
) -> SelectKResult:
    """Pick k with the highest cophenetic correlation; ties go to the smaller
    residual, then the smaller k. ``k_range`` is inclusive."""
    M = _matrix(A)
    lo, hi = k_range
    if lo < 2 or hi < lo or hi > min(M.shape):
        raise NmfError(f"k range {k_range} outside [2, {min(M.shape)}]")
    results = {}
    scores = {}
    best = None
    for k in range(lo, hi + 1):
        res = consensus_cluster(A, k, runs, seed, **kwargs)
        results[k] = res
        scores[k] = (res.cophenetic, res.residual)
        cand = (res.cophenetic, res.residual, k)
        if best is None or _better(cand, best):
            best = cand
    return SelectKResult(best[2], scores, results)
