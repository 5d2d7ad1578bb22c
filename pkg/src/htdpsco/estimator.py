"""Clipped-mean gradient estimation and empirical moment machinery.

The clipped mean averages per-element radial projections onto the C-ball;
its bias against the true mean is bounded by r^(k) / ((k-1) C^(k-1)) when
the k-th raw moment is r^(k).  Empirical moments take the sup over a probe
set (a lower estimate of the true sup over the constraint set; clip
thresholds derived from it are therefore smaller, which is recorded in run
metadata by the callers).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ConstraintSet, sample_in_set
from .errors import InvalidArgumentError
from .losses import LossOracle


def clipped_mean(Z, C: float) -> np.ndarray:
    """Average of rows of Z after radial projection onto the C-ball."""
    if not C > 0:
        raise InvalidArgumentError("C must be positive")
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[None, :]
    if Z.shape[0] == 0:
        raise InvalidArgumentError("Z must be nonempty")
    nrm = np.linalg.norm(Z, axis=1)
    scale = np.ones_like(nrm)
    over = nrm > C
    scale[over] = C / nrm[over]
    return (Z * scale[:, None]).mean(axis=0)


def clipped_mean_bias_bound(r_k_raw: float, k: int, C: float) -> float:
    """Bias bound r^(k) / ((k-1) C^(k-1)) for the noiseless clipped average."""
    if not (r_k_raw > 0 and C > 0):
        raise InvalidArgumentError("r_k_raw and C must be positive")
    if not k >= 2:
        raise InvalidArgumentError("k must be >= 2")
    return r_k_raw / ((k - 1) * C ** (k - 1))


@dataclass(frozen=True)
class MomentEstimate:
    """A k-th empirical moment, reported raw and as its k-th root."""

    k: int
    raw: float
    root: float


def empirical_moment(loss: LossOracle, X, y, k: int, probes) -> MomentEstimate:
    """max over probe points of the batch-average k-th power gradient norm.

    This evaluates the sup over the constraint set on a finite probe set
    only, so it is a lower estimate of the true empirical moment.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    if X.shape[0] == 0 or probes.shape[0] == 0:
        raise InvalidArgumentError("batch and probe set must be nonempty")
    best = -math.inf
    for w in probes:
        g = loss.batch_grads(w, X, y)
        best = max(best, float(np.mean(np.linalg.norm(g, axis=1) ** k)))
    return MomentEstimate(k, best, best ** (1.0 / k))


class GradNormGrid:
    """Per-(probe, sample) gradient norms, computed once and sliced per batch.

    The empirical moment of a batch is max over probes of the batch mean of
    norms^k; precomputing the (probes, n) norm matrix turns every batch
    aggregation into array slicing.
    """

    def __init__(self, loss: LossOracle, X, y, probes):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
        if X.shape[0] == 0 or probes.shape[0] == 0:
            raise InvalidArgumentError("batch and probe set must be nonempty")
        self.n = X.shape[0]
        self.norms = np.empty((probes.shape[0], self.n))
        for i, w in enumerate(probes):
            g = loss.batch_grads(w, X, y)
            self.norms[i] = np.linalg.norm(g, axis=1)

    def sup_norm(self) -> float:
        return float(self.norms.max())

    def moment_raw(self, idx, k: int) -> float:
        """max over probes of the mean k-th power norm on one index batch."""
        return float(np.max(np.mean(self.norms[:, idx] ** k, axis=1)))

    def batched_moment_raw(self, idx_matrix, k: int) -> float:
        """Mean over batches (rows of idx_matrix) of the per-batch moment."""
        block = self.norms[:, idx_matrix] ** k      # (probes, batches, m)
        return float(block.mean(axis=2).max(axis=0).mean())


@dataclass(frozen=True)
class BatchMomentTable:
    """Per-batch-size root-moment estimates r_{k,m} (averaged over batches)."""

    k: int
    roots: dict  # batch size m -> root estimate
    raws: dict
    wrapped: bool  # sampling exhausted the dataset and re-permuted


def _table_from_grid(grid: GradNormGrid, k: int, batch_sizes,
                     rng: np.random.Generator) -> BatchMomentTable:
    n = grid.n
    roots, raws = {}, {}
    wrapped = False
    for m in sorted(set(int(b) for b in batch_sizes)):
        if not 1 <= m <= n:
            raise InvalidArgumentError(f"batch size {m} not in [1, {n}]")
        want = max(1, math.ceil(n / m))
        per_perm = n // m
        chunks = []
        left = want
        while left > 0:
            perm = rng.permutation(n)
            take = min(left, per_perm)
            chunks.append(perm[:take * m].reshape(take, m))
            left -= take
            if left > 0:
                wrapped = True
        idx_matrix = np.vstack(chunks)
        raw = grid.batched_moment_raw(idx_matrix, k)
        raws[m] = raw
        roots[m] = raw ** (1.0 / k)
    return BatchMomentTable(k, roots, raws, wrapped)


def batch_moment_table(loss: LossOracle, X, y, k: int, batch_sizes, probes,
                       rng: np.random.Generator) -> BatchMomentTable:
    """Estimate r_{k,m} for each requested m from disjoint batches.

    Batches are disjoint slices of a permutation; when a size needs more
    batches than the data allows, sampling wraps with a fresh permutation
    and the result is flagged.
    """
    grid = GradNormGrid(loss, X, y, probes)
    return _table_from_grid(grid, k, batch_sizes, rng)


def dyadic_batch_sizes(n: int):
    """Sizes floor(2^-i * n) for i = 1..floor(log2 n), skipping zeros."""
    if n < 2:
        raise InvalidArgumentError("n must be >= 2")
    l = int(math.floor(math.log2(n)))
    sizes = []
    for i in range(1, l + 1):
        ni = n >> i
        if ni >= 1:
            sizes.append(ni)
    return sizes


@dataclass(frozen=True)
class WeightedMoment:
    value: float
    levels: tuple  # (i, n_i, root estimate) triples
    wrapped: bool


def weighted_moment_R(loss: LossOracle, X, y, k2: int, n: int, probes,
                      rng: np.random.Generator) -> WeightedMoment:
    """Weighted dyadic moment sqrt(sum_i 2^-i r_{k2, n_i}^2), n_i = floor(2^-i n)."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < n:
        raise InvalidArgumentError(f"dataset has {X.shape[0]} < n = {n} samples")
    sizes = dyadic_batch_sizes(n)
    table = batch_moment_table(loss, X[:n], np.asarray(y)[:n], k2, sizes, probes, rng)
    total = 0.0
    levels = []
    for i, ni in enumerate(sizes, start=1):
        r = table.roots[ni]
        total += 2.0 ** (-i) * r * r
        levels.append((i, ni, r))
    return WeightedMoment(math.sqrt(total), tuple(levels), table.wrapped)


@dataclass(frozen=True)
class MomentProfile:
    """Gradient-moment summary consumed by the phase schedules.

    ``r_k`` is the k-th root moment estimate; ``r2k_by_batch`` maps batch
    size m to the (2k)-th root estimate r_{2k,m}; ``R2k_n`` is the weighted
    dyadic combination; ``grad_sup`` the largest per-sample gradient norm
    observed on the probe grid (the Lipschitz plug-in).
    """

    k: int
    r_k: float
    r2k_by_batch: dict
    R2k_n: float
    grad_sup: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.k < 2:
            raise InvalidArgumentError("k must be >= 2")
        if self.r_k <= 0 or any(v <= 0 for v in self.r2k_by_batch.values()):
            raise InvalidArgumentError("moment values must be positive")
        if 1 in self.r2k_by_batch and self.R2k_n > self.r2k_by_batch[1] * (1 + 1e-9):
            raise InvalidArgumentError(
                "weighted moment exceeds the single-sample moment, violating "
                "the halving ordering")

    def r2k_for(self, m: int) -> float:
        return self.r2k_by_batch[int(m)]


def estimate_moment_profile(loss: LossOracle, X, y, k: int,
                            cset: ConstraintSet, rng: np.random.Generator,
                            n_probes: int = 64, extra_probes=None,
                            batch_sizes=None) -> MomentProfile:
    """Build a MomentProfile from data using a random probe grid.

    Probes are uniform points in the constraint set plus any caller-supplied
    trajectory points.  ``batch_sizes`` defaults to the dyadic sizes of the
    full sample count plus size 1 (so schedules for any subset are covered).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    probes = sample_in_set(cset, rng, n_probes)
    if extra_probes is not None:
        probes = np.vstack([probes, np.atleast_2d(extra_probes)])
    if batch_sizes is None:
        batch_sizes = set(dyadic_batch_sizes(n)) | {1}
    else:
        batch_sizes = set(int(b) for b in batch_sizes) | {1}
    grid = GradNormGrid(loss, X, y, probes)
    table = _table_from_grid(grid, 2 * k, sorted(batch_sizes), rng)
    rk = grid.moment_raw(np.arange(n), k) ** (1.0 / k)

    total = 0.0
    for i, ni in enumerate(dyadic_batch_sizes(n), start=1):
        r = table.roots[ni]
        total += 2.0 ** (-i) * r * r
    grad_sup = grid.sup_norm()
    return MomentProfile(
        k=k, r_k=rk, r2k_by_batch=dict(table.roots), R2k_n=math.sqrt(total),
        grad_sup=grad_sup,
        meta={"n": n, "n_probes": int(probes.shape[0]),
              "wrapped_batches": table.wrapped,
              "probe_sup_note": "sup over probes only; lower estimate"})
