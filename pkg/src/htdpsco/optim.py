"""Private optimization procedures over a loss oracle, dataset, and budget.

All procedures are deterministic given (config, seed): random streams are
derived from the seed plus a stable algorithm/phase/step path, batches are
contiguous slices of one upfront permutation, and noise is drawn from
per-phase child generators.  Each returns an OptimResult bundling the final
iterate with a RunRecord whose canonical JSON (wallclock excluded) is
byte-reproducible.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import _kernels
from .core import ConstraintSet, intersect, project_set, sample_in_set
from .errors import (CalibrationInfeasibleError, ConvergenceFailureError,
                     DatasetTooSmallError, InvalidArgumentError,
                     NumericalFailureError, ScheduleError)
from .estimator import MomentProfile, dyadic_batch_sizes, estimate_moment_profile
from .losses import LossOracle
from .privacy import (PrivacyBudget, derive_rng, dp_sgd_sigma,
                      shuffle_calibration)

# spawn-key prefixes so nested algorithms never share a stream
_K_PERM, _K_NOISE, _K_MOMENTS, _K_PROBES = 0, 1, 7, 8

DEFAULT_PHASE_ITER_CAP = 2000
PROJ_TOL = 1e-9


# ---------------------------------------------------------------------------
# run records
# ---------------------------------------------------------------------------


def _py(x):
    """Convert numpy scalars/arrays to plain python for stable JSON."""
    if isinstance(x, np.ndarray):
        return [float(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, dict):
        return {k: _py(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_py(v) for v in x]
    return x


@dataclass
class RunRecord:
    algo: str
    config: dict
    phases: list = field(default_factory=list)
    final_w: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    budget: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    wallclock_ms: float = 0.0

    def canonical_json(self) -> str:
        """Deterministic serialization; wallclock is reporting-only and excluded."""
        body = {k: _py(v) for k, v in asdict(self).items() if k != "wallclock_ms"}
        return json.dumps(body, sort_keys=True)


@dataclass
class OptimResult:
    w: np.ndarray
    record: RunRecord


def _parallel_budget(budget: PrivacyBudget, phases: int) -> dict:
    """Disjoint batches compose in parallel: the total equals the per-phase max."""
    per = [{"phase": i + 1, "epsilon": budget.epsilon, "delta": budget.delta}
           for i in range(phases)]
    return {"per_phase": per, "total_epsilon": budget.epsilon,
            "total_delta": budget.delta, "composition": "parallel"}


def _divergence_limit(cset: ConstraintSet) -> float:
    """Sanity bound for iterate norms: feasible points never exceed the
    set's reach from the origin, so reach + 1e6 * diameter only trips on a
    broken projection (the reach term keeps small far-off localization
    balls from misfiring the guard)."""
    reach = min(float(np.linalg.norm(b.center)) + b.radius for b in cset.balls)
    return reach + 1e6 * cset.diameter


class _IndexBitmap:
    """Guards the no-sample-reuse invariant across phases of one run."""

    def __init__(self, n: int):
        self.used = np.zeros(n, dtype=bool)

    def claim(self, idx):
        if np.any(self.used[idx]):
            raise InvalidArgumentError("internal: phase batches reused a sample index")
        self.used[idx] = True


# ---------------------------------------------------------------------------
# clipped regularized gradient method (inner solver)
# ---------------------------------------------------------------------------


def clipped_regularized_gd(loss: LossOracle, X, y, cset: ConstraintSet,
                           T: int, eta: float, C: float, lam: float = 0.0,
                           w0=None, reg_center=None, backend: str | None = None):
    """T projected steps of w <- P_W[w - eta*(ClippedMean(grads) + lam*(w - w0))].

    The data-gradient mean is clipped; the regularizer pull is not.  Requires
    eta <= 1/alpha when the loss reports finite smoothness.  Returns
    (w_T, stats) where stats carries the clipped fraction and movement.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if T < 0:
        raise InvalidArgumentError("T must be >= 0")
    if not (eta > 0 and C > 0 and lam >= 0):
        raise InvalidArgumentError("need eta > 0, C > 0, lam >= 0")
    w0 = np.array(w0, dtype=np.float64, copy=True)
    if not cset.contains(w0, 1e-9 * (1 + cset.diameter)):
        raise InvalidArgumentError("w0 must lie in the constraint set")
    alpha = loss.smoothness_alpha
    if math.isfinite(alpha) and eta > 1.0 / alpha * (1 + 1e-12):
        raise InvalidArgumentError(
            f"eta = {eta:.3g} exceeds 1/alpha = {1.0 / alpha:.3g}")
    if T == 0:
        return w0, {"clipped_fraction": 0.0, "moved": 0.0}
    center = w0 if reg_center is None else np.asarray(reg_center, dtype=np.float64)
    centers, radii = cset._arrays()
    cap = max(1, int(math.ceil(10.0 * cset.dim * math.log(1.0 / PROJ_TOL))))
    div_limit = _divergence_limit(cset)

    if loss.kernel_code is not None:
        w, frac, status = _kernels.crgd_run(
            X, y, w0, center, int(T), float(eta), float(C), float(lam),
            centers, radii, PROJ_TOL, cap, loss.kernel_code, loss.kernel_params,
            div_limit, backend)
    else:
        w, frac, status = _crgd_generic(loss, X, y, w0, center, int(T), eta, C,
                                        lam, cset, div_limit)
    if status == 1:
        raise NumericalFailureError(
            "iterate escaped 1e6 * diameter; projection is broken")
    if status == 2:
        raise ConvergenceFailureError("projection failed inside the descent loop",
                                      last_iterate=w)
    return w, {"clipped_fraction": frac, "moved": float(np.linalg.norm(w - w0))}


def _crgd_generic(loss, X, y, w0, center, T, eta, C, lam, cset, div_limit):
    w = w0.copy()
    clipped = 0
    for _ in range(T):
        g = loss.batch_grads(w, X, y)
        nrm = np.linalg.norm(g, axis=1)
        over = nrm > C
        scale = np.ones_like(nrm)
        scale[over] = C / nrm[over]
        clipped += int(over.sum())
        gm = (g * scale[:, None]).sum(axis=0) / X.shape[0]
        w = project_set(w - eta * (gm + lam * (w - center)), cset)
        if float(np.linalg.norm(w)) > div_limit:
            return w, 0.0, 1
    return w, clipped / (T * X.shape[0]), 0


# ---------------------------------------------------------------------------
# localized noisy clipped gradient method (phased)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhaseRow:
    index: int
    batch_size: int
    stepsize: float
    regularization: float
    iterations: int
    iterations_formula: int
    radius: float
    clip: float
    noise_sigma: float


@dataclass(frozen=True)
class PhaseSchedule:
    rows: tuple
    meta: dict

    def total_batch(self) -> int:
        return sum(r.batch_size for r in self.rows)


def lncgm_schedule(n: int, eta: float, p: float, budget: PrivacyBudget,
                   moments: MomentProfile, d: int, lipschitz: float | None = None,
                   t_cap: int | None = None) -> PhaseSchedule:
    """Phase rows for the localized method on n samples.

    Per phase i = 1..floor(log2 n):
      n_i = floor(2^-i n),      eta_i = 4^-i eta,
      lam_i = 1/(eta_i n_i^p) for i >= 2 and 1/(eta_1 n_1^(2p)) for i = 1,
      T_i = ceil(2 log(n_i^2) / (lam_i eta_i))  (capped at t_cap if given),
      D_i = 2 L / lam_i,
      C_i = r_{2k,n_i} (eps n_i / sqrt(d log(1/delta) log n))^(1/k),
      sigma_i = 8 C_i sqrt(log(1/delta)) / (n_i lam_i eps).

    L is the Lipschitz constant when known, else the moment profile's
    observed gradient sup (plug-in; phase outputs are then containment-checked
    and re-run with a doubled radius on violation).  The regime check
    eps <= sqrt(log(1/delta)) is recorded in the metadata rather than
    enforced, since the benchmark grid deliberately exceeds it.
    """
    if n < 4:
        raise InvalidArgumentError("n must be >= 4")
    if not (eta > 0 and p >= 1):
        raise InvalidArgumentError("need eta > 0 and p >= 1")
    eps, delta = budget.epsilon, budget.delta
    k = moments.k
    sizes = dyadic_batch_sizes(n)
    missing = [m for m in sizes if m not in moments.r2k_by_batch]
    if missing:
        raise ScheduleError(
            f"moment table lacks r_(2k,m) for batch sizes {missing}",
            required_batch_sizes=missing)
    plug_in = lipschitz is None or not math.isfinite(lipschitz)
    L = moments.grad_sup if plug_in else float(lipschitz)
    if not L > 0:
        raise InvalidArgumentError("need a positive Lipschitz value or plug-in")
    log_n = math.log(n)
    log_1_delta = math.log(1.0 / delta)
    rows = []
    for i, ni in enumerate(sizes, start=1):
        eta_i = eta * 4.0 ** (-i)
        expo = 2.0 * p if i == 1 else p
        lam_i = 1.0 / (eta_i * float(ni) ** expo)
        t_formula = int(math.ceil(2.0 * math.log(ni * ni) / (lam_i * eta_i))) if ni > 1 else 0
        t_i = t_formula if t_cap is None else min(t_formula, int(t_cap))
        d_i = 2.0 * L / lam_i
        c_i = moments.r2k_for(ni) * (eps * ni / math.sqrt(d * log_1_delta * log_n)) ** (1.0 / k)
        sigma_i = 8.0 * c_i * math.sqrt(log_1_delta) / (ni * lam_i * eps)
        rows.append(PhaseRow(i, ni, eta_i, lam_i, t_i, t_formula, d_i, c_i, sigma_i))
    total = sum(r.batch_size for r in rows)
    if total > n:
        raise ScheduleError(f"schedule consumes {total} > n = {n} samples")
    meta = {"n": n, "eta": eta, "p": p, "k": k, "d": d,
            "epsilon": eps, "delta": delta,
            "eps_regime_ok": eps <= math.sqrt(log_1_delta),
            "lipschitz_plug_in": plug_in, "lipschitz_used": L,
            "t_cap": t_cap}
    return PhaseSchedule(tuple(rows), meta)


def lncgm(loss: LossOracle, X, y, cset: ConstraintSet, w0,
          schedule: PhaseSchedule, budget: PrivacyBudget, seed: int,
          _path=(), backend: str | None = None,
          max_radius_doublings: int = 3) -> OptimResult:
    """Localized noisy clipped gradient method over a phase schedule.

    Each phase draws a fresh disjoint batch, minimizes the lam_i-regularized
    batch risk over the set intersected with the localization ball around
    the previous iterate, then perturbs the output with Gaussian noise of
    scale sigma_i (post-noise, the iterate is projected back onto the outer
    set so the next localization ball is well-centered).
    """
    t0 = time.perf_counter()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    if schedule.total_batch() > n:
        raise InvalidArgumentError(
            f"schedule needs {schedule.total_batch()} samples, dataset has {n}")
    w = np.array(w0, dtype=np.float64, copy=True)
    if not cset.contains(w, 1e-9 * (1 + cset.diameter)):
        raise InvalidArgumentError("w0 must lie in the constraint set")
    alpha = loss.smoothness_alpha
    if math.isfinite(alpha):
        worst = max(r.stepsize for r in schedule.rows)
        if worst > 1.0 / alpha * (1 + 1e-12):
            raise InvalidArgumentError(
                f"schedule stepsize {worst:.3g} exceeds 1/alpha = {1 / alpha:.3g}")
    perm = derive_rng(seed, *_path, _K_PERM).permutation(n)
    bitmap = _IndexBitmap(n)
    plug_in = schedule.meta.get("lipschitz_plug_in", False)
    record = RunRecord(
        algo="lncgm",
        config={"n": n, "d": X.shape[1], "seed": seed, "loss": loss.name,
                "schedule": schedule.meta, "epsilon": budget.epsilon,
                "delta": budget.delta},
        meta={"backend": _kernels.active_backend() if backend is None else backend,
              "seed_path": list(_path)})
    pos = 0
    for row in schedule.rows:
        idx = perm[pos:pos + row.batch_size]
        pos += row.batch_size
        bitmap.claim(idx)
        Xb, yb = X[idx], y[idx]
        radius = row.radius
        doublings = 0
        while True:
            wset = intersect(cset, w, radius, witness=w)
            w_hat, stats = clipped_regularized_gd(
                loss, Xb, yb, wset, row.iterations, row.stepsize, row.clip,
                row.regularization, w0=w, reg_center=w, backend=backend)
            moved = float(np.linalg.norm(w_hat - w))
            hit_wall = (wset is not cset) and moved >= radius * (1 - 1e-9)
            if not (plug_in and hit_wall) or doublings >= max_radius_doublings:
                if plug_in and hit_wall and doublings >= max_radius_doublings:
                    raise NumericalFailureError(
                        f"phase {row.index}: output pinned to the localization "
                        f"radius after {doublings} doublings")
                break
            doublings += 1
            radius *= 2.0
        noise_rng = derive_rng(seed, *_path, _K_NOISE, row.index)
        xi = noise_rng.normal(0.0, row.noise_sigma, size=w.shape) \
            if row.noise_sigma > 0 else np.zeros_like(w)
        w = project_set(w_hat + xi, cset)
        record.phases.append({
            "phase": row.index, "batch": row.batch_size,
            "iterations": row.iterations, "stepsize": row.stepsize,
            "regularization": row.regularization, "radius": radius,
            "radius_doublings": doublings, "clip": row.clip,
            "noise_sigma": row.noise_sigma,
            "clipped_fraction": stats["clipped_fraction"],
            "moved": moved, "noise_norm": float(np.linalg.norm(xi)),
            "feasible": bool(cset.contains(w, 1e-6))})
    record.final_w = w.tolist()
    record.budget = _parallel_budget(budget, len(schedule.rows))
    record.wallclock_ms = (time.perf_counter() - t0) * 1e3
    return OptimResult(w, record)


# ---------------------------------------------------------------------------
# private stochastic approximation (equal phases, shrinking balls)
# ---------------------------------------------------------------------------


def psa_partition(n: int):
    """m = floor(0.5 log2(2n / log2 n)) - 1 subsets of size n0 = floor(n/m)."""
    if n < 4:
        raise DatasetTooSmallError("need n >= 4", required_n=4)
    m = int(math.floor(0.5 * math.log2(2.0 * n / math.log2(n)))) - 1
    if m < 1:
        need = 4
        while int(math.floor(0.5 * math.log2(2.0 * need / math.log2(need)))) - 1 < 1:
            need *= 2
        raise DatasetTooSmallError(
            f"partition rule gives m = {m} < 1 phases at n = {n}; "
            f"need n >= {need}", required_n=need)
    return m, n // m


def _localized_stepsize(R_prev: float, n_ref: int, n_full: int, p: float,
                        eps: float, d: int, k: int, L: float, R2kn: float,
                        c_eta: float, alpha: float) -> float:
    """The min{}-form stepsize shared by the phased wrappers.

    gamma = c_eta * (R_prev / n_ref^(p/2)) * min(1/L,
              (eps n_ref / sqrt(d log n))^((k-1)/k) / (R2kn n_ref^((p+1)/2)),
              1/(n_ref^((p-1)/2) L^2 sqrt(log n_ref log(1/beta))))
    with beta = 1/n_full.  Collapsed big-O constants live in c_eta; the
    result is capped at 1/alpha when the loss reports finite smoothness.
    """
    log_n = math.log(n_full)
    t1 = 1.0 / L
    t2 = ((eps * n_ref / math.sqrt(d * log_n)) ** ((k - 1.0) / k)
          / (R2kn * float(n_ref) ** ((p + 1.0) / 2.0)))
    t3 = 1.0 / (float(n_ref) ** ((p - 1.0) / 2.0) * L * L
                * math.sqrt(math.log(n_ref) * log_n))
    gamma = c_eta * (R_prev / float(n_ref) ** (p / 2.0)) * min(t1, t2, t3)
    if math.isfinite(alpha):
        gamma = min(gamma, 1.0 / alpha)
    return gamma


def _ensure_profile(loss, X, y, cset, k, seed, path, moments, batch_sizes):
    if moments is not None:
        return moments
    rng = derive_rng(seed, *path, _K_MOMENTS)
    return estimate_moment_profile(loss, X, y, k, cset, rng,
                                   batch_sizes=batch_sizes)


def private_stochastic_approximation(
        loss: LossOracle, X, y, cset: ConstraintSet, w1, R0: float, p: float,
        budget: PrivacyBudget, seed: int, moments: MomentProfile | None = None,
        k: int = 2, c_eta: float = 1.0, t_cap: int | None = DEFAULT_PHASE_ITER_CAP,
        backend: str | None = None) -> OptimResult:
    """Phased localization: m equal subsets, halving radii R_l = R_{l-1}/2.

    Phase l runs the localized gradient method on its subset with stepsize
    gamma_l over cset intersected with B(w_{l-1}, R_{l-1}).  The moment
    profile is estimated from the data when not supplied (flagged in
    metadata: the estimate itself is not privatized, matching the paper's
    known-moments reading).
    """
    t0 = time.perf_counter()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    m, n0 = psa_partition(n)
    sizes = set(dyadic_batch_sizes(n0)) | {1} | set(dyadic_batch_sizes(n))
    moments = _ensure_profile(loss, X, y, cset, k, seed, (2,), moments, sorted(sizes))
    L = loss.lipschitz if (loss.lipschitz is not None
                           and math.isfinite(loss.lipschitz)) else moments.grad_sup
    w = np.array(w1, dtype=np.float64, copy=True)
    record = RunRecord(
        algo="psa",
        config={"n": n, "d": d, "m": m, "n0": n0, "R0": R0, "p": p, "k": k,
                "seed": seed, "loss": loss.name, "epsilon": budget.epsilon,
                "delta": budget.delta, "c_eta": c_eta, "t_cap": t_cap},
        meta={"moments_estimated": True, "grad_sup": moments.grad_sup,
              "R2k_n": moments.R2k_n})
    perm = derive_rng(seed, 2, _K_PERM).permutation(n)
    bitmap = _IndexBitmap(n)
    R = float(R0)
    for l in range(1, m + 1):
        gamma = _localized_stepsize(R, n0, n, p, budget.epsilon, d, k, L,
                                    moments.R2k_n, c_eta, loss.smoothness_alpha)
        idx = perm[(l - 1) * n0: l * n0]
        bitmap.claim(idx)
        stage_set = intersect(cset, w, R, witness=w)
        sched = lncgm_schedule(n0, gamma, p, budget, moments, d,
                               lipschitz=L, t_cap=t_cap)
        inner = lncgm(loss, X[idx], y[idx], stage_set, w, sched, budget,
                      seed, _path=(2, l), backend=backend)
        w = inner.w
        record.phases.append({
            "stage": l, "radius": R, "gamma": gamma, "n0": n0,
            "inner_phases": len(inner.record.phases),
            "inner_clipped": float(np.mean([ph["clipped_fraction"]
                                            for ph in inner.record.phases])),
            "feasible": bool(cset.contains(w, 1e-6))})
        R /= 2.0
    record.final_w = w.tolist()
    record.budget = _parallel_budget(budget, m)
    record.wallclock_ms = (time.perf_counter() - t0) * 1e3
    return OptimResult(w, record)


# ---------------------------------------------------------------------------
# iterated variants: geometrically growing subsets
# ---------------------------------------------------------------------------


def stage_partition(n: int, theta_bar: float):
    """Alg-5/7 split: l = floor(log_tb(2) * log2 log2 n) stages with
    n_i = floor(2^(i-1) n / (log2 n)^(log_tb(2)^2)).  Base-2 logs per the
    recorded convention."""
    if not theta_bar > 1:
        raise InvalidArgumentError("theta_bar must exceed 1")
    if n < 4:
        raise DatasetTooSmallError("need n >= 4", required_n=4)
    log_tb_2 = math.log(2.0) / math.log(theta_bar)
    l = int(math.floor(log_tb_2 * math.log2(math.log2(n))))
    if l < 1:
        raise DatasetTooSmallError(
            f"stage rule gives l = {l} < 1 at n = {n} (theta_bar = {theta_bar})")
    denom = math.log2(n) ** (log_tb_2 ** 2)
    sizes = [int(math.floor(2.0 ** (i - 1) * n / denom)) for i in range(1, l + 1)]
    if sizes[0] < 1:
        raise DatasetTooSmallError(f"first stage would be empty at n = {n}")
    if sum(sizes) > n:
        raise DatasetTooSmallError(
            f"stages need {sum(sizes)} > n = {n} samples")
    return l, sizes


def iterated_lncgm(loss: LossOracle, X, y, cset: ConstraintSet, w0,
                   theta_bar: float, p: float, budget: PrivacyBudget, seed: int,
                   R0: float | None = None, moments: MomentProfile | None = None,
                   k: int = 2, c_eta: float = 1.0,
                   t_cap: int | None = DEFAULT_PHASE_ITER_CAP,
                   backend: str | None = None) -> OptimResult:
    """Run the localized method on geometrically growing disjoint subsets.

    Each stage is initialized at the previous output with the min{}-form
    stepsize evaluated at the stage size and a halving radius parameter.
    The radius only enters the stepsize; stages project onto the outer set
    (the localization balls live inside each stage's own phases).
    """
    t0 = time.perf_counter()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    l, sizes = stage_partition(n, theta_bar)
    need = set()
    for ni in sizes:
        need |= set(dyadic_batch_sizes(ni))
    need |= set(dyadic_batch_sizes(n)) | {1}
    moments = _ensure_profile(loss, X, y, cset, k, seed, (3,), moments, sorted(need))
    L = loss.lipschitz if (loss.lipschitz is not None
                           and math.isfinite(loss.lipschitz)) else moments.grad_sup
    R = float(R0) if R0 is not None else cset.diameter
    w = np.array(w0, dtype=np.float64, copy=True)
    record = RunRecord(
        algo="iterated_lncgm",
        config={"n": n, "d": d, "stages": l, "sizes": sizes, "theta_bar": theta_bar,
                "p": p, "k": k, "R0": R, "seed": seed, "loss": loss.name,
                "epsilon": budget.epsilon, "delta": budget.delta,
                "c_eta": c_eta, "t_cap": t_cap},
        meta={"grad_sup": moments.grad_sup, "R2k_n": moments.R2k_n})
    perm = derive_rng(seed, 3, _K_PERM).permutation(n)
    bitmap = _IndexBitmap(n)
    pos = 0
    for t in range(1, l + 1):
        ni = sizes[t - 1]
        idx = perm[pos:pos + ni]
        pos += ni
        bitmap.claim(idx)
        eta_t = _localized_stepsize(R, ni, n, p, budget.epsilon, d, k, L,
                                    moments.R2k_n, c_eta, loss.smoothness_alpha)
        sched = lncgm_schedule(ni, eta_t, p, budget, moments, d,
                               lipschitz=L, t_cap=t_cap)
        inner = lncgm(loss, X[idx], y[idx], cset, w, sched, budget,
                      seed, _path=(3, t), backend=backend)
        w = inner.w
        record.phases.append({
            "stage": t, "n_i": ni, "eta": eta_t, "radius": R,
            "inner_phases": len(inner.record.phases),
            "feasible": bool(cset.contains(w, 1e-6))})
        R /= 2.0
    record.final_w = w.tolist()
    record.budget = _parallel_budget(budget, l)
    record.wallclock_ms = (time.perf_counter() - t0) * 1e3
    return OptimResult(w, record)


# ---------------------------------------------------------------------------
# permuted noisy clipped accelerated SGD (shuffle-amplified)
# ---------------------------------------------------------------------------


def pnca_default_steps(beta: float, diameter: float, r_k: float, k: int,
                       n: int, d: int, budget: PrivacyBudget) -> int:
    """Step count T = min{ sqrt(beta D / r_k) * (eps n / sqrt(d log(1/delta)))
    ^((k-1)/2k), sqrt(beta D / r_k) * n^(1/4) }, floored, at least 1."""
    base = math.sqrt(beta * diameter / r_k)
    ratio = budget.epsilon * n / math.sqrt(d * math.log(1.0 / budget.delta))
    t1 = base * ratio ** ((k - 1.0) / (2.0 * k))
    t2 = base * n ** 0.25
    return max(1, int(math.floor(min(t1, t2))))


def pnca_sgd(loss: LossOracle, X, y, cset: ConstraintSet, w0,
             budget: PrivacyBudget, seed: int,
             moments: MomentProfile | None = None, T: int | None = None,
             eta: float | None = None, k: int = 2, c_cal: float = 1.0,
             enforce_local_budget: bool = True,
             backend: str | None = None) -> OptimResult:
    """Permuted noisy clipped accelerated SGD (one pass, shuffle-amplified).

    Data is permuted once; step t averages the clipped gradients of a fresh
    batch of n//T samples (remainder on the last batch), perturbs each
    report with the shuffle-calibrated local noise sigma1 (so the mean picks
    up sigma1/sqrt(b)), and takes the accelerated prox step
    w_t = P_W[w_{t-1} - (alpha_t/eta_t) g].  alpha_1 = 1 and
    alpha_t = 2/(t+2) after; eta_t = 4 eta / (t (t+1)).

    The small-epsilon regime is enforced through the local budget check
    (eps0 <= 1/2) unless ``enforce_local_budget=False``; eps0 is recorded in
    the run metadata either way.
    """
    t0 = time.perf_counter()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    moments = _ensure_profile(loss, X, y, cset, k, seed, (4,), moments,
                              sorted(set(dyadic_batch_sizes(n)) | {1}))
    eps, delta = budget.epsilon, budget.delta
    C = moments.r_k * (eps * n / math.sqrt(d * math.log(1.0 / delta))) ** (1.0 / k)
    cal = shuffle_calibration(C, budget, n, c_cal)
    if enforce_local_budget and not cal.local_budget_ok:
        raise CalibrationInfeasibleError(
            f"local randomizer budget eps0 = {cal.eps0:.3f} > 1/2; max "
            f"feasible epsilon at c_cal = {c_cal:g} is about {cal.eps_max:.4g}",
            max_feasible=cal.eps_max)
    beta = loss.smoothness_alpha
    if T is None:
        if not math.isfinite(beta):
            raise InvalidArgumentError(
                "default step count needs finite smoothness; pass T explicitly")
        T = pnca_default_steps(beta, cset.diameter, moments.r_k, k, n, d, budget)
    T = int(T)
    if not 1 <= T <= n:
        raise InvalidArgumentError(f"T must lie in [1, {n}]")
    if eta is None:
        if not math.isfinite(beta):
            raise InvalidArgumentError(
                "default stepsize needs finite smoothness; pass eta explicitly")
        eta = float(beta)
    b = n // T
    w_prev = np.array(w0, dtype=np.float64, copy=True)
    if not cset.contains(w_prev, 1e-9 * (1 + cset.diameter)):
        raise InvalidArgumentError("w0 must lie in the constraint set")
    w_ag = w_prev.copy()
    perm = derive_rng(seed, 4, _K_PERM).permutation(n)
    noise_rng = derive_rng(seed, 4, _K_NOISE)
    noise = noise_rng.standard_normal((T, d))
    record = RunRecord(
        algo="pnca_sgd",
        config={"n": n, "d": d, "T": T, "eta": eta, "k": k, "seed": seed,
                "loss": loss.name, "epsilon": eps, "delta": delta,
                "c_cal": c_cal},
        meta={"clip": C, "sigma1": cal.sigma1, "eps0": cal.eps0,
              "delta0": cal.delta0, "local_budget_ok": cal.local_budget_ok,
              "enforce_local_budget": enforce_local_budget,
              "paper_sigma_sq_form": C * C * T * math.log(1.0 / delta)
              / (n * n * eps * eps),
              "backend": _kernels.active_backend() if backend is None else backend})
    steps = []
    for t in range(1, T + 1):
        alpha_t = 1.0 if t == 1 else 2.0 / (t + 2.0)
        eta_t = 4.0 * eta / (t * (t + 1.0))
        lo = (t - 1) * b
        hi = t * b if t < T else n
        idx = perm[lo:hi]
        bt = idx.shape[0]
        w_md = (1.0 - alpha_t) * w_ag + alpha_t * w_prev
        if loss.kernel_code is not None:
            g, clipped = _kernels.clipped_grad_mean(
                w_md, X[idx], y[idx], C, loss.kernel_code, loss.kernel_params,
                backend)
        else:
            gr = loss.batch_grads(w_md, X[idx], y[idx])
            nrm = np.linalg.norm(gr, axis=1)
            over = nrm > C
            sc = np.ones_like(nrm)
            sc[over] = C / nrm[over]
            g = (gr * sc[:, None]).sum(axis=0) / bt
            clipped = int(over.sum())
        sigma_step = cal.sigma1 / math.sqrt(bt)
        g = g + sigma_step * noise[t - 1]
        w_t = project_set(w_prev - (alpha_t / eta_t) * g, cset)
        w_ag = alpha_t * w_t + (1.0 - alpha_t) * w_ag
        w_prev = w_t
        steps.append({"t": t, "alpha": alpha_t, "eta_t": eta_t, "batch": bt,
                      "sigma_step": sigma_step,
                      "clipped_fraction": clipped / bt,
                      "feasible": bool(cset.contains(w_ag, 1e-6))})
    record.phases = steps
    record.meta["sigma_step_nominal"] = cal.sigma1 / math.sqrt(b)
    record.final_w = w_ag.tolist()
    record.budget = {"total_epsilon": eps, "total_delta": delta,
                     "composition": "shuffle-amplified one-pass"}
    record.wallclock_ms = (time.perf_counter() - t0) * 1e3
    return OptimResult(w_ag, record)


def iterated_pnca_sgd(loss: LossOracle, X, y, cset: ConstraintSet, w0,
                      theta_bar: float, budget: PrivacyBudget, seed: int,
                      moments: MomentProfile | None = None,
                      eta: float | None = None, k: int = 2, c_cal: float = 1.0,
                      enforce_local_budget: bool = True, R0: float | None = None,
                      backend: str | None = None) -> OptimResult:
    """Run the accelerated method over the Alg-5-style growing partition.

    The halving radius is recorded per stage but does not constrain the
    inner runs (it never enters the base method).
    """
    t0 = time.perf_counter()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    l, sizes = stage_partition(n, theta_bar)
    need = {1} | set(dyadic_batch_sizes(n))
    for ni in sizes:
        need |= set(dyadic_batch_sizes(ni))
    moments = _ensure_profile(loss, X, y, cset, k, seed, (5,), moments, sorted(need))
    w = np.array(w0, dtype=np.float64, copy=True)
    R = float(R0) if R0 is not None else cset.diameter
    record = RunRecord(
        algo="iterated_pnca_sgd",
        config={"n": n, "d": d, "stages": l, "sizes": sizes,
                "theta_bar": theta_bar, "k": k, "seed": seed, "loss": loss.name,
                "epsilon": budget.epsilon, "delta": budget.delta, "c_cal": c_cal},
        meta={})
    perm = derive_rng(seed, 5, _K_PERM).permutation(n)
    bitmap = _IndexBitmap(n)
    pos = 0
    for t in range(1, l + 1):
        ni = sizes[t - 1]
        idx = perm[pos:pos + ni]
        pos += ni
        bitmap.claim(idx)
        inner = pnca_sgd(loss, X[idx], y[idx], cset, w, budget,
                         seed=seed * 1000003 + t, moments=moments, eta=eta,
                         k=k, c_cal=c_cal,
                         enforce_local_budget=enforce_local_budget,
                         backend=backend)
        w = inner.w
        record.phases.append({"stage": t, "n_i": ni, "radius": R,
                              "inner_T": inner.record.config["T"],
                              "feasible": bool(cset.contains(w, 1e-6))})
        R /= 2.0
    record.final_w = w.tolist()
    record.budget = _parallel_budget(budget, l)
    record.wallclock_ms = (time.perf_counter() - t0) * 1e3
    return OptimResult(w, record)


# ---------------------------------------------------------------------------
# DP-SGD baseline
# ---------------------------------------------------------------------------


def dp_sgd_baseline(loss: LossOracle, X, y, cset: ConstraintSet, w0,
                    T: int, batch: int, clip: float, budget: PrivacyBudget,
                    seed: int, eta: float, max_epochs: int = 10,
                    backend: str | None = None) -> OptimResult:
    """Minibatch clipped SGD with per-step Gaussian noise.

    Noise is calibrated so zCDP composition over T steps converts back to
    the target (eps, delta); see the privacy module.  Multi-epoch runs
    reshuffle per epoch; requesting more than max_epochs passes raises with
    the max feasible T.
    """
    t0 = time.perf_counter()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    if batch < 1 or batch > n:
        raise InvalidArgumentError(f"batch must lie in [1, {n}]")
    if T < 1:
        raise InvalidArgumentError("T must be >= 1")
    if T * batch > max_epochs * n:
        raise CalibrationInfeasibleError(
            f"T = {T} steps of batch {batch} exceed {max_epochs} passes over "
            f"n = {n}; max feasible T is {max_epochs * n // batch}",
            max_feasible=max_epochs * n // batch)
    sigma = dp_sgd_sigma(clip, batch, T, budget)
    w0 = np.array(w0, dtype=np.float64, copy=True)
    if not cset.contains(w0, 1e-9 * (1 + cset.diameter)):
        raise InvalidArgumentError("w0 must lie in the constraint set")
    alpha = loss.smoothness_alpha
    if math.isfinite(alpha) and eta > 1.0 / alpha * (1 + 1e-12):
        raise InvalidArgumentError(f"eta exceeds 1/alpha = {1 / alpha:.3g}")
    perm_rng = derive_rng(seed, 6, _K_PERM)
    epochs = math.ceil(T * batch / n)
    order = np.concatenate([perm_rng.permutation(n) for _ in range(epochs)])
    order = order[:T * batch].astype(np.int64)
    noise = derive_rng(seed, 6, _K_NOISE).standard_normal((T, d)) * sigma
    centers, radii = cset._arrays()
    cap = max(1, int(math.ceil(10.0 * d * math.log(1.0 / PROJ_TOL))))
    if loss.kernel_code is None:
        raise InvalidArgumentError("dp_sgd_baseline needs a kernel-backed loss")
    w, frac, status = _kernels.dpsgd_run(
        X, y, order, w0, T, batch, eta, clip, noise, centers, radii,
        PROJ_TOL, cap, loss.kernel_code, loss.kernel_params,
        _divergence_limit(cset), backend)
    if status == 1:
        raise NumericalFailureError("iterate escaped 1e6 * diameter")
    if status == 2:
        raise ConvergenceFailureError("projection failed inside DP-SGD",
                                      last_iterate=w)
    sens = 2.0 * clip / batch
    rho = T * sens * sens / (2.0 * sigma * sigma)
    record = RunRecord(
        algo="dp_sgd",
        config={"n": n, "d": d, "T": T, "batch": batch, "clip": clip,
                "eta": eta, "seed": seed, "loss": loss.name,
                "epsilon": budget.epsilon, "delta": budget.delta},
        phases=[{"steps": T, "sigma": sigma, "clipped_fraction": frac,
                 "epochs": epochs}],
        meta={"backend": _kernels.active_backend() if backend is None else backend},
        budget={"rho_total": rho, "total_epsilon": budget.epsilon,
                "total_delta": budget.delta, "composition": "zcdp"},
        final_w=w.tolist())
    record.wallclock_ms = (time.perf_counter() - t0) * 1e3
    return OptimResult(w, record)
