"""Noise calibration and privacy accounting.

Covers the Gaussian mechanism, the 2C/n sensitivity of a clipped mean,
zCDP <-> (eps, delta) conversion, the shuffle-amplification calibration used
by the permuted accelerated method, and seeded noise streams.  Natural
logarithms throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationInfeasibleError, InvalidArgumentError, OutOfRangeError


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise InvalidArgumentError("epsilon must be positive and finite")
        if not (0.0 < self.delta < 1.0):
            raise InvalidArgumentError("delta must lie in (0, 1)")


@dataclass(frozen=True)
class ZcdpBudget:
    rho: float

    def __post_init__(self):
        if not (math.isfinite(self.rho) and self.rho > 0):
            raise InvalidArgumentError("rho must be positive and finite")


def gaussian_sigma(sensitivity: float, budget: PrivacyBudget) -> float:
    """Per-coordinate noise std of the Gaussian mechanism.

    sigma = 4 * sensitivity * sqrt(log(1/delta)) / epsilon.  The mechanism's
    guarantee is stated for 0 < epsilon <= 1, so larger budgets are rejected.
    """
    if sensitivity < 0:
        raise InvalidArgumentError("sensitivity must be nonnegative")
    if budget.epsilon > 1.0:
        raise OutOfRangeError("the Gaussian mechanism formula is scoped to epsilon <= 1")
    return 4.0 * sensitivity * math.sqrt(math.log(1.0 / budget.delta)) / budget.epsilon


def clipped_mean_sensitivity(C: float, n: int) -> float:
    """l2 sensitivity of a mean of per-element projections onto the C-ball."""
    if not C > 0:
        raise InvalidArgumentError("C must be positive")
    if not n >= 1:
        raise InvalidArgumentError("n must be >= 1")
    return 2.0 * C / n


def zcdp_to_dp(budget: ZcdpBudget, delta: float) -> float:
    """Convert rho-zCDP to (eps, delta)-DP: eps = rho + 2*sqrt(rho*log(1/delta))."""
    if not (0.0 < delta < 1.0):
        raise InvalidArgumentError("delta must lie in (0, 1)")
    rho = budget.rho
    return rho + 2.0 * math.sqrt(rho * math.log(1.0 / delta))


def dp_to_zcdp(budget: PrivacyBudget) -> float:
    """Largest rho whose zCDP->DP conversion stays within the budget."""
    big_l = math.log(1.0 / budget.delta)
    root = math.sqrt(big_l + budget.epsilon) - math.sqrt(big_l)
    return root * root


@dataclass(frozen=True)
class ShuffleCalibration:
    """Outputs of the shuffle-amplification noise calibration.

    ``sigma1`` is the local randomizer's per-report noise std; ``eps0`` the
    implied local budget with ``delta0 = delta / (2 e^eps n)``; ``eps_max``
    the largest central epsilon for which eps0 <= 1/2 holds at this c_cal.
    """

    sigma1: float
    eps0: float
    delta0: float
    delta_hat: float
    eps_max: float

    @property
    def local_budget_ok(self) -> bool:
        return self.eps0 <= 0.5


def shuffle_calibration(C: float, budget: PrivacyBudget, n: int,
                        c_cal: float = 1.0) -> ShuffleCalibration:
    """Calibrate per-report Gaussian noise for shuffled local randomizers.

    sigma1 = c_cal * C * sqrt(log(2/delta) * log(n/delta)) / (eps * sqrt(n)),
    with the delta split delta_hat = delta/2 and delta0 = delta/(2 e^eps n).
    All collapsed big-O constants live in ``c_cal``.  The amplification lemma
    needs n >= 16 * log(2/delta_hat).
    """
    if not C > 0:
        raise InvalidArgumentError("C must be positive")
    if not n >= 1:
        raise InvalidArgumentError("n must be >= 1")
    if not c_cal > 0:
        raise InvalidArgumentError("c_cal must be positive")
    eps, delta = budget.epsilon, budget.delta
    delta_hat = delta / 2.0
    if n < 16.0 * math.log(2.0 / delta_hat):
        raise CalibrationInfeasibleError(
            f"shuffle amplification needs n >= 16*log(2/delta_hat) = "
            f"{16.0 * math.log(2.0 / delta_hat):.1f}, got n = {n}")
    delta0 = delta / (2.0 * math.exp(eps) * n)
    sigma1 = (c_cal * C * math.sqrt(math.log(2.0 / delta) * math.log(n / delta))
              / (eps * math.sqrt(n)))
    eps0 = 2.0 * math.sqrt(2.0) * C * math.sqrt(math.log(1.0 / delta0)) / sigma1
    # eps0 scales linearly with eps (up to the e^eps inside delta0); one
    # fixed-point pass gives the boundary eps for the error message.
    eps_max = eps * 0.5 / eps0
    d0 = delta / (2.0 * math.exp(eps_max) * n)
    e0 = (2.0 * math.sqrt(2.0) * math.sqrt(math.log(1.0 / d0)) * eps_max
          * math.sqrt(n) / (c_cal * math.sqrt(math.log(2.0 / delta) * math.log(n / delta))))
    eps_max = eps_max * 0.5 / e0
    return ShuffleCalibration(sigma1, eps0, delta0, delta_hat, eps_max)


def shuffle_amplified_sigma(C: float, budget: PrivacyBudget, n: int,
                            c_cal: float = 1.0,
                            enforce_local_budget: bool = True) -> float:
    """Per-report noise std sigma1 for the shuffled clipped-gradient reports.

    Raises CalibrationInfeasibleError (naming the max feasible epsilon) when
    the implied local budget exceeds 1/2, the regime the amplification bound
    is valid in.  ``enforce_local_budget=False`` returns the raw formula
    value instead; callers doing so must surface eps0 themselves (the bench
    records it in run metadata).
    """
    cal = shuffle_calibration(C, budget, n, c_cal)
    if enforce_local_budget and not cal.local_budget_ok:
        raise CalibrationInfeasibleError(
            f"local randomizer budget eps0 = {cal.eps0:.3f} > 1/2 at "
            f"epsilon = {budget.epsilon:.4g}; max feasible epsilon at "
            f"c_cal = {c_cal:g} is about {cal.eps_max:.4g}",
            max_feasible=cal.eps_max)
    return cal.sigma1


def add_gaussian(v: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """v + N(0, sigma^2 I); deterministic for a given generator state."""
    if sigma < 0:
        raise InvalidArgumentError("sigma must be nonnegative")
    v = np.asarray(v, dtype=np.float64)
    if sigma == 0.0:
        return v.copy()
    return v + rng.normal(0.0, sigma, size=v.shape)


def dp_sgd_sigma(C: float, batch: int, steps: int, budget: PrivacyBudget) -> float:
    """Per-step noise std for the DP-SGD baseline under zCDP composition.

    Each step is a Gaussian mechanism with sensitivity 2C/batch and per-step
    cost rho_step = Delta^2/(2 sigma^2); steps compose additively and the
    total converts back through zcdp_to_dp.  Subsampling amplification is
    deliberately not claimed.
    """
    if not steps >= 1:
        raise InvalidArgumentError("steps must be >= 1")
    if not batch >= 1:
        raise InvalidArgumentError("batch must be >= 1")
    rho = dp_to_zcdp(budget)
    delta2 = clipped_mean_sensitivity(C, batch)
    return delta2 * math.sqrt(steps / (2.0 * rho))


def derive_rng(master_seed: int, *path: int) -> np.random.Generator:
    """Child generator at a stable (run, phase, step) index path."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(p) for p in path))
    return np.random.default_rng(ss)
