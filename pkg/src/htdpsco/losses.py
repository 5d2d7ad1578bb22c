"""Loss oracles for the three benchmark problem families, plus data samplers.

Each oracle bundles per-sample value/gradient callables, vectorized batch
versions, curvature metadata valid on its constraint set, and (for the
synthetic family) a closed-form population risk and minimizer so excess risk
can be reported exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels
from .core import ConstraintSet, TncSpec, as_vector
from .errors import InvalidArgumentError, OutOfRangeError


@dataclass(frozen=True)
class LossOracle:
    """Per-sample loss with gradients and curvature metadata.

    ``lipschitz`` is None when no useful uniform bound exists (the
    heavy-tailed regime this package targets).  ``kernel_code`` and
    ``kernel_params`` select the compiled inner-loop family; generic oracles
    may leave them None and run on the vectorized numpy path only.
    """

    name: str
    value: Callable[[np.ndarray, np.ndarray, float], float]
    grad: Callable[[np.ndarray, np.ndarray, float], np.ndarray]
    batch_values: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    batch_grads: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    smoothness_alpha: float
    lipschitz: Optional[float] = None
    tnc: Optional[TncSpec] = None
    kernel_code: Optional[int] = None
    kernel_params: Optional[np.ndarray] = None
    known_minimizer: Optional[np.ndarray] = None
    population_risk: Optional[Callable[[np.ndarray], float]] = None
    meta: dict = field(default_factory=dict)

    def excess_risk(self, w) -> float:
        if self.population_risk is None or self.known_minimizer is None:
            raise InvalidArgumentError(f"{self.name} has no closed-form risk oracle")
        return self.population_risk(w) - self.population_risk(self.known_minimizer)


def _sup_norm_over(cset: Optional[ConstraintSet]) -> Optional[float]:
    if cset is None:
        return None
    return min(float(np.linalg.norm(b.center)) + b.radius for b in cset.balls)


def l4_regression_oracle(constraint: ConstraintSet,
                         max_feature_norm: float | None = None,
                         max_label: float | None = None) -> LossOracle:
    """Fourth-power linear regression: f(w; x, y) = (<w,x> - y)^4.

    The smoothness bound 12*(D*max||x|| + max|y|)^2 * max||x||^2 needs data
    radii; when they are not supplied the oracle reports infinite smoothness
    and the schedules must be given an explicit stepsize bound.
    """
    def value(w, x, y):
        return float((np.dot(w, x) - y) ** 4)

    def grad(w, x, y):
        r = np.dot(w, x) - y
        return (4.0 * r ** 3) * np.asarray(x, dtype=np.float64)

    def batch_values(w, X, y):
        return (X @ w - y) ** 4

    def batch_grads(w, X, y):
        return _kernels.batch_grads(w, X, y, _kernels.LINEAR_POWER, np.array([4.0]))

    meta = {"family": "l4_regression"}
    if max_feature_norm is not None and max_label is not None:
        bound = constraint.diameter * max_feature_norm + max_label
        alpha = 12.0 * bound ** 2 * max_feature_norm ** 2
        lip = 4.0 * bound ** 3 * max_feature_norm
        meta["residual_bound"] = bound
    else:
        alpha, lip = math.inf, None
        meta["residual_bound"] = None
    return LossOracle(
        name="l4",
        value=value, grad=grad, batch_values=batch_values, batch_grads=batch_grads,
        smoothness_alpha=alpha, lipschitz=lip,
        tnc=None,  # theta = 4; the constant is estimated empirically
        kernel_code=_kernels.LINEAR_POWER, kernel_params=np.array([4.0]),
        meta=meta)


def logistic_l2_oracle(lambda_reg: float, constraint: ConstraintSet,
                       max_feature_norm: float | None = None) -> LossOracle:
    """l2-regularized logistic regression with labels in {0, 1}."""
    if not lambda_reg > 0:
        raise InvalidArgumentError("lambda_reg must be positive")
    lam = float(lambda_reg)

    def _check_label(y):
        if y not in (0.0, 1.0):
            raise InvalidArgumentError(f"logistic labels must be 0 or 1, got {y}")

    def value(w, x, y):
        _check_label(float(y))
        z = float(np.dot(w, x))
        return float(np.logaddexp(0.0, z) - y * z + 0.5 * lam * np.dot(w, w))

    def grad(w, x, y):
        _check_label(float(y))
        z = float(np.dot(w, x))
        if z >= 0:
            s = 1.0 / (1.0 + math.exp(-z))
        else:
            e = math.exp(z)
            s = e / (1.0 + e)
        return (s - y) * np.asarray(x, dtype=np.float64) + lam * np.asarray(w)

    def batch_values(w, X, y):
        z = X @ w
        return np.logaddexp(0.0, z) - y * z + 0.5 * lam * float(np.dot(w, w))

    def batch_grads(w, X, y):
        return _kernels.batch_grads(w, X, y, _kernels.LOGISTIC_L2, np.array([lam]))

    if max_feature_norm is not None:
        alpha = max_feature_norm ** 2 / 4.0 + lam
        sup_w = _sup_norm_over(constraint)
        lip = max_feature_norm + lam * sup_w if sup_w is not None else None
    else:
        alpha, lip = math.inf, None
    return LossOracle(
        name="logistic",
        value=value, grad=grad, batch_values=batch_values, batch_grads=batch_grads,
        smoothness_alpha=alpha, lipschitz=lip,
        tnc=TncSpec.from_strong_convexity(lam),
        kernel_code=_kernels.LOGISTIC_L2, kernel_params=np.array([lam]),
        meta={"family": "logistic_l2", "lambda_reg": lam})


def synthetic_tnc_minimizer(mu: np.ndarray, theta: float) -> np.ndarray:
    """Stationary point of -<w, mu> + ||w||^theta / theta.

    Solves ||w||^(theta-2) w = mu, i.e. w = mu / ||mu||^((theta-2)/(theta-1)).
    """
    mu = as_vector(mu, "mu")
    nrm = float(np.linalg.norm(mu))
    return mu / nrm ** ((theta - 2.0) / (theta - 1.0))


def synthetic_tnc_oracle(mu, theta: float,
                         constraint: ConstraintSet | None = None) -> LossOracle:
    """Growth-condition test instance with a closed-form population risk.

    Per-sample loss f(w; x) = -<w,x> + ||w||^theta / theta for samples with
    mean mu; the population risk -<w,mu> + ||w||^theta / theta attains
    -(1 - 1/theta) ||mu||^(theta/(theta-1)) at the stationary point.  theta
    below 2 is rejected (the gradient loses smoothness at the origin).
    """
    if theta < 2.0:
        raise OutOfRangeError("theta must be >= 2")
    mu = as_vector(mu, "mu")
    if float(np.linalg.norm(mu)) == 0.0:
        raise InvalidArgumentError("mu must be nonzero")
    th = float(theta)

    def value(w, x, y=0.0):
        w = np.asarray(w, dtype=np.float64)
        return float(-np.dot(w, x) + np.linalg.norm(w) ** th / th)

    def grad(w, x, y=0.0):
        w = np.asarray(w, dtype=np.float64)
        coef = float(np.linalg.norm(w)) ** (th - 2.0)
        return coef * w - np.asarray(x, dtype=np.float64)

    def batch_values(w, X, y=None):
        w = np.asarray(w, dtype=np.float64)
        reg = float(np.linalg.norm(w)) ** th / th
        return -(X @ w) + reg

    def batch_grads(w, X, y=None):
        yv = np.zeros(X.shape[0]) if y is None else y
        return _kernels.batch_grads(w, X, yv, _kernels.MEAN_POWER, np.array([th]))

    def population_risk(w):
        w = np.asarray(w, dtype=np.float64)
        return float(-np.dot(w, mu) + np.linalg.norm(w) ** th / th)

    w_star = synthetic_tnc_minimizer(mu, th)
    meta = {"family": "synthetic_tnc", "theta": th,
            "risk_at_minimizer": -(1.0 - 1.0 / th)
            * float(np.linalg.norm(mu)) ** (th / (th - 1.0))}
    if constraint is not None and not constraint.contains(w_star, 1e-12):
        b = constraint.balls[0]
        if len(constraint.balls) == 1 and float(np.linalg.norm(b.center)) == 0.0:
            # radial objective: the constrained argmin just caps the radius
            w_star = (b.radius / float(np.linalg.norm(w_star))) * w_star
            meta["minimizer_capped_to_radius"] = b.radius
        else:
            raise InvalidArgumentError(
                "constraint must contain the stationary point or be an "
                "origin-centered ball")
    w_max = _sup_norm_over(constraint)
    if w_max is None:
        w_max = 2.0 * float(np.linalg.norm(w_star))
    alpha = (th - 1.0) * w_max ** (th - 2.0)
    return LossOracle(
        name=f"synthetic_tnc_theta{th:g}",
        value=value, grad=grad, batch_values=batch_values, batch_grads=batch_grads,
        smoothness_alpha=alpha, lipschitz=None,
        tnc=TncSpec(2.0, 0.5) if th == 2.0 else None,
        kernel_code=_kernels.MEAN_POWER, kernel_params=np.array([th]),
        known_minimizer=w_star, population_risk=population_risk, meta=meta)


# ---------------------------------------------------------------------------
# heavy-tailed feature samplers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerSpec:
    """Declarative sampler description, round-trippable through run configs."""

    kind: str  # bounded_kth_pareto | truncated_gaussian | rademacher_spike
    params: dict

    def as_dict(self) -> dict:
        return {"kind": self.kind, **{k: v for k, v in sorted(self.params.items())}}


class HeavyTailedSampler:
    """Seeded i.i.d. feature sampler with mean mu and known moment bounds."""

    def __init__(self, spec: SamplerSpec, mu, rng: np.random.Generator):
        self.spec = spec
        self.mu = as_vector(mu, "mu")
        self.rng = rng
        self.d = self.mu.shape[0]
        kind, p = spec.kind, spec.params
        if kind == "bounded_kth_pareto":
            a = float(p["tail_index"])
            scale = float(p.get("scale", 1.0))
            if a <= 1.0 or scale <= 0:
                raise InvalidArgumentError("need tail_index > 1 and scale > 0")
            self._a, self._scale = a, scale
        elif kind == "truncated_gaussian":
            b = float(p["trunc_at"])
            s = float(p.get("noise_scale", 1.0))
            if s <= 0 or np.any(np.abs(self.mu) >= b):
                raise InvalidArgumentError(
                    "trunc_at must exceed every |mu_j| and noise_scale > 0")
            self._b, self._s = b, s
            self._half = (b - np.abs(self.mu)) / s
        elif kind == "rademacher_spike":
            prob = float(p["p"])
            mag = float(p["magnitude"])
            if not (0.0 < prob <= 1.0):
                raise InvalidArgumentError("p must lie in (0, 1]")
            mu_norm = float(np.linalg.norm(self.mu))
            if mu_norm == 0.0 or prob * mag < mu_norm:
                raise InvalidArgumentError(
                    "need mu != 0 and p * magnitude >= ||mu||")
            self._p, self._mag = prob, mag
            self._u = self.mu / mu_norm
            self._q = 0.5 * (1.0 + mu_norm / (prob * mag))
        else:
            raise InvalidArgumentError(f"unknown sampler kind {kind!r}")

    def draw(self, n: int) -> np.ndarray:
        if n < 1:
            raise InvalidArgumentError("n must be >= 1")
        kind = self.spec.kind
        if kind == "bounded_kth_pareto":
            r = self._scale * (1.0 - self.rng.random(n)) ** (-1.0 / self._a)
            u = self.rng.standard_normal((n, self.d))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            return self.mu + r[:, None] * u
        if kind == "truncated_gaussian":
            t = np.empty((n, self.d))
            for j in range(self.d):
                t[:, j] = _truncated_std_normal(self.rng, n, float(self._half[j]))
            return self.mu + self._s * t
        # rademacher_spike
        x = np.zeros((n, self.d))
        hit = self.rng.random(n) < self._p
        sign = np.where(self.rng.random(n) < self._q, 1.0, -1.0)
        x[hit] = (self._mag * sign[hit])[:, None] * self._u
        return x

    def centered_moment_bound(self, k: int) -> float:
        """Analytic bound on E ||x - mu||^k (exact for the pareto kind)."""
        kind = self.spec.kind
        if kind == "bounded_kth_pareto":
            a = self._a
            if k >= a:
                raise OutOfRangeError(f"moment {k} does not exist for tail index {a}")
            return self._scale ** k * a / (a - k)
        if kind == "truncated_gaussian":
            return (self._s * math.sqrt(self.d) * float(np.max(self._half))) ** k
        mu_norm = float(np.linalg.norm(self.mu))
        return self._p * (self._mag + mu_norm) ** k

    def raw_second_moment(self) -> float:
        """Exact E ||x||^2 for the pareto and spike kinds."""
        kind = self.spec.kind
        mu2 = float(np.dot(self.mu, self.mu))
        if kind == "bounded_kth_pareto":
            # direction is isotropic and independent of the radius
            return mu2 + self._scale ** 2 * self._a / (self._a - 2.0)
        if kind == "rademacher_spike":
            return self._p * self._mag ** 2
        raise OutOfRangeError("no closed-form raw second moment for this kind")


def heavy_tailed_sampler(spec: SamplerSpec, mu, rng: np.random.Generator) -> HeavyTailedSampler:
    return HeavyTailedSampler(spec, mu, rng)


def _truncated_std_normal(rng: np.random.Generator, n: int, half_width: float) -> np.ndarray:
    """Standard normal conditioned on [-h, h], by rejection."""
    out = np.empty(n)
    got = 0
    while got < n:
        m = max(n - got, 16)
        draw = rng.standard_normal(m)
        keep = draw[np.abs(draw) <= half_width]
        take = min(keep.size, n - got)
        out[got:got + take] = keep[:take]
        got += take
    return out
