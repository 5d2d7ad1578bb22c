"""Vector checks, ball/ball-intersection geometry, and growth-condition probes.

Points and gradients are plain float64 numpy arrays.  Constraint sets are
immutable collections of Euclidean balls; a single ball projects radially and
an intersection projects with Dykstra's alternating method.  All norms are
l2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConvergenceFailureError, InvalidArgumentError

DEFAULT_PROJECTION_TOL = 1e-9


def as_vector(x, name: str = "vector") -> np.ndarray:
    """Validate and return a finite 1-d float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise InvalidArgumentError(f"{name} must be a 1-d array with d >= 1")
    if not np.all(np.isfinite(v)):
        raise InvalidArgumentError(f"{name} has non-finite entries")
    return v


@dataclass(frozen=True)
class Ball:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", as_vector(self.center, "ball center"))
        if not (math.isfinite(self.radius) and self.radius > 0):
            raise InvalidArgumentError("ball radius must be positive and finite")

    def contains(self, w, tol: float = 0.0) -> bool:
        return float(np.linalg.norm(w - self.center)) <= self.radius + tol


@dataclass(frozen=True)
class ConstraintSet:
    """A ball, or a nonempty intersection of balls, with a diameter bound.

    ``diameter`` is exact for a single ball (2r) and an upper bound for an
    intersection (the smallest constituent diameter).
    """

    balls: tuple[Ball, ...]

    def __post_init__(self):
        if not self.balls:
            raise InvalidArgumentError("constraint set needs at least one ball")
        d = self.balls[0].center.shape[0]
        for b in self.balls:
            if b.center.shape[0] != d:
                raise InvalidArgumentError("all balls must share one dimension")

    @property
    def dim(self) -> int:
        return self.balls[0].center.shape[0]

    @property
    def kind(self) -> str:
        return "ball" if len(self.balls) == 1 else "intersection"

    @property
    def diameter(self) -> float:
        return 2.0 * min(b.radius for b in self.balls)

    def contains(self, w, tol: float = 0.0) -> bool:
        return all(b.contains(w, tol) for b in self.balls)

    def _arrays(self):
        centers = np.stack([b.center for b in self.balls])
        radii = np.array([b.radius for b in self.balls])
        return centers, radii


def ball(center, radius: float) -> ConstraintSet:
    return ConstraintSet((Ball(np.asarray(center, dtype=np.float64), float(radius)),))


def intersect(cset: ConstraintSet, center, radius: float, witness=None) -> ConstraintSet:
    """Intersect a constraint set with one more ball.

    Emptiness is rejected at construction: for two balls via the exact
    center-distance test, and for deeper intersections via a witness point
    that must lie in every ball (the optimizers always intersect around a
    feasible iterate, so a witness is available).  When the new ball already
    contains the whole set, the set is returned unchanged.
    """
    nb = Ball(np.asarray(center, dtype=np.float64), float(radius))
    if all(float(np.linalg.norm(b.center - nb.center)) + b.radius <= nb.radius
           for b in cset.balls):
        return cset
    if all(float(np.linalg.norm(b.center - nb.center)) + nb.radius <= b.radius
           for b in cset.balls):
        return ConstraintSet((nb,))
    balls = cset.balls + (nb,)
    if len(balls) == 2:
        b0, b1 = balls
        if float(np.linalg.norm(b0.center - b1.center)) > b0.radius + b1.radius:
            raise InvalidArgumentError(
                "empty intersection: ball centers are farther apart than the "
                "sum of radii")
    else:
        if witness is None:
            raise InvalidArgumentError(
                "intersections of three or more balls need a feasible witness "
                "point")
        wv = as_vector(witness, "witness")
        if not all(b.contains(wv, 1e-12 * (1.0 + b.radius)) for b in balls):
            raise InvalidArgumentError("witness point is not in every ball")
    return ConstraintSet(balls)


def project_ball(z, C: float) -> np.ndarray:
    """Radial projection onto the origin-centered l2 ball of radius C.

    The zero vector is a fixed point for any C.
    """
    if not (math.isfinite(C) and C > 0):
        raise InvalidArgumentError("clip radius C must be positive and finite")
    v = as_vector(z, "z")
    nrm = float(np.linalg.norm(v))
    if nrm <= C:
        return v.copy()
    return v * (C / nrm)


def dykstra_round_cap(dim: int, tol: float) -> int:
    """Round cap for Dykstra: 10 * d * log(1/tol)."""
    return max(1, int(math.ceil(10.0 * dim * math.log(1.0 / tol))))


def project_set(w, cset: ConstraintSet, tol: float = DEFAULT_PROJECTION_TOL,
                backend: str | None = None) -> np.ndarray:
    """Euclidean projection onto the constraint set.

    Single balls project radially and two-ball intersections in closed form
    (nearest rim point when both constraints are active); deeper
    intersections run Dykstra sweeps until a full sweep moves less than
    ``tol``.  Raises ConvergenceFailureError (carrying the last iterate) if
    Dykstra's round cap is exceeded.
    """
    if not (tol > 0):
        raise InvalidArgumentError("tol must be positive")
    v = as_vector(w, "w")
    centers, radii = cset._arrays()
    cap = dykstra_round_cap(cset.dim, tol)
    x, rounds, ok = _kernels.project_balls(v, centers, radii, tol, cap, backend)
    if not ok:
        raise ConvergenceFailureError(
            f"Dykstra projection did not converge within {cap} rounds",
            last_iterate=x)
    return x


def dykstra_project(w, cset: ConstraintSet, tol: float = DEFAULT_PROJECTION_TOL,
                    max_rounds: int | None = None):
    """Dykstra's alternating projections, run on any ball intersection.

    The iterative reference route for project_set's closed forms: cycles
    project-and-correct sweeps over the balls until a sweep moves less than
    ``tol``.  Returns (point, rounds).  Raises ConvergenceFailureError with
    the last iterate when the cap is hit.
    """
    v = as_vector(w, "w")
    if len(cset.balls) == 1:
        b = cset.balls[0]
        diff = v - b.center
        dist = float(np.linalg.norm(diff))
        return (v.copy() if dist <= b.radius
                else b.center + (b.radius / dist) * diff), 0
    centers, radii = cset._arrays()
    cap = max_rounds if max_rounds is not None else dykstra_round_cap(cset.dim, tol)
    x, rounds, ok = _kernels._dykstra_balls_np(v, centers, radii, tol, cap)
    if not ok:
        raise ConvergenceFailureError(
            f"Dykstra did not converge within {cap} rounds", last_iterate=x)
    return x, rounds


@dataclass(frozen=True)
class TncSpec:
    """Growth-condition parameters: F(w) - F(w*) >= lam * ||w - w*||^theta."""

    theta: float
    lam: float

    def __post_init__(self):
        if not self.theta > 1:
            raise InvalidArgumentError("theta must exceed 1")
        if not self.lam > 0:
            raise InvalidArgumentError("lambda must be positive")

    @classmethod
    def from_strong_convexity(cls, lam: float) -> "TncSpec":
        """A lam-strongly-convex risk satisfies the condition with (2, lam/2)."""
        return cls(2.0, lam / 2.0)


@dataclass(frozen=True)
class TncReport:
    min_ratio: float
    holds: bool
    probes_used: int
    probes_skipped: int


def verify_tnc(risk, w_star, spec: TncSpec, probes,
               degeneracy_tol: float = 1e-9) -> TncReport:
    """Check the growth condition empirically on a probe set.

    ``risk`` maps a point to the population risk value; ``w_star`` is the
    minimizer (or the probe's projection onto the optimal set).  Probes
    within ``degeneracy_tol`` of w_star are skipped: the condition is vacuous
    at the minimizer.
    """
    ws = as_vector(w_star, "w_star")
    f_star = float(risk(ws))
    min_ratio = math.inf
    used = skipped = 0
    for p in probes:
        pv = as_vector(p, "probe")
        dist = float(np.linalg.norm(pv - ws))
        if dist < degeneracy_tol:
            skipped += 1
            continue
        ratio = (float(risk(pv)) - f_star) / dist ** spec.theta
        min_ratio = min(min_ratio, ratio)
        used += 1
    if used == 0:
        raise InvalidArgumentError("all probes are degenerate (too close to w_star)")
    return TncReport(min_ratio, min_ratio >= spec.lam, used, skipped)


def sample_in_set(cset: ConstraintSet, rng: np.random.Generator, n: int,
                  max_tries: int = 200) -> np.ndarray:
    """Uniform points in the constraint set (rejection from the smallest ball)."""
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    base = min(cset.balls, key=lambda b: b.radius)
    d = cset.dim
    out = np.empty((n, d))
    got = 0
    for _ in range(max_tries):
        m = max(n - got, 1)
        g = rng.standard_normal((m, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        r = base.radius * rng.random(m) ** (1.0 / d)
        pts = base.center + g * r[:, None]
        for p in pts:
            if cset.contains(p, 1e-12):
                out[got] = p
                got += 1
                if got == n:
                    return out
    raise ConvergenceFailureError(
        "could not draw enough points inside the intersection", last_iterate=out[:got])
