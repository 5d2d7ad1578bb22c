"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen once at import time: numba when importable, unless the
environment variable ``HT_DPSCO_BACKEND=numpy`` forces the fallback.  Every
public dispatcher also accepts an explicit ``backend=`` argument so both
paths can be exercised in one process (used by the regression tests and by
``benchmarks/backend_bench.py``).

Loss families are encoded as integer codes so a single compiled driver serves
all of them:

    LINEAR_POWER  f(w; x, y) = (<w,x> - y)^q          params = [q]
    LOGISTIC_L2   cross-entropy + (lam/2)||w||^2       params = [lam]
    MEAN_POWER    f(w; x)    = -<w,x> + ||w||^t / t    params = [t]
"""

from __future__ import annotations

import math
import os

import numpy as np

LINEAR_POWER = 0
LOGISTIC_L2 = 1
MEAN_POWER = 2

_FORCED = os.environ.get("HT_DPSCO_BACKEND", "").strip().lower()
if _FORCED not in ("", "numba", "numpy"):
    raise ValueError(f"HT_DPSCO_BACKEND must be 'numba' or 'numpy', got {_FORCED!r}")

try:
    if _FORCED == "numpy":
        raise ImportError("numpy backend forced via HT_DPSCO_BACKEND")
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via subprocess in benchmarks
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


ACTIVE_BACKEND = "numba" if HAS_NUMBA else "numpy"


def active_backend() -> str:
    return ACTIVE_BACKEND


def _resolve(backend: str | None) -> str:
    if backend is None:
        return ACTIVE_BACKEND
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is unavailable")
    return backend


# ---------------------------------------------------------------------------
# numba path: sequential per-sample loops
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _grad_sample(w, x, yi, code, params, out):
    d = w.shape[0]
    if code == 0:  # LINEAR_POWER
        q = int(params[0])
        r = 0.0
        for j in range(d):
            r += w[j] * x[j]
        r -= yi
        rp = 1.0
        for _ in range(q - 1):
            rp *= r
        c = q * rp
        for j in range(d):
            out[j] = c * x[j]
    elif code == 1:  # LOGISTIC_L2
        lam = params[0]
        z = 0.0
        for j in range(d):
            z += w[j] * x[j]
        if z >= 0.0:
            s = 1.0 / (1.0 + math.exp(-z))
        else:
            e = math.exp(z)
            s = e / (1.0 + e)
        c = s - yi
        for j in range(d):
            out[j] = c * x[j] + lam * w[j]
    else:  # MEAN_POWER
        t = params[0]
        nrm = 0.0
        for j in range(d):
            nrm += w[j] * w[j]
        nrm = math.sqrt(nrm)
        coef = nrm ** (t - 2.0)
        for j in range(d):
            out[j] = coef * w[j] - x[j]


@njit(cache=True, nogil=True, fastmath=True)
def _cgm_linear_power(w, X, y, C, q, out):
    n, d = X.shape
    for j in range(d):
        out[j] = 0.0
    clipped = 0
    for i in range(n):
        z = 0.0
        for j in range(d):
            z += w[j] * X[i, j]
        r = z - y[i]
        rp = 1.0
        for _ in range(q - 1):
            rp *= r
        c = q * rp
        xn = 0.0
        for j in range(d):
            xn += X[i, j] * X[i, j]
        nrm = abs(c) * math.sqrt(xn)
        if nrm > C:
            s = C / nrm * c
            clipped += 1
        else:
            s = c
        for j in range(d):
            out[j] += s * X[i, j]
    inv = 1.0 / n
    for j in range(d):
        out[j] *= inv
    return clipped


@njit(cache=True, nogil=True, fastmath=True)
def _cgm_logistic(w, X, y, C, lam, out):
    n, d = X.shape
    g = np.empty(d)
    for j in range(d):
        out[j] = 0.0
    clipped = 0
    for i in range(n):
        z = 0.0
        for j in range(d):
            z += w[j] * X[i, j]
        if z >= 0.0:
            s = 1.0 / (1.0 + math.exp(-z))
        else:
            e = math.exp(z)
            s = e / (1.0 + e)
        c = s - y[i]
        nrm = 0.0
        for j in range(d):
            g[j] = c * X[i, j] + lam * w[j]
            nrm += g[j] * g[j]
        nrm = math.sqrt(nrm)
        sc = C / nrm if nrm > C else 1.0
        if nrm > C:
            clipped += 1
        for j in range(d):
            out[j] += sc * g[j]
    inv = 1.0 / n
    for j in range(d):
        out[j] *= inv
    return clipped


@njit(cache=True, nogil=True, fastmath=True)
def _cgm_mean_power(w, X, y, C, t, out):
    n, d = X.shape
    wn = 0.0
    for j in range(d):
        wn += w[j] * w[j]
    coef = math.sqrt(wn) ** (t - 2.0)
    for j in range(d):
        out[j] = 0.0
    clipped = 0
    for i in range(n):
        nrm = 0.0
        for j in range(d):
            gj = coef * w[j] - X[i, j]
            nrm += gj * gj
        nrm = math.sqrt(nrm)
        sc = C / nrm if nrm > C else 1.0
        if nrm > C:
            clipped += 1
        for j in range(d):
            out[j] += sc * (coef * w[j] - X[i, j])
    inv = 1.0 / n
    for j in range(d):
        out[j] *= inv
    return clipped


@njit(cache=True, nogil=True)
def _clipped_grad_mean(w, X, y, C, code, params, out):
    """Mean of per-sample gradients, each radially clipped to norm C.

    Returns the number of clipped samples.
    """
    if code == 0:
        return _cgm_linear_power(w, X, y, C, int(params[0]), out)
    if code == 1:
        return _cgm_logistic(w, X, y, C, params[0], out)
    return _cgm_mean_power(w, X, y, C, params[0], out)


@njit(cache=True, nogil=True)
def _proj_one_ball(w, center, radius, out):
    d = w.shape[0]
    dist = 0.0
    for j in range(d):
        dist += (w[j] - center[j]) ** 2
    dist = math.sqrt(dist)
    if dist <= radius:
        for j in range(d):
            out[j] = w[j]
    else:
        s = radius / dist
        for j in range(d):
            out[j] = center[j] + s * (w[j] - center[j])


@njit(cache=True, nogil=True)
def _proj_two_balls(z, c1, r1, c2, r2, out):
    """Exact Euclidean projection onto the intersection of two balls.

    Falls through: interior point, single active ball, then the rim (the
    (d-2)-sphere where both boundaries meet).  Assumes the intersection is
    nonempty (checked at construction).
    """
    d = z.shape[0]
    n1 = 0.0
    n2 = 0.0
    for j in range(d):
        n1 += (z[j] - c1[j]) ** 2
        n2 += (z[j] - c2[j]) ** 2
    n1 = math.sqrt(n1)
    n2 = math.sqrt(n2)
    if n1 <= r1 and n2 <= r2:
        for j in range(d):
            out[j] = z[j]
        return
    if n1 > r1:
        s = r1 / n1
        ok = 0.0
        for j in range(d):
            out[j] = c1[j] + s * (z[j] - c1[j])
            ok += (out[j] - c2[j]) ** 2
        if math.sqrt(ok) <= r2:
            return
    if n2 > r2:
        s = r2 / n2
        ok = 0.0
        for j in range(d):
            out[j] = c2[j] + s * (z[j] - c2[j])
            ok += (out[j] - c1[j]) ** 2
        if math.sqrt(ok) <= r1:
            return
    # both constraints active: nearest point of the rim
    dd = 0.0
    for j in range(d):
        dd += (c2[j] - c1[j]) ** 2
    dd = math.sqrt(dd)
    if dd < 1e-300:  # concentric: smaller ball wins (nonempty by precondition)
        if r1 <= r2:
            _proj_one_ball(z, c1, r1, out)
        else:
            _proj_one_ball(z, c2, r2, out)
        return
    a = (dd * dd + r1 * r1 - r2 * r2) / (2.0 * dd)
    rho2 = r1 * r1 - a * a
    rho = math.sqrt(rho2) if rho2 > 0.0 else 0.0
    qu = 0.0
    for j in range(d):
        qu += (z[j] - c1[j] - a * (c2[j] - c1[j]) / dd) * (c2[j] - c1[j]) / dd
    npp = 0.0
    for j in range(d):
        out[j] = z[j] - c1[j] - a * (c2[j] - c1[j]) / dd - qu * (c2[j] - c1[j]) / dd
        npp += out[j] * out[j]
    npp = math.sqrt(npp)
    if npp < 1e-14:
        # z sits on the center axis: pick a deterministic rim direction
        kmin = 0
        umin = abs(c2[0] - c1[0])
        for j in range(1, d):
            if abs(c2[j] - c1[j]) < umin:
                umin = abs(c2[j] - c1[j])
                kmin = j
        nrm = 0.0
        for j in range(d):
            u_j = (c2[j] - c1[j]) / dd
            out[j] = -u_j * (c2[kmin] - c1[kmin]) / dd
            if j == kmin:
                out[j] += 1.0
            nrm += out[j] * out[j]
        npp = math.sqrt(nrm)
    for j in range(d):
        out[j] = c1[j] + a * (c2[j] - c1[j]) / dd + rho * out[j] / npp


@njit(cache=True, nogil=True)
def _dykstra_balls(z, centers, radii, tol, max_rounds):
    """Dykstra alternating projections onto an intersection of balls.

    Returns (point, rounds_used, converged_flag).
    """
    m, d = centers.shape
    x = z.copy()
    p = np.zeros((m, d))
    ytmp = np.empty(d)
    xin = np.empty(d)
    for r in range(max_rounds):
        delta = 0.0
        for i in range(m):
            for j in range(d):
                xin[j] = x[j] + p[i, j]
            _proj_one_ball(xin, centers[i], radii[i], ytmp)
            for j in range(d):
                p[i, j] = xin[j] - ytmp[j]
                step = ytmp[j] - x[j]
                delta += step * step
                x[j] = ytmp[j]
        if math.sqrt(delta) < tol:
            return x, r + 1, 1
    return x, max_rounds, 0


@njit(cache=True, nogil=True)
def _feasible_within(x, centers, radii, slack):
    m = centers.shape[0]
    d = x.shape[0]
    for i in range(m):
        dist = 0.0
        for j in range(d):
            dist += (x[j] - centers[i, j]) ** 2
        if math.sqrt(dist) > radii[i] + slack:
            return False
    return True


@njit(cache=True, nogil=True)
def _project_balls_nb(z, centers, radii, tol, max_rounds):
    m = centers.shape[0]
    out = np.empty_like(z)
    if m == 1:
        _proj_one_ball(z, centers[0], radii[0], out)
        return out, 1, 1
    if m == 2:
        _proj_two_balls(z, centers[0], radii[0], centers[1], radii[1], out)
        return out, 1, 1
    return _dykstra_balls(z, centers, radii, tol, max_rounds)


@njit(cache=True, nogil=True)
def _crgd_loop(X, y, w0, reg_center, T, eta, C, lam, centers, radii,
               tol, max_rounds, code, params, div_limit):
    """Clipped regularized projected gradient descent, T full-batch steps.

    Returns (w_T, clipped_fraction, status) with status 0=ok, 1=diverged,
    2=projection did not converge.
    """
    n, d = X.shape
    w = w0.copy()
    gmean = np.empty(d)
    clipped = 0
    for _ in range(T):
        clipped += _clipped_grad_mean(w, X, y, C, code, params, gmean)
        for j in range(d):
            w[j] = w[j] - eta * (gmean[j] + lam * (w[j] - reg_center[j]))
        w, _, ok = _project_balls_nb(w, centers, radii, tol, max_rounds)
        if ok == 0 and not _feasible_within(w, centers, radii, 1e-6):
            return w, 0.0, 2
        nrm = 0.0
        for j in range(d):
            nrm += w[j] * w[j]
        if math.sqrt(nrm) > div_limit:
            return w, 0.0, 1
    frac = clipped / (T * n) if T > 0 else 0.0
    return w, frac, 0


@njit(cache=True, nogil=True)
def _dpsgd_loop(X, y, order, w0, T, b, eta, C, noise, centers, radii,
                tol, max_rounds, code, params, div_limit):
    """Minibatch clipped SGD with per-step Gaussian noise rows.

    ``order`` holds T*b sample indices (reshuffled epochs, precomputed);
    ``noise`` is a (T, d) array of pre-drawn noise.
    """
    d = X.shape[1]
    w = w0.copy()
    g = np.empty(d)
    acc = np.empty(d)
    clipped = 0
    for t in range(T):
        for j in range(d):
            acc[j] = 0.0
        for i in range(b):
            idx = order[t * b + i]
            _grad_sample(w, X[idx], y[idx], code, params, g)
            nrm = 0.0
            for j in range(d):
                nrm += g[j] * g[j]
            nrm = math.sqrt(nrm)
            if nrm > C:
                s = C / nrm
                clipped += 1
            else:
                s = 1.0
            for j in range(d):
                acc[j] += s * g[j]
        for j in range(d):
            w[j] = w[j] - eta * (acc[j] / b + noise[t, j])
        w, _, ok = _project_balls_nb(w, centers, radii, tol, max_rounds)
        if ok == 0 and not _feasible_within(w, centers, radii, 1e-6):
            return w, 0.0, 2
        nrm = 0.0
        for j in range(d):
            nrm += w[j] * w[j]
        if math.sqrt(nrm) > div_limit:
            return w, 0.0, 1
    frac = clipped / (T * b) if T > 0 else 0.0
    return w, frac, 0


# ---------------------------------------------------------------------------
# numpy fallback: vectorized over the batch, python loop over steps
# ---------------------------------------------------------------------------


def _batch_grads_np(w, X, y, code, params):
    if code == LINEAR_POWER:
        q = int(params[0])
        r = X @ w - y
        return (q * r ** (q - 1))[:, None] * X
    if code == LOGISTIC_L2:
        lam = params[0]
        z = X @ w
        s = np.empty_like(z)
        pos = z >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        e = np.exp(z[~pos])
        s[~pos] = e / (1.0 + e)
        return (s - y)[:, None] * X + lam * w
    if code == MEAN_POWER:
        t = params[0]
        nrm = float(np.linalg.norm(w))
        coef = nrm ** (t - 2.0)
        return np.broadcast_to(coef * w, X.shape) - X
    raise ValueError(f"unknown loss code {code}")


def _clipped_grad_mean_np(w, X, y, C, code, params):
    g = _batch_grads_np(w, X, y, code, params)
    nrm = np.linalg.norm(g, axis=1)
    over = nrm > C
    scale = np.ones_like(nrm)
    scale[over] = C / nrm[over]
    return (g * scale[:, None]).sum(axis=0) / X.shape[0], int(over.sum())


def _proj_one_ball_np(w, center, radius):
    diff = w - center
    dist = float(np.linalg.norm(diff))
    if dist <= radius:
        return w.copy()
    return center + (radius / dist) * diff


def _proj_two_balls_np(z, c1, r1, c2, r2):
    if np.linalg.norm(z - c1) <= r1 and np.linalg.norm(z - c2) <= r2:
        return z.copy()
    p1 = _proj_one_ball_np(z, c1, r1)
    if np.linalg.norm(p1 - c2) <= r2:
        return p1
    p2 = _proj_one_ball_np(z, c2, r2)
    if np.linalg.norm(p2 - c1) <= r1:
        return p2
    axis = c2 - c1
    dd = float(np.linalg.norm(axis))
    if dd < 1e-300:
        return p1 if r1 <= r2 else p2
    u = axis / dd
    a = (dd * dd + r1 * r1 - r2 * r2) / (2.0 * dd)
    rho = math.sqrt(max(r1 * r1 - a * a, 0.0))
    mid = c1 + a * u
    q = z - mid
    q_perp = q - float(np.dot(q, u)) * u
    npp = float(np.linalg.norm(q_perp))
    if npp < 1e-14:
        kmin = int(np.argmin(np.abs(u)))
        e = -u[kmin] * u
        e[kmin] += 1.0
        q_perp, npp = e, float(np.linalg.norm(e))
    return mid + rho * q_perp / npp


def _feasible_within_np(x, centers, radii, slack):
    return bool(np.all(np.linalg.norm(x - centers, axis=1) <= radii + slack))


def _project_balls_np(z, centers, radii, tol, max_rounds):
    m = centers.shape[0]
    if m == 1:
        return _proj_one_ball_np(z, centers[0], radii[0]), 1, 1
    if m == 2:
        return _proj_two_balls_np(z, centers[0], radii[0],
                                  centers[1], radii[1]), 1, 1
    return _dykstra_balls_np(z, centers, radii, tol, max_rounds)


def _dykstra_balls_np(z, centers, radii, tol, max_rounds):
    m = centers.shape[0]
    x = z.copy()
    p = np.zeros_like(centers)
    for r in range(max_rounds):
        delta = 0.0
        for i in range(m):
            yv = _proj_one_ball_np(x + p[i], centers[i], radii[i])
            p[i] = x + p[i] - yv
            delta += float(np.sum((yv - x) ** 2))
            x = yv
        if math.sqrt(delta) < tol:
            return x, r + 1, 1
    return x, max_rounds, 0


def _crgd_loop_np(X, y, w0, reg_center, T, eta, C, lam, centers, radii,
                  tol, max_rounds, code, params, div_limit):
    w = w0.copy()
    clipped = 0
    n = X.shape[0]
    for _ in range(T):
        gmean, c = _clipped_grad_mean_np(w, X, y, C, code, params)
        clipped += c
        w = w - eta * (gmean + lam * (w - reg_center))
        w, _, ok = _project_balls_np(w, centers, radii, tol, max_rounds)
        if ok == 0 and not _feasible_within_np(w, centers, radii, 1e-6):
            return w, 0.0, 2
        if float(np.linalg.norm(w)) > div_limit:
            return w, 0.0, 1
    frac = clipped / (T * n) if T > 0 else 0.0
    return w, frac, 0


def _dpsgd_loop_np(X, y, order, w0, T, b, eta, C, noise, centers, radii,
                   tol, max_rounds, code, params, div_limit):
    w = w0.copy()
    clipped = 0
    for t in range(T):
        idx = order[t * b:(t + 1) * b]
        gmean, c = _clipped_grad_mean_np(w, X[idx], y[idx], C, code, params)
        clipped += c
        w = w - eta * (gmean + noise[t])
        w, _, ok = _project_balls_np(w, centers, radii, tol, max_rounds)
        if ok == 0 and not _feasible_within_np(w, centers, radii, 1e-6):
            return w, 0.0, 2
        if float(np.linalg.norm(w)) > div_limit:
            return w, 0.0, 1
    frac = clipped / (T * b) if T > 0 else 0.0
    return w, frac, 0


# ---------------------------------------------------------------------------
# dispatchers
# ---------------------------------------------------------------------------


def clipped_grad_mean(w, X, y, C, code, params, backend=None):
    """Clipped-mean gradient at w over a batch; returns (mean, clipped_count)."""
    if _resolve(backend) == "numba":
        out = np.empty_like(w)
        clipped = _clipped_grad_mean(w, X, y, C, code, params, out)
        return out, int(clipped)
    return _clipped_grad_mean_np(w, X, y, C, code, params)


def project_balls(z, centers, radii, tol, max_rounds, backend=None):
    """Project z onto the intersection of balls; returns (point, rounds, ok)."""
    if _resolve(backend) == "numba":
        x, rounds, ok = _project_balls_nb(z, centers, radii, tol, max_rounds)
        return x, int(rounds), bool(ok)
    x, rounds, ok = _project_balls_np(z, centers, radii, tol, max_rounds)
    return x, rounds, bool(ok)


def crgd_run(X, y, w0, reg_center, T, eta, C, lam, centers, radii,
             tol, max_rounds, code, params, div_limit, backend=None):
    fn = _crgd_loop if _resolve(backend) == "numba" else _crgd_loop_np
    w, frac, status = fn(X, y, w0, reg_center, T, eta, C, lam, centers, radii,
                         tol, max_rounds, code, params, div_limit)
    return w, float(frac), int(status)


def dpsgd_run(X, y, order, w0, T, b, eta, C, noise, centers, radii,
              tol, max_rounds, code, params, div_limit, backend=None):
    fn = _dpsgd_loop if _resolve(backend) == "numba" else _dpsgd_loop_np
    w, frac, status = fn(X, y, order, w0, T, b, eta, C, noise, centers, radii,
                         tol, max_rounds, code, params, div_limit)
    return w, float(frac), int(status)


def batch_grads(w, X, y, code, params):
    """Vectorized per-sample gradients (numpy path; used by moment probes)."""
    return _batch_grads_np(w, X, y, code, params)
