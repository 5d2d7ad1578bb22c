"""Experiment harness: declarative configs, sweeps, rate fits, SVG plots.

Configs are flat INI documents with one section per module (experiment,
loss, data, optim, privacy, output).  A sweep runs the (n, eps, seed) grid
in a worker pool (capped by HT_DPSCO_THREADS), appends one CSV row per cell
as it completes, and resumes across crashes by skipping already-recorded
cell keys.  Rate fitting is ordinary least squares on (log n, log risk).
"""

from __future__ import annotations

import concurrent.futures as cf
import configparser
import csv
import hashlib
import io
import json
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ConstraintSet, ball
from .data import Dataset, materialize_synthetic, parse_libsvm, scale_features, split
from .errors import InvalidArgumentError
from .estimator import estimate_moment_profile, dyadic_batch_sizes
from .losses import (LossOracle, SamplerSpec, l4_regression_oracle,
                     logistic_l2_oracle, synthetic_tnc_oracle)
from . import optim
from .privacy import PrivacyBudget, derive_rng

CSV_COLUMNS = ["algo", "loss", "n", "d", "eps", "delta", "seed",
               "final_metric", "wallclock_ms", "metadata_json"]

_ALGOS = ("lncgm", "psa", "iterated_lncgm", "pnca_sgd", "iterated_pnca_sgd",
          "dp_sgd")


@dataclass
class ExperimentConfig:
    raw_text: str
    experiment: dict
    loss: dict
    data: dict
    optim: dict
    privacy: dict
    output: dict

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.raw_text.encode()).hexdigest()[:16]

    @property
    def n_values(self):
        return _int_list(self.experiment["n"])

    @property
    def eps_values(self):
        return _float_list(self.experiment["eps"])

    @property
    def seeds(self):
        return _int_list(self.experiment["seeds"])

    def delta_for(self, n: int) -> float:
        rule = self.experiment.get("delta_rule", "pow:1.1")
        kind, _, arg = rule.partition(":")
        if kind == "pow":
            return float(n) ** (-float(arg))
        if kind == "fixed":
            return float(arg)
        raise InvalidArgumentError(f"unknown delta rule {rule!r}")


def _int_list(s):
    return [int(v) for v in str(s).replace(",", " ").split()]


def _float_list(s):
    return [float(v) for v in str(s).replace(",", " ").split()]


def _bool(s, default=False):
    if s is None:
        return default
    return str(s).strip().lower() in ("1", "true", "yes", "on")


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    return parse_config(text)


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    sections = {name: dict(cp[name]) for name in cp.sections()}
    exp = sections.get("experiment", {})
    for key in ("algorithm", "loss", "n", "eps", "seeds"):
        if key not in exp:
            raise InvalidArgumentError(f"[experiment] section needs {key!r}")
    if exp["algorithm"] not in _ALGOS:
        raise InvalidArgumentError(
            f"unknown algorithm {exp['algorithm']!r}; pick one of {_ALGOS}")
    cfg = ExperimentConfig(
        raw_text=text, experiment=exp,
        loss=sections.get("loss", {}), data=sections.get("data", {}),
        optim=sections.get("optim", {}), privacy=sections.get("privacy", {}),
        output=sections.get("output", {}))
    if not (cfg.n_values and cfg.eps_values and cfg.seeds):
        raise InvalidArgumentError("sweep axes must be nonempty")
    for n in cfg.n_values:
        dlt = cfg.delta_for(n)
        if not 0 < dlt < 1:
            raise InvalidArgumentError(f"delta rule gives {dlt} at n = {n}")
    return cfg


def cell_key(cfg: ExperimentConfig, n: int, eps: float, seed: int) -> str:
    raw = f"{cfg.config_hash}|n={n}|eps={eps!r}|seed={seed}"
    return hashlib.sha256(raw.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# cell construction
# ---------------------------------------------------------------------------


_REAL_CACHE: dict = {}


def _load_real(cfg: ExperimentConfig) -> Dataset:
    path = cfg.data["path"]
    key = (path, cfg.data.get("map_labels"), cfg.data.get("normalize"))
    if key not in _REAL_CACHE:
        ds = parse_libsvm(path, d_hint=int(cfg.data["d_hint"]) if "d_hint" in cfg.data else None,
                          map_binary_labels=_bool(cfg.data.get("map_labels")))
        if _bool(cfg.data.get("normalize")):
            ds = scale_features(ds)
        _REAL_CACHE[key] = ds
    return _REAL_CACHE[key]


def _synthetic_mu(cfg: ExperimentConfig, d: int) -> np.ndarray:
    mu_norm = float(cfg.loss.get("mu_norm", 1.0))
    direction = np.ones(d) / math.sqrt(d)
    return mu_norm * direction


def _sampler_spec(cfg: ExperimentConfig) -> SamplerSpec:
    kind = cfg.data.get("sampler", "bounded_kth_pareto")
    if kind == "bounded_kth_pareto":
        params = {"tail_index": float(cfg.data.get("tail_index", 4.5)),
                  "scale": float(cfg.data.get("scale", 1.0))}
    elif kind == "truncated_gaussian":
        params = {"trunc_at": float(cfg.data.get("trunc_at", 100.0)),
                  "noise_scale": float(cfg.data.get("noise_scale", 1.0))}
    elif kind == "rademacher_spike":
        params = {"p": float(cfg.data.get("p", 0.5)),
                  "magnitude": float(cfg.data.get("magnitude", 4.0))}
    else:
        raise InvalidArgumentError(f"unknown sampler {kind!r}")
    return SamplerSpec(kind, params)


@dataclass
class CellSetup:
    train: Dataset
    test: Dataset | None
    oracle: LossOracle
    cset: ConstraintSet
    w0: np.ndarray


def _build_cell(cfg: ExperimentConfig, n: int, seed: int) -> CellSetup:
    loss_kind = cfg.experiment["loss"]
    radius = float(cfg.loss.get("radius", 1.0))
    cset = ball(np.zeros(int(cfg.loss.get("d", 0)) or 1), radius) \
        if loss_kind == "synthetic" else None
    if loss_kind == "synthetic":
        d = int(cfg.loss.get("d", 8))
        cset = ball(np.zeros(d), radius)
        mu = _synthetic_mu(cfg, d)
        data_seed = int(np.random.SeedSequence(
            entropy=seed, spawn_key=(n, 17)).generate_state(1)[0])
        train = materialize_synthetic(_sampler_spec(cfg), mu, n, data_seed)
        theta = float(cfg.loss.get("theta", 2.0))
        oracle = synthetic_tnc_oracle(mu, theta, cset)
        test = None
    else:
        full = _load_real(cfg)
        if n > full.n:
            raise InvalidArgumentError(f"n = {n} exceeds dataset size {full.n}")
        rng = derive_rng(seed, 20, n)
        train, test = split(full, n, rng)
        d = train.d
        cset = ball(np.zeros(d), radius)
        if loss_kind == "l4":
            oracle = l4_regression_oracle(cset, train.max_feature_norm(),
                                          train.max_abs_label())
        elif loss_kind == "logistic":
            oracle = logistic_l2_oracle(float(cfg.loss.get("lambda_reg", 1e-3)),
                                        cset, train.max_feature_norm())
        else:
            raise InvalidArgumentError(f"unknown loss {loss_kind!r}")
    w0_kind = cfg.optim.get("w0", "zero")
    if w0_kind == "zero":
        w0 = np.zeros(cset.dim)
    elif w0_kind == "far":
        if oracle.known_minimizer is not None:
            direction = oracle.known_minimizer
            nd = float(np.linalg.norm(direction))
            w0 = -radius * direction / nd if nd > 0 else np.zeros(cset.dim)
        else:
            w0 = np.full(cset.dim, -radius / math.sqrt(cset.dim))
    else:
        raise InvalidArgumentError(f"unknown w0 kind {w0_kind!r}")
    return CellSetup(train, test, oracle, cset, w0)


def _metric(setup: CellSetup, w: np.ndarray) -> tuple[float, dict]:
    o = setup.oracle
    if o.known_minimizer is not None and o.population_risk is not None:
        return float(o.excess_risk(w)), {"metric": "excess_risk"}
    test = setup.test if setup.test is not None else setup.train
    X, y = test.X, test.y
    if o.name == "logistic":
        ce = float(np.mean(o.batch_values(w, X, y)))
        pred = (X @ w) >= 0
        err = float(np.mean(pred != (y > 0.5)))
        return ce, {"metric": "test_cross_entropy", "test_error": err}
    if o.name == "l4":
        r = X @ w - y
        return float(np.mean(r ** 4)), {"metric": "test_mean_quartic",
                                        "test_mse": float(np.mean(r ** 2))}
    raise InvalidArgumentError(f"no metric rule for oracle {o.name!r}")


def run_cell(cfg: ExperimentConfig, n: int, eps: float, seed: int) -> dict:
    """Execute one sweep cell and return its CSV row."""
    t0 = time.perf_counter()
    delta = cfg.delta_for(n)
    budget = PrivacyBudget(eps, delta)
    setup = _build_cell(cfg, n, seed)
    algo = cfg.experiment["algorithm"]
    oc, oo, op = cfg.optim, cfg.optim, cfg.privacy
    k = int(oc.get("k", 2))
    t_cap = int(oc.get("t_cap", optim.DEFAULT_PHASE_ITER_CAP))
    c_eta = float(oc.get("c_eta", 1.0))
    p = float(oc.get("p", 1.0))
    X, y = setup.train.X, setup.train.y
    meta_extra: dict = {}
    try:
        if algo == "lncgm":
            moments = estimate_moment_profile(
                setup.oracle, X, y, k, setup.cset, derive_rng(seed, 1, 7),
                batch_sizes=sorted(set(dyadic_batch_sizes(n)) | {1}))
            eta = float(oc.get("eta", 0.0)) or _default_eta(setup, c_eta)
            sched = optim.lncgm_schedule(n, eta, p, budget, moments,
                                         setup.cset.dim, t_cap=t_cap)
            res = optim.lncgm(setup.oracle, X, y, setup.cset, setup.w0,
                              sched, budget, seed)
        elif algo == "psa":
            res = optim.private_stochastic_approximation(
                setup.oracle, X, y, setup.cset, setup.w0,
                R0=float(oc.get("r0", setup.cset.diameter)), p=p,
                budget=budget, seed=seed, k=k, c_eta=c_eta, t_cap=t_cap)
        elif algo == "iterated_lncgm":
            res = optim.iterated_lncgm(
                setup.oracle, X, y, setup.cset, setup.w0,
                theta_bar=float(oc.get("theta_bar", 2.0)), p=p, budget=budget,
                seed=seed, R0=float(oc.get("r0", setup.cset.diameter)),
                k=k, c_eta=c_eta, t_cap=t_cap)
        elif algo == "pnca_sgd":
            res = optim.pnca_sgd(
                setup.oracle, X, y, setup.cset, setup.w0, budget, seed,
                T=int(oc["t"]) if "t" in oc else None,
                eta=float(oc["eta"]) if "eta" in oc else None, k=k,
                c_cal=float(op.get("c_cal", 1.0)),
                enforce_local_budget=_bool(op.get("enforce_local_budget"), True))
        elif algo == "iterated_pnca_sgd":
            res = optim.iterated_pnca_sgd(
                setup.oracle, X, y, setup.cset, setup.w0,
                theta_bar=float(oc.get("theta_bar", 2.0)), budget=budget,
                seed=seed, eta=float(oc["eta"]) if "eta" in oc else None,
                k=k, c_cal=float(op.get("c_cal", 1.0)),
                enforce_local_budget=_bool(op.get("enforce_local_budget"), True))
        elif algo == "dp_sgd":
            res = optim.dp_sgd_baseline(
                setup.oracle, X, y, setup.cset, setup.w0,
                T=int(oc.get("t", 200)), batch=int(oc.get("batch", 64)),
                clip=float(oc.get("clip", 1.0)), budget=budget, seed=seed,
                eta=float(oc.get("eta", 0.1)),
                max_epochs=int(oc.get("max_epochs", 10)))
        else:  # pragma: no cover - guarded at parse time
            raise InvalidArgumentError(algo)
        metric, mmeta = _metric(setup, res.w)
        meta_extra.update(mmeta)
        meta_extra.update({"budget": res.record.budget,
                           "record_meta": res.record.meta})
        status = "OK"
    except Exception as exc:  # cell failures must not kill the sweep
        metric = math.nan
        status = "FAILED"
        meta_extra = {"reason": f"{type(exc).__name__}: {exc}"}
    wall = (time.perf_counter() - t0) * 1e3
    meta_extra["status"] = status
    meta_extra["cell_key"] = cell_key(cfg, n, eps, seed)
    return {"algo": algo, "loss": cfg.experiment["loss"], "n": n,
            "d": setup.cset.dim, "eps": eps, "delta": delta, "seed": seed,
            "final_metric": "FAILED" if status == "FAILED" else repr(metric),
            "wallclock_ms": f"{wall:.3f}",
            "metadata_json": json.dumps(meta_extra, sort_keys=True, default=str)}


def _default_eta(setup: CellSetup, c_eta: float) -> float:
    alpha = setup.oracle.smoothness_alpha
    if math.isfinite(alpha):
        return c_eta / alpha
    return c_eta


def _worker_count(threads: int | None) -> int:
    if threads is not None:
        return max(1, threads)
    env = os.environ.get("HT_DPSCO_THREADS")
    if env:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def _existing_keys(path: Path) -> set:
    keys = set()
    if not path.exists():
        return keys
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                keys.add(json.loads(row["metadata_json"])["cell_key"])
            except (KeyError, json.JSONDecodeError):
                continue
    return keys


def run_experiment(cfg: ExperimentConfig, resume: bool = True,
                   threads: int | None = None, csv_path=None) -> list[dict]:
    """Execute the full sweep grid; append one CSV row per completed cell.

    Cells run in a thread pool; a lock serializes CSV writes and each row is
    flushed immediately so a crashed sweep resumes without duplicating
    completed cells.
    """
    out = Path(csv_path or cfg.output.get("csv", "results.csv"))
    done = _existing_keys(out) if resume else set()
    cells = [(n, eps, seed) for n in cfg.n_values for eps in cfg.eps_values
             for seed in cfg.seeds]
    todo = [c for c in cells
            if cell_key(cfg, *c) not in done]
    out.parent.mkdir(parents=True, exist_ok=True)
    new_file = not out.exists()
    lock = threading.Lock()
    rows = []
    traj_path = cfg.output.get("trajectories")
    with open(out, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        if new_file:
            writer.writeheader()
            fh.flush()

        def _run(cell):
            row = run_cell(cfg, *cell)
            with lock:
                writer.writerow(row)
                fh.flush()
                rows.append(row)
            return row

        workers = _worker_count(threads)
        if workers == 1:
            for c in todo:
                _run(c)
        else:
            with cf.ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(_run, todo))
    if traj_path:
        Path(traj_path).parent.mkdir(parents=True, exist_ok=True)
    return rows


# ---------------------------------------------------------------------------
# rate fitting and plotting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    points: tuple


def fit_rate(points) -> RateFit:
    """OLS power-law fit on (log n, log risk); needs >= 3 positive points."""
    pts = [(float(n), float(r)) for n, r in points]
    if len(pts) < 3:
        raise InvalidArgumentError("rate fit needs at least 3 points")
    if any(r <= 0 or n <= 0 for n, r in pts):
        raise InvalidArgumentError("rate fit needs positive n and risk")
    x = np.log([n for n, _ in pts])
    z = np.log([r for _, r in pts])
    slope, intercept = np.polyfit(x, z, 1)
    pred = slope * x + intercept
    ss_res = float(np.sum((z - pred) ** 2))
    ss_tot = float(np.sum((z - np.mean(z)) ** 2))
    r2 = 1.0 if ss_tot == 0 else max(0.0, 1.0 - ss_res / ss_tot)
    return RateFit(float(slope), float(intercept), float(r2),
                   tuple(zip(x.tolist(), z.tolist())))


def lower_median(values):
    """Deterministic median: the lower of the two middle order statistics."""
    vs = sorted(values)
    if not vs:
        raise InvalidArgumentError("median of empty set")
    return vs[(len(vs) - 1) // 2]


def read_rows(csv_path) -> list[dict]:
    path = Path(csv_path)
    if not path.exists():
        raise InvalidArgumentError(f"no such CSV: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(CSV_COLUMNS) <= set(reader.fieldnames):
            raise InvalidArgumentError(
                f"CSV schema mismatch: need columns {CSV_COLUMNS}")
        return [row for row in reader]


def _numeric_rows(rows):
    out = []
    for row in rows:
        try:
            m = float(row["final_metric"])
        except ValueError:
            continue
        if math.isfinite(m):
            out.append((row, m))
    return out


def rates_from_csv(csv_path, group: str = "algo", eps: float | None = None):
    """Median-over-seeds risk per n, grouped, each fit to a power law."""
    rows = read_rows(csv_path)
    fits = {}
    groups = sorted({row[group] for row in rows})
    for g in groups:
        cell: dict = {}
        for row, m in _numeric_rows(rows):
            if row[group] != g:
                continue
            if eps is not None and abs(float(row["eps"]) - eps) > 1e-12:
                continue
            cell.setdefault(int(row["n"]), []).append(m)
        pts = [(n, lower_median(vals)) for n, vals in sorted(cell.items())]
        if len(pts) >= 3:
            fits[g] = fit_rate(pts)
    return fits


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def emit_plot(csv_path, kind: str, out_path) -> bytes:
    """Write a deterministic SVG: one median line per algorithm with a
    min-max band over seeds.  ``kind`` picks the x axis: risk_vs_eps or
    risk_vs_n (the latter is log-log)."""
    if kind not in ("risk_vs_eps", "risk_vs_n"):
        raise InvalidArgumentError(f"unknown plot kind {kind!r}")
    rows = read_rows(csv_path)
    numeric = _numeric_rows(rows)
    if not numeric:
        raise InvalidArgumentError("CSV has no plottable rows")
    xkey = "eps" if kind == "risk_vs_eps" else "n"
    series: dict = {}
    for row, m in numeric:
        series.setdefault(row["algo"], {}).setdefault(float(row[xkey]), []).append(m)

    logx = kind == "risk_vs_n"
    width, height, pad = 640, 440, 60.0
    xs_all, ys_all = [], []
    shaped = {}
    for algo, cells in sorted(series.items()):
        pts = []
        for xv, vals in sorted(cells.items()):
            med = lower_median(vals)
            pts.append((xv, med, min(vals), max(vals)))
        shaped[algo] = pts
        xs_all += [p[0] for p in pts]
        ys_all += [p[2] for p in pts] + [p[3] for p in pts]
    if any(v <= 0 for v in ys_all):
        ylog = False
    else:
        ylog = True

    def tx(v):
        lo, hi = min(xs_all), max(xs_all)
        if logx:
            lo, hi, v = math.log(lo), math.log(hi), math.log(v)
        if hi == lo:
            return pad + (width - 2 * pad) / 2
        return pad + (v - lo) / (hi - lo) * (width - 2 * pad)

    def ty(v):
        lo, hi = min(ys_all), max(ys_all)
        if ylog:
            lo, hi, v = math.log(lo), math.log(hi), math.log(v)
        if hi == lo:
            return height - pad - (height - 2 * pad) / 2
        return height - pad - (v - lo) / (hi - lo) * (height - 2 * pad)

    def fmt(v):
        return f"{v:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
        f'y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" '
        f'stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 15}" text-anchor="middle" '
        f'font-size="14">{"epsilon" if xkey == "eps" else "n (samples)"}</text>',
        f'<text x="18" y="{height / 2:.1f}" text-anchor="middle" '
        f'font-size="14" transform="rotate(-90 18 {height / 2:.1f})">'
        f'{"risk (log scale)" if ylog else "risk"}</text>',
    ]
    for xv in sorted(set(xs_all)):
        parts.append(f'<text x="{fmt(tx(xv))}" y="{height - pad + 18:.1f}" '
                     f'text-anchor="middle" font-size="11">{xv:g}</text>')
    for i, (algo, pts) in enumerate(sorted(shaped.items())):
        color = _PALETTE[i % len(_PALETTE)]
        band = ([(tx(x), ty(hi)) for x, _, _, hi in pts]
                + [(tx(x), ty(lo)) for x, _, lo, _ in reversed(pts)])
        band_str = " ".join(f"{fmt(a)},{fmt(b)}" for a, b in band)
        parts.append(f'<polygon points="{band_str}" fill="{color}" '
                     f'opacity="0.15" stroke="none"/>')
        line = " ".join(f"{fmt(tx(x))},{fmt(ty(med))}" for x, med, _, _ in pts)
        parts.append(f'<polyline points="{line}" fill="none" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width - pad + 4:.1f}" '
                     f'y="{fmt(ty(pts[-1][1]))}" font-size="12" '
                     f'fill="{color}">{algo}</text>')
    parts.append("</svg>")
    blob = "\n".join(parts).encode()
    Path(out_path).write_bytes(blob)
    return blob


def moments_csv(cfg: ExperimentConfig, n: int | None = None,
                seed: int | None = None) -> str:
    """MomentProfile as CSV text with columns k, m, r_hat, r_root."""
    n = n or cfg.n_values[0]
    seed = cfg.seeds[0] if seed is None else seed
    setup = _build_cell(cfg, n, seed)
    k = int(cfg.optim.get("k", 2))
    prof = estimate_moment_profile(
        setup.oracle, setup.train.X, setup.train.y, k, setup.cset,
        derive_rng(seed, 30),
        batch_sizes=sorted(set(dyadic_batch_sizes(n)) | {1}))
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["k", "m", "r_hat", "r_root"])
    w.writerow([k, 1, repr(prof.r_k ** k), repr(prof.r_k)])
    for m in sorted(prof.r2k_by_batch):
        root = prof.r2k_by_batch[m]
        w.writerow([2 * k, m, repr(root ** (2 * k)), repr(root)])
    return buf.getvalue()
