"""Dataset ingestion and materialization.

Samples are dense rows of a float64 feature matrix with a float label
vector.  The libsvm sparse text format is densified on parse; gzip input is
accepted by extension sniffing.  Features are NOT normalized by default
(heavy tails are the point); ``scale_features`` is the opt-in knob.
"""

from __future__ import annotations

import gzip
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, ParseError
from .losses import HeavyTailedSampler, SamplerSpec, heavy_tailed_sampler


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray  # (n, d) float64
    y: np.ndarray  # (n,) float64
    name: str = "unnamed"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.X.ndim != 2 or self.X.shape[0] < 1:
            raise InvalidArgumentError("X must be a nonempty (n, d) matrix")
        if self.y.shape != (self.X.shape[0],):
            raise InvalidArgumentError("y must have one label per row of X")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise InvalidArgumentError("dataset has non-finite entries")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def max_feature_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.X, axis=1)))

    def max_abs_label(self) -> float:
        return float(np.max(np.abs(self.y)))

    def take(self, idx, name=None) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], name or self.name,
                       dict(self.provenance, subset=len(idx)))


def _open_text(path):
    p = Path(path)
    if p.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(p, "rb"), encoding="ascii")
    return open(p, "r", encoding="ascii")


def parse_libsvm(source, d_hint: int | None = None,
                 map_binary_labels: bool = False, name: str | None = None) -> Dataset:
    """Parse libsvm text: ``label idx:val ...`` with strictly increasing
    1-based indices per line.

    ``source`` may be a path or an open text stream.  ``d_hint`` widens the
    feature space when it exceeds the max index seen.  With
    ``map_binary_labels`` the labels {-1, +1} are mapped to {0, 1} for the
    logistic loss.
    """
    close = False
    prov: dict = {}
    if isinstance(source, (str, Path)):
        prov["path"] = str(source)
        h = hashlib.sha256()
        opener = gzip.open if str(source).endswith(".gz") else open
        with opener(source, "rb") as fh:
            h.update(fh.read())
        prov["sha256"] = h.hexdigest()
        stream = _open_text(source)
        close = True
        if name is None:
            name = Path(source).name
    else:
        stream = source
    rows: list[dict] = []
    labels: list[float] = []
    d_max = 0
    try:
        for line_no, line in enumerate(stream, start=1):
            line = line.strip()
            if not line:
                continue
            tokens = line.split()
            try:
                label = float(tokens[0])
            except ValueError:
                raise ParseError(f"line {line_no}: bad label {tokens[0]!r}", line_no)
            if not math.isfinite(label):
                raise ParseError(f"line {line_no}: non-finite label", line_no)
            entries: dict[int, float] = {}
            prev = 0
            for tok in tokens[1:]:
                try:
                    idx_s, val_s = tok.split(":", 1)
                    idx = int(idx_s)
                    val = float(val_s)
                except ValueError:
                    raise ParseError(f"line {line_no}: malformed token {tok!r}", line_no)
                if idx <= 0:
                    raise ParseError(f"line {line_no}: index {idx} must be >= 1", line_no)
                if idx <= prev:
                    raise ParseError(
                        f"line {line_no}: indices must be strictly increasing "
                        f"({idx} after {prev})", line_no)
                if not math.isfinite(val):
                    raise ParseError(f"line {line_no}: non-finite value", line_no)
                prev = idx
                entries[idx] = val
                d_max = max(d_max, idx)
            rows.append(entries)
            labels.append(label)
    finally:
        if close:
            stream.close()
    if not rows:
        raise ParseError("empty input", None)
    d = max(d_max, d_hint or 0)
    if d == 0:
        raise ParseError("no feature indices and no d_hint", None)
    X = np.zeros((len(rows), d))
    for i, entries in enumerate(rows):
        for idx, val in entries.items():
            X[i, idx - 1] = val
    y = np.asarray(labels)
    if map_binary_labels:
        uniq = set(np.unique(y).tolist())
        if not uniq <= {-1.0, 1.0, 0.0}:
            raise ParseError(f"labels {sorted(uniq)} are not binary -1/+1", None)
        y = np.where(y > 0, 1.0, 0.0)
        prov["label_map"] = "{-1,+1}->{0,1}"
    return Dataset(X, y, name or "stream", prov)


def serialize_libsvm(ds: Dataset) -> str:
    """Canonical libsvm text (repr-exact values; round-trips through parse)."""
    lines = []
    for i in range(ds.n):
        parts = [repr(float(ds.y[i]))]
        row = ds.X[i]
        for j in np.nonzero(row)[0]:
            parts.append(f"{j + 1}:{row[j]!r}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def split(ds: Dataset, train_n: int, rng: np.random.Generator):
    """Disjoint permutation split into (train, test) of exact sizes."""
    if not 0 < train_n <= ds.n:
        raise InvalidArgumentError(f"train_n must lie in [1, {ds.n}]")
    perm = rng.permutation(ds.n)
    tr = ds.take(perm[:train_n], name=f"{ds.name}/train")
    te_idx = perm[train_n:]
    if te_idx.size == 0:
        # taking everything leaves an empty test side, which Dataset rejects
        return tr, None
    return tr, ds.take(te_idx, name=f"{ds.name}/test")


def materialize_synthetic(spec: SamplerSpec, mu, n: int, seed: int,
                          name: str = "synthetic") -> Dataset:
    """Draw n samples from a heavy-tailed sampler; labels are zero.

    The generator spec and seed land in provenance and round-trip through
    the CSV metadata column.
    """
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    sampler = heavy_tailed_sampler(spec, mu, rng)
    X = sampler.draw(n)
    prov = {"generator": spec.as_dict(), "seed": int(seed),
            "mu": [float(v) for v in np.asarray(mu, dtype=np.float64)]}
    return Dataset(X, np.zeros(n), name, prov)


def provenance_json(ds: Dataset) -> str:
    return json.dumps(ds.provenance, sort_keys=True)


def scale_features(ds: Dataset) -> Dataset:
    """Opt-in normalization: divide all rows by the max row norm.

    Off by default; without it the uniform Lipschitz assumption fails on raw
    data, which is the regime under study.
    """
    scale = ds.max_feature_norm()
    if scale == 0:
        return ds
    return Dataset(ds.X / scale, ds.y, ds.name,
                   dict(ds.provenance, feature_scale=float(scale)))
