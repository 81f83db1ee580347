"""Linear centered kernel alignment over captured layer activations."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, FileError

DEFAULT_FEATURE_CAP = 4096


def flatten_activations(x):
    """Row-major flatten of ``[N, ...]`` to ``[N, features]``."""
    arr = x.data if hasattr(x, "data") and not isinstance(x, np.ndarray) else np.asarray(x)
    if arr.ndim < 2 or arr.shape[0] < 2:
        raise ContractError(f"need at least 2 samples to centre activations, got shape {arr.shape}")
    return arr.reshape(arr.shape[0], -1)


def subsample_features(flat, cap):
    """Keep every ``ceil(p / cap)``-th column so at most ``cap`` remain."""
    p = flat.shape[1]
    if cap is None or p <= cap:
        return flat
    return flat[:, :: math.ceil(p / cap)]


@dataclass
class ActivationTrace:
    """Ordered, tagged activations of one network over one sample batch."""

    network: str = ""
    schema: str = ""
    feature_cap: int | None = DEFAULT_FEATURE_CAP
    tags: list = field(default_factory=list)
    activations: list = field(default_factory=list)

    def append(self, tag, value):
        if tag in self.tags:
            raise ContractError(f"duplicate trace tag {tag!r}")
        flat = flatten_activations(value)
        if self.activations and flat.shape[0] != self.samples:
            raise DimensionError(
                f"tag {tag!r} has {flat.shape[0]} samples, trace has {self.samples}"
            )
        flat = subsample_features(flat, self.feature_cap)
        self.tags.append(tag)
        self.activations.append(np.array(flat, dtype=np.float32))

    @property
    def samples(self):
        return self.activations[0].shape[0] if self.activations else 0

    def __len__(self):
        return len(self.tags)

    def __getitem__(self, i):
        return self.activations[i]


def _center(x):
    x = np.asarray(x, dtype=np.float64)
    return x - x.mean(axis=0, keepdims=True)


def cka_linear(x, y):
    """Linear CKA between ``x[N,p]`` and ``y[N,q]`` (biased HSIC estimator).

    Returns 0.0 when either representation is constant across samples.
    """
    x, y = np.asarray(x), np.asarray(y)
    if x.ndim != 2 or y.ndim != 2:
        raise DimensionError("cka_linear expects 2-D sample x feature matrices")
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ContractError("need at least 2 samples")
    kx, nx = _centered_gram(x)
    ky, ny = _centered_gram(y)
    if nx == 0.0 or ny == 0.0:
        return 0.0
    # ||Yc^T Xc||_F^2 equals <Xc Xc^T, Yc Yc^T>; the Gram form is cheaper when N << p.
    return min(max(float(np.sum(kx * ky) / (nx * ny)), 0.0), 1.0)


@dataclass
class CkaMatrix:
    row_id: str
    col_id: str
    values: np.ndarray
    row_tags: list
    col_tags: list
    feature_cap: int | None = DEFAULT_FEATURE_CAP

    @property
    def shape(self):
        return self.values.shape

    @property
    def is_self(self):
        return self.row_id == self.col_id and self.row_tags == self.col_tags


def cka_matrix(a, b=None):
    """Pairwise CKA between every layer of trace ``a`` and of trace ``b``.

    With ``b`` omitted (or ``b is a``) the matrix is symmetric with a unit
    diagonal and only the upper triangle is computed.
    """
    self_mode = b is None or b is a
    if self_mode:
        b = a
    if a.samples != b.samples:
        raise ContractError(f"sample counts differ: {a.samples} vs {b.samples}")
    grams_a = [_centered_gram(x) for x in a.activations]
    grams_b = grams_a if self_mode else [_centered_gram(y) for y in b.activations]
    m = np.zeros((len(a), len(b)), dtype=np.float64)
    for i, (ka, na) in enumerate(grams_a):
        for j, (kb, nb) in enumerate(grams_b):
            if self_mode and j < i:
                m[i, j] = m[j, i]
                continue
            if self_mode and i == j:
                m[i, j] = 1.0 if na > 0 else 0.0
                continue
            m[i, j] = 0.0 if na == 0 or nb == 0 else min(max(np.sum(ka * kb) / (na * nb), 0.0), 1.0)
    return CkaMatrix(
        row_id=a.network,
        col_id=b.network,
        values=m,
        row_tags=list(a.tags),
        col_tags=list(b.tags),
        feature_cap=a.feature_cap,
    )


def _centered_gram(x):
    x = np.asarray(x, dtype=np.float64)
    xc = _center(x)
    k = xc @ xc.T
    norm = float(np.linalg.norm(k))
    scale = float(np.abs(x).max()) ** 2 if x.size else 0.0
    # constant activations leave only rounding noise after centring
    if norm <= 1e-20 * scale * x.shape[0] * x.shape[1] or norm == 0.0:
        norm = 0.0
    return k, norm


def divergence_layer(m, window=5, threshold=0.5):
    """First layer whose mean similarity to all layers before ``l - window``
    falls below ``threshold``; ``None`` when no layer qualifies.

    Indices are 0-based rows of the self-similarity matrix.
    """
    values = m.values if isinstance(m, CkaMatrix) else np.asarray(m)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ContractError("divergence_layer needs a square self-similarity matrix")
    n = values.shape[0]
    if window < 0 or window >= n:
        raise ContractError(f"window {window} must be in [0, {n})")
    for layer in range(n):
        earlier = layer - window
        if earlier <= 0:
            continue
        if values[layer, :earlier].mean() < threshold:
            return layer
    return None


def write_matrix_csv(m, path):
    """CSV with a tag header row and tag first column; values round-trip as f32."""
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([""] + list(m.col_tags))
            for tag, row in zip(m.row_tags, m.values):
                w.writerow([tag] + [str(np.float32(v)) for v in row])
    except OSError as exc:
        raise FileError(f"cannot write {path}: {exc}") from exc
    return path


def read_matrix_csv(path):
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise FileError(f"cannot read {path}: {exc}") from exc
    col_tags = rows[0][1:]
    row_tags = [r[0] for r in rows[1:]]
    values = np.array([[np.float32(v) for v in r[1:]] for r in rows[1:]], dtype=np.float32)
    return CkaMatrix(path.stem, path.stem, values, row_tags, col_tags)


def heatmap_pixels(m, upscale=1):
    """8-bit grayscale array with one (or ``upscale`` x ``upscale``) pixel per cell."""
    v = np.clip(np.asarray(m.values, dtype=np.float64), 0.0, 1.0)
    img = np.floor(v * 255.0 + 0.5).astype(np.uint8)
    if upscale > 1:
        img = np.kron(img, np.ones((upscale, upscale), dtype=np.uint8))
    return img


def export_heatmap(m, path, upscale=1):
    """Write ``<path>.pgm`` (pixel per cell) and ``<path>.csv``; return both paths."""
    from .imageio import save_gray_u8

    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".pgm", ".csv") else path
    img_path = base.with_suffix(".pgm")
    csv_path = base.with_suffix(".csv")
    save_gray_u8(img_path, heatmap_pixels(m, upscale))
    write_matrix_csv(m, csv_path)
    return img_path, csv_path
