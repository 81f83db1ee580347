"""Fusion quality metrics: PSNR, Gaussian-window SSIM and Qabf.

All metrics run in float64 on plain arrays; tensors are accepted and
unwrapped. Colour inputs are reduced to ITU-R 601 luminance where a metric
compares against the single-channel IR image.
"""

from __future__ import annotations

import csv
import hashlib
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, FileError, GeometryError

LUMA = np.array([0.299, 0.587, 0.114])

# Xydeas-Petrovic edge-preservation sigmoids. kappa and sigma are the
# published values; the gains are solved so a perfectly preserved edge
# (strength ratio 1, orientation difference 0) scores exactly 1.
QABF_KAPPA_G = -15.0
QABF_SIGMA_G = 0.5
QABF_KAPPA_A = -22.0
QABF_SIGMA_A = 0.8
QABF_GAMMA_G = 1.0 + math.exp(QABF_KAPPA_G * (1.0 - QABF_SIGMA_G))
QABF_GAMMA_A = 1.0 + math.exp(QABF_KAPPA_A * (1.0 - QABF_SIGMA_A))
QABF_L = 1.0

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def _arr(x):
    a = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise DimensionError("metrics take one image at a time")
        a = a[0]
    if a.ndim == 2:
        a = a[None]
    return a


def luma(x):
    """``(H, W)`` luminance of a ``(C, H, W)`` (C in {1, 3}) image."""
    a = _arr(x)
    if a.shape[0] == 1:
        return a[0]
    if a.shape[0] != 3:
        raise DimensionError(f"expected 1 or 3 channels, got {a.shape[0]}")
    return np.tensordot(LUMA, a, axes=1)


def psnr(reference, test, peak=1.0):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    r, t = _arr(reference), _arr(test)
    if r.shape != t.shape:
        raise DimensionError(f"shape mismatch: {r.shape} vs {t.shape}")
    if peak <= 0:
        raise ContractError("peak must be positive")
    mse = float(np.mean((r - t) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def psnr_from_mse(mse, peak):
    return math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim_map(x, y, dynamic_range=1.0, size=11, sigma=1.5):
    """Per-window SSIM over the valid region of 2-D images."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] < size or x.shape[1] < size:
        raise GeometryError(f"image {x.shape} smaller than the {size}x{size} window")
    g = gaussian_window(size, sigma)
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim_metric(x, y, dynamic_range=1.0, size=11, sigma=1.5):
    """Mean windowed SSIM, averaged over channels."""
    a, b = _arr(x), _arr(y)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean([ssim_map(a[c], b[c], dynamic_range, size, sigma).mean() for c in range(a.shape[0])]))


def _sobel(img):
    p = np.pad(img, 1, mode="edge")
    win = sliding_window_view(p, (3, 3))
    gx = np.einsum("ijkl,kl->ij", win, _SOBEL_X)
    gy = np.einsum("ijkl,kl->ij", win, _SOBEL_Y)
    return gx, gy


def edge_strength_orientation(img):
    gx, gy = _sobel(img)
    g = np.sqrt(gx * gx + gy * gy)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(gx == 0, np.where(gy == 0, 0.0, math.pi / 2), np.arctan(gy / gx))
    return g, alpha


def _preservation(g_src, a_src, g_f, a_f):
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(g_src > g_f, g_f / g_src, g_src / g_f)
    ratio = np.where((g_src == 0) & (g_f == 0), 0.0, ratio)
    ratio = np.nan_to_num(ratio)
    orient = 1.0 - np.abs(a_src - a_f) / (math.pi / 2)
    q_g = QABF_GAMMA_G / (1.0 + np.exp(QABF_KAPPA_G * (ratio - QABF_SIGMA_G)))
    q_a = QABF_GAMMA_A / (1.0 + np.exp(QABF_KAPPA_A * (orient - QABF_SIGMA_A)))
    return q_g * q_a


def q_abf(ir, vi, fused):
    """Edge-preservation index of ``fused`` w.r.t. both sources, in ``[0, 1]``.

    Pixels flat in both sources carry zero weight; an image pair that is
    flat everywhere scores 0.
    """
    a, b, f = luma(ir), luma(vi), luma(fused)
    if not (a.shape == b.shape == f.shape):
        raise DimensionError(f"shape mismatch: {a.shape}, {b.shape}, {f.shape}")
    ga, aa = edge_strength_orientation(a)
    gb, ab = edge_strength_orientation(b)
    gf, af = edge_strength_orientation(f)
    qa = _preservation(ga, aa, gf, af)
    qb = _preservation(gb, ab, gf, af)
    wa, wb = ga ** QABF_L, gb ** QABF_L
    denom = float(np.sum(wa + wb))
    if denom == 0.0:
        return 0.0
    return float(np.clip(np.sum(qa * wa + qb * wb) / denom, 0.0, 1.0))


def fusion_scores(ir, vi, fused):
    """PSNR and SSIM averaged over both references (on luminance), plus Qabf."""
    f_l = luma(fused)
    ir_l, vi_l = luma(ir), luma(vi)
    return {
        "psnr": 0.5 * (psnr(ir_l, f_l) + psnr(vi_l, f_l)),
        "ssim": 0.5 * (ssim_metric(ir_l, f_l) + ssim_metric(vi_l, f_l)),
        "qabf": q_abf(ir, vi, fused),
    }


def worker_count():
    """Worker cap from ``MMA_THREADS`` (0 or unset = CPU count)."""
    try:
        n = int(os.environ.get("MMA_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


METRIC_COLUMNS = ("psnr", "ssim", "qabf")


@dataclass
class MetricReport:
    rows: list
    metadata: dict = field(default_factory=dict)

    @property
    def means(self):
        return {k: float(np.mean([r[k] for r in self.rows])) for k in METRIC_COLUMNS}

    def to_csv(self, path):
        path = Path(path)
        try:
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("id",) + METRIC_COLUMNS)
                for r in self.rows:
                    w.writerow([r["id"]] + [fmt(r[k]) for k in METRIC_COLUMNS])
                means = self.means
                w.writerow(["mean"] + [fmt(means[k]) for k in METRIC_COLUMNS])
        except OSError as exc:
            raise FileError(f"cannot write {path}: {exc}") from exc
        return path


def fmt(v):
    """Six significant digits, as every CSV in this package uses."""
    return f"{v:.6g}"


def evaluate_batch(pairs, fused, metadata=None):
    """Score each fused image against its source pair; rows ordered by id."""
    pairs, fused = list(pairs), list(fused)
    if len(pairs) != len(fused):
        raise ContractError(f"{len(pairs)} pairs but {len(fused)} fused images")

    def score(item):
        pair, f = item
        return {"id": pair.name, **fusion_scores(pair.ir, pair.vi, f)}

    with ThreadPoolExecutor(max_workers=min(worker_count(), max(1, len(pairs)))) as pool:
        rows = list(pool.map(score, zip(pairs, fused)))
    rows.sort(key=lambda r: r["id"])
    meta = {"psnr_reference": "mean of PSNR(IR_luma, F_luma) and PSNR(VI_luma, F_luma)"}
    meta.update(metadata or {})
    return MetricReport(rows, meta)


def digest(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]
