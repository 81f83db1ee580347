"""Matplotlib figures written next to the CSV reports.

Figures are rendered with the Agg backend and saved without software
metadata so reruns produce identical bytes.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.titlesize": 9,
    "axes.labelsize": 8,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "svg.hashsalt": "mmaunet",
}


def _save(fig, path):
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curves(rows, path, title=""):
    """One line per loss column of a training log (``epoch`` on x)."""
    keys = [k for k in rows[0] if k not in ("epoch", "lr")]
    epochs = [r["epoch"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        for k in keys:
            ax.plot(epochs, [r[k] for r in rows], label=k, lw=1.2)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        if title:
            ax.set_title(title)
        if len(keys) > 1:
            ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def _heat(ax, m, title, divergence=None):
    im = ax.imshow(m.values, cmap="magma", vmin=0.0, vmax=1.0, origin="upper", interpolation="nearest")
    ax.set_title(title)
    ax.set_xlabel(f"layer ({m.col_id})")
    ax.set_ylabel(f"layer ({m.row_id})")
    if divergence is not None:
        ax.axhline(divergence, color="cyan", lw=0.8, ls="--")
        ax.axvline(divergence, color="cyan", lw=0.8, ls="--")
    return im


def cka_heatmap(m, path, title="", divergence=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.2))
        im = _heat(ax, m, title or f"CKA {m.row_id} vs {m.col_id}", divergence)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        fig.tight_layout()
        return _save(fig, path)


def cka_side_by_side(left, right, path, divergences=(None, None)):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(6.8, 3.2))
        for ax, m, d in zip(axes, (left, right), divergences):
            im = _heat(ax, m, m.row_id, d)
        fig.colorbar(im, ax=axes, fraction=0.025, pad=0.02)
        return _save(fig, path)


def ablation_bars(rows, path):
    metrics = ("psnr", "ssim", "qabf")
    names = [r["variant"] for r in rows]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(7.0, 2.4))
        for ax, key in zip(axes, metrics):
            vals = [r[key] for r in rows]
            ax.bar(names, vals, color="0.4")
            lo, hi = min(vals), max(vals)
            pad = 0.1 * (hi - lo) if hi > lo else 0.05 * abs(hi) + 1e-3
            ax.set_ylim(lo - pad, hi + pad)
            ax.set_title(key)
        fig.tight_layout()
        return _save(fig, path)


def fusion_panel(ir, vi, fused, path, title=""):
    """IR, VI and fused images side by side (channel-first arrays in [0, 1])."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(6.0, 2.2))
        for ax, img, name in zip(axes, (ir, vi, fused), ("IR", "VI", "fused")):
            img = np.asarray(img)
            if img.shape[0] == 1:
                ax.imshow(img[0], cmap="gray", vmin=0, vmax=1)
            else:
                ax.imshow(np.clip(img.transpose(1, 2, 0), 0, 1))
            ax.set_title(name)
            ax.axis("off")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)
