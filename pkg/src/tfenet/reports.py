"""Figure rendering for training runs, evaluations, and kernel geometry.

Everything draws through the Agg backend straight to files; no display
is ever opened.  Figures are deliberately plain: one panel per fact,
fixed dpi, no timestamps, so reruns produce identical images.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import ArgumentError

_DPI = 110


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def loss_curve_figure(curves: dict[str, list[dict]], path: str | Path) -> Path:
    """Mean patch loss per epoch, one line per training stage.

    curves maps a stage name to its log rows ({epoch, mean_loss, lr});
    learning-rate drops are marked with vertical dotted lines.
    """
    if not curves:
        raise ArgumentError("no loss curves to plot")
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for stage, rows in curves.items():
        if not rows:
            continue
        ep = [r["epoch"] for r in rows]
        ax.plot(ep, [r["mean_loss"] for r in rows], marker="o", ms=3,
                label=stage)
        lrs = [r["lr"] for r in rows]
        for i in range(1, len(lrs)):
            if lrs[i] < lrs[i - 1]:
                ax.axvline(ep[i], ls=":", lw=0.8, color="grey")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean patch loss")
    ax.set_ylim(bottom=0.0)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return _finish(fig, path)


_SCORE_KEYS = ("precision", "dsc", "iou", "td", "bd", "mean_score", "overall_score")


def metrics_figure(rows: list[dict], path: str | Path) -> Path:
    """Per-case score profile plus the cross-case mean.

    rows are metric-report dicts; one grey polyline per case over the
    main scores, the mean drawn on top in colour.
    """
    if not rows:
        raise ArgumentError("no metric rows to plot")
    fig, ax = plt.subplots(figsize=(7.2, 4.2))
    xs = np.arange(len(_SCORE_KEYS))
    vals = np.array([[float(r[k]) for k in _SCORE_KEYS] for r in rows])
    for case_vals in vals:
        ax.plot(xs, case_vals, color="grey", alpha=0.35, lw=1.0)
    ax.plot(xs, vals.mean(axis=0), color="tab:blue", marker="o",
            label=f"mean of {len(rows)} case(s)")
    ax.set_xticks(xs, _SCORE_KEYS, rotation=30, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return _finish(fig, path)


def sampling_figure(clouds: list[tuple[str, np.ndarray]], path: str | Path) -> Path:
    """3D scatter of kernel sampling positions, one colour per angle set.

    clouds holds (label, (k, 3) zyx points).  Plotted in xyz order so
    the alignment axis reads naturally.
    """
    if not clouds:
        raise ArgumentError("no sampling clouds to plot")
    fig = plt.figure(figsize=(5.6, 5.2))
    ax = fig.add_subplot(projection="3d")
    for label, pts in clouds:
        pts = np.asarray(pts, dtype=float)
        ax.plot(pts[:, 2], pts[:, 1], pts[:, 0], marker="o", ms=4, lw=1.0,
                label=label)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_zlabel("z")
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    return _finish(fig, path)


def corpus_figure(image: np.ndarray, label: np.ndarray, path: str | Path,
                  title: str = "") -> Path:
    """Orthogonal mid-slices of one case with the label edge overlaid,
    plus a foreground depth projection."""
    img = np.asarray(image)
    lab = np.asarray(label)
    if img.ndim == 4:
        img = img[0]
    if lab.ndim == 4:
        lab = lab[0]
    if img.shape != lab.shape:
        raise ArgumentError(f"image {img.shape} vs label {lab.shape}")
    fig, axes = plt.subplots(1, 4, figsize=(12.0, 3.4))
    mids = [s // 2 for s in img.shape]
    slicers = [(img[mids[0]], lab[mids[0]], "axial"),
               (img[:, mids[1]], lab[:, mids[1]], "coronal"),
               (img[:, :, mids[2]], lab[:, :, mids[2]], "sagittal")]
    for ax, (im2, la2, name) in zip(axes, slicers):
        ax.imshow(im2, cmap="gray", interpolation="nearest")
        if la2.any():
            ax.contour(la2, levels=[0.5], colors="red", linewidths=0.8)
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    proj = lab.any(axis=0).astype(float)
    axes[3].imshow(proj, cmap="cividis", interpolation="nearest")
    axes[3].set_title("airway projection", fontsize=9)
    axes[3].axis("off")
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    return _finish(fig, path)
