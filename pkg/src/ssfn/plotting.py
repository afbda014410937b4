"""Figure output for CLI reports. Everything renders off-screen to files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def error_to_uint8(err: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Linear map of |SR - HR| onto 0..255; ``vmax`` (default: the map's max) maps to 255."""
    err = np.abs(np.asarray(err, dtype=np.float64))
    top = float(err.max()) if vmax is None else float(vmax)
    if top <= 0:
        return np.zeros(err.shape, dtype=np.uint8)
    return np.round(np.clip(err / top, 0.0, 1.0) * 255).astype(np.uint8)


def save_error_map(err: np.ndarray, path, vmax: float | None = None) -> float:
    """Write the grayscale map; returns the error value mapped to white."""
    err = np.abs(np.asarray(err, dtype=np.float64))
    top = float(err.max()) if vmax is None else float(vmax)
    Image.fromarray(error_to_uint8(err, top)).save(path)
    return top


def error_map_figure(err: np.ndarray, path, title: str = "", vmax: float | None = None) -> None:
    err = np.abs(np.asarray(err, dtype=np.float64))
    top = float(err.max()) if vmax is None else float(vmax)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3.4))
        im = ax.imshow(err, cmap="jet", vmin=0.0, vmax=top if top > 0 else 1.0)
        ax.set_axis_off()
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        fig.savefig(path)
        plt.close(fig)


def spectra_figure(bands, sr_curves, hr_curves, labels, path) -> None:
    """One panel per curve pair (pixels first, then their average)."""
    n = len(labels)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.4), squeeze=False)
        for ax, sr, hr, label in zip(axes[0], sr_curves, hr_curves, labels):
            ax.plot(bands, hr, color="k", lw=1.2, label="HR")
            ax.plot(bands, sr, color="tab:red", lw=1.0, ls="--", label="SR")
            ax.set_title(label)
            ax.set_xlabel("band")
        axes[0][0].set_ylabel("reflectance")
        axes[0][0].legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)


def ablation_figure(rows, path) -> None:
    """PSNR against T, one line per G."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 2.6))
        for g in sorted({r["G"] for r in rows}):
            pts = sorted((r["T"], r["psnr"]) for r in rows if r["G"] == g)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"G={g}")
        ax.set_xlabel("iterations T")
        ax.set_ylabel("PSNR (dB)")
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)


def loss_figure(steps, losses, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 2.6))
        ax.plot(steps, losses, lw=0.8)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("L1 loss")
        fig.savefig(path)
        plt.close(fig)
