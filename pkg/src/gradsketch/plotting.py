"""Report figures. Always renders off-screen with the Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (np.sqrt(5) - 1.0) / 2.0
COLUMN_WIDTH = 3.4
PALETTE = ["#0072B2", "#D55E00", "#009E73", "#CC79A7", "#56B4E9", "#E69F00", "#000000"]

STYLE = {
    "axes.prop_cycle": matplotlib.cycler(color=PALETTE),
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.family": "serif",
    "font.size": 8,
    "mathtext.fontset": "stix",
    "legend.fontsize": 7,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
    "figure.figsize": (COLUMN_WIDTH, COLUMN_WIDTH * GOLDEN),
    "figure.dpi": 150,
    "savefig.dpi": 300,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_bench(rows: Sequence, path) -> Path:
    """Per-vector time against nonzero fraction, one line per (kind, k)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        groups: dict = {}
        for r in rows:
            groups.setdefault((r.kind, r.target_dim), []).append(r)
        for (kind, k), rs in sorted(groups.items()):
            rs = sorted(rs, key=lambda r: r.sparsity_level)
            ax.plot([r.sparsity_level for r in rs], [r.wall_time * 1e6 for r in rs], marker="o", label=f"{kind} k={k}")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("nonzero fraction")
        ax.set_ylabel(r"time per vector ($\mu$s)")
        ax.legend()
        return _save(fig, path)


def plot_throughput(rows: Sequence, path) -> Path:
    """Op count and wall time per sample for each factorized method."""
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(2 * COLUMN_WIDTH, COLUMN_WIDTH * GOLDEN))
        labels = [f"{r.method}\n$k_l$={r.k_l}" for r in rows]
        x = np.arange(len(rows))
        a.bar(x, [r.op_count for r in rows], color=PALETTE[0])
        a.set_ylabel("multiply-adds / sample")
        b.bar(x, [r.wall_time * 1e3 for r in rows], color=PALETTE[1])
        b.set_ylabel("ms / sample")
        for ax in (a, b):
            ax.set_xticks(x, labels)
            ax.set_yscale("log")
        fig.tight_layout()
        return _save(fig, path)


def plot_lds(rho: np.ndarray, path, null_mean: float = float("nan"), null_std: float = float("nan"), label: str = "") -> Path:
    """Histogram of per-test-point rank correlations with the null band."""
    rho = np.asarray(rho)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.hist(rho[np.isfinite(rho)], bins=20, range=(-1, 1), color=PALETTE[0], alpha=0.85, label=label or None)
        ax.axvline(np.nanmean(rho), color=PALETTE[1], label=f"mean {np.nanmean(rho):.3f}")
        if np.isfinite(null_mean):
            ax.axvspan(null_mean - 3 * null_std, null_mean + 3 * null_std, color="0.8", alpha=0.6, label=r"null $\pm 3\sigma$")
        ax.set_xlabel(r"Spearman $\rho$")
        ax.set_ylabel("test points")
        ax.legend()
        return _save(fig, path)


def plot_mask_trace(trace: Sequence, path) -> Path:
    """Selective-mask objective over training steps."""
    trace = np.asarray(trace, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if trace.size:
            ax.plot(trace[:, 0], trace[:, 1], label="objective")
            ax.plot(trace[:, 0], trace[:, 2], ls="--", label="L1 term")
        ax.set_xlabel("step")
        ax.legend()
        return _save(fig, path)
