"""Report figures rendered to image files (no interactive backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PANELS = (
    ("e_or_rea", "e_or real [deg]", "or_threshold_deg", 5.0),
    ("e_or_com", "e_or computed [deg]", "or_threshold_deg", 5.0),
    ("e_ce", "e_ce [mm]", "ce_threshold_mm", 0.5),
    ("e_ra", "e_ra [mm]", "ra_threshold_mm", 1.0),
)


def _threshold(header: Mapping[str, str], key: str, default: float) -> float:
    try:
        return float(header.get(key, default))
    except (TypeError, ValueError):
        return default


def plot_errors(cols: Dict[str, np.ndarray], path, header: Optional[Mapping[str, str]] = None) -> Path:
    """Four error panels over time with the convergence thresholds."""
    header = header or {}
    t = cols["t"]
    fig, axes = plt.subplots(4, 1, figsize=(7, 8), sharex=True)
    for ax, (name, label, key, default) in zip(axes, _PANELS):
        ax.plot(t, cols[name], lw=1.0)
        thr = _threshold(header, key, default)
        ax.axhline(thr, color="grey", ls="--", lw=0.8)
        if name == "e_ra":
            ax.axhline(-thr, color="grey", ls="--", lw=0.8)
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    full = np.flatnonzero(cols["buffer_full"] > 0)
    if len(full):
        for ax in axes:
            ax.axvline(t[full[0]], color="tab:green", lw=0.8)
    axes[-1].set_xlabel("simulated time [s]")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_path(cols: Dict[str, np.ndarray], path) -> Path:
    """Top view of the probe path with the commanded target."""
    fig, ax = plt.subplots(figsize=(5, 6))
    ax.plot(cols["target_x"], cols["target_y"], lw=0.8, ls="--", label="target")
    ax.plot(cols["px"], cols["py"], lw=1.2, label="probe")
    ax.set_xlabel("x [mm]")
    ax.set_ylabel("y [mm]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_batch(runs: Sequence[Mapping[str, object]], path) -> Path:
    """Box plots of per-run steady means grouped by initial offset."""
    offsets = sorted({float(r["offset_deg"]) for r in runs})
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.5))
    for ax, name, label in zip(
        axes, ("e_or_rea_mean", "e_ce_mean", "e_ra_mean"), ("e_or real [deg]", "e_ce [mm]", "|e_ra| [mm]")
    ):
        groups = []
        for off in offsets:
            vals = np.array([float(r[name]) for r in runs if float(r["offset_deg"]) == off and r["status"] == "ok"])
            groups.append(vals[np.isfinite(vals)])
        ax.boxplot(groups)
        ax.set_xticks(range(1, len(offsets) + 1), [f"{o:g}" for o in offsets])
        ax.set_xlabel("initial offset [deg]")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
