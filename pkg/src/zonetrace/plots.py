"""Figure rendering for experiment reports.

Every function writes one PNG next to the delimited output and returns the
file path as a string. Rendering uses the Agg backend so reports build the
same way headless.
"""

from __future__ import annotations

import pathlib
from typing import Dict, List, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 150


def _save(fig, path) -> str:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    return str(path)


def posterior_comparison(path, summaries_by_label: Dict, space) -> str:
    """Zone and count bars plus rate and start densities per backend."""
    fig, axes = plt.subplots(2, 2, figsize=(9, 6))
    labels = list(summaries_by_label)
    width = 0.8 / len(labels)
    zone_ids = list(space.zone_ids)
    counts = list(range(1, space.n_sources_max + 1))
    for i, label in enumerate(labels):
        summ = summaries_by_label[label]
        offs = (i - (len(labels) - 1) / 2) * width
        axes[0, 0].bar(np.arange(len(zone_ids)) + offs,
                       [summ.p_zone.get(z, 0.0) for z in zone_ids],
                       width, label=label)
        axes[0, 1].bar(np.arange(len(counts)) + offs,
                       [summ.p_count.get(a, 0.0) for a in counts],
                       width, label=label)
        for ax, hist in ((axes[1, 0], summ.rate_hist),
                         (axes[1, 1], summ.start_hist)):
            edges, density = hist
            centers = 0.5 * (edges[:-1] + edges[1:])
            ax.plot(centers, density, label=label)
    axes[0, 0].set_xticks(range(len(zone_ids)),
                          [str(z) for z in zone_ids])
    axes[0, 0].set_xlabel("source zone")
    axes[0, 0].set_ylabel("probability")
    axes[0, 1].set_xticks(range(len(counts)), [str(a) for a in counts])
    axes[0, 1].set_xlabel("source count")
    axes[1, 0].set_xlabel("release rate (g/s)")
    axes[1, 0].set_ylabel("density")
    axes[1, 1].set_xlabel("activation time (min)")
    for ax in axes.flat:
        ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def location_density(path, density: np.ndarray, zone,
                     truth: Sequence[Tuple[float, float]] = ()) -> str:
    """Posterior footprint density over one zone's floor plan."""
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(density.T, origin="lower", aspect="equal",
                   extent=(0.0, zone.width, 0.0, zone.depth),
                   cmap="viridis")
    for x, y in truth:
        ax.plot(x, y, "r+", markersize=12, markeredgewidth=2)
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_title(f"zone {zone.id} source location density")
    fig.colorbar(im, ax=ax, shrink=0.85)
    return _save(fig, path)


def sensor_sweep(path, counts: Sequence[int],
                 p_values: Sequence[float]) -> str:
    """Posterior mass on the true zone versus deployed sensor count."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(counts, p_values, "o-")
    ax.set_xlabel("sensors reporting")
    ax.set_ylabel("p(true zone)")
    ax.set_ylim(0.0, 1.05)
    ax.set_xticks(list(counts))
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def timing_curve(path, counts: Sequence[int], emulator_s: Sequence[float],
                 direct_s: Sequence[float]) -> str:
    """Chain wall time for both backends versus sensor count."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(counts, direct_s, "s-", label="direct simulator")
    ax.semilogy(counts, emulator_s, "o-", label="surrogate")
    ax.set_xlabel("sensors reporting")
    ax.set_ylabel("chain wall time (s)")
    ax.set_xticks(list(counts))
    ax.grid(True, alpha=0.3, which="both")
    ax.legend()
    return _save(fig, path)


def staged_contraction(path, sd_start: Sequence[float],
                       sd_rate: Sequence[float], zone: int) -> str:
    """Posterior spread of activation time and rate across stages."""
    stages = list(range(1, len(sd_start) + 1))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax1.plot(stages, sd_start, "o-")
    ax1.set_xlabel("stage")
    ax1.set_ylabel("sd of activation time (min)")
    ax2.plot(stages, sd_rate, "o-")
    ax2.set_xlabel("stage")
    ax2.set_ylabel("sd of release rate (g/s)")
    for ax in (ax1, ax2):
        ax.set_xticks(stages)
        ax.grid(True, alpha=0.3)
    fig.suptitle(f"true source zone {zone}")
    fig.tight_layout()
    return _save(fig, path)


def trace_overview(path, trace, zones: Sequence[int]) -> str:
    """Zone concentration histories from one simulation."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for z in zones:
        ax.plot(trace.times_min, trace.column(z), label=f"zone {z}")
    ax.set_xlabel("time (min)")
    ax.set_ylabel("concentration (g/kg)")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    return _save(fig, path)
