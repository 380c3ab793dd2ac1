"""Figure rendering for replication runs (written next to the CSV output)."""

from __future__ import annotations

from typing import Any, Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.bbox": "tight",
}


def plot_eps(rows: Sequence[Dict[str, Any]], path: str) -> str:
    """One panel per site: median share with a 5th-95th percentile bar per epsilon."""
    sites = list(dict.fromkeys(r["site"] for r in rows))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(sites), figsize=(3.2 * len(sites), 2.6), squeeze=False)
        for ax, site in zip(axes[0], sites):
            sel = [r for r in rows if r["site"] == site]
            x = list(range(len(sel)))
            med = [100 * r["median"] for r in sel]
            lo = [100 * (r["median"] - r["p5"]) for r in sel]
            hi = [100 * (r["p95"] - r["median"]) for r in sel]
            ax.errorbar(x, med, yerr=[lo, hi], fmt="o", capsize=3, ms=4)
            ax.axhline(100 * sel[0]["true_share"], ls="--", lw=0.8, color="grey")
            ax.set_xticks(x, [f"{r['epsilon']:g}" for r in sel])
            ax.set_xlabel("epsilon")
            ax.set_ylabel("share of users [%]")
            ax.set_title(site, fontsize=9)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_volume(rows: Sequence[Dict[str, Any]], path: str) -> str:
    """Per-user volume ECDF, one line per direction and protocol."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        series = list(dict.fromkeys((r["direction"], r["protocol"]) for r in rows))
        for direction, proto in series:
            sel = [r for r in rows if r["direction"] == direction and r["protocol"] == proto]
            ax.step([r["upper_edge"] for r in sel], [r["ecdf"] for r in sel], where="post", label=f"{direction} {proto}")
        ax.set_xscale("log")
        ax.set_ylim(0, 1)
        ax.set_xlabel("per-user volume [B]")
        ax.set_ylabel("ECDF")
        ax.legend(loc="lower right")
        fig.savefig(path)
        plt.close(fig)
    return path
