"""Static figures written next to the CLI's data files (Agg backend, no display)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .simarch import STAGES  # noqa: E402


def plot_breakdown(steps, path) -> None:
    """Bar chart of cumulative speedup for the breakdown configurations."""
    names = [s["step"] for s in steps]
    total = [s["speedup_total"] for s in steps]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    bars = ax.bar(range(len(names)), total, color="#4c72b0")
    for b, s in zip(bars, steps):
        ax.annotate(f"{s['speedup_total']:.2f}x", (b.get_x() + b.get_width() / 2, b.get_height()),
                    ha="center", va="bottom", fontsize=8)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, fontsize=8)
    ax.set_ylabel("speedup over dense")
    ax.set_title("speedup breakdown")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_stage_cycles(stage_cycles: dict, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3))
    vals = [stage_cycles.get(s, 0) for s in STAGES]
    ax.bar(STAGES, vals, color="#55a868")
    ax.set_ylabel("cycles (summed over queries)")
    ax.set_title("per-stage service time")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(rows, x_key: str, path, y_key: str = "cycles", group_key: str | None = None) -> None:
    """Line plot of ``y_key`` against ``x_key``, one line per ``group_key`` value."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    groups = {}
    for r in rows:
        groups.setdefault(r[group_key] if group_key else "", []).append(r)
    for label, rs in groups.items():
        rs = sorted(rs, key=lambda r: float(r[x_key]))
        ax.plot([float(r[x_key]) for r in rs], [float(r[y_key]) for r in rs], marker="o",
                label=f"{group_key}={label}" if group_key else None)
    if x_key == "parallelism":
        ax.set_xscale("log", base=2)
    ax.set_xlabel(x_key)
    ax.set_ylabel(y_key)
    if group_key and len(groups) > 1:
        ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_roofline(report, arch, path) -> None:
    oi = np.logspace(-1, 3, 200)
    roof = np.minimum(arch.peak_flops, oi * arch.bandwidth_bytes_per_s)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.loglog(oi, roof / 1e12, color="k", lw=1)
    ax.loglog([report.operational_intensity], [report.effective_flops_per_s / 1e12], "o", color="#c44e52")
    ax.set_xlabel("operational intensity (FLOP/byte)")
    ax.set_ylabel("TFLOP/s")
    ax.set_title("roofline")
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
