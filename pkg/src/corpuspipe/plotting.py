"""Figure rendering for the report-producing subcommands (headless Agg)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .run_controller import LrSchedule, TraceRow, lr_at
from .stats_report import TokenStats


def plot_schedule(schedule: LrSchedule, out_path: str | Path) -> None:
    """Learning rate over the full step range."""
    steps = list(range(schedule.total_steps + 1))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [lr_at(s, schedule) for s in steps])
    ax.axvline(schedule.warmup_steps, color="gray", linestyle=":", linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("learning rate")
    ax.set_title(f"warmup {schedule.warmup_steps}, peak {schedule.peak:g}")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def plot_run_trace(trace: Sequence[TraceRow], out_path: str | Path) -> None:
    """Effective LR per observation, with rollback/restore events marked."""
    xs = list(range(1, len(trace) + 1))
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(xs, [row.lr for row in trace], label="effective lr")
    for x, row in zip(xs, trace):
        if row.action.kind == "rollback":
            ax.axvline(x, color="red", linestyle="--", linewidth=1)
        elif row.action.kind == "restore_lr":
            ax.axvline(x, color="green", linestyle="--", linewidth=1)
    ax.set_xlabel("observation")
    ax.set_ylabel("effective learning rate")
    ax.set_title("rollbacks (red) and restores (green)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def plot_token_distribution(stats: TokenStats, out_path: str | Path) -> None:
    """Per-source token counts as a horizontal bar chart."""
    sources = [row.source for row in stats.rows]
    tokens = [row.tokens for row in stats.rows]
    fig, ax = plt.subplots(figsize=(7, max(2.5, 0.5 * len(sources) + 1.5)))
    ax.barh(sources[::-1], tokens[::-1])
    ax.set_xlabel("tokens")
    ax.set_title(f"total {stats.total_tokens:,} tokens")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
