"""Figures and delimited tables written next to JSON reports."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .io import atomic_write_text  # noqa: E402

LOSS_KEYS = ("L_i", "L_m", "L_s", "L_v", "L_st", "L_d", "L_n", "L_recon", "total")


def write_csv(path, rows: list[dict], columns: list[str]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in columns})
    atomic_write_text(path, buf.getvalue())


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_area(times, areas, path, reference=None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(times, areas, "o-", label="predicted")
    if reference is not None:
        ax.plot(times, reference, "s--", label="reference")
        ax.legend()
    ax.set_xlabel("t")
    ax.set_ylabel("surface area")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_distances(times, cd, hd, path) -> Path:
    fig, ax1 = plt.subplots(figsize=(5, 3.2))
    ax1.plot(times, cd, "o-", color="C0")
    if any(v > 0 for v in cd):
        ax1.set_yscale("log")
    ax1.set_xlabel("t")
    ax1.set_ylabel("CD", color="C0")
    ax2 = ax1.twinx()
    ax2.plot(times, hd, "s--", color="C1")
    ax2.set_ylabel("HD", color="C1")
    return _save(fig, path)


def plot_losses(records: list[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.6))
    steps = [r["step"] for r in records]
    for key in LOSS_KEYS:
        vals = [r.get(key, 0.0) for r in records]
        if any(v > 0 for v in vals):
            ax.semilogy(steps, [max(v, 1e-12) for v in vals], label=key, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7, ncol=3)
    ax.grid(alpha=0.3)
    return _save(fig, path)
