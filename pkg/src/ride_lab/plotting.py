"""Figures rendered next to the CSV reports by ``ride-lab report``."""

from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .reports import read_csv  # noqa: E402

SPLIT_COLORS = {"all": "0.3", "many": "tab:blue", "medium": "tab:orange", "few": "tab:red"}


def _style(ax):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.tick_params(direction="out", length=3)


def plot_biasvar(csv_paths: dict[str, str | os.PathLike], out: str | os.PathLike) -> Path:
    """Per-class bias and variance, one line per method, classes in head-to-tail order."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2), sharex=True)
    for name, path in csv_paths.items():
        rows = read_csv(path)
        k = [int(r["class"]) for r in rows]
        axes[0].plot(k, [float(r["bias"]) for r in rows], marker="o", ms=3, label=name)
        axes[1].plot(k, [float(r["variance"]) for r in rows], marker="o", ms=3, label=name)
    for ax, title in zip(axes, ("bias", "variance")):
        ax.set_xlabel("class index (head to tail)")
        ax.set_ylabel(title)
        ax.set_ylim(0, 1)
        _style(ax)
    axes[0].legend(frameon=False, fontsize=8)
    fig.tight_layout()
    out = Path(out)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_hardest_negative(csv_path: str | os.PathLike, out: str | os.PathLike) -> Path:
    rows = read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for split in ("many", "medium", "few"):
        sel = [r for r in rows if r["split"] == split]
        if not sel:
            continue
        total = sum(int(r["count"]) for r in sel) or 1
        centers = [(float(r["bin_low"]) + float(r["bin_high"])) / 2 for r in sel]
        ax.plot(centers, [int(r["count"]) / total for r in sel], color=SPLIT_COLORS[split], label=split)
    ax.set_xlabel("hardest negative score")
    ax.set_ylabel("fraction of instances")
    ax.legend(frameon=False, fontsize=8)
    _style(ax)
    fig.tight_layout()
    out = Path(out)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_routing(csv_path: str | os.PathLike, out: str | os.PathLike) -> Path:
    """Stacked bars: fraction of instances per number of experts used, per split."""
    rows = read_csv(csv_path)
    splits = [s for s in ("many", "medium", "few", "all") if any(r["split"] == s for r in rows)]
    n = max(int(r["experts_used"]) for r in rows)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    bottom = [0.0] * len(splits)
    for m in range(1, n + 1):
        vals = [next((float(r["fraction"]) for r in rows if r["split"] == s and int(r["experts_used"]) == m), 0.0)
                for s in splits]
        ax.bar(splits, vals, bottom=bottom, label=f"{m} expert{'s' if m > 1 else ''}")
        bottom = [b + v for b, v in zip(bottom, vals)]
    ax.set_ylabel("fraction of instances")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False, fontsize=8)
    _style(ax)
    fig.tight_layout()
    out = Path(out)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_training(csv_path: str | os.PathLike, out: str | os.PathLike) -> Path:
    rows = read_csv(csv_path)
    epochs = [int(r["epoch"]) for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for key in ("classify", "diversity", "extra"):
        vals = [float(r[key]) if r[key] not in ("", None) else 0.0 for r in rows]
        if any(vals):
            ax.plot(epochs, vals, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss term")
    ax.legend(frameon=False, fontsize=8)
    _style(ax)
    fig.tight_layout()
    out = Path(out)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def render_directory(run_dir: str | os.PathLike) -> list[Path]:
    """Render every figure whose source CSV exists in ``run_dir``."""
    run_dir = Path(run_dir)
    made = []
    if (run_dir / "metrics.csv").exists():
        made.append(plot_training(run_dir / "metrics.csv", run_dir / "training.png"))
    if (run_dir / "routing_hist.csv").exists():
        made.append(plot_routing(run_dir / "routing_hist.csv", run_dir / "routing.png"))
    bv = {p.stem[len("biasvar_"):]: p for p in sorted(run_dir.glob("biasvar_*.csv"))}
    if bv:
        made.append(plot_biasvar(bv, run_dir / "biasvar.png"))
    for p in sorted(run_dir.glob("hardest_negative*.csv")):
        made.append(plot_hardest_negative(p, p.with_suffix(".png")))
    return made
