"""Figures rendered from the CSV outputs. Nothing here feeds back into results."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _rows(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _num(v):
    return float(v) if v not in ("", None) else float("nan")


def plot_metrics(csv_path, out_path) -> Path:
    rows = _rows(csv_path)
    step = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(step, [_num(r["train_loss"]) for r in rows], label="train")
    ax.plot(step, [_num(r["val_loss"]) for r in rows], label="validation")
    ax.set_xlabel("gradient step")
    ax.set_ylabel("NLL")
    ax.legend()
    return _save(fig, out_path)


def plot_interpolation(csv_path, out_path, modes: tuple[float, float] | None = None) -> Path:
    rows = _rows(csv_path)
    target = [_num(r["target"]) for r in rows]
    mean = [_num(r["mean_return"]) for r in rows]
    std = [_num(r["std_return"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(target, mean, yerr=std, marker="o", capsize=3, label="achieved")
    lo, hi = min(target), max(target)
    ax.plot([lo, hi], [lo, hi], "k--", lw=0.8, label="target")
    for m in modes or ():
        ax.axhline(m, color="grey", lw=0.8, ls=":")
    ax.set_xlabel("return target")
    ax.set_ylabel("achieved return")
    ax.legend()
    return _save(fig, out_path)


def plot_sweep(csv_path, out_path, metric: str = "eval_success") -> Path:
    rows = [r for r in _rows(csv_path) if r["status"] == "ok"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for dropout in sorted({r["dropout"] for r in rows}, key=float):
        by_width: dict[int, list[float]] = {}
        for r in rows:
            if r["dropout"] == dropout:
                by_width.setdefault(int(r["width"]), []).append(_num(r[metric]))
        widths = sorted(by_width)
        ax.plot(widths, [sum(by_width[w]) / len(by_width[w]) for w in widths], marker="o",
                label=f"dropout {dropout}")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("hidden width")
    ax.set_ylabel(metric)
    ax.legend()
    return _save(fig, out_path)


def plot_report(csv_path, out_path, metric: str = "normalized_score") -> Path:
    rows = _rows(csv_path)
    labels = [r["env_id"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows)), 3.5))
    ax.bar(labels, [_num(r[f"{metric}_mean"]) for r in rows], yerr=[_num(r[f"{metric}_std"]) for r in rows],
           capsize=3)
    ax.set_ylabel(metric)
    return _save(fig, out_path)


def _save(fig, out_path) -> Path:
    out_path = Path(out_path)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path
