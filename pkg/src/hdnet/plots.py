"""Static SVG figures rendered from the CSV outputs."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def _num(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return None


def training_curves(log_csv: str | Path, out_svg: str | Path) -> Path:
    rows = _read(log_csv)
    fig, (ax_l, ax_v) = plt.subplots(1, 2, figsize=(10, 3.6))
    steps = [int(r["step"]) for r in rows]
    for key in ("loss", "hm", "pose", "bins", "idx"):
        vals = [_num(r.get(key)) for r in rows]
        pts = [(s, v) for s, v in zip(steps, vals) if v is not None]
        if pts:
            ax_l.plot(*zip(*pts), label=key, lw=0.8)
    ax_l.set_yscale("log")
    ax_l.set_xlabel("step")
    ax_l.set_title("training losses")
    ax_l.legend(fontsize=7)
    pts = [(s, _num(r.get("val_median_rel"))) for s, r in zip(steps, rows)]
    pts = [(s, v) for s, v in pts if v is not None]
    if pts:
        ax_v.plot(*zip(*pts), marker="o", ms=3)
    ax_v.set_xlabel("step")
    ax_v.set_title("validation median relative depth error")
    fig.tight_layout()
    fig.savefig(out_svg, format="svg")
    plt.close(fig)
    return Path(out_svg)


def ablation_bars(summary_csv: str | Path, out_svg: str | Path, metric: str = "depth_mean_rel") -> Path:
    rows = _read(summary_csv)
    names = [r["variant"] for r in rows]
    means = [_num(r.get(f"{metric}_mean")) or 0.0 for r in rows]
    stds = [_num(r.get(f"{metric}_std")) or 0.0 for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.bar(range(len(names)), means, yerr=stds, capsize=3, color="#6a8caf")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel(metric)
    ax.set_title("ablation (mean +- std over seeds)")
    fig.tight_layout()
    fig.savefig(out_svg, format="svg")
    plt.close(fig)
    return Path(out_svg)
