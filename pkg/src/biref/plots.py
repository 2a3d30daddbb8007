"""Static figures for run logs, metric reports and ablation tables."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_TERMS = ("bce", "iou", "ssim", "ce", "grad")
BAR_METRICS = ("fmax", "fw", "sm", "emean", "fmean", "emax", "mae")


class PlotInputError(ValueError):
    pass


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def plot_loss_curves(records: list[dict], path: Path) -> int:
    """One line per loss term against the step index; returns the step count."""
    steps = [r for r in records if r.get("type") == "step"]
    if not steps:
        raise PlotInputError("no steps")
    x = np.arange(1, len(steps) + 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(x, [s["loss"]["total"] for s in steps], label="total", color="k", lw=1.5)
    for term in LOSS_TERMS:
        ax.plot(x, [s["loss"]["terms"][term] for s in steps], label=term, lw=1)
    ft = [i + 1 for i, s in enumerate(steps) if s["phase"] == "finetune"]
    if ft:
        ax.axvspan(ft[0], ft[-1], color="0.9", label="fine-tune")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return len(steps)


def plot_metric_curves(records: list[dict], path: Path) -> bool:
    epochs = [r for r in records if r.get("type") == "epoch" and r.get("val")]
    if not epochs:
        return False
    x = [r["epoch"] for r in epochs]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("fmax", "fw", "sm", "emean", "mae"):
        ax.plot(x, [r["val"][key] for r in epochs], marker=".", label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation metric")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return True


def grouped_bars(groups: dict[str, dict[str, float]], path: Path, errors: dict[str, dict[str, float]] | None = None) -> int:
    """One group of bars per entry in ``groups``; returns the group count."""
    names = list(groups)
    keys = [k for k in BAR_METRICS if any(k in g for g in groups.values())]
    if not names or not keys:
        raise PlotInputError("nothing to plot")
    width = 0.8 / len(keys)
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(5, 1.5 * len(names) + 2), 4))
    for j, k in enumerate(keys):
        vals = [groups[n].get(k, np.nan) for n in names]
        err = [errors[n].get(k, 0.0) for n in names] if errors else None
        ax.bar(x + (j - (len(keys) - 1) / 2) * width, vals, width, yerr=err, label=k)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=15, fontsize=8)
    ax.legend(fontsize=8, ncol=len(keys))
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return len(names)


def _ablation_groups(path: Path):
    with path.open() as f:
        rows = list(csv.DictReader(f))
    if not rows or "variant" not in rows[0]:
        raise PlotInputError(f"{path}: not an ablation table")
    groups, errs = {}, {}
    for name in dict.fromkeys(r["variant"] for r in rows):
        rs = [r for r in rows if r["variant"] == name]
        groups[name], errs[name] = {}, {}
        for k in BAR_METRICS:
            if k in rs[0]:
                v = np.array([float(r[k]) for r in rs])
                groups[name][k], errs[name][k] = float(v.mean()), float(v.std())
    return groups, errs


def _label(path: Path) -> str:
    return f"{path.parent.name}_{path.stem}" if path.parent.name else path.stem


def plot_paths(paths: list[Path], out: Path) -> list[Path]:
    """Dispatch on file type; deterministic output names derived from inputs."""
    written: list[Path] = []
    reports: dict[str, dict] = {}
    for p in paths:
        if not p.is_file():
            raise PlotInputError(f"no such file: {p}")
        if p.suffix == ".jsonl":
            records = _read_jsonl(p)
            target = out / f"{_label(p)}_loss.png"
            plot_loss_curves(records, target)
            written.append(target)
            target = out / f"{_label(p)}_metrics.png"
            if plot_metric_curves(records, target):
                written.append(target)
        elif p.suffix == ".json":
            doc = json.loads(p.read_text())
            if "summary" not in doc:
                raise PlotInputError(f"{p}: not a metric report")
            reports[_label(p)] = doc["summary"]
        elif p.suffix == ".csv":
            groups, errs = _ablation_groups(p)
            target = out / f"{_label(p)}_bars.png"
            grouped_bars(groups, target, errs)
            written.append(target)
        else:
            raise PlotInputError(f"{p}: unsupported file type")
    if reports:
        target = out / "reports.png"
        grouped_bars(reports, target)
        written.append(target)
    return written
