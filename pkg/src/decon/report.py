"""Comparison tables and loss-curve figures over several runs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from decon import plotting
from decon.evaluation import EvalResult, load_eval
from decon.stats import cohens_d, wilcoxon_signed_rank
from decon.trainer import read_loss_log

BASE_COLUMNS = ["run_id", "transfer_mode", "n_seeds", "miou_mean", "miou_std"]
COMPARE_COLUMNS = ["cohens_d_vs_ref", "wilcoxon_p_vs_ref"]
CURVES = ("l_enc", "l_dds", "total")


@dataclass
class RunRecord:
    run_id: str
    loss_log: list[dict] = field(default_factory=list)
    evals: list[EvalResult] = field(default_factory=list)


def load_run(directory: str | Path) -> RunRecord:
    """A run directory holds ``loss_log.csv`` and/or ``eval_*.json`` files."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"run directory not found: {d}")
    log = read_loss_log(d / "loss_log.csv") if (d / "loss_log.csv").exists() else []
    evals = [load_eval(p) for p in sorted(d.glob("eval_*.json"))]
    if not log and not evals:
        raise FileNotFoundError(f"{d} has neither loss_log.csv nor eval_*.json")
    return RunRecord(d.name, log, evals)


def _safe(fn, *args) -> float | str:
    try:
        value = fn(*args)
    except ValueError:
        return ""
    return value if math.isfinite(value) else ""


def comparison_rows(runs: Sequence[RunRecord]) -> tuple[list[str], list[dict]]:
    rows, scores = [], []
    for run in runs:
        for ev in run.evals:
            rows.append({
                "run_id": run.run_id,
                "transfer_mode": ev.transfer_mode,
                "n_seeds": len(ev.miou),
                "miou_mean": ev.mean,
                "miou_std": ev.std,
            })
            scores.append(ev.miou)
    columns = list(BASE_COLUMNS)
    if len(rows) > 1:
        columns += COMPARE_COLUMNS
        ref = scores[0]
        for row, s in zip(rows, scores):
            row["cohens_d_vs_ref"] = _safe(cohens_d, s, ref)
            paired = len(s) == len(ref)
            row["wilcoxon_p_vs_ref"] = (
                _safe(wilcoxon_signed_rank, np.subtract(s, ref)) if paired else ""
            )
    return columns, rows


def plot_loss_curves(runs: Sequence[RunRecord], path: str | Path) -> Path | None:
    runs = [r for r in runs if r.loss_log]
    if not runs:
        return None
    fig, axes = plotting.subplots(ncols=len(CURVES))
    max_step = 0
    for run in runs:
        steps = np.array([int(r["step"]) for r in run.loss_log])
        max_step = max(max_step, int(steps.max()))
        for ax, key in zip(axes, CURVES):
            vals = np.array([np.nan if r[key] is None else r[key] for r in run.loss_log])
            ax.plot(steps, vals, label=run.run_id)
    for ax, key in zip(axes, CURVES):
        ax.set_title(key)
        ax.set_xlabel("step")
        ax.set_xlim(0, max(max_step, 1))
    axes[0].legend(fontsize=7)
    path = Path(path)
    plotting.save(fig, path)
    return path


def emit_report(runs: Sequence[RunRecord], out_dir: str | Path) -> dict[str, Path]:
    """Write ``comparison.csv`` (first row is the reference) and ``loss_curves.png``."""
    if not runs:
        raise ValueError("need at least one run")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    columns, rows = comparison_rows(runs)
    csv_path = out / "comparison.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    written = {"csv": csv_path}
    curves = plot_loss_curves(runs, out / "loss_curves.png")
    if curves is not None:
        written["curves"] = curves
    return written
