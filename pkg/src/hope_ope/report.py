"""Figure rendering for finished benchmark runs.

Reads the delimited metrics and JSON estimates written by the evaluate
stage and renders PNG figures next to them: absolute error per
estimator and policy, bootstrap value distributions, and the sorted
Q-gap curve with the critical threshold.  A compact ``report.csv`` with
the per-estimator summary rows is written alongside the figures.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _read_metrics(path: Path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))


def abs_error_figure(rows: list[dict], path: Path) -> None:
    """Grouped bar chart of absolute error per estimator and policy."""
    estimators = list(dict.fromkeys(r["estimator"] for r in rows))
    policies = list(dict.fromkeys(r["policy"] for r in rows))
    errs = {(r["policy"], r["estimator"]): float(r["abs_error"]) for r in rows}
    width = 0.8 / max(len(policies), 1)
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(estimators)), 4))
    for j, pol in enumerate(policies):
        xs = [i + j * width for i in range(len(estimators))]
        ax.bar(xs, [errs.get((pol, est), 0.0) for est in estimators],
               width=width, label=pol)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(estimators))])
    ax.set_xticklabels(estimators, rotation=45, ha="right")
    ax.set_ylabel("absolute error")
    ax.set_title("Estimate error vs oracle policy value")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def bootstrap_figure(estimates: dict, path: Path) -> None:
    """Per-policy boxplots of bootstrap value distributions."""
    policies = list(estimates)
    fig, axes = plt.subplots(len(policies), 1, sharex=True,
                             figsize=(8, 2.6 * max(len(policies), 1)),
                             squeeze=False)
    for ax, pol in zip(axes[:, 0], policies):
        block = estimates[pol]["estimators"]
        names = [e for e in block if block[e]["bootstrap"]]
        data = [block[e]["bootstrap"] for e in names]
        if data:
            ax.boxplot(data, tick_labels=names, showfliers=False)
        true_value = estimates[pol]["true_value"]
        if true_value is not None:
            ax.axhline(true_value, color="tab:red", linestyle="--",
                       linewidth=1, label="oracle value")
            ax.legend(fontsize="small", loc="upper right")
        ax.set_ylabel(pol, fontsize="small")
        ax.tick_params(axis="x", rotation=45)
    fig.suptitle("Bootstrap value distributions")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def gap_curve_figure(gaps: list[float], threshold: float | None,
                     path: Path) -> None:
    """Sorted non-increasing Q-gap curve with the selected threshold."""
    gaps = sorted(gaps, reverse=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(gaps)), gaps, marker="o", markersize=3)
    if threshold is not None and threshold > float("-inf"):
        ax.axhline(threshold, color="tab:red", linestyle="--", linewidth=1,
                   label=f"threshold h = {threshold:.3g}")
        ax.legend(fontsize="small")
    ax.set_xlabel("observation rank")
    ax.set_ylabel("Q-gap")
    ax.set_title("Critical-observation gap curve")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _report_csv(run_dir: Path, out_dir: Path) -> Path | None:
    summary_path = run_dir / "summary.json"
    if not summary_path.exists():
        return None
    summary = json.loads(summary_path.read_text())
    path = out_dir / "report.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["estimator", "best_policy", "mean_abs_error",
                         "spearman", "regret_at_1", "regret_normalized"])
        for est, entry in summary.get("estimators", {}).items():
            writer.writerow([
                est, entry.get("best_policy"), entry.get("mean_abs_error"),
                entry.get("spearman"), entry.get("regret_at_1"),
                entry.get("regret_normalized"),
            ])
    return path


def render_report(run_dir: Path, out_dir: Path) -> list[Path]:
    """Render all available figures for a run; returns the written paths."""
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    metrics_path = run_dir / "metrics.csv"
    if metrics_path.exists():
        rows = _read_metrics(metrics_path)
        if rows:
            path = out_dir / "abs_error.png"
            abs_error_figure(rows, path)
            written.append(path)

    estimates_path = run_dir / "estimates.json"
    if estimates_path.exists():
        estimates = json.loads(estimates_path.read_text())
        if estimates:
            path = out_dir / "bootstrap.png"
            bootstrap_figure(estimates, path)
            written.append(path)

    gaps_path = run_dir / "gaps.csv"
    if gaps_path.exists():
        with open(gaps_path) as fh:
            gap_rows = list(csv.DictReader(fh))
        threshold = None
        critical_path = run_dir / "critical.json"
        if critical_path.exists():
            threshold = json.loads(critical_path.read_text())["threshold"]
            if threshold is not None:
                threshold = float(threshold)
        if gap_rows:
            path = out_dir / "gap_curve.png"
            gap_curve_figure([float(r["q_gap"]) for r in gap_rows],
                             threshold, path)
            written.append(path)

    report_path = _report_csv(run_dir, out_dir)
    if report_path is not None:
        written.append(report_path)
    return written
