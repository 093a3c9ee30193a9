"""Report serialization: metric CSVs plus rendered figures next to them."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import EvalReport, FoldMetrics, RocCurve
from .pipeline import StageComparisonRow


def _fmt(v: float) -> str:
    return f"{v:.10g}"


def save_report_csv(report: EvalReport, path) -> None:
    """Per-fold metrics followed by mean and (population) std rows."""
    with open(path, "w") as f:
        f.write("fold,acc,vacc,auc\n")
        for i, m in enumerate(report.folds):
            f.write(f"{i},{_fmt(m.acc)},{_fmt(m.vacc)},{_fmt(m.auc)}\n")
        f.write(f"mean,{_fmt(report.mean.acc)},{_fmt(report.mean.vacc)},{_fmt(report.mean.auc)}\n")
        f.write(f"std,{_fmt(report.std[0])},{_fmt(report.std[1])},{_fmt(report.std[2])}\n")


def load_report_csv(path) -> EvalReport:
    folds = []
    with open(path) as f:
        header = f.readline().strip()
        if header != "fold,acc,vacc,auc":
            raise ValueError(f"{path}: unexpected report header {header!r}")
        for line in f:
            fields = line.strip().split(",")
            if fields[0] in ("mean", "std"):
                continue
            folds.append(FoldMetrics(*(float(v) for v in fields[1:4])))
    if not folds:
        raise ValueError(f"{path}: no fold rows found")
    from .evaluation import aggregate
    return aggregate(folds)


def save_roc_csv(curve: RocCurve, path) -> None:
    with open(path, "w") as f:
        f.write("fpr,tpr\n")
        for fpr, tpr in curve.points:
            f.write(f"{_fmt(fpr)},{_fmt(tpr)}\n")


def plot_roc(curves: Sequence[tuple[str, RocCurve]], path) -> None:
    """ROC line plot (SVG/PNG by extension) for one or more labelled curves."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    for label, curve in curves:
        ax.plot(curve.points[:, 0], curve.points[:, 1],
                label=f"{label} (AUC {curve.auc:.4f})")
    ax.plot([0, 1], [0, 1], linestyle=":", color="gray", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def write_report_tree(report: EvalReport, curves: Sequence[RocCurve], report_dir) -> None:
    """report.csv, per-fold ROC point CSVs, and the ROC figure."""
    d = Path(report_dir)
    d.mkdir(parents=True, exist_ok=True)
    save_report_csv(report, d / "report.csv")
    for i, curve in enumerate(curves):
        save_roc_csv(curve, d / f"roc_points_fold{i}.csv")
    plot_roc([(f"fold {i}", c) for i, c in enumerate(curves)], d / "roc.svg")


STAGE_COMPARISON_HEADER = "stage,mean_acc,mean_vacc,mean_auc,delta_acc,delta_vacc,delta_auc"


def save_stage_comparison_csv(rows: Sequence[StageComparisonRow], path) -> None:
    with open(path, "w") as f:
        f.write(STAGE_COMPARISON_HEADER + "\n")
        for r in rows:
            f.write(",".join([r.stage, _fmt(r.mean_acc), _fmt(r.mean_vacc),
                              _fmt(r.mean_auc), _fmt(r.delta_acc),
                              _fmt(r.delta_vacc), _fmt(r.delta_auc)]) + "\n")


def plot_stage_comparison(rows: Sequence[StageComparisonRow], path) -> None:
    """Grouped bars of the mean metrics per processing stage."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    stages = [r.stage for r in rows]
    metrics = np.array([[r.mean_acc, r.mean_vacc, r.mean_auc] for r in rows])
    x = np.arange(len(stages))
    width = 0.25
    fig, ax = plt.subplots(figsize=(1.5 + 1.4 * len(stages), 4))
    for k, name in enumerate(("ACC", "VACC", "AUC")):
        ax.bar(x + (k - 1) * width, metrics[:, k], width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(stages)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("mean metric")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
