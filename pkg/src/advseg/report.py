"""Loss-curve and metric plots plus a plain-text summary table."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import read_metrics_csv  # noqa: E402
from .trainer import read_loss_csv  # noqa: E402

PNG_META = {"Software": None}


def _loss_plot(history, path: Path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [r.step for r in history]
    for attr, label in (("loss_d", "L_D (discriminator objective)"), ("loss_e", "L_E (estimator objective)")):
        ys = [getattr(r, attr) for r in history]
        if any(math.isfinite(y) for y in ys):
            ax.plot(steps, ys, label=label, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("objective")
    if ax.lines:
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)


def _metric_plot(rows, path: Path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = ("precision", "recall", "f_measure", "mean_jaccard")
    if rows:
        means = [sum(getattr(m, n) for _, m in rows) / len(rows) for n in names]
    else:
        means = [0.0] * len(names)
    ax.bar(["Prec", "Rec", "F", "J"], means, color="tab:blue")
    ax.set_ylim(0, 1)
    ax.set_title(f"mean over {len(rows)} frames")
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)


def summary_table(history, rows) -> str:
    lines = [f"loss records: {len(history)}"]
    if history:
        last = history[-1]
        lines.append(f"final step {last.step}: loss_d={last.loss_d:.4f} loss_e={last.loss_e:.4f} "
                     f"d_real={last.d_real_mean:.3f} d_fake={last.d_fake_mean:.3f}")
    lines.append(f"metric rows: {len(rows)}")
    lines.append(f"{'frame':<16}{'TP':>5}{'FP':>5}{'FN':>5}{'Prec':>8}{'Rec':>8}{'F':>8}{'J':>8}")
    for frame, m in rows:
        lines.append(f"{frame:<16}{m.tp:>5}{m.fp:>5}{m.fn:>5}{m.precision:>8.3f}{m.recall:>8.3f}"
                     f"{m.f_measure:>8.3f}{m.mean_jaccard:>8.3f}")
    return "\n".join(lines) + "\n"


def write_report(loss_csv, metrics_csv, out_dir) -> dict[str, Path]:
    history = read_loss_csv(loss_csv)
    rows = read_metrics_csv(metrics_csv)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"loss_plot": out / "loss_curve.png", "metric_plot": out / "metrics.png", "summary": out / "summary.txt"}
    _loss_plot(history, paths["loss_plot"])
    _metric_plot(rows, paths["metric_plot"])
    paths["summary"].write_text(summary_table(history, rows), encoding="utf-8")
    return paths
