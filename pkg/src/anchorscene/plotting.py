"""PNG figures for training logs, fusion weights and evaluation reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curves(history: list, terms, path, title: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    ep = [r["epoch"] for r in history]
    ax.plot(ep, [r["total"] for r in history], color="black", lw=2, label="total")
    for t in terms:
        ax.plot(ep, [r[t] for r in history], lw=1, label=t)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def plot_fusion_weights(weights: dict, path) -> Path:
    """``weights`` maps branch name -> {group: {"w1": .., "w2": ..}}."""
    fig, axes = plt.subplots(1, len(weights), figsize=(5 * len(weights), 3.5), squeeze=False)
    for ax, (branch, groups) in zip(axes[0], weights.items()):
        names = list(groups)
        x = np.arange(len(names))
        ax.bar(x - 0.2, [groups[g]["w1"] for g in names], 0.4, label="w1 (vote)")
        ax.bar(x + 0.2, [groups[g]["w2"] for g in names], 0.4, label="w2 (anchor)")
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
        ax.set_title(f"{branch} fusion weights")
        ax.legend(fontsize=7)
    return _save(fig, path)


def plot_ap_bars(report: dict, path) -> Path:
    series = {f"box IoU {report['detection']['iou']:g}": report["detection"]["ap"]}
    for t, r in report["mesh"].items():
        series[f"mesh CD {t}"] = r["ap"]
    classes = sorted({c for s in series.values() for c in s})
    fig, ax = plt.subplots(figsize=(8, 4))
    x = np.arange(len(classes))
    w = 0.8 / max(1, len(series))
    for k, (name, ap) in enumerate(series.items()):
        ax.bar(x + (k - (len(series) - 1) / 2) * w, [ap.get(c, 0.0) for c in classes], w, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(classes, rotation=20, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("AP")
    ax.set_title(f"per-class AP, layout F1 {report['layout']['f1']:.3f}")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_pr_curves(curves: dict, path, title: str = "precision / recall") -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, c in curves.items():
        if c["recall"]:
            ax.step(c["recall"], c["precision"], where="post", label=name)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(title)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=7)
    return _save(fig, path)


def report_figures(report: dict, stem) -> list:
    """AP bars plus box and mesh PR curves next to ``stem`` (a path without suffix)."""
    stem = Path(stem)
    out = [plot_ap_bars(report, stem.with_name(stem.name + "_ap.png")),
           plot_pr_curves(report["detection"]["curves"], stem.with_name(stem.name + "_pr_box.png"),
                          f"box PR, IoU {report['detection']['iou']:g}")]
    for t, r in report["mesh"].items():
        out.append(plot_pr_curves(r["curves"], stem.with_name(f"{stem.name}_pr_cd{t}.png"), f"mesh PR, CD {t}"))
    return out
