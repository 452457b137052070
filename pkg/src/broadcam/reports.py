"""Report files: delimited tables, JSON summaries and rendered figures.

Writers are atomic (write to a sibling temp file, then rename) and
deterministic: JSON keys are sorted, floats go through a fixed %.10g
format in CSV, and nothing here ever records the time of day, so a
rerun with identical inputs produces identical bytes. Figures are
rendered with the Agg backend straight to files.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import EvalReport


def _jsonify(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonify(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path: Path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = json.dumps(_jsonify(obj), indent=2, sort_keys=True) + "\n"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(data)
    os.replace(tmp, path)


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (float, np.floating)):
        return "%.10g" % float(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    text = str(value)
    if any(ch in text for ch in ",\"\n"):
        text = '"' + text.replace('"', '""') + '"'
    return text


def write_csv(path: Path, header: list[str], rows: list[dict] | list[list]) -> None:
    """Write one table; dict rows are projected onto the header order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        if isinstance(row, dict):
            row = [row.get(col) for col in header]
        lines.append(",".join(_format_cell(v) for v in row))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _save_fig(fig, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.png")
    fig.savefig(tmp, format="png")
    plt.close(fig)
    os.replace(tmp, path)


def threshold_figure(report: EvalReport, path: Path) -> None:
    """mIoU and FwIoU across the binarization sweep."""
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    ax.plot(report.thresholds, report.miou_curve, marker="o", label="mIoU")
    ax.plot(report.thresholds, report.fwiou_curve, marker="s", label="FwIoU")
    ax.axvline(report.best_threshold, color="gray", linestyle="--", linewidth=1)
    ax.set_xlabel("seed threshold")
    ax.set_ylabel("score")
    ax.set_ylim(0, 1)
    ax.legend(loc="lower center")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save_fig(fig, path)


def gamut_figure(rows: list[dict], metric: str, path: Path) -> None:
    """Median metric against the labeled-data proportion, one line per
    (method, split) group in the long-format table."""
    ok = [r for r in rows if "error" not in r and r.get("metric") == metric]
    groups = sorted({(r["method"], r["split"]) for r in ok})
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    for method, split in groups:
        sel = [r for r in ok if r["method"] == method and r["split"] == split]
        props = sorted({r["proportion"] for r in sel})
        med = [float(np.median([r["value"] for r in sel if r["proportion"] == p])) for p in props]
        label = method if len({g[1] for g in groups}) == 1 else f"{method} ({split})"
        ax.plot(props, med, marker="o", label=label)
    ax.set_xscale("log")
    ax.set_xlabel("proportion of labeled training samples")
    ax.set_ylabel(f"median peak {metric}")
    if groups:
        ax.legend(loc="lower right")
    ax.grid(True, alpha=0.3, which="both")
    fig.tight_layout()
    _save_fig(fig, path)


def ablation_figure(rows: list[dict], path: Path, metric: str = "miou") -> None:
    """Mean peak metric per layer subset, one bar each."""
    ok = [r for r in rows if "error" not in r and r.get("metric") == metric]
    layer_sets = list(dict.fromkeys(r["layers"] for r in ok))
    means = [float(np.mean([r["value"] for r in ok if r["layers"] == ls])) for ls in layer_sets]
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    ax.bar(range(len(layer_sets)), means, color="tab:blue")
    ax.set_xticks(range(len(layer_sets)))
    ax.set_xticklabels([f"layers {ls}" for ls in layer_sets])
    ax.set_ylabel(f"mean peak {metric}")
    ax.set_ylim(0, 1)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    _save_fig(fig, path)


def relevance_figure(classes: list[dict], path: Path) -> None:
    """Per class: positive/nonpositive weight counts per relevance group
    (bars) with the normalized group relevance overlaid (line)."""
    n = len(classes)
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 3.2), dpi=100, squeeze=False)
    for ax, cls in zip(axes[0], classes):
        groups = np.arange(len(cls["group_mean_relevance"]))
        ax.bar(groups - 0.2, cls["group_positive_weights"], width=0.4, color="tab:green", label="w > 0")
        ax.bar(groups + 0.2, cls["group_nonpositive_weights"], width=0.4, color="tab:red", label="w <= 0")
        twin = ax.twinx()
        twin.plot(groups, cls["group_mean_relevance"], color="black", marker=".", label="relevance")
        twin.set_ylim(0, 1.05)
        ax.set_title(f"{cls['class_name']} (r={cls['pearson_r']:.3f})")
        ax.set_xlabel("relevance group (high to low)")
        ax.set_ylabel("channels")
        if ax is axes[0][0]:
            ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    _save_fig(fig, path)


def topk_figure(rows: list[dict], path: Path) -> None:
    """Peak mIoU as each class map is restricted to its top-k channels."""
    ks = [r["k"] for r in rows]
    mious = [r["best_miou"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    ax.plot(range(len(ks)), mious, marker="o")
    ax.set_xticks(range(len(ks)))
    ax.set_xticklabels([str(k) for k in ks])
    ax.set_xlabel("channels kept per class")
    ax.set_ylabel("peak mIoU")
    ax.set_ylim(0, 1)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save_fig(fig, path)


def seed_grid_figure(seeds: list, path: Path, max_samples: int = 4) -> None:
    """Seed maps for the first few samples, one row each, class per column."""
    seeds = seeds[:max_samples]
    if not seeds:
        raise ValueError("seed_grid_figure needs at least one seed")
    k = seeds[0].num_classes
    fig, axes = plt.subplots(len(seeds), k, figsize=(2.2 * k, 2.2 * len(seeds)), dpi=100, squeeze=False)
    for i, seed in enumerate(seeds):
        for c in range(k):
            ax = axes[i][c]
            ax.imshow(seed.maps[c], vmin=0, vmax=1, cmap="viridis")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                name = seed.class_names[c] if seed.class_names else f"class{c}"
                ax.set_title(name, fontsize=9)
            if c == 0:
                ax.set_ylabel(seed.sample_id, fontsize=8)
    fig.tight_layout()
    _save_fig(fig, path)
