"""End-to-end runs over a dataset manifest.

Every run is a pure function of its inputs: no wall-clock values enter
any artifact, sweep cells draw their randomness from their own
(parameter, seed) tuple, and multi-cell runs assemble their tables in
a canonical cell order, so rerunning a command reproduces its outputs
byte for byte regardless of worker count.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import numpy as np

from .bls import BLSModel, BroadFeatureMatrix, build_broad_matrix, fit_bls, load_model
from .cam import CamSeed, generate_cam, generate_cam_topk, topk_channels
from .errors import DuplicateLayerError
from .metrics import (
    DEFAULT_THRESHOLDS,
    EvalReport,
    evaluate_seeds,
    relevance_matrix,
    weight_relevance_report,
)
from .synth import GDClassifier, fit_gd_classifier, load_gd_classifier, subsample_split
from .tensor_io import FeatureStack, LabelTable, Manifest, load_features, load_labels, load_manifest, load_mask

DEFAULT_PROPORTIONS = (0.01, 0.02, 0.05, 0.08, 0.10, 0.20, 0.50, 0.80, 1.00)
METHODS = ("broadcam", "gd-baseline")


def package_version() -> str:
    try:
        return metadata.version("broadcam")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def run_header(command: str, params: dict, input_paths: dict[str, Path]) -> dict:
    """Self-describing report preamble: command, params and input hashes."""
    return {
        "command": command,
        "params": params,
        "version": package_version(),
        "inputs": {name: sha256_file(Path(p)) for name, p in sorted(input_paths.items())},
    }


def worker_count() -> int:
    """Cell parallelism; BROADCAM_THREADS overrides the default."""
    env = os.environ.get("BROADCAM_THREADS")
    if env is not None:
        n = int(env)
        if n < 1:
            raise ValueError(f"BROADCAM_THREADS must be >= 1, got {env}")
        return n
    return min(8, os.cpu_count() or 1)


@dataclass
class ExperimentSpec:
    """Shared knobs for the sweep-style commands."""

    manifest_path: Path
    layers: list[int]
    lam: float = 1.0
    enhance_nodes: int | None = None
    activation: str = "identity"
    method: str = "broadcam"
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    proportions: tuple[float, ...] = DEFAULT_PROPORTIONS
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    gd_lr: float = 0.5
    gd_epochs: int = 5
    train_split: str = "train"
    eval_splits: tuple[str, ...] = ("val",)
    with_mpxap: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        for p in self.proportions:
            if not 0 < p <= 1:
                raise ValueError(f"proportions must lie in (0, 1], got {p}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if not self.eval_splits:
            raise ValueError("at least one evaluation split is required")


@dataclass
class EvalData:
    """Preloaded evaluation split: stacks, masks and present classes."""

    sample_ids: list[str]
    stacks: list[FeatureStack]
    masks: list[np.ndarray]
    present: list[np.ndarray]


def load_eval_data(manifest: Manifest, labels: LabelTable, split: str, layers: list[int]) -> EvalData:
    ids = manifest.split_ids(split)
    stacks = [load_features(manifest.features_dir(), sid, layers) for sid in ids]
    masks = [load_mask(manifest.mask_path(sid), num_classes=len(manifest.class_names)) for sid in ids]
    present = [labels.present_classes(sid) for sid in ids]
    return EvalData(sample_ids=ids, stacks=stacks, masks=masks, present=present)


def fit_model(
    bm: BroadFeatureMatrix,
    Y: np.ndarray,
    method: str = "broadcam",
    lam: float = 1.0,
    enhance_nodes: int | None = None,
    activation: str = "identity",
    gd_lr: float = 0.5,
    gd_epochs: int = 5,
    gd_seed: int = 0,
    class_names: list[str] | None = None,
) -> BLSModel | GDClassifier:
    """Fit either the broad model or the gradient-descent baseline."""
    if method == "broadcam":
        return fit_bls(
            bm, Y, lam=lam, enhance_nodes=enhance_nodes, activation=activation, class_names=class_names
        )
    if method == "gd-baseline":
        return fit_gd_classifier(
            bm.Z,
            Y,
            lr=gd_lr,
            epochs=gd_epochs,
            seed=gd_seed,
            layer_offsets=bm.layer_offsets,
            class_names=class_names,
        )
    raise ValueError(f"unknown method {method!r}, expected one of {METHODS}")


def load_any_model(model_dir: Path) -> BLSModel | GDClassifier:
    """Dispatch on the sidecar's method field."""
    with open(Path(model_dir) / "model.json") as fh:
        meta = json.load(fh)
    method = meta.get("method", "broadcam")
    if method == "broadcam":
        return load_model(model_dir)
    if method == "gd-baseline":
        return load_gd_classifier(model_dir)
    raise ValueError(f"model directory {model_dir} declares unknown method {meta['method']!r}")


def seed_pairs(
    data: EvalData, weights: np.ndarray, layer_offsets: dict[int, tuple[int, int]]
) -> list[tuple[CamSeed, np.ndarray, np.ndarray]]:
    """Generate seeds at mask resolution, paired with gt and labels."""
    pairs = []
    for stack, mask, present in zip(data.stacks, data.masks, data.present):
        seed = generate_cam(stack, weights, layer_offsets, target_hw=mask.shape)
        pairs.append((seed, mask, present))
    return pairs


def run_fit(
    manifest_path: Path,
    layers: list[int],
    method: str = "broadcam",
    lam: float = 1.0,
    enhance_nodes: int | None = None,
    activation: str = "identity",
    gd_lr: float = 0.5,
    gd_epochs: int = 5,
    gd_seed: int = 0,
    split: str = "train",
) -> tuple[BLSModel | GDClassifier, dict]:
    """Fit on one split and return the model plus a report header."""
    manifest = load_manifest(manifest_path)
    labels = load_labels(manifest.labels_path())
    ids = manifest.split_ids(split)
    bm = build_broad_matrix(manifest.features_dir(), ids, layers)
    Y = labels.multi_hot(ids)
    model = fit_model(
        bm,
        Y,
        method=method,
        lam=lam,
        enhance_nodes=enhance_nodes,
        activation=activation,
        gd_lr=gd_lr,
        gd_epochs=gd_epochs,
        gd_seed=gd_seed,
        class_names=labels.class_names,
    )
    params = {
        "layers": list(layers),
        "method": method,
        "lambda": lam,
        "enhance_nodes": enhance_nodes,
        "activation": activation,
        "split": split,
        "n_samples": len(ids),
    }
    if method == "gd-baseline":
        params.update({"gd_lr": gd_lr, "gd_epochs": gd_epochs, "gd_seed": gd_seed})
    header = run_header(
        "fit", params, {"manifest": Path(manifest_path), "labels": manifest.labels_path()}
    )
    return model, header


def run_eval(
    manifest_path: Path,
    model: BLSModel | GDClassifier,
    split: str = "val",
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
    with_mpxap: bool = True,
) -> EvalReport:
    """Generate seeds for a split with the model's weights and score them."""
    if model.layer_offsets is None:
        raise ValueError("model carries no layer layout; fit it through the pipeline or set layer_offsets")
    manifest = load_manifest(manifest_path)
    labels = load_labels(manifest.labels_path())
    layers = sorted(model.layer_offsets)
    data = load_eval_data(manifest, labels, split, layers)
    pairs = seed_pairs(data, model.cam_weights, model.layer_offsets)
    return evaluate_seeds(pairs, len(labels.class_names), thresholds, with_mpxap=with_mpxap)


def _metric_rows(report: EvalReport, with_mpxap: bool) -> list[dict]:
    """One (metric, value) row per reported metric, peaks over the sweep."""
    rows = [
        {"metric": "miou", "value": report.best_miou, "threshold": report.best_threshold},
        {"metric": "fwiou", "value": report.best_fwiou, "threshold": report.best_fwiou_threshold},
    ]
    if with_mpxap and report.mpxap is not None:
        rows.append({"metric": "mpxap", "value": report.mpxap.mean_ap, "threshold": None})
    return rows


def subset_hash(sample_ids: list[str]) -> str:
    return hashlib.sha256(",".join(sample_ids).encode()).hexdigest()[:16]


def run_gamut(spec: ExperimentSpec) -> tuple[list[dict], bool]:
    """Fit/eval every (proportion, seed) cell on training-label subsets.

    Training features are pooled once and shared read-only across
    cells; each cell subsamples ids, fits with spec.method, and scores
    every eval split in full. A successful cell emits one row per
    (split, metric); a failing cell emits a single error row instead
    of aborting the sweep. Rows come back in canonical cell order and
    the second value reports whether every cell succeeded.
    """
    manifest = load_manifest(spec.manifest_path)
    labels = load_labels(manifest.labels_path())
    train_ids = manifest.split_ids(spec.train_split)
    bm = build_broad_matrix(manifest.features_dir(), train_ids, spec.layers)
    row_of = {sid: i for i, sid in enumerate(train_ids)}
    data = {split: load_eval_data(manifest, labels, split, spec.layers) for split in spec.eval_splits}
    k_fg = len(labels.class_names)

    cells = [(p, s) for p in spec.proportions for s in spec.seeds]

    def run_cell(cell: tuple[float, int]) -> list[dict]:
        proportion, seed = cell
        ids = subsample_split(train_ids, proportion, seed)
        sub = BroadFeatureMatrix(
            Z=bm.Z[[row_of[sid] for sid in ids]], layer_offsets=bm.layer_offsets, sample_ids=ids
        )
        model = fit_model(
            sub,
            labels.multi_hot(ids),
            method=spec.method,
            lam=spec.lam,
            enhance_nodes=spec.enhance_nodes,
            activation=spec.activation,
            gd_lr=spec.gd_lr,
            gd_epochs=spec.gd_epochs,
            gd_seed=seed,
            class_names=labels.class_names,
        )
        base = {
            "method": spec.method,
            "proportion": proportion,
            "seed": seed,
            "n_train": len(ids),
            "subset_sha256": subset_hash(ids),
        }
        rows = []
        for split in spec.eval_splits:
            pairs = seed_pairs(data[split], model.cam_weights, bm.layer_offsets)
            report = evaluate_seeds(pairs, k_fg, spec.thresholds, with_mpxap=spec.with_mpxap)
            for metric_row in _metric_rows(report, spec.with_mpxap):
                rows.append({**base, "split": split, **metric_row})
        return rows

    results: dict[tuple, list[dict]] = {}
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        futures = {cell: pool.submit(run_cell, cell) for cell in cells}
        for cell, future in futures.items():
            try:
                results[cell] = future.result()
            except Exception as exc:  # noqa: BLE001 - cell isolation is the point
                proportion, seed = cell
                results[cell] = [
                    {
                        "method": spec.method,
                        "proportion": proportion,
                        "seed": seed,
                        "error": f"{type(exc).__name__}: {exc}",
                    }
                ]
    rows = [row for cell in cells for row in results[cell]]
    return rows, all("error" not in row for row in rows)


def run_ablation(
    spec: ExperimentSpec,
    layer_sets: list[list[int]],
    proportion: float = 1.0,
) -> tuple[list[dict], bool]:
    """Fit/eval each layer subset, Z rebuilt per set from shared pools.

    Seeds only influence subsampled or gradient-descent cells;
    otherwise rows repeat deterministically. Row and error semantics
    match run_gamut.
    """
    manifest = load_manifest(spec.manifest_path)
    labels = load_labels(manifest.labels_path())
    train_ids = manifest.split_ids(spec.train_split)
    row_of = {sid: i for i, sid in enumerate(train_ids)}
    for ls in layer_sets:
        if not ls:
            raise ValueError("each layer set must select at least one layer")
        if len(set(ls)) != len(ls):
            raise DuplicateLayerError(f"layer set {list(ls)} repeats an index")
    union: list[int] = sorted({j for ls in layer_sets for j in ls})

    # pool each layer once; any subset's broad matrix is a column stack
    pooled: dict[int, list[np.ndarray]] = {j: [] for j in union}
    for sid in train_ids:
        stack = load_features(manifest.features_dir(), sid, union)
        for j in union:
            pooled[j].append(np.asarray(stack.layers[j], dtype=np.float64).mean(axis=(1, 2)))
    per_layer = {j: np.stack(vs) for j, vs in pooled.items()}
    data = {split: load_eval_data(manifest, labels, split, union) for split in spec.eval_splits}
    k_fg = len(labels.class_names)

    cells = [(tuple(sorted(ls)), s) for ls in layer_sets for s in spec.seeds]

    def run_cell(cell: tuple[tuple[int, ...], int]) -> list[dict]:
        layers, seed = cell
        offsets = {}
        pos = 0
        for j in layers:
            offsets[j] = (pos, pos + per_layer[j].shape[1])
            pos += per_layer[j].shape[1]
        Z = np.hstack([per_layer[j] for j in layers])
        ids = train_ids if proportion >= 1.0 else subsample_split(train_ids, proportion, seed)
        row_idx = [row_of[sid] for sid in ids] if proportion < 1.0 else None
        sub = BroadFeatureMatrix(
            Z=Z if row_idx is None else Z[row_idx], layer_offsets=offsets, sample_ids=list(ids)
        )
        model = fit_model(
            sub,
            labels.multi_hot(ids),
            method=spec.method,
            lam=spec.lam,
            enhance_nodes=spec.enhance_nodes,
            activation=spec.activation,
            gd_lr=spec.gd_lr,
            gd_epochs=spec.gd_epochs,
            gd_seed=seed,
            class_names=labels.class_names,
        )
        base = {
            "layers": "+".join(str(j) for j in layers),
            "seed": seed,
            "method": spec.method,
            "proportion": proportion,
        }
        rows = []
        for split in spec.eval_splits:
            pairs = []
            for stack, mask, present in zip(data[split].stacks, data[split].masks, data[split].present):
                seed_map = generate_cam(
                    stack, model.cam_weights, offsets, layers=list(layers), target_hw=mask.shape
                )
                pairs.append((seed_map, mask, present))
            report = evaluate_seeds(pairs, k_fg, spec.thresholds, with_mpxap=spec.with_mpxap)
            for metric_row in _metric_rows(report, spec.with_mpxap):
                rows.append({**base, "split": split, **metric_row})
        return rows

    results: dict[tuple, list[dict]] = {}
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        futures = {cell: pool.submit(run_cell, cell) for cell in cells}
        for cell, future in futures.items():
            try:
                results[cell] = future.result()
            except Exception as exc:  # noqa: BLE001
                layers, seed = cell
                results[cell] = [
                    {
                        "layers": "+".join(str(j) for j in layers),
                        "seed": seed,
                        "method": spec.method,
                        "proportion": proportion,
                        "error": f"{type(exc).__name__}: {exc}",
                    }
                ]
    rows = [row for cell in cells for row in results[cell]]
    return rows, all("error" not in row for row in rows)


def empirical_relevance(data: EvalData, layer_offsets: dict[int, tuple[int, int]], num_fg_classes: int,
                        threshold: float = 0.1) -> np.ndarray:
    """(K, D) mean activation/mask overlap per channel over a split."""
    total = None
    for stack, mask in zip(data.stacks, data.masks):
        rel = relevance_matrix(stack, layer_offsets, mask, num_fg_classes, threshold=threshold)
        total = rel if total is None else total + rel
    if total is None:
        raise ValueError("relevance needs at least one sample")
    return total / len(data.stacks)


def run_analysis(
    manifest_path: Path,
    model: BLSModel | GDClassifier,
    split: str = "val",
    sample_ids: list[str] | None = None,
    class_k: int = 0,
    n_groups: int = 16,
    topk: tuple[int, ...] = (20, 200, 2000),
    relevance_source: str = "empirical",
    iou_threshold: float = 0.1,
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
) -> dict:
    """Weight-reliability analysis of a fitted model on one split.

    Produces, per class, the grouped weight/relevance distribution and
    the overall weight-to-relevance correlation; seed quality over the
    split when each class map is rebuilt from only its top-k channels;
    and, for ``sample_ids`` (default: the first four of the split) and
    ``class_k``, the top-k seed maps themselves with the retained
    channel sets. Relevance is measured from the data (channel
    activation IoU against the mask) unless the planted table shipped
    with a synthetic dataset is requested.
    """
    manifest = load_manifest(manifest_path)
    labels = load_labels(manifest.labels_path())
    if model.layer_offsets is None:
        raise ValueError("model carries no layer layout")
    layers = sorted(model.layer_offsets)
    data = load_eval_data(manifest, labels, split, layers)
    k_fg = len(labels.class_names)
    weights = model.cam_weights
    if not 0 <= class_k < k_fg:
        raise ValueError(f"class_k {class_k} out of range for {k_fg} classes")
    if sample_ids is None:
        sample_ids = data.sample_ids[:4]
    stack_of = {stack.sample_id: stack for stack in data.stacks}
    missing = [sid for sid in sample_ids if sid not in stack_of]
    if missing:
        raise KeyError(f"sample ids {missing} are not in split {split!r}")

    if relevance_source == "planted":
        rel_path = manifest.dataset_root / "relevance.npy"
        if not rel_path.exists():
            raise FileNotFoundError(f"planted relevance requested but {rel_path} does not exist")
        relevance = np.load(rel_path, allow_pickle=False)
        if relevance.shape != (k_fg, weights.shape[0]):
            raise ValueError(
                f"planted relevance shape {relevance.shape} does not match {(k_fg, weights.shape[0])}"
            )
    elif relevance_source == "empirical":
        relevance = empirical_relevance(data, model.layer_offsets, k_fg, threshold=iou_threshold)
    else:
        raise ValueError(f"relevance_source must be 'empirical' or 'planted', got {relevance_source!r}")

    groups = []
    for k in range(k_fg):
        report = weight_relevance_report(weights[:, k], relevance[k], n_groups=n_groups)
        groups.append(
            {
                "class_index": k,
                "class_name": labels.class_names[k],
                "group_sizes": report.group_sizes,
                "group_mean_relevance": report.group_mean_relevance,
                "group_positive_weights": report.group_positive_weights,
                "group_nonpositive_weights": report.group_nonpositive_weights,
                "pearson_r": report.pearson_r,
            }
        )

    d = weights.shape[0]
    ks = sorted({min(k, d) for k in topk})
    topk_rows = []
    for k in ks:
        pairs = []
        for stack, mask, present in zip(data.stacks, data.masks, data.present):
            maps = np.stack(
                [
                    generate_cam_topk(stack, weights, model.layer_offsets, c, k, target_hw=mask.shape)
                    for c in range(k_fg)
                ]
            )
            pairs.append((CamSeed(sample_id=stack.sample_id, maps=maps.astype(np.float32)), mask, present))
        report = evaluate_seeds(pairs, k_fg, thresholds, with_mpxap=False)
        topk_rows.append({"k": k, "best_threshold": report.best_threshold, "best_miou": report.best_miou})

    retained = {k: topk_channels(weights, class_k, k).tolist() for k in ks}
    topk_seeds = []
    for sid in sample_ids:
        stack = stack_of[sid]
        for k in ks:
            topk_seeds.append(
                {
                    "sample_id": sid,
                    "k": k,
                    "map": generate_cam_topk(stack, weights, model.layer_offsets, class_k, k),
                }
            )
    sample_seeds = [
        generate_cam(stack_of[sid], weights, model.layer_offsets, class_names=labels.class_names)
        for sid in sample_ids
    ]
    return {
        "split": split,
        "relevance_source": relevance_source,
        "iou_threshold": iou_threshold,
        "n_groups": n_groups,
        "class_k": class_k,
        "classes": groups,
        "topk": topk_rows,
        "relevance": relevance,
        "retained_channels": retained,
        "topk_seeds": topk_seeds,
        "sample_seeds": sample_seeds,
    }
