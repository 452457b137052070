"""Synthetic benchmark with known channel relevance, plus baselines.

Each sample is a mask of 1..max_classes_per_sample axis-aligned
rectangles and a multi-layer feature stack in which a contiguous block
of channels per class carries that class's mask indicator (scaled by a
per-layer strength) on top of Gaussian noise; all other channels are
pure noise. The ground-truth relevance table records exactly which
channel responds to which class and how strongly, which is what the
weight-reliability analyses are validated against.

Sample i is generated from ``default_rng(SeedSequence((seed, i)))``,
so any sample can be regenerated in isolation and the dataset is
identical no matter which samples are materialized in which order.

The module also hosts the outcome-driven reference point: a multi-label
logistic classifier trained by full-batch gradient descent whose weight
matrix plugs into the same seed generator.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DivergedError, EmptySubsetError, ShapeMismatchError
from .resize import resize_bilinear
from .tensor_io import (
    FeatureStack,
    LabelTable,
    Manifest,
    save_features,
    save_labels,
    save_manifest,
    save_mask,
)


@dataclass
class LayerSpec:
    """Index, shape and signal strength of one synthetic feature layer."""

    index: int
    channels: int
    height: int
    width: int
    strength: float = 1.0


@dataclass
class SynthConfig:
    """Parameters of the planted-relevance benchmark."""

    num_samples: int = 200
    num_classes: int = 4
    mask_hw: tuple[int, int] = (32, 32)
    layers: list[LayerSpec] = field(
        default_factory=lambda: [LayerSpec(3, 32, 16, 16, 1.0), LayerSpec(4, 32, 8, 8, 1.0)]
    )
    relevant_per_class: int = 2  # planted channels per class within each layer
    relevance_strength: float = 2.0
    noise_std: float = 0.5
    max_classes_per_sample: int = 2
    rect_min_frac: float = 0.3
    rect_max_frac: float = 0.6
    distractor_fraction: float = 0.0
    num_val: int = 0
    num_test: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not 1 <= self.max_classes_per_sample <= self.num_classes:
            raise ValueError("max_classes_per_sample must be in 1..num_classes")
        if not 0 < self.rect_min_frac <= self.rect_max_frac <= 1:
            raise ValueError("rectangle fractions must satisfy 0 < min <= max <= 1")
        if not 0 <= self.distractor_fraction <= 1:
            raise ValueError("distractor_fraction must be in [0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.num_val + self.num_test >= self.num_samples:
            raise ValueError("num_val + num_test must leave at least one training sample")
        if len({spec.index for spec in self.layers}) != len(self.layers):
            raise ValueError("layer indices must be distinct")
        # pooled columns are laid out in ascending layer order everywhere
        self.layers = sorted(self.layers, key=lambda spec: spec.index)
        for spec in self.layers:
            if self.num_classes * self.relevant_per_class > spec.channels:
                raise ValueError(
                    f"layer {spec.index} has {spec.channels} channels, too few for "
                    f"{self.num_classes} classes x {self.relevant_per_class} planted channels"
                )

    @property
    def layer_indices(self) -> list[int]:
        return [spec.index for spec in self.layers]

    @property
    def num_features(self) -> int:
        return sum(spec.channels for spec in self.layers)

    def layer_offsets(self) -> dict[int, tuple[int, int]]:
        offsets = {}
        pos = 0
        for idx, spec in zip(self.layer_indices, self.layers):
            offsets[idx] = (pos, pos + spec.channels)
            pos += spec.channels
        return offsets


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, index)))


def _paint_mask(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw the rectangles for one sample; later classes overwrite earlier."""
    h, w = cfg.mask_hw
    mask = np.zeros((h, w), dtype=np.uint8)
    n_rects = int(rng.integers(1, cfg.max_classes_per_sample + 1))
    classes = np.sort(rng.choice(cfg.num_classes, size=n_rects, replace=False))
    for c in classes:
        fh = rng.uniform(cfg.rect_min_frac, cfg.rect_max_frac)
        fw = rng.uniform(cfg.rect_min_frac, cfg.rect_max_frac)
        rh = max(1, int(round(fh * h)))
        rw = max(1, int(round(fw * w)))
        y0 = int(rng.integers(0, h - rh + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        mask[y0 : y0 + rh, x0 : x0 + rw] = c + 1
    return mask


def _paint_features(cfg: SynthConfig, rng: np.random.Generator, mask: np.ndarray) -> dict[int, np.ndarray]:
    """Noise everywhere, class indicators in the planted channel blocks."""
    layers: dict[int, np.ndarray] = {}
    r = cfg.relevant_per_class
    for idx, spec in zip(cfg.layer_indices, cfg.layers):
        arr = rng.normal(0.0, cfg.noise_std, size=(spec.channels, spec.height, spec.width))
        for k in range(cfg.num_classes):
            indicator = resize_bilinear((mask == k + 1).astype(np.float64), (spec.height, spec.width))
            arr[k * r : (k + 1) * r] += cfg.relevance_strength * spec.strength * indicator
        if cfg.distractor_fraction > 0:
            for c in range(cfg.num_classes * r, spec.channels):
                if rng.random() < cfg.distractor_fraction:
                    rh = max(1, int(round(rng.uniform(cfg.rect_min_frac, cfg.rect_max_frac) * spec.height)))
                    rw = max(1, int(round(rng.uniform(cfg.rect_min_frac, cfg.rect_max_frac) * spec.width)))
                    y0 = int(rng.integers(0, spec.height - rh + 1))
                    x0 = int(rng.integers(0, spec.width - rw + 1))
                    arr[c, y0 : y0 + rh, x0 : x0 + rw] += cfg.relevance_strength * spec.strength
        layers[idx] = arr.astype(np.float32)
    return layers


def relevance_table(cfg: SynthConfig) -> np.ndarray:
    """(K, D) planted signal amplitude per class and channel; 0 elsewhere."""
    table = np.zeros((cfg.num_classes, cfg.num_features), dtype=np.float64)
    offsets = cfg.layer_offsets()
    r = cfg.relevant_per_class
    for idx, spec in zip(cfg.layer_indices, cfg.layers):
        start, _stop = offsets[idx]
        for k in range(cfg.num_classes):
            table[k, start + k * r : start + (k + 1) * r] = cfg.relevance_strength * spec.strength
    return table


@dataclass
class SynthDataset:
    """Generated benchmark; feature stacks are rebuilt on demand."""

    config: SynthConfig
    seed: int
    sample_ids: list[str]
    masks: list[np.ndarray]
    labels: LabelTable
    relevance: np.ndarray  # (K, D)
    splits: dict[str, list[str]]

    def index_of(self, sample_id: str) -> int:
        return self.sample_ids.index(sample_id)

    def features(self, index: int) -> FeatureStack:
        """Regenerate sample ``index``'s stack from its private stream."""
        rng = _sample_rng(self.seed, index)
        mask = _paint_mask(self.config, rng)
        layers = _paint_features(self.config, rng, mask)
        return FeatureStack(sample_id=self.sample_ids[index], layers=layers)

    def gap_matrix(self, indices: list[int] | None = None) -> np.ndarray:
        """(n, D) pooled features for the given samples (default: all)."""
        from .bls import gap

        if indices is None:
            indices = list(range(len(self.sample_ids)))
        rows = [gap(self.features(i), self.config.layer_indices)[0] for i in indices]
        return np.stack(rows)


def synth_dataset(cfg: SynthConfig, seed: int) -> SynthDataset:
    """Generate masks, labels and the relevance table for every sample.

    Labels are read off the final mask, so a class whose rectangle was
    fully overpainted is not marked present. Samples are split
    train / val / test in id order with the val and test blocks at the
    end.
    """
    sample_ids = [f"s{i:05d}" for i in range(cfg.num_samples)]
    masks = []
    rows = np.zeros((cfg.num_samples, cfg.num_classes), dtype=np.float64)
    for i in range(cfg.num_samples):
        rng = _sample_rng(seed, i)
        mask = _paint_mask(cfg, rng)
        masks.append(mask)
        for k in range(cfg.num_classes):
            if (mask == k + 1).any():
                rows[i, k] = 1.0
    class_names = [f"class{k}" for k in range(cfg.num_classes)]
    labels = LabelTable(class_names=class_names, sample_ids=sample_ids, matrix=rows)
    n_train = cfg.num_samples - cfg.num_val - cfg.num_test
    splits = {
        "train": sample_ids[:n_train],
        "val": sample_ids[n_train : n_train + cfg.num_val],
        "test": sample_ids[n_train + cfg.num_val :],
    }
    return SynthDataset(
        config=cfg,
        seed=seed,
        sample_ids=sample_ids,
        masks=masks,
        labels=labels,
        relevance=relevance_table(cfg),
        splits=splits,
    )


def write_dataset(dataset: SynthDataset, out_root: Path) -> Path:
    """Materialize the dataset layout and return the manifest path.

    Layout: features/<id>.layer<j>.npy, masks/<id>.png, labels.csv,
    relevance.npy, synth.json and manifest.json under ``out_root``.
    """
    out_root = Path(out_root)
    cfg = dataset.config
    features_dir = out_root / "features"
    for i, sid in enumerate(dataset.sample_ids):
        save_features(features_dir, dataset.features(i))
        save_mask(out_root / "masks" / f"{sid}.png", dataset.masks[i])
    save_labels(out_root / "labels.csv", dataset.labels)

    rel_path = out_root / "relevance.npy"
    tmp = rel_path.with_name(rel_path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.save(fh, dataset.relevance)
    os.replace(tmp, rel_path)

    meta = {
        "seed": dataset.seed,
        "num_samples": cfg.num_samples,
        "num_classes": cfg.num_classes,
        "mask_hw": list(cfg.mask_hw),
        "layers": [
            {
                "index": s.index,
                "channels": s.channels,
                "height": s.height,
                "width": s.width,
                "strength": s.strength,
            }
            for s in cfg.layers
        ],
        "relevant_per_class": cfg.relevant_per_class,
        "relevance_strength": cfg.relevance_strength,
        "noise_std": cfg.noise_std,
        "max_classes_per_sample": cfg.max_classes_per_sample,
        "rect_min_frac": cfg.rect_min_frac,
        "rect_max_frac": cfg.rect_max_frac,
        "distractor_fraction": cfg.distractor_fraction,
    }
    synth_path = out_root / "synth.json"
    tmp = synth_path.with_name(synth_path.name + ".tmp")
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, synth_path)

    manifest = Manifest(
        dataset_root=out_root,
        class_names=dataset.labels.class_names,
        layer_shapes={
            idx: (s.channels, s.height, s.width) for idx, s in zip(cfg.layer_indices, cfg.layers)
        },
        splits=dataset.splits,
    )
    manifest_path = out_root / "manifest.json"
    # store the root relative to the manifest so the tree can be moved
    rel_manifest = Manifest(
        dataset_root=Path("."),
        class_names=manifest.class_names,
        layer_shapes=manifest.layer_shapes,
        splits=manifest.splits,
    )
    save_manifest(manifest_path, rel_manifest)
    return manifest_path


def subsample_split(sample_ids: list[str], proportion: float, seed: int) -> list[str]:
    """Pick round(proportion * N) ids uniformly without replacement.

    The draw depends only on (sample_ids, proportion, seed). A
    proportion that rounds to zero samples raises EmptySubsetError.
    """
    if not 0 < proportion <= 1:
        raise ValueError(f"proportion must be in (0, 1], got {proportion}")
    n = len(sample_ids)
    size = int(round(proportion * n))
    if size == 0:
        raise EmptySubsetError(f"proportion {proportion} of {n} samples rounds to zero")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5B5)))
    picked = rng.choice(n, size=size, replace=False)
    return [sample_ids[i] for i in picked]


@dataclass
class GDClassifier:
    """Multi-label logistic classifier trained by full-batch descent."""

    weights: np.ndarray  # (D, K)
    bias: np.ndarray  # (K,)
    losses: list[tuple[int, float]]
    lr: float
    epochs: int
    seed: int
    layer_offsets: dict[int, tuple[int, int]] | None = None
    class_names: list[str] | None = None
    method: str = "gd-baseline"

    @property
    def cam_weights(self) -> np.ndarray:
        """(D, K) weights consumed by the seed generator."""
        return self.weights

    def predict(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64) @ self.weights + self.bias


def _bce_loss(logits: np.ndarray, Y: np.ndarray) -> float:
    # softplus(z) - y z == -[y log sigmoid(z) + (1 - y) log(1 - sigmoid(z))]
    return float(np.mean(np.logaddexp(0.0, logits) - Y * logits))


def fit_gd_classifier(
    Z: np.ndarray,
    Y: np.ndarray,
    lr: float = 0.5,
    epochs: int = 5,
    seed: int = 0,
    init_std: float = 0.01,
    layer_offsets: dict[int, tuple[int, int]] | None = None,
    class_names: list[str] | None = None,
) -> GDClassifier:
    """Train the outcome-driven baseline with sigmoid cross-entropy.

    The loss is recorded before each update, one entry per epoch. A
    non-finite loss raises DivergedError with the epoch it appeared in.
    lr == 0 is allowed and leaves the random init untouched.
    """
    Z = np.asarray(Z, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Z.ndim != 2 or Y.ndim != 2 or Z.shape[0] != Y.shape[0]:
        raise ShapeMismatchError(f"incompatible shapes Z {Z.shape}, Y {Y.shape}")
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    n, d = Z.shape
    k = Y.shape[1]
    rng = np.random.default_rng(seed)
    weights = rng.normal(0.0, init_std, size=(d, k))
    bias = np.zeros(k, dtype=np.float64)
    losses: list[tuple[int, float]] = []
    for epoch in range(epochs):
        logits = Z @ weights + bias
        loss = _bce_loss(logits, Y)
        if not math.isfinite(loss):
            raise DivergedError(epoch)
        losses.append((epoch, loss))
        probs = 1.0 / (1.0 + np.exp(-logits))
        grad = probs - Y
        weights = weights - lr * (Z.T @ grad) / n
        bias = bias - lr * grad.mean(axis=0)
    return GDClassifier(
        weights=weights,
        bias=bias,
        losses=losses,
        lr=float(lr),
        epochs=int(epochs),
        seed=int(seed),
        layer_offsets=layer_offsets,
        class_names=list(class_names) if class_names is not None else None,
    )


def save_gd_classifier(model_dir: Path, model: GDClassifier) -> None:
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    for name in ("weights", "bias"):
        path = model_dir / f"{name}.npy"
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            np.save(fh, np.asarray(getattr(model, name), dtype=np.float64))
        os.replace(tmp, path)
    meta = {
        "method": model.method,
        "lr": model.lr,
        "epochs": model.epochs,
        "seed": model.seed,
        "losses": [[e, l] for e, l in model.losses],
        "layer_offsets": (
            {str(k): list(v) for k, v in model.layer_offsets.items()} if model.layer_offsets is not None else None
        ),
        "class_names": model.class_names,
    }
    path = model_dir / "model.json"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def load_gd_classifier(model_dir: Path) -> GDClassifier:
    model_dir = Path(model_dir)
    weights = np.load(model_dir / "weights.npy", allow_pickle=False)
    bias = np.load(model_dir / "bias.npy", allow_pickle=False)
    with open(model_dir / "model.json") as fh:
        meta = json.load(fh)
    offsets = meta.get("layer_offsets")
    return GDClassifier(
        weights=weights,
        bias=bias,
        losses=[(int(e), float(l)) for e, l in meta["losses"]],
        lr=float(meta["lr"]),
        epochs=int(meta["epochs"]),
        seed=int(meta["seed"]),
        layer_offsets=({int(k): (int(v[0]), int(v[1])) for k, v in offsets.items()} if offsets else None),
        class_names=meta.get("class_names"),
    )
