"""Class activation seed maps from per-channel weights.

A seed map for class k is the weighted sum of feature channels,
accumulated across the selected layers at a common resolution,
rectified once after the cross-layer sum and then scaled so each
class map peaks at 1. Everything is computed in float64 and stored
as float32.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateLayerError,
    MissingLayerError,
    NonFiniteInputError,
    OutOfRangeError,
    ShapeMismatchError,
)
from .resize import resize_bilinear
from .tensor_io import FeatureStack


@dataclass
class CamSeed:
    """Normalized per-class activation maps for one sample."""

    sample_id: str
    maps: np.ndarray  # (K, H, W) float32 in [0, 1]
    class_names: list[str] | None = None

    @property
    def num_classes(self) -> int:
        return self.maps.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.maps.shape[1], self.maps.shape[2]


def normalize_cam(maps: np.ndarray) -> np.ndarray:
    """Rectify and scale each class map to peak at 1.

    A map whose rectified maximum is 0 comes back all zeros instead of
    dividing by zero.
    """
    maps = np.maximum(np.asarray(maps, dtype=np.float64), 0.0)
    peaks = maps.reshape(maps.shape[0], -1).max(axis=1)
    scale = np.where(peaks > 0, peaks, 1.0)
    return maps / scale[:, None, None]


def _select_layers(
    stack: FeatureStack, layer_offsets: dict[int, tuple[int, int]], layers: list[int] | None
) -> list[int]:
    if layers is None:
        layers = sorted(layer_offsets)
    if not layers:
        raise ValueError("layer selection is empty")
    if len(set(layers)) != len(layers):
        raise DuplicateLayerError(f"layer selection {list(layers)} repeats an index")
    for layer in layers:
        if layer not in layer_offsets:
            raise KeyError(f"layer {layer} has no column range in the weight layout")
        if layer not in stack.layers:
            raise MissingLayerError(f"sample {stack.sample_id!r} has no layer {layer}")
    return sorted(layers)


def _target_shape(stack: FeatureStack, layers: list[int]) -> tuple[int, int]:
    """Finest resolution among the selected layers (largest pixel count)."""
    shapes = [stack.layers[j].shape[1:] for j in layers]
    return max(shapes, key=lambda hw: hw[0] * hw[1])


def generate_cam(
    stack: FeatureStack,
    weights: np.ndarray,
    layer_offsets: dict[int, tuple[int, int]],
    layers: list[int] | None = None,
    target_hw: tuple[int, int] | None = None,
    class_names: list[str] | None = None,
) -> CamSeed:
    """Build the per-class seed maps for one sample.

    ``weights`` is the (D, K) per-channel weight matrix laid out by
    ``layer_offsets``. Each selected layer contributes its weighted
    channel sum, upsampled to the finest selected resolution (or
    ``target_hw``); the contributions are summed, rectified once, and
    max-normalized per class.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2:
        raise ShapeMismatchError(f"weights must be (D, K), got shape {weights.shape}")
    layers = _select_layers(stack, layer_offsets, layers)
    target = tuple(target_hw) if target_hw is not None else _target_shape(stack, layers)

    acc = np.zeros((weights.shape[1],) + target, dtype=np.float64)
    for layer in layers:
        start, stop = layer_offsets[layer]
        fmap = np.asarray(stack.layers[layer], dtype=np.float64)
        if fmap.shape[0] != stop - start:
            raise ShapeMismatchError(
                f"layer {layer} of sample {stack.sample_id!r} has {fmap.shape[0]} channels, "
                f"weight layout expects {stop - start}"
            )
        w = weights[start:stop]  # (C_j, K)
        maps = (w.T @ fmap.reshape(fmap.shape[0], -1)).reshape(-1, *fmap.shape[1:])
        acc += resize_bilinear(maps, target)
    maps = normalize_cam(acc).astype(np.float32)
    return CamSeed(sample_id=stack.sample_id, maps=maps, class_names=class_names)


def topk_channels(weights: np.ndarray, class_k: int, k: int) -> np.ndarray:
    """Indices of the k largest signed weights for one class, descending.

    Ties break toward the lower channel index; k is clipped to the
    feature count.
    """
    col = np.asarray(weights, dtype=np.float64)[:, class_k]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    order = np.argsort(-col, kind="stable")
    return order[: min(k, col.shape[0])]


def generate_cam_topk(
    stack: FeatureStack,
    weights: np.ndarray,
    layer_offsets: dict[int, tuple[int, int]],
    class_k: int,
    k: int,
    layers: list[int] | None = None,
    target_hw: tuple[int, int] | None = None,
) -> np.ndarray:
    """Seed map for one class using only its top-k weighted channels.

    Channels outside the top-k are zeroed in a full-shape copy of the
    weight matrix and the map goes through the exact same pipeline as
    ``generate_cam``, so k == D reproduces the unrestricted map bit for
    bit.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if not 0 <= class_k < weights.shape[1]:
        raise ValueError(f"class index {class_k} out of range for {weights.shape[1]} classes")
    keep = topk_channels(weights, class_k, k)
    masked = np.zeros_like(weights)
    masked[keep, class_k] = weights[keep, class_k]
    seed = generate_cam(stack, masked, layer_offsets, layers=layers, target_hw=target_hw)
    return seed.maps[class_k]


def cam_to_mask(seed: CamSeed, present_classes: np.ndarray, threshold: float) -> np.ndarray:
    """Label each pixel from the seed maps of the classes present.

    A pixel takes the present class with the highest seed score (ties
    go to the lowest class index) when that score reaches the
    threshold, and background otherwise. Mask values follow the
    value = class + 1 convention.
    """
    present = np.unique(np.asarray(present_classes, dtype=np.intp))
    if present.size == 0:
        raise ValueError(f"sample {seed.sample_id!r}: present_classes is empty")
    if present.min() < 0 or present.max() >= seed.num_classes:
        raise ValueError(f"present classes {present.tolist()} out of range for {seed.num_classes} classes")
    sub = seed.maps[present].astype(np.float64)
    best = np.argmax(sub, axis=0)  # first max, so lowest class wins ties
    score = np.take_along_axis(sub, best[None], axis=0)[0]
    labels = (present[best] + 1).astype(np.uint8)
    return np.where(score >= threshold, labels, np.uint8(0))


def save_cam(path: Path, seed: CamSeed) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    maps = np.ascontiguousarray(seed.maps, dtype=np.float32)
    if maps.ndim != 3:
        raise ShapeMismatchError(f"seed maps must be (K, H, W), got shape {maps.shape}")
    if not np.isfinite(maps).all():
        raise NonFiniteInputError(f"seed maps for sample {seed.sample_id!r} contain NaN or inf")
    if maps.min() < 0.0 or maps.max() > 1.0:
        raise OutOfRangeError(
            f"seed maps for sample {seed.sample_id!r} fall outside [0, 1]: "
            f"range [{maps.min():g}, {maps.max():g}]"
        )
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.save(fh, maps)
    os.replace(tmp, path)


def load_cam(path: Path, sample_id: str, class_names: list[str] | None = None) -> CamSeed:
    maps = np.load(path, allow_pickle=False)
    if maps.ndim != 3:
        raise ShapeMismatchError(f"seed file {path} has shape {maps.shape}, expected (K, H, W)")
    return CamSeed(sample_id=sample_id, maps=maps.astype(np.float32), class_names=class_names)
