"""On-disk formats for features, masks, labels and dataset manifests.

Conventions used throughout the package:

* features: one ``<sample_id>.layer<j>.npy`` file per layer, C-order
  float32 arrays of shape (C, H, W);
* masks: single-channel 8-bit PNG or PGM where 0 is background,
  foreground class ``c`` is stored as pixel value ``c + 1`` and 255
  marks ignored pixels;
* labels: a CSV with header ``sample_id,<class>,...`` holding one
  multi-hot row per sample over the foreground classes only.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    DuplicateLayerError,
    DuplicateSampleError,
    EmptyLabelError,
    MissingLayerError,
    NonFiniteInputError,
    NotSingleChannelError,
    OutOfRangeError,
    ShapeMismatchError,
    UnsupportedDtypeError,
)

IGNORE_VALUE = 255


@dataclass
class FeatureStack:
    """Multi-layer feature tensors for one sample, keyed by layer index."""

    sample_id: str
    layers: dict[int, np.ndarray]

    def layer_indices(self) -> list[int]:
        return sorted(self.layers)


@dataclass
class LabelTable:
    """Image-level multi-hot labels over foreground classes."""

    class_names: list[str]
    sample_ids: list[str]
    matrix: np.ndarray  # (N, K_fg) float64 of 0/1

    def __post_init__(self):
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise DuplicateSampleError("label table contains duplicate sample ids")
        self._row = {sid: i for i, sid in enumerate(self.sample_ids)}

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def row(self, sample_id: str) -> np.ndarray:
        if sample_id not in self._row:
            raise KeyError(f"sample id {sample_id!r} not in label table")
        return self.matrix[self._row[sample_id]]

    def multi_hot(self, sample_ids: list[str]) -> np.ndarray:
        return np.stack([self.row(sid) for sid in sample_ids]).astype(np.float64)

    def present_classes(self, sample_id: str) -> np.ndarray:
        """Indices of foreground classes marked present for a sample."""
        return np.flatnonzero(self.row(sample_id) > 0)


@dataclass
class Manifest:
    """Dataset description: where files live and how splits partition ids."""

    dataset_root: Path
    class_names: list[str]
    layer_shapes: dict[int, tuple[int, int, int]]
    splits: dict[str, list[str]] = field(default_factory=dict)

    def split_ids(self, name: str) -> list[str]:
        if name not in self.splits:
            raise KeyError(f"manifest has no split named {name!r}")
        return self.splits[name]

    def features_dir(self) -> Path:
        return self.dataset_root / "features"

    def mask_path(self, sample_id: str) -> Path:
        return self.dataset_root / "masks" / f"{sample_id}.png"

    def labels_path(self) -> Path:
        return self.dataset_root / "labels.csv"


def _atomic_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def feature_path(features_dir: Path, sample_id: str, layer: int) -> Path:
    return Path(features_dir) / f"{sample_id}.layer{layer}.npy"


def load_features(features_dir: Path, sample_id: str, layers: list[int]) -> FeatureStack:
    """Load the selected layers of one sample's feature stack.

    Missing files raise MissingLayerError, repeated layer indices raise
    DuplicateLayerError, and each array must be a finite 3-D tensor of
    float, integer or boolean dtype (converted to float32).
    """
    if len(set(layers)) != len(layers):
        raise DuplicateLayerError(f"layer selection {list(layers)} repeats an index")
    out: dict[int, np.ndarray] = {}
    for layer in layers:
        path = feature_path(Path(features_dir), sample_id, layer)
        if not path.exists():
            raise MissingLayerError(f"no feature file for sample {sample_id!r} layer {layer} at {path}")
        arr = np.load(path, allow_pickle=False)
        out[layer] = _check_feature_array(arr, sample_id, layer)
    return FeatureStack(sample_id=sample_id, layers=out)


def _check_feature_array(arr: np.ndarray, sample_id: str, layer: int) -> np.ndarray:
    if arr.dtype.kind not in "fiub":
        raise UnsupportedDtypeError(
            f"feature array for sample {sample_id!r} layer {layer} has dtype {arr.dtype}, "
            "expected float, integer or bool"
        )
    arr = arr.astype(np.float32)
    if arr.ndim != 3:
        raise ShapeMismatchError(
            f"feature array for sample {sample_id!r} layer {layer} has shape {arr.shape}, expected (C, H, W)"
        )
    if not np.isfinite(arr).all():
        raise NonFiniteInputError(f"feature array for sample {sample_id!r} layer {layer} contains NaN or inf")
    return arr


def save_features(features_dir: Path, stack: FeatureStack) -> None:
    features_dir = Path(features_dir)
    features_dir.mkdir(parents=True, exist_ok=True)
    for layer, arr in stack.layers.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if arr.ndim != 3:
            raise ShapeMismatchError(f"layer {layer} of sample {stack.sample_id!r} is not 3-D")
        path = feature_path(features_dir, stack.sample_id, layer)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            np.save(fh, arr)
        os.replace(tmp, path)


def load_mask(path: Path, num_classes: int | None = None) -> np.ndarray:
    """Read a segmentation mask as a (H, W) uint8 array.

    Accepts single-channel PNG (modes L or P) and PGM. When
    ``num_classes`` is given, pixel values must lie in
    {0..num_classes} or equal 255.
    """
    with Image.open(path) as img:
        if img.mode not in ("L", "P"):
            raise NotSingleChannelError(f"mask {path} has mode {img.mode!r}, expected single-channel 8-bit")
        mask = np.asarray(img, dtype=np.uint8)
    if mask.ndim != 2:
        raise NotSingleChannelError(f"mask {path} decoded to shape {mask.shape}, expected (H, W)")
    if num_classes is not None:
        bad = (mask > num_classes) & (mask != IGNORE_VALUE)
        if bad.any():
            value = int(mask[bad][0])
            raise OutOfRangeError(
                f"mask {path} contains value {value}, outside 0..{num_classes} and ignore value {IGNORE_VALUE}"
            )
    return mask


def save_mask(path: Path, mask: np.ndarray) -> None:
    path = Path(path)
    mask = np.asarray(mask)
    if mask.dtype != np.uint8 or mask.ndim != 2:
        raise ShapeMismatchError(f"mask must be a (H, W) uint8 array, got {mask.dtype} {mask.shape}")
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(mask, mode="L")
    tmp = path.with_name(path.name + ".tmp")
    img.save(tmp, format="PNG")
    os.replace(tmp, path)


def load_labels(path: Path) -> LabelTable:
    """Parse a multi-hot label CSV into a LabelTable.

    Every row must mark at least one class present; entries must be 0 or 1.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "sample_id" or len(header) < 2:
            raise ValueError(f"label csv {path} must start with header 'sample_id,<class>,...'")
        class_names = header[1:]
        sample_ids: list[str] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"label csv {path} line {lineno} has {len(row)} fields, expected {len(header)}")
            values = []
            for cell in row[1:]:
                if cell not in ("0", "1"):
                    raise ValueError(f"label csv {path} line {lineno} has non-binary entry {cell!r}")
                values.append(float(cell))
            if not any(values):
                raise EmptyLabelError(f"sample {row[0]!r} has no foreground class marked present")
            sample_ids.append(row[0])
            rows.append(values)
    matrix = np.asarray(rows, dtype=np.float64) if rows else np.zeros((0, len(class_names)))
    return LabelTable(class_names=class_names, sample_ids=sample_ids, matrix=matrix)


def save_labels(path: Path, table: LabelTable) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["sample_id," + ",".join(table.class_names)]
    for sid, row in zip(table.sample_ids, table.matrix):
        lines.append(sid + "," + ",".join(str(int(v)) for v in row))
    _atomic_bytes(path, ("\n".join(lines) + "\n").encode())


def load_manifest(path: Path) -> Manifest:
    """Load a dataset manifest; dataset_root resolves relative to the file."""
    path = Path(path)
    with open(path) as fh:
        raw = json.load(fh)
    for key in ("dataset_root", "class_names", "layer_shapes", "splits"):
        if key not in raw:
            raise ValueError(f"manifest {path} is missing key {key!r}")
    root = Path(raw["dataset_root"])
    if not root.is_absolute():
        root = (path.parent / root).resolve()
    layer_shapes = {int(k): tuple(int(x) for x in v) for k, v in raw["layer_shapes"].items()}
    splits = {name: list(ids) for name, ids in raw["splits"].items()}
    seen: dict[str, str] = {}
    for name, ids in splits.items():
        if len(set(ids)) != len(ids):
            raise DuplicateSampleError(f"split {name!r} in manifest {path} repeats a sample id")
        for sid in ids:
            if sid in seen:
                raise DuplicateSampleError(
                    f"sample {sid!r} appears in both splits {seen[sid]!r} and {name!r} in manifest {path}"
                )
            seen[sid] = name
    return Manifest(
        dataset_root=root,
        class_names=list(raw["class_names"]),
        layer_shapes=layer_shapes,
        splits=splits,
    )


def save_manifest(path: Path, manifest: Manifest) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = {
        "dataset_root": str(manifest.dataset_root),
        "class_names": manifest.class_names,
        "layer_shapes": {str(k): list(v) for k, v in manifest.layer_shapes.items()},
        "splits": manifest.splits,
    }
    _atomic_bytes(path, (json.dumps(raw, indent=2, sort_keys=True) + "\n").encode())
