"""Broad learning system over pooled multi-layer features.

The fit squeezes each feature layer to a per-channel spatial mean,
concatenates the layers into a broad matrix Z, and runs two ridge
regressions: one from Z to the image-level labels to seed the enhance
mapping, and one from [Z | H] back to the labels. Collapsing the
enhance block through its seeding matrix yields a single weight per
feature channel per class,

    Y_hat = Z @ W_broadcam + sigma,

which is what the seed generator consumes. No randomness is involved
anywhere, so a fit is a pure function of (Z, Y, hyperparameters).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .errors import DuplicateLayerError, NonFiniteInputError, ShapeMismatchError, SingularSystemError
from .tensor_io import FeatureStack, load_features

ACTIVATIONS = ("identity", "scaled_tanh")
RIDGE_FORMS = ("auto", "primal", "dual")


@dataclass
class BroadFeatureMatrix:
    """Pooled features for a batch: one row per sample, layers side by side."""

    Z: np.ndarray  # (N, D) float64
    layer_offsets: dict[int, tuple[int, int]]
    sample_ids: list[str]

    @property
    def num_features(self) -> int:
        return self.Z.shape[1]

    def layer_slice(self, layer: int) -> slice:
        start, stop = self.layer_offsets[layer]
        return slice(start, stop)


def gap(stack: FeatureStack, layers: list[int]) -> tuple[np.ndarray, dict[int, tuple[int, int]]]:
    """Concatenate per-channel spatial means of the selected layers.

    Returns the pooled vector (D,) and the half-open column range each
    layer occupies inside it. Layers are laid out in ascending index
    order regardless of the order requested.
    """
    if len(set(layers)) != len(layers):
        raise DuplicateLayerError(f"layer selection {list(layers)} repeats an index")
    offsets: dict[int, tuple[int, int]] = {}
    parts = []
    pos = 0
    for layer in sorted(layers):
        if layer not in stack.layers:
            raise KeyError(f"sample {stack.sample_id!r} has no layer {layer}")
        arr = np.asarray(stack.layers[layer], dtype=np.float64)
        vec = arr.mean(axis=(1, 2))
        offsets[layer] = (pos, pos + vec.shape[0])
        pos += vec.shape[0]
        parts.append(vec)
    return np.concatenate(parts), offsets


def build_broad_matrix(features_dir: Path, sample_ids: list[str], layers: list[int]) -> BroadFeatureMatrix:
    """Load and pool the selected layers for every sample into Z."""
    rows = []
    offsets: dict[int, tuple[int, int]] | None = None
    for sid in sample_ids:
        stack = load_features(features_dir, sid, layers)
        vec, off = gap(stack, layers)
        if offsets is None:
            offsets = off
        elif off != offsets:
            raise ShapeMismatchError(f"sample {sid!r} has channel counts inconsistent with the batch")
        rows.append(vec)
    if offsets is None:
        raise ValueError("sample_ids is empty")
    return BroadFeatureMatrix(Z=np.stack(rows), layer_offsets=offsets, sample_ids=list(sample_ids))


def _check_system(A: np.ndarray, Y: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
    A = np.asarray(A, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if A.ndim != 2 or Y.ndim != 2:
        raise ShapeMismatchError(f"ridge expects 2-D A and Y, got {A.shape} and {Y.shape}")
    if A.shape[0] != Y.shape[0]:
        raise ShapeMismatchError(f"A has {A.shape[0]} rows but Y has {Y.shape[0]}")
    if not np.isfinite(A).all() or not np.isfinite(Y).all():
        raise NonFiniteInputError("ridge inputs contain NaN or inf")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return A, Y


def ridge_solve(A: np.ndarray, Y: np.ndarray, lam: float, form: str = "auto") -> np.ndarray:
    """Solve min_W ||A W - Y||^2 + lam ||W||^2 for the (D, K) minimizer.

    ``form`` picks between the D-sized primal normal equations and the
    N-sized dual system W = A.T (lam I + A A.T)^{-1} Y; ``auto`` takes
    the dual when the batch is smaller than the feature count and lam
    is positive. With lam == 0 the primal Gram matrix must be
    nonsingular, otherwise SingularSystemError is raised.
    """
    A, Y = _check_system(A, Y, lam)
    if form not in RIDGE_FORMS:
        raise ValueError(f"form must be one of {RIDGE_FORMS}, got {form!r}")
    n, d = A.shape
    if form == "dual" and lam == 0:
        raise ValueError("dual form requires lambda > 0")
    if form == "auto":
        form = "dual" if (n < d and lam > 0) else "primal"

    if form == "dual":
        gram = A @ A.T
        gram[np.diag_indices_from(gram)] += lam
        return A.T @ _solve_spd(gram, Y, lam)

    gram = A.T @ A
    gram[np.diag_indices_from(gram)] += lam
    return _solve_spd(gram, A.T @ Y, lam)


def _solve_spd(M: np.ndarray, B: np.ndarray, lam: float) -> np.ndarray:
    """Solve M X = B for symmetric positive (semi)definite M.

    Cholesky first; if the factorization fails with lam == 0 the system
    is genuinely singular, with lam > 0 the failure is numeric and an
    eigendecomposition handles it.
    """
    try:
        c, low = linalg.cho_factor(M, check_finite=False)
        return linalg.cho_solve((c, low), B, check_finite=False)
    except linalg.LinAlgError:
        if lam == 0:
            raise SingularSystemError(
                "normal matrix is singular with lambda == 0; pass lambda > 0 or drop dependent columns"
            ) from None
        w, V = linalg.eigh(M, check_finite=False)
        w = np.maximum(w, np.finfo(np.float64).tiny)
        return V @ ((V.T @ B) / w[:, None])


def theta_from_init(W_init: np.ndarray, enhance_nodes: int) -> np.ndarray:
    """Seed the enhance mapping from the first-stage ridge weights.

    With as many enhance nodes as classes the seeding is W_init itself.
    Otherwise node e takes class column e mod K, renormalized to unit
    length; columns with zero norm stay zero.
    """
    d, k = W_init.shape
    if enhance_nodes == k:
        return W_init.copy()
    theta = np.empty((d, enhance_nodes), dtype=np.float64)
    for e in range(enhance_nodes):
        col = W_init[:, e % k]
        norm = np.linalg.norm(col)
        theta[:, e] = col / norm if norm > 0 else 0.0
    return theta


def enhance_map(Z: np.ndarray, theta: np.ndarray, beta: np.ndarray, activation: str = "identity") -> np.ndarray:
    """Enhance block H = f(Z @ theta + beta).

    ``scaled_tanh`` squashes through tanh(x / s) * s with s the largest
    column norm of the pre-activation, keeping the block on the same
    scale as Z while bounding outliers; an all-zero pre-activation is
    returned unchanged.
    """
    if activation not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
    pre = np.asarray(Z, dtype=np.float64) @ theta + beta
    if activation == "identity":
        return pre
    scale = float(np.linalg.norm(pre, axis=0).max()) if pre.size else 0.0
    if scale == 0.0:
        return pre
    return np.tanh(pre / scale) * scale


@dataclass
class BLSModel:
    """Fitted broad learning system with collapsed per-channel weights."""

    theta_H: np.ndarray  # (D, E)
    beta_H: np.ndarray  # (E,)
    W_Z: np.ndarray  # (D, K)
    W_H: np.ndarray  # (E, K)
    W_broadcam: np.ndarray  # (D, K)
    sigma: np.ndarray  # (K,)
    lam: float
    enhance_nodes: int
    activation: str
    layer_offsets: dict[int, tuple[int, int]] | None = None
    class_names: list[str] | None = None
    method: str = "broadcam"

    @property
    def cam_weights(self) -> np.ndarray:
        """(D, K) per-channel weights consumed by the seed generator."""
        return self.W_broadcam

    @property
    def num_features(self) -> int:
        return self.W_broadcam.shape[0]

    @property
    def num_classes(self) -> int:
        return self.W_broadcam.shape[1]

    def predict(self, Z: np.ndarray) -> np.ndarray:
        """Scores through the collapsed weights: Z @ W_broadcam + sigma."""
        Z = np.asarray(Z, dtype=np.float64)
        return Z @ self.W_broadcam + self.sigma

    def predict_expanded(self, Z: np.ndarray) -> np.ndarray:
        """Scores through the explicit [Z | H] stack, for cross-checking."""
        Z = np.asarray(Z, dtype=np.float64)
        H = enhance_map(Z, self.theta_H, self.beta_H, self.activation)
        return Z @ self.W_Z + H @ self.W_H


def fit_bls(
    Z: BroadFeatureMatrix | np.ndarray,
    Y: np.ndarray,
    lam: float = 1.0,
    enhance_nodes: int | None = None,
    activation: str = "identity",
    theta_h: np.ndarray | None = None,
    form: str = "auto",
    class_names: list[str] | None = None,
) -> BLSModel:
    """Fit the two-stage broad model and collapse it to CAM weights.

    ``enhance_nodes`` defaults to the class count. ``theta_h`` overrides
    the seeding of the enhance mapping (shape (D, enhance_nodes)); the
    default seeds it from the first ridge stage.
    """
    offsets = None
    if isinstance(Z, BroadFeatureMatrix):
        offsets = Z.layer_offsets
        Z = Z.Z
    Z, Y = _check_system(Z, Y, lam)
    d = Z.shape[1]
    k = Y.shape[1]
    if k < 1:
        raise ShapeMismatchError("Y must have at least one class column")
    if enhance_nodes is None:
        enhance_nodes = k
    if enhance_nodes < 1:
        raise ValueError(f"enhance_nodes must be >= 1, got {enhance_nodes}")

    if theta_h is not None:
        theta = np.asarray(theta_h, dtype=np.float64)
        if theta.shape != (d, enhance_nodes):
            raise ShapeMismatchError(f"theta_h has shape {theta.shape}, expected {(d, enhance_nodes)}")
    else:
        W_init = ridge_solve(Z, Y, lam, form=form)
        theta = theta_from_init(W_init, enhance_nodes)
    beta = np.zeros(enhance_nodes, dtype=np.float64)

    H = enhance_map(Z, theta, beta, activation)
    A = np.hstack([Z, H])
    W_bls = ridge_solve(A, Y, lam, form=form)
    W_Z, W_H = W_bls[:d], W_bls[d:]
    return BLSModel(
        theta_H=theta,
        beta_H=beta,
        W_Z=W_Z,
        W_H=W_H,
        W_broadcam=W_Z + theta @ W_H,
        sigma=beta @ W_H,
        lam=float(lam),
        enhance_nodes=int(enhance_nodes),
        activation=activation,
        layer_offsets=offsets,
        class_names=list(class_names) if class_names is not None else None,
    )


def save_broad_matrix(out_dir: Path, bm: BroadFeatureMatrix) -> None:
    """Write Z plus a sidecar recording sample order and layer layout."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "Z.npy"
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.save(fh, np.asarray(bm.Z, dtype=np.float64))
    os.replace(tmp, path)
    meta = {
        "sample_ids": bm.sample_ids,
        "layer_offsets": {str(k): list(v) for k, v in bm.layer_offsets.items()},
    }
    path = out_dir / "broad_matrix.json"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def load_broad_matrix(in_dir: Path) -> BroadFeatureMatrix:
    in_dir = Path(in_dir)
    Z = np.load(in_dir / "Z.npy", allow_pickle=False)
    with open(in_dir / "broad_matrix.json") as fh:
        meta = json.load(fh)
    offsets = {int(k): (int(v[0]), int(v[1])) for k, v in meta["layer_offsets"].items()}
    return BroadFeatureMatrix(Z=Z, layer_offsets=offsets, sample_ids=list(meta["sample_ids"]))


_MODEL_ARRAYS = ("theta_H", "beta_H", "W_Z", "W_H", "W_broadcam", "sigma")


def save_model(model_dir: Path, model: BLSModel) -> None:
    """Write a model as a directory of .npy arrays plus a json sidecar."""
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    for name in _MODEL_ARRAYS:
        path = model_dir / f"{name}.npy"
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            np.save(fh, np.asarray(getattr(model, name), dtype=np.float64))
        os.replace(tmp, path)
    meta = {
        "lambda": model.lam,
        "enhance_nodes": model.enhance_nodes,
        "activation": model.activation,
        "layer_offsets": (
            {str(k): list(v) for k, v in model.layer_offsets.items()} if model.layer_offsets is not None else None
        ),
        "class_names": model.class_names,
        "method": model.method,
    }
    path = model_dir / "model.json"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def load_model(model_dir: Path) -> BLSModel:
    model_dir = Path(model_dir)
    arrays = {}
    for name in _MODEL_ARRAYS:
        path = model_dir / f"{name}.npy"
        if not path.exists():
            raise FileNotFoundError(f"model directory {model_dir} is missing {name}.npy")
        arrays[name] = np.load(path, allow_pickle=False)
    with open(model_dir / "model.json") as fh:
        meta = json.load(fh)
    offsets = meta.get("layer_offsets")
    return BLSModel(
        **arrays,
        lam=float(meta["lambda"]),
        enhance_nodes=int(meta["enhance_nodes"]),
        activation=meta["activation"],
        layer_offsets=({int(k): (int(v[0]), int(v[1])) for k, v in offsets.items()} if offsets else None),
        class_names=meta.get("class_names"),
        method=meta.get("method", "broadcam"),
    )
