"""Corner-aligned bilinear resampling on the trailing two axes.

All spatial rescaling in the package funnels through this module so that
seed maps, relevance maps and synthetic indicators agree bit-for-bit on
how coordinates map between resolutions.
"""

from __future__ import annotations

import numpy as np


def _grid(n_in: int, n_out: int) -> np.ndarray:
    """Source coordinates for each output index, corner-aligned.

    Output index 0 lands on source 0 and index n_out-1 on source n_in-1;
    a singleton on either side collapses every coordinate to 0.
    """
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out, dtype=np.float64)
    return np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))


def resize_bilinear(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Resize the trailing two axes of ``arr`` to ``out_hw``.

    Returns float64. A same-size call returns an exact copy so resizing
    is the identity whenever no resampling is needed.
    """
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim < 2:
        raise ValueError(f"need at least 2 dimensions to resize, got shape {arr.shape}")
    h, w = arr.shape[-2:]
    oh, ow = int(out_hw[0]), int(out_hw[1])
    if oh < 1 or ow < 1:
        raise ValueError(f"output size must be positive, got {(oh, ow)}")
    if (oh, ow) == (h, w):
        return arr.copy()

    ys = _grid(h, oh)
    xs = _grid(w, ow)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]

    a = arr[..., y0[:, None], x0[None, :]]
    b = arr[..., y0[:, None], x1[None, :]]
    c = arr[..., y1[:, None], x0[None, :]]
    d = arr[..., y1[:, None], x1[None, :]]
    return a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx + c * wy * (1 - wx) + d * wy * wx
