"""Dense kernels shared by every other module.

Tensors are plain ``numpy.ndarray`` objects. Image-like tensors are laid out
``(height, width, channels)``; a cell ``(i, j)`` covers the half-open pixel
square ``[j, j+1) x [i, i+1)`` and its value sits at the cell center.

Matrix products go through ``numpy.einsum`` without path optimisation, which
keeps them out of BLAS: one accumulation loop per output element, identical
results regardless of the BLAS thread pool.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from oadp.errors import DegenerateBoxError, DimensionError, EmptyAttentionRowError


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b``; leading axes broadcast like ``numpy.matmul``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return np.einsum("...ik,...kj->...ij", a, b, optimize=False)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    out = matmul(x, weight)
    if bias is not None:
        out = out + bias
    return out


def masked_softmax(scores: np.ndarray, allow: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis, restricted to allowed entries.

    Disallowed entries behave as an additive -inf: their probability is
    exactly zero. ``allow`` broadcasts against ``scores``.
    """
    scores = np.asarray(scores, dtype=float)
    allow = np.broadcast_to(np.asarray(allow, dtype=bool), scores.shape)
    if not allow.any(axis=-1).all():
        raise EmptyAttentionRowError("empty attention row: every entry of some row is masked")
    masked = np.where(allow, scores, -np.inf)
    peak = masked.max(axis=-1, keepdims=True)
    ex = np.where(allow, np.exp(masked - peak), 0.0)
    return ex / ex.sum(axis=-1, keepdims=True)


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=float)
    return masked_softmax(logits, np.ones(logits.shape, dtype=bool))


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < 1:
        raise DimensionError("layer_norm needs a non-empty last axis")
    if np.shape(gain) != x.shape[-1:] or np.shape(bias) != x.shape[-1:]:
        raise DimensionError(f"gain/bias must have shape {x.shape[-1:]}")
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain + bias


def gap(f: np.ndarray) -> np.ndarray:
    """Global average pooling of an ``h x w x c`` map to a length-``c`` vector."""
    f = np.asarray(f, dtype=float)
    if f.ndim != 3 or f.shape[0] < 1 or f.shape[1] < 1:
        raise DimensionError(f"gap expects h x w x c with h, w >= 1, got {f.shape}")
    return f.mean(axis=(0, 1))


def _bilinear_sample(f: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``f`` at continuous coordinates (pixel ``i`` spans ``[i, i + 1)``).

    Samples inside the map's extent ``[0, h] x [0, w]`` interpolate between
    the nearest pixel centres, clamped at the border; samples outside it read 0.
    """
    h, w = f.shape[:2]
    inside = (ys >= 0.0) & (ys <= h) & (xs >= 0.0) & (xs <= w)
    yi = np.clip(ys - 0.5, 0.0, h - 1)
    xi = np.clip(xs - 0.5, 0.0, w - 1)
    y0 = np.floor(yi).astype(int)
    x0 = np.floor(xi).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (yi - y0)[..., None]
    wx = (xi - x0)[..., None]
    top = f[y0, x0] * (1.0 - wx) + f[y0, x1] * wx
    bottom = f[y1, x0] * (1.0 - wx) + f[y1, x1] * wx
    return np.where(inside[..., None], top * (1.0 - wy) + bottom * wy, 0.0)


def roi_align(
    f: np.ndarray,
    box: Sequence[float],
    out: int,
    samples_per_bin: int = 2,
) -> np.ndarray:
    """RoI Align of ``box`` (feature coordinates, x1 y1 x2 y2) into ``out x out`` bins.

    Every bin averages ``samples_per_bin ** 2`` bilinear samples taken at the
    centers of an even subdivision of the bin.
    """
    f = np.asarray(f, dtype=float)
    if f.ndim != 3:
        raise DimensionError(f"roi_align expects h x w x c, got {f.shape}")
    x1, y1, x2, y2 = (float(v) for v in box)
    if not (x2 > x1 and y2 > y1):
        raise DegenerateBoxError(f"degenerate box {(x1, y1, x2, y2)}")
    if out < 1 or samples_per_bin < 1:
        raise DimensionError("out and samples_per_bin must be >= 1")
    n = samples_per_bin
    offsets = (np.arange(out)[:, None] + (np.arange(n)[None, :] + 0.5) / n).ravel()
    ys = y1 + offsets * ((y2 - y1) / out)
    xs = x1 + offsets * ((x2 - x1) / out)
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    samples = _bilinear_sample(f, grid_y, grid_x)
    c = f.shape[2]
    return samples.reshape(out, n, out, n, c).mean(axis=(1, 3))


def crop_and_resize(img: np.ndarray, box: Sequence[float], out_h: int, out_w: int) -> np.ndarray:
    """Resample the region ``box`` of ``img`` onto an ``out_h x out_w`` grid.

    Half-pixel (align-corners false) convention with edge clamping. The box
    may have fractional coordinates.
    """
    img = np.asarray(img, dtype=float)
    if img.ndim != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise DimensionError(f"expected h x w x c image, got {img.shape}")
    if out_h < 1 or out_w < 1:
        raise DimensionError("output size must be positive")
    x1, y1, x2, y2 = (float(v) for v in box)
    if not (x2 > x1 and y2 > y1):
        raise DegenerateBoxError(f"degenerate crop {(x1, y1, x2, y2)}")
    h, w = img.shape[:2]
    ys = y1 + (np.arange(out_h) + 0.5) * (y2 - y1) / out_h - 0.5
    xs = x1 + (np.arange(out_w) + 0.5) * (x2 - x1) / out_w - 0.5
    ys = np.clip(ys, 0.0, h - 1)
    xs = np.clip(xs, 0.0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1i = np.minimum(y0 + 1, h - 1)
    x1i = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1.0 - wx) + img[y0][:, x1i] * wx
    bottom = img[y1i][:, x0] * (1.0 - wx) + img[y1i][:, x1i] * wx
    return top * (1.0 - wy) + bottom * wy


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim != 3:
        raise DimensionError(f"expected h x w x c image, got {img.shape}")
    h, w = img.shape[:2]
    return crop_and_resize(img, (0.0, 0.0, float(w), float(h)), out_h, out_w)


def l1_mean(a: np.ndarray, b: np.ndarray, reduction: str = "mean") -> float:
    """L1 distance between two aligned embedding sets.

    ``reduction="mean"`` averages over pairs and coordinates; ``"sum"`` adds
    everything up.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise DimensionError(f"embedding sets differ in shape: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise DimensionError("empty embedding set")
    diff = np.abs(a - b)
    if reduction == "mean":
        return float(diff.mean())
    if reduction == "sum":
        return float(diff.sum())
    raise ValueError(f"unknown reduction {reduction!r}")
