"""Boxes, proposal squaring, block partition and attention masks.

Boxes are half-open ``[x1, x2) x [y1, y2)`` in pixel coordinates. Patch
grids are enumerated row-major, matching the tokenizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from oadp.errors import DegenerateBoxError, EmptyMaskError, PartitionError

# Intersections thinner than this fraction of a patch side count as touching.
OVERLAP_TOL = 1e-9


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise DegenerateBoxError(f"non-finite box coordinate in {self.as_list()}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DegenerateBoxError(f"degenerate box {self.as_list()}")

    def __iter__(self) -> Iterator[float]:
        return iter((self.x1, self.y1, self.x2, self.y2))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def as_list(self) -> list[float]:
        return [float(self.x1), float(self.y1), float(self.x2), float(self.y2)]

    @classmethod
    def from_list(cls, xyxy) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in xyxy)
        return cls(x1, y1, x2, y2)


@dataclass(frozen=True)
class Proposal:
    box: Box
    objectness: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.objectness <= 1.0:
            raise ValueError(f"objectness must lie in [0, 1], got {self.objectness}")


@dataclass(frozen=True)
class ImageSize:
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")

    @classmethod
    def of(cls, image: np.ndarray) -> "ImageSize":
        return cls(width=int(image.shape[1]), height=int(image.shape[0]))


def intersection_area(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def _fit_interval(lo: float, side: float, limit: float) -> tuple[float, float]:
    """Translate ``[lo, lo + side)`` minimally so it lies in ``[0, limit]``."""
    if lo < 0.0:
        return 0.0, side
    if lo + side > limit:
        return limit - side, limit
    return lo, lo + side


def square_at_center(p: Box, side: float, img: ImageSize) -> Box:
    """Square of ``side`` centred on ``p``, shrunk to the short image edge
    if needed and translated per axis to lie inside the image."""
    side = min(side, float(min(img.width, img.height)))
    cx, cy = p.center
    x1, x2 = _fit_interval(cx - side / 2.0, side, float(img.width))
    y1, y2 = _fit_interval(cy - side / 2.0, side, float(img.height))
    return Box(x1, y1, x2, y2)


def transform_proposal(p: Box, r: float, img: ImageSize) -> Box:
    """Adaptive square of side ``sqrt(r * p_h * p_w)`` around the proposal."""
    if r <= 0:
        raise ValueError(f"scale ratio must be positive, got {r}")
    return square_at_center(p, math.sqrt(r * p.height * p.width), img)


def min_bounding_square(p: Box, img: ImageSize) -> Box:
    return square_at_center(p, max(p.width, p.height), img)


def fixed_square(p: Box, side: float, img: ImageSize) -> Box:
    return square_at_center(p, side, img)


def partition_blocks(img: ImageSize, R: int) -> list[Box]:
    """Tile the image with ``R x R`` blocks in row-major order."""
    if R < 1:
        raise PartitionError(f"block side must be positive, got {R}")
    if img.width % R or img.height % R:
        raise PartitionError(
            f"image {img.width}x{img.height} is not a multiple of block side {R}; "
            f"resize to {max(R, round(img.width / R) * R)}x{max(R, round(img.height / R) * R)} first"
        )
    return [
        Box(float(c * R), float(r * R), float((c + 1) * R), float((r + 1) * R))
        for r in range(img.height // R)
        for c in range(img.width // R)
    ]


def patch_overlap_mask(p: Box, p_crop: Box, R: int, patch: int, n_tokens: int) -> np.ndarray:
    """Which patches of the ``p_crop`` crop overlap the original proposal ``p``.

    Returns a boolean vector of length ``n_tokens`` (patches then [CLS]); the
    [CLS] entry is always False.
    """
    if R % patch:
        raise ValueError(f"resolution {R} is not divisible by patch {patch}")
    grid = R // patch
    if n_tokens != grid * grid + 1:
        raise ValueError(f"token count {n_tokens} does not match a {grid}x{grid} grid plus [CLS]")
    side = p_crop.width
    # multiply before dividing so coordinates on the crop edge map exactly onto R
    mx1 = (p.x1 - p_crop.x1) * R / side
    mx2 = (p.x2 - p_crop.x1) * R / side
    my1 = (p.y1 - p_crop.y1) * R / side
    my2 = (p.y2 - p_crop.y1) * R / side
    lo = np.arange(grid) * float(patch)
    hi = lo + patch
    tol = OVERLAP_TOL * patch
    cols = (np.minimum(hi, mx2) - np.maximum(lo, mx1)) > tol
    rows = (np.minimum(hi, my2) - np.maximum(lo, my1)) > tol
    m = np.zeros(n_tokens, dtype=bool)
    m[:-1] = (rows[:, None] & cols[None, :]).ravel()
    if not m.any():
        raise EmptyMaskError(f"empty object mask: proposal {p.as_list()} covers no patch of crop {p_crop.as_list()}")
    return m


def build_attention_mask(m: np.ndarray) -> np.ndarray:
    """Extend an [OBJ] row mask ``m`` to the full ``(N+1) x (N+1)`` attention mask.

    Existing tokens keep full attention among themselves and never see
    [OBJ]; [OBJ] sees the patches selected by ``m`` and itself.
    """
    m = np.asarray(m, dtype=bool).ravel()
    n = m.size
    mask = np.zeros((n + 1, n + 1), dtype=bool)
    mask[:n, :n] = True
    mask[n, :n] = m
    mask[n, n] = True
    return mask
