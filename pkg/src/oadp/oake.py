"""Teacher-side embedding extraction: object embeddings from squared
proposal crops, plus whole-image and per-block embeddings."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np

from oadp.encoder import EncoderWeights, encode_cls, encode_obj
from oadp.errors import EmptyMaskError
from oadp.geometry import (
    Box,
    ImageSize,
    fixed_square,
    min_bounding_square,
    partition_blocks,
    patch_overlap_mask,
    transform_proposal,
)
from oadp.tensor import bilinear_resize, crop_and_resize

log = logging.getLogger(__name__)

STRATEGIES = ("mbs", "fixed", "adaptive")


def crop_square(strategy: str, p: Box, img: ImageSize, r: float = 1.0, fixed_side: float = 64.0) -> Box:
    if strategy == "adaptive":
        return transform_proposal(p, r, img)
    if strategy == "mbs":
        return min_bounding_square(p, img)
    if strategy == "fixed":
        return fixed_square(p, fixed_side, img)
    raise ValueError(f"unknown crop strategy {strategy!r}; expected one of {STRATEGIES}")


def object_crop(image: np.ndarray, p: Box, square: Box, w: EncoderWeights) -> tuple[np.ndarray, np.ndarray]:
    """Crop ``square`` to encoder resolution and compute the [OBJ] mask of ``p``."""
    c = w.config
    crop = crop_and_resize(image, square, c.R, c.R)
    m = patch_overlap_mask(p, square, c.R, c.patch, c.n_tokens)
    return crop, m


def extract_object_embedding(image: np.ndarray, p: Box, w: EncoderWeights, r: float = 1.0) -> np.ndarray:
    square = transform_proposal(p, r, ImageSize.of(image))
    crop, m = object_crop(image, p, square, w)
    return encode_obj(crop, w, m)


def extract_object_embeddings(
    image: np.ndarray,
    boxes: Sequence[Box],
    w: EncoderWeights,
    r: float = 1.0,
    workers: int = 1,
) -> list[np.ndarray | None]:
    """Object embeddings in input order; ``None`` where the proposal
    covers no patch of its crop."""

    def one(p: Box) -> np.ndarray | None:
        try:
            return extract_object_embedding(image, p, w, r)
        except EmptyMaskError:
            return None

    if workers > 1 and len(boxes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(one, boxes))
    else:
        out = [one(p) for p in boxes]
    skipped = sum(e is None for e in out)
    if skipped:
        log.warning("skipped %d of %d proposals with an empty object mask", skipped, len(boxes))
    return out


def global_embedding(image: np.ndarray, w: EncoderWeights) -> np.ndarray:
    """[CLS] embedding of the whole image resized to encoder resolution."""
    return encode_cls(bilinear_resize(image, w.config.R, w.config.R), w)


def block_layout(size: ImageSize, R: int) -> tuple[ImageSize, list[Box], list[Box]]:
    """Resize target (multiples of ``R``), blocks on the resized image, and
    the same blocks mapped back onto the original image."""
    resized = ImageSize(max(R, round(size.width / R) * R), max(R, round(size.height / R) * R))
    blocks = partition_blocks(resized, R)
    sx = size.width / resized.width
    sy = size.height / resized.height
    original = [Box(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy) for b in blocks]
    return resized, blocks, original


def block_embeddings(image: np.ndarray, w: EncoderWeights, R: int | None = None) -> tuple[np.ndarray, list[Box]]:
    """Teacher block embeddings and the blocks in original image coordinates."""
    R = R or w.config.R
    size = ImageSize.of(image)
    resized, blocks, original = block_layout(size, R)
    if (resized.width, resized.height) != (size.width, size.height):
        image = bilinear_resize(image, resized.height, resized.width)
    embs = []
    for b in blocks:
        region = image[int(b.y1):int(b.y2), int(b.x1):int(b.x2)]
        if R != w.config.R:
            region = bilinear_resize(region, w.config.R, w.config.R)
        embs.append(encode_cls(region, w))
    return np.array(embs).reshape(len(blocks), w.config.d), original
