"""Crop-strategy comparison on synthetic scenes.

Every ground-truth box is cropped with each strategy (minimum bounding
square, fixed-size square, adaptive square), encoded either with the plain
[CLS] path or the masked [OBJ] path, and classified by cosine similarity
against category prototypes. Per-cell macro and weighted precision are
reported for each seed and pooled over seeds.

Prototypes stand in for text embeddings: the normalised mean [CLS]
embedding of clean single-object renders over a spread of framings
(object area 1/6 to 1/2 of the crop, aspect 1:2 to 2:1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from oadp.classify import BASE, NOVEL, CategoryTable, cosine_logits
from oadp.encoder import EncoderConfig, EncoderWeights, encode_cls, encode_obj
from oadp.geometry import Box, ImageSize
from oadp.metrics import ClassificationRecord, macro_precision, weighted_precision
from oadp.oake import STRATEGIES, crop_square, object_crop
from oadp.synthetic import (
    SceneSpec,
    category_names,
    gen_scene,
    gen_weights,
    random_scene_spec,
    render_object,
)
from oadp.tensor import bilinear_resize

PROTOTYPE_FRACTIONS = (1 / 6, 1 / 4, 1 / 3, 1 / 2)
PROTOTYPE_ASPECTS = (0.5, 1.0, 2.0)


def prototype_table(w: EncoderWeights, n_categories: int, canvas: int = 64) -> CategoryTable:
    """Category table whose embeddings are encoder prototypes of clean renders.

    The first half of the categories is flagged base, the rest novel; the
    background embedding is the prototype of an empty canvas.
    """
    R = w.config.R

    def embed(img: np.ndarray) -> np.ndarray:
        e = encode_cls(bilinear_resize(img, R, R), w)
        return e / np.linalg.norm(e)

    protos = []
    for c in range(n_categories):
        acc = []
        for frac in PROTOTYPE_FRACTIONS:
            for aspect in PROTOTYPE_ASPECTS:
                area = frac * canvas * canvas
                bw, bh = math.sqrt(area * aspect), math.sqrt(area / aspect)
                mid = canvas / 2.0
                img = np.full((canvas, canvas, 3), 0.5)
                render_object(img, Box(mid - bw / 2, mid - bh / 2, mid + bw / 2, mid + bh / 2), c, n_categories)
                acc.append(embed(img))
        mean = np.mean(acc, axis=0)
        protos.append(mean / np.linalg.norm(mean))
    n_base = max(1, n_categories // 2)
    return CategoryTable(
        names=tuple(category_names(n_categories)),
        embeddings=np.array(protos),
        splits=tuple([BASE] * n_base + [NOVEL] * (n_categories - n_base)),
        bg_embedding=embed(np.full((canvas, canvas, 3), 0.5)),
    )


@dataclass(frozen=True)
class CropSettings:
    r: float = 4.0  # adaptive scale ratio
    fixed_side: float = 48.0
    scene_size: int = 96
    n_objects: int = 2
    n_distractors: int = 3
    n_categories: int = 4


@dataclass
class GridResult:
    """Macro/weighted precision per (strategy, masked) cell."""

    cells: dict[tuple[str, bool], dict[str, float]] = field(default_factory=dict)

    def macro(self, strategy: str, masked: bool) -> float:
        return self.cells[(strategy, masked)]["macro_precision"]

    def argmax(self) -> list[tuple[str, bool]]:
        """All cells attaining the best macro precision."""
        best = max(c["macro_precision"] for c in self.cells.values())
        return [k for k, c in self.cells.items() if c["macro_precision"] == best]

    def rows(self) -> list[dict]:
        return [
            {"strategy": s, "masked": m, **vals}
            for (s, m), vals in self.cells.items()
        ]


def classify_crops(
    scenes: Sequence[SceneSpec],
    w: EncoderWeights,
    table: CategoryTable,
    strategies: Sequence[str] = STRATEGIES,
    masked: Sequence[bool] = (True, False),
    settings: CropSettings = CropSettings(),
) -> dict[tuple[str, bool], list[ClassificationRecord]]:
    records: dict[tuple[str, bool], list[ClassificationRecord]] = {(s, m): [] for s in strategies for m in masked}
    for spec in scenes:
        scene = gen_scene(spec)
        size = ImageSize(spec.width, spec.height)
        for box, cat in scene.ground_truth:
            truth = table.names[cat]
            for s in strategies:
                square = crop_square(s, box, size, r=settings.r, fixed_side=settings.fixed_side)
                crop, m = object_crop(scene.image, box, square, w)
                for use_mask in masked:
                    e = encode_obj(crop, w, m) if use_mask else encode_cls(crop, w)
                    pred = table.names[int(np.argmax(cosine_logits(e, table.embeddings)))]
                    records[(s, use_mask)].append(ClassificationRecord(truth, pred))
    return records


def score_records(records: dict[tuple[str, bool], list[ClassificationRecord]]) -> GridResult:
    grid = GridResult()
    for key, recs in records.items():
        grid.cells[key] = {
            "macro_precision": macro_precision(recs) if recs else 0.0,
            "weighted_precision": weighted_precision(recs) if recs else 0.0,
            "n": len(recs),
        }
    return grid


def scene_specs(seed: int, n_scenes: int, settings: CropSettings = CropSettings()) -> list[SceneSpec]:
    return [
        random_scene_spec(
            seed * 100_000 + k,
            size=settings.scene_size,
            n_objects=settings.n_objects,
            n_distractors=settings.n_distractors,
            n_categories=settings.n_categories,
        )
        for k in range(n_scenes)
    ]


@dataclass
class CompareResult:
    seeds: list[int]
    per_seed: list[GridResult]
    pooled: GridResult

    def argmax_rate(self, cell: tuple[str, bool] = ("adaptive", True)) -> float:
        if not self.per_seed:
            return 0.0
        return sum(cell in g.argmax() for g in self.per_seed) / len(self.per_seed)

    def to_json(self) -> dict:
        return {
            "seeds": self.seeds,
            "pooled": self.pooled.rows(),
            "per_seed": [{"seed": s, "cells": g.rows()} for s, g in zip(self.seeds, self.per_seed)],
            "masked_adaptive_argmax_rate": self.argmax_rate(),
        }


def compare_crops(
    seeds: Sequence[int],
    n_scenes: int | None = None,
    scenes: Sequence[SceneSpec] | None = None,
    strategies: Sequence[str] = STRATEGIES,
    masked: Sequence[bool] = (True, False),
    settings: CropSettings = CropSettings(),
    encoder: EncoderConfig = EncoderConfig(),
    weights: EncoderWeights | None = None,
) -> CompareResult:
    """Run the grid once per seed.

    Each seed draws its own encoder weights (unless ``weights`` is given)
    and, without explicit ``scenes``, its own ``n_scenes`` random scenes.
    """
    if scenes is None and n_scenes is None:
        raise ValueError("give either scenes or n_scenes")
    for s in strategies:
        if s not in STRATEGIES:
            raise ValueError(f"unknown strategy {s!r}")
    pooled: dict[tuple[str, bool], list[ClassificationRecord]] = {(s, m): [] for s in strategies for m in masked}
    per_seed = []
    for seed in seeds:
        w = weights if weights is not None else gen_weights(encoder, seed)
        table = prototype_table(w, settings.n_categories)
        specs = scenes if scenes is not None else scene_specs(seed, n_scenes, settings)
        recs = classify_crops(specs, w, table, strategies, masked, settings)
        per_seed.append(score_records(recs))
        for key, value in recs.items():
            pooled[key].extend(value)
    return CompareResult(seeds=list(seeds), per_seed=per_seed, pooled=score_records(pooled))
