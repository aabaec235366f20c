"""Pseudo labels for novel categories from object embeddings.

Each proposal's object embedding is classified with a softmax over *all*
categories (base included, so base-looking regions lose mass on novel
categories), fused with objectness into a confidence score, then
suppressed class-wise and filtered.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from oadp.classify import CategoryTable, cosine_logits
from oadp.encoder import EncoderWeights
from oadp.errors import CategoryError
from oadp.geometry import Box, Proposal, iou
from oadp.oake import extract_object_embeddings
from oadp.tensor import softmax


@dataclass(frozen=True)
class PLConfig:
    gamma: float = 0.3
    nms_iou: float = 0.5
    score_threshold: float = 0.0
    max_per_image: int = 100
    all_novel: bool = False  # one candidate per novel category instead of argmax only

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 < self.nms_iou < 1.0:
            raise ValueError(f"nms_iou must lie in (0, 1), got {self.nms_iou}")
        if self.score_threshold < 0:
            raise ValueError("score_threshold must be non-negative")
        if self.max_per_image < 1:
            raise ValueError("max_per_image must be at least 1")


@dataclass(frozen=True)
class PseudoLabel:
    box: Box
    category: str
    score: float

    def to_json(self) -> dict:
        return {"box": self.box.as_list(), "category": self.category, "score": self.score}

    @classmethod
    def from_json(cls, obj: dict) -> "PseudoLabel":
        return cls(Box.from_list(obj["box"]), str(obj["category"]), float(obj["score"]))


def pl_probs(e_obj: np.ndarray, table: CategoryTable, temperature: float = 1.0) -> np.ndarray:
    if not (table.base_mask.any() and table.novel_mask.any()):
        raise CategoryError("pseudo labelling needs both base and novel categories")
    return softmax(cosine_logits(e_obj, table.embeddings) / temperature)


def confidence(pl_prob: float, objectness: float, gamma: float) -> float:
    # Python defines 0.0 ** 0.0 == 1.0, the convention wanted at gamma in {0, 1}
    return float(pl_prob) ** gamma * float(objectness) ** (1.0 - gamma)


Candidate = tuple[Box, str, float]


def classwise_nms(candidates: Sequence[Candidate], iou_thr: float) -> list[Candidate]:
    """Greedy NMS run independently per category.

    Within a category, candidates are visited by descending score (earlier
    index first on ties) and drop when IoU with a kept box exceeds
    ``iou_thr``. Output is ordered by descending score, then input index.
    """
    order = sorted(range(len(candidates)), key=lambda i: (-candidates[i][2], i))
    kept_by_cat: dict[str, list[Box]] = {}
    kept: list[int] = []
    for i in order:
        box, cat, _ = candidates[i]
        others = kept_by_cat.setdefault(cat, [])
        if all(iou(box, k) <= iou_thr for k in others):
            others.append(box)
            kept.append(i)
    return [candidates[i] for i in kept]


def candidates_for(
    proposal: Proposal, probs: np.ndarray, table: CategoryTable, cfg: PLConfig
) -> list[Candidate]:
    novel = np.flatnonzero(table.novel_mask)
    if cfg.all_novel:
        picks = list(novel)
    else:
        picks = [novel[int(np.argmax(probs[novel]))]]
    return [(proposal.box, table.names[c], confidence(probs[c], proposal.objectness, cfg.gamma)) for c in picks]


def select_pls(candidates: Sequence[Candidate], cfg: PLConfig) -> list[PseudoLabel]:
    """NMS, then score threshold, then top ``max_per_image``."""
    kept = classwise_nms(candidates, cfg.nms_iou)
    kept = [c for c in kept if c[2] >= cfg.score_threshold]
    return [PseudoLabel(box, cat, score) for box, cat, score in kept[: cfg.max_per_image]]


def pls_from_embeddings(
    proposals: Sequence[Proposal],
    embeddings: Sequence[np.ndarray | None],
    table: CategoryTable,
    cfg: PLConfig = PLConfig(),
    temperature: float = 1.0,
) -> list[PseudoLabel]:
    candidates: list[Candidate] = []
    for proposal, e in zip(proposals, embeddings):
        if e is None:
            continue
        candidates.extend(candidates_for(proposal, pl_probs(e, table, temperature), table, cfg))
    return select_pls(candidates, cfg)


def generate_pls(
    image: np.ndarray,
    proposals: Sequence[Proposal],
    weights: EncoderWeights,
    table: CategoryTable,
    r: float = 1.0,
    cfg: PLConfig = PLConfig(),
    temperature: float = 1.0,
    workers: int = 1,
) -> list[PseudoLabel]:
    """Full pipeline for one image. Proposals with an empty object mask are
    skipped (and logged), never fatal."""
    if not proposals:
        return []
    embeddings = extract_object_embeddings(image, [p.box for p in proposals], weights, r, workers)
    return pls_from_embeddings(proposals, embeddings, table, cfg, temperature)
