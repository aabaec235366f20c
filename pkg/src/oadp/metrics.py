"""Classification precision, single-threshold AP and pseudo-label counts."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from oadp.geometry import Box, iou


@dataclass(frozen=True)
class ClassificationRecord:
    true: str
    pred: str | None


@dataclass
class DetectionRecord:
    image_id: str
    gts: list[tuple[Box, str]] = field(default_factory=list)
    preds: list[tuple[Box, str, float]] = field(default_factory=list)


def _per_category(records: Sequence[ClassificationRecord]) -> tuple[dict[str, int], dict[str, int]]:
    if not records:
        raise ValueError("no classification records")
    totals: Counter[str] = Counter()
    correct: Counter[str] = Counter()
    for rec in records:
        totals[rec.true] += 1
        correct[rec.true] += rec.pred == rec.true
    return dict(totals), dict(correct)


def macro_precision(records: Sequence[ClassificationRecord]) -> float:
    """Per-category precision (correct / total for each true category),
    averaged with equal weights."""
    totals, correct = _per_category(records)
    return float(np.mean([correct[c] / totals[c] for c in totals]))


def weighted_precision(records: Sequence[ClassificationRecord]) -> float:
    """Per-category precision weighted by each category's truth count."""
    totals, correct = _per_category(records)
    n = sum(totals.values())
    return float(sum(totals[c] / n * (correct[c] / totals[c]) for c in totals))


def match_predictions(records: Sequence[DetectionRecord], category: str, iou_thr: float = 0.5) -> tuple[np.ndarray, int]:
    """Greedy score-ordered matching for one category.

    Returns the true-positive flags of the category's predictions in
    ranking order (score descending, then image order, then prediction
    order) and the number of ground truths. Each prediction takes the
    unmatched ground truth of highest IoU (lowest index on ties).
    """
    ranked = []
    for img_idx, rec in enumerate(records):
        for pred_idx, (box, cat, score) in enumerate(rec.preds):
            if cat == category:
                ranked.append((-score, img_idx, pred_idx, box))
    ranked.sort(key=lambda t: t[:3])
    gts = [[b for b, c in rec.gts if c == category] for rec in records]
    used = [[False] * len(g) for g in gts]
    flags = np.zeros(len(ranked), dtype=bool)
    for k, (_, img_idx, _, box) in enumerate(ranked):
        best, best_iou = -1, iou_thr
        for j, gt in enumerate(gts[img_idx]):
            if used[img_idx][j]:
                continue
            o = iou(box, gt)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = j, o
        if best >= 0:
            used[img_idx][best] = True
            flags[k] = True
    return flags, sum(len(g) for g in gts)


def pr_curve(flags: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    return recall, precision


def average_precision(flags: np.ndarray, n_gt: int) -> float:
    """All-point interpolated area under the precision-recall curve."""
    if len(flags) == 0:
        return 0.0
    recall, precision = pr_curve(np.asarray(flags, dtype=bool), n_gt)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def ap50(records: Sequence[DetectionRecord], category: str, iou_thr: float = 0.5) -> float | None:
    """AP at one IoU threshold; ``None`` when the category has no ground truth."""
    flags, n_gt = match_predictions(records, category, iou_thr)
    if n_gt == 0:
        return None
    return average_precision(flags, n_gt)


def map50(records: Sequence[DetectionRecord], categories: Iterable[str]) -> tuple[float, dict[str, float]]:
    """Mean AP over categories with ground truth, and the per-category values."""
    per_cat = {}
    for cat in categories:
        ap = ap50(records, cat)
        if ap is not None:
            per_cat[cat] = ap
    mean = float(np.mean(list(per_cat.values()))) if per_cat else 0.0
    return mean, per_cat


def classification_records(
    records: Sequence[DetectionRecord], categories: Iterable[str] | None = None, iou_thr: float = 0.5
) -> list[ClassificationRecord]:
    """Label every ground truth with the category of its highest-scoring
    overlapping prediction (``None`` if nothing overlaps at ``iou_thr``)."""
    allowed = None if categories is None else set(categories)
    out = []
    for rec in records:
        for box, cat in rec.gts:
            if allowed is not None and cat not in allowed:
                continue
            best = None
            for pbox, pcat, score in rec.preds:
                if iou(box, pbox) >= iou_thr and (best is None or score > best[1]):
                    best = (pcat, score)
            out.append(ClassificationRecord(cat, None if best is None else best[0]))
    return out


def pl_stats(pl_per_image: Sequence[Sequence]) -> dict:
    """Mean pseudo-label count per image and per-category totals.

    ``pl_per_image`` holds one list per image of pseudo labels (objects
    with a ``category`` attribute, or dicts with a ``"category"`` key).
    """
    counts: Counter[str] = Counter()
    for pls in pl_per_image:
        for pl in pls:
            counts[pl["category"] if isinstance(pl, dict) else pl.category] += 1
    n_images = len(pl_per_image)
    mean = sum(len(p) for p in pl_per_image) / n_images if n_images else 0.0
    return {"pl_per_image": mean, "per_category": dict(sorted(counts.items())), "images": n_images}


def metrics_report(records: Sequence[DetectionRecord], categories: Sequence[str]) -> dict:
    """The evaluation report written by the ``eval`` command."""
    cls_records = classification_records(records, categories)
    if cls_records:
        macro = macro_precision(cls_records)
        weighted = weighted_precision(cls_records)
    else:
        macro = weighted = 0.0
    mean_ap, per_cat = map50(records, categories)
    stats = pl_stats([[{"category": c} for _, c, _ in r.preds] for r in records])
    return {
        "macro_precision": macro,
        "weighted_precision": weighted,
        "ap50_per_category": per_cat,
        "map50": mean_ap,
        "pl_per_image": stats["pl_per_image"],
    }
