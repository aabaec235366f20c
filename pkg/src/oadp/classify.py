"""Cosine-logit classification against category embeddings, with and
without a background entry, and the base/novel calibrated fusion used at
inference time."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from oadp.errors import CategoryError, DimensionError, ZeroVectorError
from oadp.tensor import softmax

BASE = "base"
NOVEL = "novel"


@dataclass(frozen=True)
class CategoryTable:
    """Category names, embeddings and base/novel split, plus the background
    embedding. Ordering is insertion order everywhere."""

    names: tuple[str, ...]
    embeddings: np.ndarray  # n x d
    splits: tuple[str, ...]
    bg_embedding: np.ndarray  # d

    def __post_init__(self) -> None:
        emb = np.asarray(self.embeddings, dtype=float)
        bg = np.asarray(self.bg_embedding, dtype=float)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "bg_embedding", bg)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "splits", tuple(self.splits))
        n = len(self.names)
        if emb.ndim != 2 or emb.shape[0] != n or len(self.splits) != n:
            raise CategoryError("names, splits and embeddings must align")
        if bg.shape != (emb.shape[1],):
            raise CategoryError(f"background embedding must have dimension {emb.shape[1]}")
        if len(set(self.names)) != n:
            raise CategoryError("category names must be unique")
        if any(s not in (BASE, NOVEL) for s in self.splits):
            raise CategoryError("split flags must be 'base' or 'novel'")
        if BASE not in self.splits:
            raise CategoryError("need at least one base category")
        if np.any(np.linalg.norm(emb, axis=1) == 0) or np.linalg.norm(bg) == 0:
            raise ZeroVectorError("category and background embeddings must be nonzero")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def base_mask(self) -> np.ndarray:
        return np.array([s == BASE for s in self.splits])

    @property
    def novel_mask(self) -> np.ndarray:
        return ~self.base_mask

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise CategoryError(f"unknown category {name!r}") from None

    def is_novel(self, name: str) -> bool:
        return self.splits[self.index(name)] == NOVEL

    def to_json(self) -> dict:
        return {
            "categories": [
                {"name": n, "split": s, "embedding": e.tolist()}
                for n, s, e in zip(self.names, self.splits, self.embeddings)
            ],
            "bg_embedding": self.bg_embedding.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "CategoryTable":
        try:
            cats = data["categories"]
            return cls(
                names=tuple(c["name"] for c in cats),
                embeddings=np.array([c["embedding"] for c in cats], dtype=float),
                splits=tuple(c["split"] for c in cats),
                bg_embedding=np.array(data["bg_embedding"], dtype=float),
            )
        except (KeyError, TypeError) as exc:
            raise CategoryError(f"bad category table: {exc}") from None


def load_table(path: str | Path) -> CategoryTable:
    return CategoryTable.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def save_table(table: CategoryTable, path: str | Path) -> None:
    from oadp.io import atomic_write_text

    atomic_write_text(path, json.dumps(table.to_json()) + "\n")


def cosine_logit(e: np.ndarray, t: np.ndarray) -> float:
    e = np.asarray(e, dtype=float)
    t = np.asarray(t, dtype=float)
    ne, nt = np.linalg.norm(e), np.linalg.norm(t)
    if ne == 0 or nt == 0:
        raise ZeroVectorError("cosine logit of a zero vector")
    return float(np.dot(e, t) / (ne * nt))


def cosine_logits(e: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Cosine similarity of ``e`` with every row of ``targets``."""
    e = np.asarray(e, dtype=float)
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if targets.shape[1] != e.shape[-1]:
        raise DimensionError(f"embedding dim {e.shape[-1]} vs category dim {targets.shape[1]}")
    ne = np.linalg.norm(e)
    nt = np.linalg.norm(targets, axis=1)
    if ne == 0 or np.any(nt == 0):
        raise ZeroVectorError("cosine logit of a zero vector")
    return (targets @ e) / (nt * ne)


def probs_with_bg(e: np.ndarray, table: CategoryTable, temperature: float = 1.0) -> np.ndarray:
    """Softmax over all categories plus background (background last)."""
    targets = np.vstack([table.embeddings, table.bg_embedding[None, :]])
    return softmax(cosine_logits(e, targets) / temperature)


def probs_no_bg(e: np.ndarray, table: CategoryTable, temperature: float = 1.0) -> np.ndarray:
    return softmax(cosine_logits(e, table.embeddings) / temperature)


def calibrate(P: np.ndarray, P_O: np.ndarray, table: CategoryTable, lam: float = 2.0 / 3.0) -> np.ndarray:
    """Fuse detector-head and object-head probabilities.

    ``P`` comes from :func:`probs_with_bg` (categories then background) and
    ``P_O`` from :func:`probs_no_bg`. Base categories weight ``P`` by
    ``lam``, novel ones weight ``P_O`` by ``lam``; the background entry is
    ``1 - sum(P[categories])``. The result is a ranking score, not a
    distribution.
    """
    P = np.asarray(P, dtype=float)
    P_O = np.asarray(P_O, dtype=float)
    n = len(table)
    if P.shape != (n + 1,) or P_O.shape != (n,):
        raise DimensionError(f"expected {n + 1} detector and {n} object probabilities, got {P.shape} and {P_O.shape}")
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must lie in (0, 1), got {lam}")
    Pc = P[:n]
    fused = np.where(table.base_mask, Pc**lam * P_O ** (1.0 - lam), Pc ** (1.0 - lam) * P_O**lam)
    scores = np.empty(n + 1)
    # equal factors give the factor itself, bit-exactly
    scores[:n] = np.where(Pc == P_O, Pc, fused)
    scores[n] = 1.0 - Pc.sum()
    return scores
