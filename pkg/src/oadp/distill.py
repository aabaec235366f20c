"""Distillation losses, the R-CNN classification loss, a deterministic
student stub and analytic gradients of every loss with respect to the
student embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from oadp.classify import CategoryTable, cosine_logits
from oadp.errors import CategoryError, DimensionError
from oadp.geometry import Box
from oadp.tensor import gap, l1_mean, linear, roi_align, softmax

BG = -1
"""Label value for the background class in :func:`rcnn_cls_loss`."""


@dataclass(frozen=True)
class PyramidWeights:
    w_O: float = 0.5
    w_B: float = 0.25
    w_G: float = 0.25

    def __post_init__(self) -> None:
        if min(self.w_O, self.w_B, self.w_G) < 0:
            raise ValueError("pyramid weights must be non-negative")


@dataclass(frozen=True)
class LossParts:
    rcnn: float
    obj: float
    block: float
    glob: float


def loss_object(E_O, E_O_teacher, reduction: str = "mean") -> float:
    return l1_mean(E_O, E_O_teacher, reduction)


def loss_block(E_B, E_B_teacher, reduction: str = "mean") -> float:
    return l1_mean(E_B, E_B_teacher, reduction)


def loss_global(e_G, e_G_teacher, reduction: str = "mean") -> float:
    return l1_mean(np.atleast_2d(e_G), np.atleast_2d(e_G_teacher), reduction)


def total_loss(parts: LossParts, w: PyramidWeights = PyramidWeights()) -> float:
    values = (parts.rcnn, parts.obj, parts.block, parts.glob)
    if not all(np.isfinite(v) for v in values):
        raise ValueError(f"non-finite loss component in {parts}")
    return parts.rcnn + w.w_O * parts.obj + w.w_B * parts.block + w.w_G * parts.glob


def _base_targets(table: CategoryTable) -> tuple[np.ndarray, np.ndarray]:
    """Embeddings of base categories followed by background, and the map
    from table index to row in that matrix (-1 for novel)."""
    base_idx = np.flatnonzero(table.base_mask)
    targets = np.vstack([table.embeddings[base_idx], table.bg_embedding[None, :]])
    row_of = np.full(len(table), -1)
    row_of[base_idx] = np.arange(base_idx.size)
    return targets, row_of


def _label_rows(labels: Sequence[int], table: CategoryTable, n_rows: int, row_of: np.ndarray) -> list[int]:
    rows = []
    for y in labels:
        if y == BG:
            rows.append(n_rows - 1)
            continue
        if not 0 <= y < len(table):
            raise CategoryError(f"label {y} is outside the category table")
        if row_of[y] < 0:
            raise CategoryError(f"label {table.names[y]!r} is a novel category; training labels must be base or background")
        rows.append(int(row_of[y]))
    return rows


def restricted_probs(e: np.ndarray, table: CategoryTable, temperature: float = 1.0) -> np.ndarray:
    """Softmax over base categories plus background (background last)."""
    targets, _ = _base_targets(table)
    return softmax(cosine_logits(e, targets) / temperature)


def rcnn_cls_loss(E, labels: Sequence[int], table: CategoryTable, temperature: float = 1.0) -> float:
    """Summed negative log-likelihood of each proposal's label under the
    base-plus-background softmax. ``labels`` are table indices or ``BG``."""
    E = np.atleast_2d(np.asarray(E, dtype=float))
    if E.shape[0] != len(labels):
        raise DimensionError(f"{E.shape[0]} embeddings but {len(labels)} labels")
    targets, row_of = _base_targets(table)
    rows = _label_rows(labels, table, targets.shape[0], row_of)
    total = 0.0
    for e, row in zip(E, rows):
        logits = cosine_logits(e, targets) / temperature
        shifted = logits - logits.max()
        total -= shifted[row] - np.log(np.exp(shifted).sum())
    return float(total)


# -- gradients ----------------------------------------------------------------


def l1_gradient(student, teacher, reduction: str = "mean") -> tuple[np.ndarray, bool]:
    """Gradient of the L1 loss with respect to ``student``.

    Returns ``(grad, tied)``. Coordinates where student and teacher agree
    exactly get subgradient 0 and set ``tied``.
    """
    s = np.asarray(student, dtype=float)
    t = np.asarray(teacher, dtype=float)
    if s.shape != t.shape:
        raise DimensionError(f"shape mismatch {s.shape} vs {t.shape}")
    diff = s - t
    scale = 1.0 / diff.size if reduction == "mean" else 1.0
    return np.sign(diff) * scale, bool(np.any(diff == 0))


def rcnn_cls_gradient(E, labels: Sequence[int], table: CategoryTable, temperature: float = 1.0) -> np.ndarray:
    """(softmax - one-hot) pushed back through the cosine-logit Jacobian."""
    E = np.atleast_2d(np.asarray(E, dtype=float))
    targets, row_of = _base_targets(table)
    rows = _label_rows(labels, table, targets.shape[0], row_of)
    t_unit = targets / np.linalg.norm(targets, axis=1, keepdims=True)
    grad = np.zeros_like(E)
    for i, (e, row) in enumerate(zip(E, rows)):
        cos = cosine_logits(e, targets)
        dl = softmax(cos / temperature)
        dl[row] -= 1.0
        dl /= temperature
        norm = np.linalg.norm(e)
        e_unit = e / norm
        # d cos_c / d e = (t_c_unit - cos_c * e_unit) / |e|
        jac = (t_unit - cos[:, None] * e_unit[None, :]) / norm
        grad[i] = dl @ jac
    return grad


@dataclass
class GradientReport:
    gradients: dict[str, np.ndarray]
    tied: dict[str, bool]


def loss_gradients(
    student: "StudentOutputs",
    teacher_obj,
    teacher_blocks,
    teacher_global,
    labels: Sequence[int],
    table: CategoryTable,
    temperature: float = 1.0,
    reduction: str = "mean",
) -> GradientReport:
    grads: dict[str, np.ndarray] = {}
    tied: dict[str, bool] = {}
    grads["object"], tied["object"] = l1_gradient(student.E_O, teacher_obj, reduction)
    grads["block"], tied["block"] = l1_gradient(student.E_B, teacher_blocks, reduction)
    g, tied["global"] = l1_gradient(np.atleast_2d(student.e_G), np.atleast_2d(teacher_global), reduction)
    grads["global"] = g[0]
    grads["rcnn"] = rcnn_cls_gradient(student.E, labels, table, temperature)
    tied["rcnn"] = False
    return GradientReport(grads, tied)


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error ``|a - n|_inf / max(|a|_inf, |n|_inf)``."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if denom == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / denom)


# -- student stub --------------------------------------------------------------

STRIDES = (4, 8, 16, 32, 64)  # F_2 .. F_6


def avg_pool(image: np.ndarray, stride: int) -> np.ndarray:
    """Non-overlapping ``stride x stride`` average pooling; ragged edge
    windows average whatever pixels they hold."""
    h, w, c = image.shape
    oh, ow = -(-h // stride), -(-w // stride)
    padded = np.zeros((oh * stride, ow * stride, c))
    padded[:h, :w] = image
    counts = np.zeros((oh * stride, ow * stride, 1))
    counts[:h, :w] = 1.0
    sums = padded.reshape(oh, stride, ow, stride, c).sum(axis=(1, 3))
    n = counts.reshape(oh, stride, ow, stride, 1).sum(axis=(1, 3))
    return sums / n


@dataclass
class StudentOutputs:
    E_O: np.ndarray  # proposals x d, object head
    E_B: np.ndarray  # blocks x d
    e_G: np.ndarray  # d
    E: np.ndarray  # proposals x d, R-CNN head


@dataclass
class StudentStub:
    """Strided average-pool pyramid with one affine map per level, plus
    affine object, R-CNN, block and global heads. RoI features come from the
    finest level."""

    seed: int
    d: int
    channels: int
    roi_out: int
    samples_per_bin: int
    level_weights: list[tuple[np.ndarray, np.ndarray]]
    obj_head: tuple[np.ndarray, np.ndarray]
    rcnn_head: tuple[np.ndarray, np.ndarray]
    block_head: tuple[np.ndarray, np.ndarray]
    global_head: tuple[np.ndarray, np.ndarray]

    @classmethod
    def from_seed(
        cls,
        seed: int,
        d: int = 32,
        channels: int = 8,
        roi_out: int = 2,
        samples_per_bin: int = 2,
        zero_bias: bool = False,
    ) -> "StudentStub":
        rng = np.random.default_rng(seed)

        def affine(fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
            a = 1.0 / np.sqrt(fan_in)
            weight = rng.uniform(-a, a, size=(fan_in, fan_out))
            bias = rng.uniform(-a, a, size=fan_out)
            return weight, bias

        levels = []
        for _ in STRIDES:
            weight, bias = affine(3, channels)
            levels.append((weight, np.zeros_like(bias) if zero_bias else bias))
        roi_dim = roi_out * roi_out * channels
        return cls(
            seed=seed, d=d, channels=channels, roi_out=roi_out, samples_per_bin=samples_per_bin,
            level_weights=levels,
            obj_head=affine(roi_dim, d),
            rcnn_head=affine(roi_dim, d),
            block_head=affine(roi_dim, d),
            global_head=affine(channels, d),
        )

    def features(self, image: np.ndarray) -> list[np.ndarray]:
        image = np.asarray(image, dtype=float)
        return [linear(avg_pool(image, s), wt, b) for s, (wt, b) in zip(STRIDES, self.level_weights)]

    def _pooled(self, f2: np.ndarray, box: Box) -> np.ndarray:
        scaled = [v / STRIDES[0] for v in box]
        return roi_align(f2, scaled, self.roi_out, self.samples_per_bin).reshape(-1)


def student_forward(stub: StudentStub, image: np.ndarray, proposals: Sequence[Box], blocks: Sequence[Box]) -> StudentOutputs:
    feats = stub.features(image)
    f2, f6 = feats[0], feats[-1]
    d = stub.d

    def head(boxes: Sequence[Box], params: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
        if not boxes:
            return np.zeros((0, d))
        pooled = np.stack([stub._pooled(f2, b) for b in boxes])
        return linear(pooled, *params)

    return StudentOutputs(
        E_O=head(proposals, stub.obj_head),
        E_B=head(blocks, stub.block_head),
        e_G=linear(gap(f6)[None, :], *stub.global_head)[0],
        E=head(proposals, stub.rcnn_head),
    )
