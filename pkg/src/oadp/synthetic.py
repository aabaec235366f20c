"""Seeded generators: toy encoder weights, category tables and scenes with
planted objects and distractors.

Scene rendering: a mid-gray background with weak noise; every category owns
a fill color, a stripe texture and a *context halo* (a colored frame drawn
around the object, outside its box). Categories come in pairs that share a
fill and differ only in halo, so telling the pair apart needs the context
around the box. Distractors are unannotated rectangles rendered like some
other category.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from oadp.classify import BASE, NOVEL, CategoryTable
from oadp.encoder import EncoderConfig, EncoderWeights, LayerWeights
from oadp.geometry import Box, ImageSize, Proposal, intersection_area, iou

HALO_FRACTION = 0.35  # halo thickness relative to sqrt(object area)


def gen_weights(cfg: EncoderConfig, seed: int) -> EncoderWeights:
    """Uniform(-a, a) entries with a = 1/sqrt(fan_in); norm gains 1, norm biases 0.

    Vectors borrow the fan-in of the matrix they sit next to (``d_x`` for
    positions, [CLS] and attention/MLP-output biases, ``patch_dim`` for the
    patch bias, ``4 d_x`` for the second MLP bias).
    """
    rng = np.random.default_rng(seed)

    def u(fan_in: int, *shape: int) -> np.ndarray:
        a = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-a, a, size=shape)

    d_x = cfg.d_x
    patch_proj = u(cfg.patch_dim, cfg.patch_dim, d_x)
    patch_bias = u(cfg.patch_dim, d_x)
    pos_embed = u(d_x, cfg.n_tokens, d_x)
    cls_seed = u(d_x, d_x)
    layers = []
    for _ in range(cfg.L):
        layers.append(LayerWeights(
            ln1_g=np.ones(d_x), ln1_b=np.zeros(d_x),
            w_q=u(d_x, d_x, d_x), b_q=u(d_x, d_x),
            w_k=u(d_x, d_x, d_x), b_k=u(d_x, d_x),
            w_v=u(d_x, d_x, d_x), b_v=u(d_x, d_x),
            w_o=u(d_x, d_x, d_x), b_o=u(d_x, d_x),
            ln2_g=np.ones(d_x), ln2_b=np.zeros(d_x),
            w_fc1=u(d_x, d_x, 4 * d_x), b_fc1=u(d_x, 4 * d_x),
            w_fc2=u(4 * d_x, 4 * d_x, d_x), b_fc2=u(4 * d_x, d_x),
        ))
    return EncoderWeights(
        config=cfg, patch_proj=patch_proj, patch_bias=patch_bias, pos_embed=pos_embed,
        cls_seed=cls_seed, layers=layers, ln_post_g=np.ones(d_x), ln_post_b=np.zeros(d_x),
        proj=u(d_x, d_x, cfg.d),
    )


def orthonormal_rows(n: int, d: int, seed: int) -> np.ndarray:
    """``n`` mutually orthogonal unit vectors in R^d (Gram-Schmidt on
    seeded Gaussian draws)."""
    if n > d:
        raise ValueError(f"cannot fit {n} orthogonal vectors in dimension {d}")
    rng = np.random.default_rng(seed)
    out = []
    for v in rng.standard_normal((n, d)):
        for u in out:
            v = v - np.dot(v, u) * u
        out.append(v / np.linalg.norm(v))
    return np.array(out)


def category_names(n: int) -> list[str]:
    return [f"cat{i:02d}" for i in range(n)]


def gen_category_table(n_base: int, n_novel: int, d: int, seed: int) -> CategoryTable:
    """Random table: base categories first, then novel, background last row
    of the orthonormal draw."""
    n = n_base + n_novel
    rows = orthonormal_rows(n + 1, d, seed)
    return CategoryTable(
        names=tuple(category_names(n)),
        embeddings=rows[:n],
        splits=tuple([BASE] * n_base + [NOVEL] * n_novel),
        bg_embedding=rows[n],
    )


# -- scenes --------------------------------------------------------------------


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


@dataclass(frozen=True)
class Appearance:
    fill: np.ndarray
    stripe: np.ndarray
    halo: np.ndarray
    vertical: bool
    period: float


def appearance(category: int, n_categories: int) -> Appearance:
    """Category-coded look. Categories ``2k`` and ``2k+1`` share fill and
    stripes and differ in halo color."""
    pair = category // 2
    n_pairs = max(1, (n_categories + 1) // 2)
    hue = pair / n_pairs
    return Appearance(
        fill=_hsv(hue, 0.75, 0.9),
        stripe=_hsv(hue + 0.5, 0.6, 0.35),
        halo=_hsv(0.1 + 0.5 * (category % 2), 0.95, 0.95 if category % 2 else 0.25),
        vertical=bool(pair % 2),
        period=3.0 + (pair % 3),
    )


@dataclass
class SceneSpec:
    width: int
    height: int
    objects: list[tuple[Box, int]] = field(default_factory=list)
    distractors: list[tuple[Box, int]] = field(default_factory=list)
    n_categories: int = 4
    seed: int = 0
    jitter: float = 0.08
    noise: float = 0.02
    halo: bool = True

    def __post_init__(self) -> None:
        ImageSize(self.width, self.height)
        for box, cat in self.objects + self.distractors:
            if box.x1 < 0 or box.y1 < 0 or box.x2 > self.width or box.y2 > self.height:
                raise ValueError(f"box {box.as_list()} lies outside the {self.width}x{self.height} image")
            if not 0 <= cat < self.n_categories:
                raise ValueError(f"category {cat} outside 0..{self.n_categories - 1}")
        if not 0 <= self.jitter <= 0.1:
            raise ValueError("jitter must lie in [0, 0.1] so proposals keep IoU >= 0.5")

    def to_json(self) -> dict:
        return {
            "width": self.width, "height": self.height,
            "objects": [{"box": b.as_list(), "category": c} for b, c in self.objects],
            "distractors": [{"box": b.as_list(), "category": c} for b, c in self.distractors],
            "n_categories": self.n_categories, "seed": self.seed, "jitter": self.jitter,
            "noise": self.noise, "halo": self.halo,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SceneSpec":
        return cls(
            width=int(obj["width"]), height=int(obj["height"]),
            objects=[(Box.from_list(o["box"]), int(o["category"])) for o in obj.get("objects", [])],
            distractors=[(Box.from_list(o["box"]), int(o["category"])) for o in obj.get("distractors", [])],
            n_categories=int(obj.get("n_categories", 4)), seed=int(obj.get("seed", 0)),
            jitter=float(obj.get("jitter", 0.08)), noise=float(obj.get("noise", 0.02)),
            halo=bool(obj.get("halo", True)),
        )


@dataclass
class Scene:
    image: np.ndarray
    proposals: list[Proposal]
    ground_truth: list[tuple[Box, int]]


def halo_box(box: Box, width: int, height: int) -> Box:
    t = HALO_FRACTION * math.sqrt(box.area)
    return Box(max(0.0, box.x1 - t), max(0.0, box.y1 - t), min(float(width), box.x2 + t), min(float(height), box.y2 + t))


def _coverage(lo: float, hi: float, n: int) -> np.ndarray:
    """Fraction of each unit pixel in ``0..n`` covered by ``[lo, hi)``."""
    edges = np.arange(n + 1, dtype=float)
    return np.clip(np.minimum(edges[1:], hi) - np.maximum(edges[:-1], lo), 0.0, 1.0)


def paint_rect(image: np.ndarray, box: Box, color: np.ndarray | None = None, texture=None) -> None:
    """Alpha-blend a rectangle with anti-aliased (area-coverage) edges."""
    h, w = image.shape[:2]
    alpha = _coverage(box.y1, box.y2, h)[:, None] * _coverage(box.x1, box.x2, w)[None, :]
    if texture is None:
        layer = np.broadcast_to(color, image.shape)
    else:
        layer = texture
    image[:] = image * (1.0 - alpha[..., None]) + layer * alpha[..., None]


def render_object(
    image: np.ndarray, box: Box, category: int, n_categories: int, halo: bool = True, body: bool = True
) -> None:
    look = appearance(category, n_categories)
    h, w = image.shape[:2]
    if halo:
        paint_rect(image, halo_box(box, w, h), look.halo)
    if not body:
        return
    yy, xx = np.mgrid[0:h, 0:w].astype(float) + 0.5
    coord = (xx - box.x1) if look.vertical else (yy - box.y1)
    stripes = (np.floor(coord / look.period) % 2 == 0)[..., None]
    texture = np.where(stripes, look.fill, look.stripe)
    paint_rect(image, box, texture=texture)


def render_scene(spec: SceneSpec) -> np.ndarray:
    """Object halos, then distractors, then object bodies: distractors may
    cover an object's context but never the object itself."""
    rng = np.random.default_rng(spec.seed)
    image = 0.5 + spec.noise * rng.standard_normal((spec.height, spec.width, 3))
    if spec.halo:
        for box, cat in spec.objects:
            render_object(image, box, cat, spec.n_categories, halo=True, body=False)
    for box, cat in spec.distractors:
        render_object(image, box, cat, spec.n_categories, spec.halo)
    for box, cat in spec.objects:
        render_object(image, box, cat, spec.n_categories, halo=False)
    return np.clip(image, 0.0, 1.0)


def jitter_box(box: Box, frac: float, rng: np.random.Generator, size: ImageSize) -> Box:
    dx = frac * box.width
    dy = frac * box.height
    x1, x2 = box.x1 + rng.uniform(-dx, dx), box.x2 + rng.uniform(-dx, dx)
    y1, y2 = box.y1 + rng.uniform(-dy, dy), box.y2 + rng.uniform(-dy, dy)
    x1, y1 = max(0.0, x1), max(0.0, y1)
    x2, y2 = min(float(size.width), x2), min(float(size.height), y2)
    return Box(x1, y1, x2, y2)


def gen_scene(spec: SceneSpec) -> Scene:
    """Render the scene; proposals are the planted boxes jittered by up to
    ``spec.jitter`` of their side, with objectness = IoU to the planted box."""
    image = render_scene(spec)
    rng = np.random.default_rng([spec.seed, 1])
    size = ImageSize(spec.width, spec.height)
    proposals = []
    for box, _ in spec.objects:
        jittered = jitter_box(box, spec.jitter, rng, size)
        proposals.append(Proposal(jittered, iou(jittered, box)))
    return Scene(image=image, proposals=proposals, ground_truth=list(spec.objects))


def random_scene_spec(
    seed: int,
    size: int = 96,
    n_objects: int = 2,
    n_distractors: int = 3,
    n_categories: int = 4,
    min_side: float = 10.0,
    max_side: float = 24.0,
    max_aspect: float = 2.0,
    adjacent: bool = True,
    max_gap: float = 2.0,
    max_tries: int = 200,
) -> SceneSpec:
    """Random objects whose halos do not overlap, plus distractors.

    With ``adjacent`` each distractor is placed next to a random object, its
    own halo just clear of the object box (so it may eat into the object's
    context). Distractors never overlap object boxes or each other.
    """
    rng = np.random.default_rng([seed, 0])
    objects: list[tuple[Box, int]] = []

    def sample_box() -> Box:
        area = rng.uniform(min_side, max_side) ** 2
        aspect = math.exp(rng.uniform(-math.log(max_aspect), math.log(max_aspect)))
        w = min(math.sqrt(area * aspect), size - 2.0)
        h = min(math.sqrt(area / aspect), size - 2.0)
        x1 = rng.uniform(0, size - w)
        y1 = rng.uniform(0, size - h)
        return Box(x1, y1, x1 + w, y1 + h)

    def clear(a: Box, others: Sequence[Box]) -> bool:
        return all(intersection_area(a, o) == 0.0 for o in others)

    object_halos: list[Box] = []
    for _ in range(max_tries):
        if len(objects) == n_objects:
            break
        box = sample_box()
        hb = halo_box(box, size, size)
        if clear(hb, object_halos):
            objects.append((box, int(rng.integers(n_categories))))
            object_halos.append(hb)
    object_boxes = [b for b, _ in objects]
    distractor_halos: list[Box] = []
    distractors: list[tuple[Box, int]] = []
    for _ in range(max_tries):
        if len(distractors) == n_distractors:
            break
        box = sample_box()
        if adjacent and objects:
            anchor = object_boxes[int(rng.integers(len(objects)))]
            w, h = box.width, box.height
            offset = HALO_FRACTION * math.sqrt(box.area) + rng.uniform(0.0, max_gap)
            side = int(rng.integers(4))
            if side == 0:
                x1, y1 = anchor.x2 + offset, rng.uniform(anchor.y1 - h / 2, anchor.y2 - h / 2)
            elif side == 1:
                x1, y1 = anchor.x1 - offset - w, rng.uniform(anchor.y1 - h / 2, anchor.y2 - h / 2)
            elif side == 2:
                x1, y1 = rng.uniform(anchor.x1 - w / 2, anchor.x2 - w / 2), anchor.y2 + offset
            else:
                x1, y1 = rng.uniform(anchor.x1 - w / 2, anchor.x2 - w / 2), anchor.y1 - offset - h
            if x1 < 0 or y1 < 0 or x1 + w > size or y1 + h > size:
                continue
            box = Box(x1, y1, x1 + w, y1 + h)
        hb = halo_box(box, size, size)
        if clear(hb, object_boxes) and clear(hb, distractor_halos):
            distractors.append((box, int(rng.integers(n_categories))))
            distractor_halos.append(hb)
    return SceneSpec(
        width=size, height=size, objects=objects, distractors=distractors,
        n_categories=n_categories, seed=seed,
    )
