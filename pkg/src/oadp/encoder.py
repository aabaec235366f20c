"""CLIP-style ViT image encoder with an optional masked [OBJ] token.

Token layout: patch tokens in row-major order, then [CLS]; the object-aware
variant appends [OBJ] after [CLS]. Transformer blocks are pre-norm
(norm -> attention -> residual, norm -> MLP -> residual). With
``attention_only`` the norms and MLPs inside the blocks are skipped, which
leaves just the residual masked-attention recurrence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from oadp.errors import DimensionError, FormatError
from oadp.geometry import build_attention_mask
from oadp.tensor import layer_norm, linear, masked_softmax, matmul


@dataclass(frozen=True)
class EncoderConfig:
    R: int = 32
    patch: int = 8
    d_x: int = 64
    heads: int = 4
    L: int = 2
    d: int = 32
    attention_only: bool = False
    eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.R % self.patch:
            raise ValueError(f"R={self.R} is not a multiple of patch={self.patch}")
        if self.d_x % self.heads:
            raise ValueError(f"d_x={self.d_x} is not a multiple of heads={self.heads}")
        if self.L < 1:
            raise ValueError("need at least one layer")

    @property
    def grid(self) -> int:
        return self.R // self.patch

    @property
    def n_tokens(self) -> int:
        """Patch tokens plus [CLS]."""
        return self.grid * self.grid + 1

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3


@dataclass
class LayerWeights:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w_fc1: np.ndarray
    b_fc1: np.ndarray
    w_fc2: np.ndarray
    b_fc2: np.ndarray


@dataclass
class EncoderWeights:
    config: EncoderConfig
    patch_proj: np.ndarray  # patch_dim x d_x
    patch_bias: np.ndarray  # d_x
    pos_embed: np.ndarray  # n_tokens x d_x, last row belongs to [CLS]
    cls_seed: np.ndarray  # d_x
    layers: list[LayerWeights] = field(default_factory=list)
    ln_post_g: np.ndarray | None = None
    ln_post_b: np.ndarray | None = None
    proj: np.ndarray | None = None  # d_x x d

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        c = self.config
        expected = {
            "patch_proj": (c.patch_dim, c.d_x),
            "patch_bias": (c.d_x,),
            "pos_embed": (c.n_tokens, c.d_x),
            "cls_seed": (c.d_x,),
            "ln_post_g": (c.d_x,),
            "ln_post_b": (c.d_x,),
            "proj": (c.d_x, c.d),
        }
        layer_shapes = {
            "ln1_g": (c.d_x,), "ln1_b": (c.d_x,),
            "w_q": (c.d_x, c.d_x), "b_q": (c.d_x,),
            "w_k": (c.d_x, c.d_x), "b_k": (c.d_x,),
            "w_v": (c.d_x, c.d_x), "b_v": (c.d_x,),
            "w_o": (c.d_x, c.d_x), "b_o": (c.d_x,),
            "ln2_g": (c.d_x,), "ln2_b": (c.d_x,),
            "w_fc1": (c.d_x, 4 * c.d_x), "b_fc1": (4 * c.d_x,),
            "w_fc2": (4 * c.d_x, c.d_x), "b_fc2": (c.d_x,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr is None or np.shape(arr) != shape:
                raise FormatError(f"{name}: expected shape {shape}, got {None if arr is None else np.shape(arr)}")
        if len(self.layers) != c.L:
            raise FormatError(f"expected {c.L} layers, got {len(self.layers)}")
        for i, layer in enumerate(self.layers):
            for name, shape in layer_shapes.items():
                if np.shape(getattr(layer, name)) != shape:
                    raise FormatError(f"layers.{i}.{name}: expected shape {shape}")
        for name, arr in self.named_arrays().items():
            if not np.all(np.isfinite(arr)):
                raise FormatError(f"{name} holds non-finite values")

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {
            "patch_proj": self.patch_proj,
            "patch_bias": self.patch_bias,
            "pos_embed": self.pos_embed,
            "cls_seed": self.cls_seed,
        }
        for i, layer in enumerate(self.layers):
            for f in fields(LayerWeights):
                out[f"layers.{i}.{f.name}"] = getattr(layer, f.name)
        out["ln_post_g"] = self.ln_post_g
        out["ln_post_b"] = self.ln_post_b
        out["proj"] = self.proj
        return out


_CONFIG_KEY = "meta.config"


def weights_to_tensors(w: EncoderWeights) -> dict[str, np.ndarray]:
    c = w.config
    meta = np.array([c.R, c.patch, c.d_x, c.heads, c.L, c.d, float(c.attention_only), c.eps], dtype=np.float64)
    tensors = {_CONFIG_KEY: meta}
    tensors.update({k: np.asarray(v, dtype=np.float64) for k, v in w.named_arrays().items()})
    return tensors


def weights_from_tensors(tensors: dict[str, np.ndarray]) -> EncoderWeights:
    try:
        R, patch, d_x, heads, L, d, attn_only, eps = (float(v) for v in tensors[_CONFIG_KEY])
        config = EncoderConfig(
            R=int(R), patch=int(patch), d_x=int(d_x), heads=int(heads), L=int(L), d=int(d),
            attention_only=bool(attn_only), eps=eps,
        )
        layers = [
            LayerWeights(**{f.name: tensors[f"layers.{i}.{f.name}"] for f in fields(LayerWeights)})
            for i in range(config.L)
        ]
        return EncoderWeights(
            config=config,
            patch_proj=tensors["patch_proj"],
            patch_bias=tensors["patch_bias"],
            pos_embed=tensors["pos_embed"],
            cls_seed=tensors["cls_seed"],
            layers=layers,
            ln_post_g=tensors["ln_post_g"],
            ln_post_b=tensors["ln_post_b"],
            proj=tensors["proj"],
        )
    except KeyError as exc:
        raise FormatError(f"weight file is missing tensor {exc.args[0]!r}") from None
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"bad encoder configuration: {exc}") from None


def save_weights(w: EncoderWeights, path: str | Path) -> None:
    from oadp.io import write_tensors

    write_tensors(path, weights_to_tensors(w))


def load_weights(path: str | Path) -> EncoderWeights:
    from oadp.io import read_tensors

    return weights_from_tensors(read_tensors(path))


def with_config(w: EncoderWeights, **changes) -> EncoderWeights:
    """Same parameters under a config differing only in shape-neutral flags."""
    return replace(w, config=replace(w.config, **changes))


def tokenize(crop: np.ndarray, w: EncoderWeights) -> np.ndarray:
    """Patchify ``crop`` (R x R x 3), project, add positions, append [CLS]."""
    c = w.config
    crop = np.asarray(crop, dtype=float)
    if crop.shape != (c.R, c.R, 3):
        raise DimensionError(f"crop must be {c.R}x{c.R}x3, got {crop.shape}")
    g, p = c.grid, c.patch
    # (gy, py, gx, px, ch) -> (gy, gx, py, px, ch): each patch flattened row-major
    patches = crop.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, c.patch_dim)
    tokens = linear(patches, w.patch_proj, w.patch_bias)
    tokens = np.vstack([tokens, w.cls_seed[None, :]])
    return tokens + w.pos_embed


def _quick_gelu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-1.702 * x))


def attention(x: np.ndarray, layer: LayerWeights, config: EncoderConfig, allow: np.ndarray) -> np.ndarray:
    """Multi-head attention sublayer output (before the residual add)."""
    n, d_x = x.shape
    heads = config.heads
    dh = d_x // heads

    def split(t: np.ndarray) -> np.ndarray:
        return t.reshape(n, heads, dh).transpose(1, 0, 2)

    q = split(linear(x, layer.w_q, layer.b_q))
    k = split(linear(x, layer.w_k, layer.b_k))
    v = split(linear(x, layer.w_v, layer.b_v))
    scores = matmul(q, k.transpose(0, 2, 1)) / math.sqrt(dh)
    attn = masked_softmax(scores, allow)
    mixed = matmul(attn, v).transpose(1, 0, 2).reshape(n, d_x)
    return linear(mixed, layer.w_o, layer.b_o)


def run_blocks(x: np.ndarray, w: EncoderWeights, allow: np.ndarray) -> np.ndarray:
    """Run all transformer blocks over the token matrix ``x`` with the same
    attention mask in every layer; returns the final token matrix."""
    c = w.config
    allow = np.asarray(allow, dtype=bool)
    if allow.shape != (x.shape[0], x.shape[0]):
        raise DimensionError(f"attention mask {allow.shape} does not match {x.shape[0]} tokens")
    for layer in w.layers:
        if c.attention_only:
            x = x + attention(x, layer, c, allow)
            continue
        x = x + attention(layer_norm(x, layer.ln1_g, layer.ln1_b, c.eps), layer, c, allow)
        h = layer_norm(x, layer.ln2_g, layer.ln2_b, c.eps)
        x = x + linear(_quick_gelu(linear(h, layer.w_fc1, layer.b_fc1)), layer.w_fc2, layer.b_fc2)
    return x


def project(token: np.ndarray, w: EncoderWeights) -> np.ndarray:
    return matmul(layer_norm(token[None, :], w.ln_post_g, w.ln_post_b, w.config.eps), w.proj)[0]


def encode_cls_tokens(crop: np.ndarray, w: EncoderWeights) -> np.ndarray:
    x = tokenize(crop, w)
    return run_blocks(x, w, np.ones((x.shape[0], x.shape[0]), dtype=bool))


def encode_cls(crop: np.ndarray, w: EncoderWeights) -> np.ndarray:
    """Plain image embedding from the [CLS] token."""
    return project(encode_cls_tokens(crop, w)[-1], w)


def encode_obj_tokens(crop: np.ndarray, w: EncoderWeights, m: np.ndarray) -> np.ndarray:
    x = tokenize(crop, w)
    m = np.asarray(m, dtype=bool)
    if m.shape != (x.shape[0],):
        raise DimensionError(f"object mask must have {x.shape[0]} entries, got {m.shape}")
    # [OBJ] starts as a copy of the position-augmented [CLS] row
    x_obj = np.vstack([x, x[-1:]])
    return run_blocks(x_obj, w, build_attention_mask(m))


def encode_obj(crop: np.ndarray, w: EncoderWeights, m: np.ndarray) -> np.ndarray:
    """Object embedding from an [OBJ] token that only sees the patches in ``m``."""
    return project(encode_obj_tokens(crop, w, m)[-1], w)
