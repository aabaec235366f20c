"""File formats: the OADP-TENSORS container, PPM images, dataset manifests,
category tables and run configuration.

OADP-TENSORS layout (all little-endian)::

    magic     8 bytes  b"OADPTNSR"
    version   u16      currently 1
    count     u32
    per entry:
      name    u16 length + UTF-8 bytes
      dtype   u8       1 = float32, 2 = float64
      rank    u8
      dims    u32 x rank
      payload prod(dims) values
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from oadp.errors import ConfigError, FormatError
from oadp.geometry import Box, Proposal

MAGIC = b"OADPTNSR"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        # mkstemp creates 0600; give the file the mode a plain open() would
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        if arr.dtype not in _CODES:
            arr = arr.astype(np.float64)
        code = _CODES[arr.dtype]
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise FormatError(f"rank {arr.ndim} too large for {name}")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode_tensors(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("truncated tensor container")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise FormatError("bad magic: not an OADP-TENSORS file")
    version, count = struct.unpack("<HI", take(6))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported container version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8") from None
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name!r}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = _DTYPES[code]
        nbytes = math.prod(dims) * dtype.itemsize
        arr = np.frombuffer(bytes(take(nbytes)), dtype=dtype).reshape(dims)
        out[name] = arr.astype(dtype.newbyteorder("="))
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last tensor")
    return out


def write_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_tensors(tensors))


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


# -- images ------------------------------------------------------------------


def _ppm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # one whitespace byte separates header and raster


def read_ppm(path: str | Path) -> np.ndarray:
    """Binary P6, 8-bit PPM to an ``H x W x 3`` float array in [0, 1]."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), start = _ppm_tokens(data, 4)
    if magic != b"P6":
        raise FormatError(f"{path}: only binary P6 PPM is supported")
    width, height, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    raster = data[start:start + width * height * 3]
    if len(raster) != width * height * 3:
        raise FormatError(f"{path}: truncated PPM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).astype(np.float64) / 255.0


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=float)
    h, w = image.shape[:2]
    raster = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8).tobytes()
    atomic_write_bytes(path, f"P6\n{w} {h}\n255\n".encode("ascii") + raster)


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    tensors = read_tensors(path)
    if "image" not in tensors:
        raise FormatError(f"{path}: tensor container has no 'image' entry")
    image = np.asarray(tensors["image"], dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"{path}: image tensor must be H x W x 3, got {image.shape}")
    return image


def save_image(path: str | Path, image: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        write_ppm(path, image)
    else:
        write_tensors(path, {"image": np.asarray(image, dtype=np.float64)})


# -- manifests ---------------------------------------------------------------


@dataclass
class Annotation:
    box: Box
    category: str


@dataclass
class ManifestEntry:
    image_id: str
    image: str
    size: tuple[int, int]
    proposals: list[Proposal] = field(default_factory=list)
    annotations: list[Annotation] = field(default_factory=list)
    root: Path = field(default=Path("."), repr=False, compare=False)

    def image_path(self) -> Path:
        p = Path(self.image)
        return p if p.is_absolute() else self.root / p

    def load_image(self) -> np.ndarray:
        image = load_image(self.image_path())
        w, h = self.size
        if image.shape[:2] != (h, w):
            raise FormatError(f"image {self.image_id}: file is {image.shape[1]}x{image.shape[0]}, manifest says {w}x{h}")
        return image

    def to_json(self) -> dict[str, Any]:
        return {
            "image_id": self.image_id,
            "image": self.image,
            "size": list(self.size),
            "proposals": [{"box": p.box.as_list(), "objectness": p.objectness} for p in self.proposals],
            "annotations": [{"box": a.box.as_list(), "category": a.category} for a in self.annotations],
        }


def parse_manifest_line(obj: Mapping[str, Any], root: Path = Path(".")) -> ManifestEntry:
    try:
        w, h = (int(v) for v in obj["size"])
        return ManifestEntry(
            image_id=str(obj["image_id"]),
            image=str(obj["image"]),
            size=(w, h),
            proposals=[Proposal(Box.from_list(p["box"]), float(p["objectness"])) for p in obj.get("proposals", [])],
            annotations=[Annotation(Box.from_list(a["box"]), str(a["category"])) for a in obj.get("annotations", [])],
            root=root,
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"bad manifest record: {exc}") from None


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return records


def dumps_jsonl(records: Iterable[Mapping[str, Any]]) -> str:
    return "".join(json.dumps(r, sort_keys=False, separators=(", ", ": ")) + "\n" for r in records)


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    return [parse_manifest_line(obj, path.parent) for obj in read_jsonl(path)]


def write_manifest(path: str | Path, entries: Iterable[ManifestEntry]) -> None:
    atomic_write_text(path, dumps_jsonl(e.to_json() for e in entries))


# -- run configuration -------------------------------------------------------


@dataclass
class RunConfig:
    r: float = 1.0
    lam: float = 2.0 / 3.0
    gamma: float = 0.3
    w_O: float = 0.5
    w_B: float = 0.25
    w_G: float = 0.25
    R: int | None = None  # block side; defaults to the encoder resolution
    nms_iou: float = 0.5
    score_threshold: float = 0.0
    max_per_image: int = 100
    seed: int = 0
    precision: str = "float64"
    all_novel: bool = False
    temperature: float = 1.0
    l1_reduction: str = "mean"

    _ALIASES = {"lambda": "lam"}

    def __post_init__(self) -> None:
        if not 0.0 < self.lam < 1.0:
            raise ConfigError(f"lambda must lie in (0, 1), got {self.lam}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.r <= 0:
            raise ConfigError(f"r must be positive, got {self.r}")
        if min(self.w_O, self.w_B, self.w_G) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 < self.nms_iou < 1.0:
            raise ConfigError(f"nms_iou must lie in (0, 1), got {self.nms_iou}")
        if self.score_threshold < 0:
            raise ConfigError("score_threshold must be non-negative")
        if self.max_per_image < 1:
            raise ConfigError("max_per_image must be at least 1")
        if self.precision != "float64":
            raise ConfigError(f"unsupported precision {self.precision!r}; only float64 is implemented")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.l1_reduction not in ("mean", "sum"):
            raise ConfigError(f"l1_reduction must be 'mean' or 'sum', got {self.l1_reduction!r}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            name = cls._ALIASES.get(key, key)
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = value
        return cls(**kwargs)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        return out


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return RunConfig.from_dict(data)
