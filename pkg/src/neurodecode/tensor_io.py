"""Tensor files, PNG images, bilinear resizing and dataset manifests.

Tensors are plain ``numpy.float32`` arrays. On disk they use the DCTF
layout::

    magic   4 bytes  b"DCTF"
    version u8       1
    dtype   u8       1 (float32, little-endian)
    pad     u16      0
    ndim    u32 LE
    dims    ndim x u32 LE
    payload prod(dims) x f32 LE, row-major
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image, UnidentifiedImageError

MAGIC = b"DCTF"
VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sBBHI")


class TensorFormatError(ValueError):
    """Base class for malformed DCTF files."""


class BadMagicError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


class UnsupportedDtypeError(TensorFormatError):
    pass


class TruncatedTensorError(TensorFormatError):
    pass


class LengthMismatchError(TensorFormatError):
    """Payload length disagrees with the product of dims."""


class ImageDecodeError(ValueError):
    pass


class ManifestError(ValueError):
    pass


def check_tensor(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t)
    if t.ndim < 1 or any(d < 1 for d in t.shape):
        raise ValueError(f"tensor dims must be >= 1 with ndim >= 1, got {t.shape}")
    return t


def encode_tensor(t: np.ndarray) -> bytes:
    t = check_tensor(t)
    dims = t.shape
    head = _HEADER.pack(MAGIC, VERSION, DTYPE_F32, 0, len(dims))
    head += struct.pack(f"<{len(dims)}I", *dims)
    return head + np.ascontiguousarray(t, dtype="<f4").tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        if len(buf) >= 4 and buf[:4] != MAGIC:
            raise BadMagicError(f"bad magic {buf[:4]!r}")
        raise TruncatedTensorError(f"header needs {_HEADER.size} bytes, got {len(buf)}")
    magic, version, dtype, _pad, ndim = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise UnsupportedDtypeError(f"unsupported dtype code {dtype}")
    if ndim < 1:
        raise LengthMismatchError("ndim must be >= 1")
    off = _HEADER.size
    if len(buf) < off + 4 * ndim:
        raise TruncatedTensorError("file ends inside the dims table")
    dims = struct.unpack_from(f"<{ndim}I", buf, off)
    if any(d < 1 for d in dims):
        raise LengthMismatchError(f"zero-sized dim in {dims}")
    off += 4 * ndim
    n = int(np.prod(dims, dtype=np.int64))
    payload = len(buf) - off
    if payload < 4 * n:
        raise TruncatedTensorError(f"payload has {payload} bytes, dims {dims} need {4 * n}")
    if payload > 4 * n:
        raise LengthMismatchError(f"payload has {payload} bytes, dims {dims} need {4 * n}")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=off)
    return data.astype(np.float32).reshape(dims)


def write_tensor(t: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path: str | Path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# ---------------------------------------------------------------- images


def load_image(path: str | Path) -> np.ndarray:
    """Load an 8-bit PNG as float32 ``[H, W, 3]`` in ``[0, 1]``.

    Grayscale images are replicated to three channels; an alpha channel is
    dropped.
    """
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise ImageDecodeError(f"{path}: not a PNG ({im.format})")
            if im.mode in ("I", "I;16", "I;16B", "I;16L", "F", "1"):
                raise ImageDecodeError(f"{path}: unsupported bit depth (mode {im.mode})")
            im.load()
            if im.mode in ("L", "LA"):
                arr = np.asarray(im.convert("L"))[..., None].repeat(3, axis=-1)
            else:
                arr = np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"{path}: cannot decode image: {exc}") from exc
    return arr.astype(np.float32) / np.float32(255.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(img: np.ndarray, path: str | Path) -> None:
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


def _axis_weights(n_in: int, n_out: int):
    d = np.arange(n_out, dtype=np.float64)
    s = (d + 0.5) * (n_in / n_out) - 0.5
    s = np.clip(s, 0.0, n_in - 1)
    i0 = np.floor(s).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = s - i0
    return i0, i1, frac


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a ``[H, W, C]`` image with half-pixel centers.

    Source coordinates are ``(d + 0.5) * in / out - 0.5`` clamped to
    ``[0, in - 1]``.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target dims must be positive, got {out_h}x{out_w}")
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    src = img.astype(np.float64)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    # convex combinations cannot leave the source range; clip float rounding
    return np.clip(out, src.min(), src.max()).astype(np.float32)


# -------------------------------------------------------------- manifests

SPLITS = ("train", "test")


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    category_id: int
    voxel_path: str | None = None
    feature_path: str | None = None
    split: str = "train"

    def to_json(self) -> dict:
        return {
            "image": self.image_path,
            "category": self.category_id,
            "voxels": self.voxel_path,
            "features": self.feature_path,
            "split": self.split,
        }


@dataclass
class DatasetManifest:
    records: list[SampleRecord] = field(default_factory=list)
    num_categories: int | None = None
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def split(self, name: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == name]

    def indices(self, name: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.split == name]

    @property
    def categories(self) -> list[int]:
        return sorted({r.category_id for r in self.records})

    def resolve(self, p: str) -> Path:
        path = Path(p)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path


def _parse_record(i: int, obj, num_categories: int | None) -> SampleRecord:
    if not isinstance(obj, dict):
        raise ManifestError(f"entry {i}: expected an object")
    keys = {"image", "category", "voxels", "features", "split"}
    extra = set(obj) - keys
    if extra:
        raise ManifestError(f"entry {i}: unknown keys {sorted(extra)}")
    missing = {"image", "category", "split"} - set(obj)
    if missing:
        raise ManifestError(f"entry {i}: missing keys {sorted(missing)}")
    image, cat, split = obj["image"], obj["category"], obj["split"]
    if not isinstance(image, str):
        raise ManifestError(f"entry {i}: image must be a string")
    if isinstance(cat, bool) or not isinstance(cat, int) or cat < 0:
        raise ManifestError(f"entry {i}: category must be a non-negative integer")
    if num_categories is not None and cat >= num_categories:
        raise ManifestError(f"entry {i}: category {cat} out of range (< {num_categories})")
    if split not in SPLITS:
        raise ManifestError(f"entry {i}: split must be one of {SPLITS}, got {split!r}")
    for key in ("voxels", "features"):
        if obj.get(key) is not None and not isinstance(obj[key], str):
            raise ManifestError(f"entry {i}: {key} must be a string or null")
    return SampleRecord(image, cat, obj.get("voxels"), obj.get("features"), split)


def load_manifest(path: str | Path, num_categories: int | None = None) -> DatasetManifest:
    """Parse and validate a JSON manifest.

    The document is either a bare array of records or an object
    ``{"num_categories": K, "records": [...]}``. Relative paths resolve
    against the manifest's directory and must exist.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON: {exc}") from exc
    if isinstance(doc, dict):
        if set(doc) - {"num_categories", "records"}:
            raise ManifestError(f"{path}: unknown top-level keys {sorted(set(doc) - {'num_categories', 'records'})}")
        num_categories = doc.get("num_categories", num_categories)
        entries = doc.get("records", [])
    else:
        entries = doc
    if not isinstance(entries, list):
        raise ManifestError(f"{path}: expected a list of records")
    records = [_parse_record(i, obj, num_categories) for i, obj in enumerate(entries)]
    manifest = DatasetManifest(records, num_categories, path.parent)
    for i, r in enumerate(records):
        for p in (r.image_path, r.voxel_path, r.feature_path):
            if p is not None and not manifest.resolve(p).exists():
                raise ManifestError(f"entry {i}: dangling path {p}")
    return manifest


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    records = [r.to_json() for r in manifest.records]
    doc: object = records
    if manifest.num_categories is not None:
        doc = {"num_categories": manifest.num_categories, "records": records}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def stack_tensors(paths: Iterable[Path]) -> np.ndarray:
    return np.stack([read_tensor(p).reshape(-1) for p in paths])
