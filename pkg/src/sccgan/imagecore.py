"""Scalar image containers, volume file I/O and slice geometry.

Images and volumes are immutable: the backing array is copied to float32 on
construction and marked read-only, so instances can be shared freely.

Volume files come in pairs, ``<name>.json`` (header) and ``<name>.raw``
(K*H*W little-endian float32 values, slice-major then row-major)::

    {"dtype": "f32le", "shape": [K, H, W], "spacing": [sz, sy, sx],
     "modality": "MR" | "CT" | "OTHER", "intensity_range": [lo, hi]}
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple

import numpy as np

__all__ = [
    "Modality",
    "Image2D",
    "Volume3D",
    "Mask2D",
    "VolumeFormatError",
    "CT_RANGE",
    "MR_RANGE",
    "PAPER_SLICE_SHAPE",
    "PAPER_PADDED_SHAPE",
    "background_value",
    "load_volume",
    "save_volume",
    "resize_pad",
    "augment_crop",
    "to_unit_range",
    "from_unit_range",
]

CT_RANGE = (-1000.0, 3500.0)
MR_RANGE = (0.0, 3500.0)
PAPER_SLICE_SHAPE = (384, 256)
PAPER_PADDED_SHAPE = (400, 284)

_DTYPE = np.dtype("<f4")


class Modality(str, enum.Enum):
    MR = "MR"
    CT = "CT"
    OTHER = "OTHER"


class VolumeFormatError(ValueError):
    """Raised when a volume header/raw pair is malformed or inconsistent."""


def _frozen(data, ndim: int) -> np.ndarray:
    arr = np.array(data, dtype=np.float32, copy=True)
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-D array, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0])
        raise ValueError(f"non-finite value at index {bad}")
    arr.setflags(write=False)
    return arr


def _check_range(intensity_range) -> Tuple[float, float]:
    lo, hi = (float(v) for v in intensity_range)
    if not lo < hi:
        raise ValueError(f"intensity range must satisfy lo < hi, got ({lo}, {hi})")
    return lo, hi


def background_value(modality: Modality | str) -> float:
    """Fill value for padding: air (-1000 HU) for CT, 0 otherwise."""
    return CT_RANGE[0] if Modality(modality) is Modality.CT else 0.0


@dataclass(frozen=True, eq=False)
class Image2D:
    data: np.ndarray
    modality: Modality = Modality.OTHER
    intensity_range: Tuple[float, float] = MR_RANGE

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data, 2))
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "intensity_range", _check_range(self.intensity_range))
        if 0 in self.data.shape:
            raise ValueError(f"degenerate image shape {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    def with_data(self, data) -> "Image2D":
        return Image2D(data, self.modality, self.intensity_range)

    def __eq__(self, other):
        if not isinstance(other, Image2D):
            return NotImplemented
        return (
            self.modality is other.modality
            and self.intensity_range == other.intensity_range
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class Volume3D:
    data: np.ndarray
    modality: Modality = Modality.OTHER
    intensity_range: Tuple[float, float] = MR_RANGE
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data, 3))
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "intensity_range", _check_range(self.intensity_range))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.spacing) != 3:
            raise ValueError("spacing needs three components")
        if self.data.shape[0] < 1:
            raise ValueError("a volume needs at least one slice")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    @property
    def n_slices(self) -> int:
        return self.data.shape[0]

    def slice(self, k: int) -> Image2D:
        return Image2D(self.data[k], self.modality, self.intensity_range)

    @classmethod
    def from_slices(cls, slices, spacing=(1.0, 1.0, 1.0)) -> "Volume3D":
        slices = list(slices)
        if not slices:
            raise ValueError("no slices given")
        first = slices[0]
        return cls(np.stack([s.data for s in slices]), first.modality,
                   first.intensity_range, spacing)

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.modality is other.modality
            and self.intensity_range == other.intensity_range
            and self.spacing == other.spacing
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class Mask2D:
    data: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), bool))

    def __post_init__(self):
        arr = np.array(self.data, dtype=bool, copy=True)
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    @property
    def count(self) -> int:
        return int(self.data.sum())

    def check_matches(self, img) -> None:
        if tuple(self.shape) != tuple(img.shape[-2:]):
            raise ValueError(f"mask shape {self.shape} does not match image {img.shape}")


# --------------------------------------------------------------------------
# file I/O


def _pair_paths(path) -> Tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".raw")


def load_volume(path) -> Volume3D:
    """Read a ``<name>.json`` / ``<name>.raw`` pair.

    ``path`` may name either file or the common stem.
    """
    header_path, raw_path = _pair_paths(path)
    for p in (header_path, raw_path):
        if not p.is_file():
            raise FileNotFoundError(f"missing volume file: {p}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{header_path}: invalid JSON header ({exc})") from exc

    if header.get("dtype", "f32le") != "f32le":
        raise VolumeFormatError(f"{header_path}: unsupported dtype {header.get('dtype')!r}")
    try:
        shape = tuple(int(s) for s in header["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{header_path}: missing or invalid 'shape'") from exc
    if len(shape) != 3 or min(shape) < 1:
        raise VolumeFormatError(f"{header_path}: shape must be [K, H, W] with K, H, W >= 1")

    n_expected = shape[0] * shape[1] * shape[2]
    n_bytes = raw_path.stat().st_size
    if n_bytes != n_expected * _DTYPE.itemsize:
        raise VolumeFormatError(
            f"{raw_path}: shape {list(shape)} needs {n_expected * _DTYPE.itemsize} bytes, "
            f"file has {n_bytes}"
        )
    data = np.fromfile(raw_path, dtype=_DTYPE).reshape(shape)
    finite = np.isfinite(data)
    if not finite.all():
        k, i, j = (int(v) for v in np.argwhere(~finite)[0])
        raise VolumeFormatError(f"{raw_path}: non-finite value at slice {k}, row {i}, col {j}")

    return Volume3D(
        data,
        modality=header.get("modality", "OTHER"),
        intensity_range=header.get("intensity_range", MR_RANGE),
        spacing=header.get("spacing", (1.0, 1.0, 1.0)),
    )


def save_volume(v: Volume3D, path) -> None:
    """Write ``v`` as a header/raw pair; parent directories are created."""
    header_path, raw_path = _pair_paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "dtype": "f32le",
        "shape": list(v.shape),
        "spacing": list(v.spacing),
        "modality": v.modality.value,
        "intensity_range": list(v.intensity_range),
    }
    raw_path.write_bytes(np.ascontiguousarray(v.data, dtype=_DTYPE).tobytes())
    header_path.write_text(json.dumps(header, indent=2) + "\n")


# --------------------------------------------------------------------------
# geometry


def _bilinear_resize(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resampling with edge clamping."""
    h, w = a.shape
    if (h, w) == (out_h, out_w):
        return a.astype(np.float64)

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    r0, r1, fr = axis_weights(h, out_h)
    c0, c1, fc = axis_weights(w, out_w)
    a = a.astype(np.float64)
    top = a[r0][:, c0] * (1 - fc) + a[r0][:, c1] * fc
    bot = a[r1][:, c0] * (1 - fc) + a[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def _pad_centered(a: np.ndarray, out_h: int, out_w: int, fill: float) -> np.ndarray:
    h, w = a.shape
    top = (out_h - h) // 2
    left = (out_w - w) // 2
    out = np.full((out_h, out_w), fill, dtype=np.float64)
    out[top:top + h, left:left + w] = a
    return out


def resize_pad(img: Image2D, target_h: int, target_w: int) -> Image2D:
    """Aspect-preserving bilinear resize into ``target_h x target_w``, then pad.

    The scale is the largest factor keeping both dimensions within the target;
    the remainder is filled symmetrically with the modality background value
    (an odd remainder puts the extra row/column at the bottom/right).
    """
    if target_h < 1 or target_w < 1:
        raise ValueError("target dimensions must be >= 1")
    h, w = img.shape
    if (h, w) == (target_h, target_w):
        return img
    scale = min(target_h / h, target_w / w)
    new_h = min(target_h, max(1, int(round(h * scale))))
    new_w = min(target_w, max(1, int(round(w * scale))))
    resized = _bilinear_resize(img.data, new_h, new_w)
    out = _pad_centered(resized, target_h, target_w, background_value(img.modality))
    return img.with_data(out)


def augment_crop(
    img: Image2D,
    rng: np.random.Generator,
    crop_shape: Tuple[int, int] = PAPER_SLICE_SHAPE,
    padded_shape: Tuple[int, int] = PAPER_PADDED_SHAPE,
) -> Image2D:
    """Pad to ``padded_shape`` with background, then take a random ``crop_shape`` window.

    Offsets are uniform on ``{0..ph-ch} x {0..pw-cw}``; with the default shapes
    that is {0..16} x {0..28}.
    """
    if tuple(img.shape) != tuple(crop_shape):
        raise ValueError(f"augment_crop expects a {crop_shape} image, got {img.shape}")
    ph, pw = padded_shape
    ch, cw = crop_shape
    if ph < ch or pw < cw:
        raise ValueError("padded shape must be at least the crop shape")
    padded = _pad_centered(img.data, ph, pw, background_value(img.modality))
    dy = int(rng.integers(0, ph - ch + 1))
    dx = int(rng.integers(0, pw - cw + 1))
    return img.with_data(padded[dy:dy + ch, dx:dx + cw])


def to_unit_range(img):
    """Affinely map ``intensity_range`` onto [-1, 1] (values outside are not clipped)."""
    lo, hi = img.intensity_range
    data = (img.data.astype(np.float64) - lo) * (2.0 / (hi - lo)) - 1.0
    return type(img)(data, *_meta(img))


def from_unit_range(img, intensity_range=None):
    """Inverse of :func:`to_unit_range`; ``intensity_range`` overrides the tag."""
    rng = _check_range(intensity_range if intensity_range is not None else img.intensity_range)
    lo, hi = rng
    data = (img.data.astype(np.float64) + 1.0) * ((hi - lo) / 2.0) + lo
    meta = list(_meta(img))
    meta[1] = rng
    return type(img)(data, *meta)


def _meta(img):
    if isinstance(img, Volume3D):
        return img.modality, img.intensity_range, img.spacing
    return img.modality, img.intensity_range
