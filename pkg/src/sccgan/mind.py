"""Modality-independent neighbourhood descriptor (MIND), 2-D.

For every voxel ``x`` and offset ``a`` in the non-local region, the Gaussian
weighted squared distance between the patches at ``x`` and ``x + a`` is turned
into ``exp(-D(x, a) / V(x))`` and normalised so that each voxel's largest
component is 1.  ``V`` is the mean patch distance to the 4-neighbourhood.

Two evaluations of the patch distance are provided: a literal sum over patch
positions (:func:`patch_distance_direct`) and the translate / square /
convolve form (:func:`patch_distance_conv`).  Both treat out-of-image samples
by edge clamping: a patch sample that falls outside the image is replaced by
the nearest border position, and the comparison at that position is between
``I`` and ``I`` translated by ``a`` (itself edge clamped).

Channels are ordered row-major over ``(dy, dx)`` with ``dy, dx`` in
``-r..r``, the centre skipped unless ``include_center`` is set.  At the
defaults (9x9 region, 7x7 patch, sigma 2) there are 80 channels.

All arithmetic is float64; results are stored as float32 containers.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import List, Tuple

import numpy as np

from ._numeric import gaussian_kernel1d, gaussian_kernel2d, separable_correlate
from .imagecore import Image2D, Modality, Volume3D

__all__ = [
    "MindParams",
    "MindFeatureMap",
    "MAX_EXPONENT",
    "NEIGHBOURS_4",
    "translate",
    "patch_distance_direct",
    "patch_distance_conv",
    "local_variance",
    "mind_extract",
    "mind_l1",
]

# Exponent cap: keeps every component >= exp(-80) > 0 in float32 storage.
MAX_EXPONENT = 80.0

NEIGHBOURS_4 = ((-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass(frozen=True)
class MindParams:
    region_radius: int = 4
    patch_radius: int = 3
    sigma: float = 2.0
    include_center: bool = False
    variance_clamp: Tuple[float, float] = (1e-3, 1e3)
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.region_radius < 1:
            raise ValueError("region_radius must be >= 1")
        if self.patch_radius < 0:
            raise ValueError("patch_radius must be >= 0")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        lo, hi = self.variance_clamp
        if not 0 < lo < hi:
            raise ValueError("variance_clamp needs 0 < rel_lo < rel_hi")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        object.__setattr__(self, "variance_clamp", (float(lo), float(hi)))

    @cached_property
    def offsets(self) -> List[Tuple[int, int]]:
        r = self.region_radius
        return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)
                if self.include_center or (dy, dx) != (0, 0)]

    @property
    def n_channels(self) -> int:
        return len(self.offsets)

    @property
    def kernel1d(self) -> np.ndarray:
        return gaussian_kernel1d(self.patch_radius, self.sigma)

    @property
    def kernel2d(self) -> np.ndarray:
        return gaussian_kernel2d(self.patch_radius, self.sigma)

    def to_dict(self) -> dict:
        return {
            "region_radius": self.region_radius,
            "patch_radius": self.patch_radius,
            "sigma": self.sigma,
            "include_center": self.include_center,
            "variance_clamp": list(self.variance_clamp),
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MindParams":
        d = dict(d)
        if "variance_clamp" in d:
            d["variance_clamp"] = tuple(d["variance_clamp"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class MindFeatureMap:
    """Per-voxel descriptor, stored channel-major as ``(channels, H, W)``."""

    data: np.ndarray
    params: MindParams

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim != 3 or arr.shape[0] != self.params.n_channels:
            raise ValueError(f"expected ({self.params.n_channels}, H, W), got {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def to_volume(self) -> Volume3D:
        """Pack as a ``[channels, H, W]`` volume (modality OTHER, range [0, 1])."""
        return Volume3D(self.data, Modality.OTHER, (0.0, 1.0))


def _array(img) -> np.ndarray:
    data = img.data if isinstance(img, Image2D) else img
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {arr.shape}")
    return arr


def _wrap(like, arr: np.ndarray):
    if isinstance(like, Image2D):
        return like.with_data(arr)
    return arr


def _check_offset(alpha, p: MindParams) -> Tuple[int, int]:
    dy, dx = (int(v) for v in alpha)
    if (dy, dx) not in p.offsets and (dy, dx) not in NEIGHBOURS_4:
        raise ValueError(f"offset {(dy, dx)} is not in the non-local region")
    return dy, dx


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = a.shape
    rows = np.clip(np.arange(h) + dy, 0, h - 1)
    cols = np.clip(np.arange(w) + dx, 0, w - 1)
    return a[rows[:, None], cols[None, :]]


def translate(img, alpha):
    """``out(x) = in(clamp(x + alpha))``: edge-clamped translation, same shape."""
    a = _array(img)
    dy, dx = (int(v) for v in alpha)
    if abs(dy) > a.shape[0] or abs(dx) > a.shape[1]:
        raise ValueError("translation larger than the image")
    return _wrap(img, _shift(a, dy, dx))


def patch_distance_direct(img, alpha, p: MindParams = MindParams()):
    """Gaussian weighted patch distance by explicit summation over patch positions."""
    a = _array(img)
    dy, dx = _check_offset(alpha, p)
    h, w = a.shape
    r = p.patch_radius
    weights = p.kernel2d
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    out = np.zeros((h, w))
    for py in range(-r, r + 1):
        qy = np.clip(ys + py, 0, h - 1)
        qy_shift = np.clip(qy + dy, 0, h - 1)
        for px in range(-r, r + 1):
            qx = np.clip(xs + px, 0, w - 1)
            qx_shift = np.clip(qx + dx, 0, w - 1)
            diff = a[qy, qx] - a[qy_shift, qx_shift]
            out += weights[py + r, px + r] * diff * diff
    return _wrap(img, out)


def _blur(sq: np.ndarray, p: MindParams) -> np.ndarray:
    r = p.patch_radius
    if r == 0:
        return sq
    spec = [(0, 0)] * (sq.ndim - 2) + [(r, r), (r, r)]
    k = p.kernel1d
    return separable_correlate(np.pad(sq, spec, mode="edge"), k, k)


def _distances(a: np.ndarray, offsets, p: MindParams) -> np.ndarray:
    shifted = np.stack([_shift(a, dy, dx) for dy, dx in offsets])
    return _blur((a[None] - shifted) ** 2, p)


def patch_distance_conv(img, alpha, p: MindParams = MindParams()):
    """Same quantity as :func:`patch_distance_direct` via translate, square, Gaussian convolution."""
    a = _array(img)
    dy, dx = _check_offset(alpha, p)
    return _wrap(img, _distances(a, [(dy, dx)], p)[0])


def _clamp_variance(v_raw: np.ndarray, p: MindParams) -> np.ndarray:
    m = float(v_raw.mean())
    if m == 0.0:
        return np.full_like(v_raw, p.epsilon)
    lo, hi = p.variance_clamp
    return np.clip(v_raw, lo * m, hi * m)


def local_variance(img, p: MindParams = MindParams(), clamp: bool = True):
    """Mean patch distance to the four unit neighbours.

    With ``clamp`` the result is clipped to ``variance_clamp`` times its image
    mean, or set to ``epsilon`` everywhere when that mean is zero.
    """
    a = _array(img)
    v = _distances(a, NEIGHBOURS_4, p).mean(axis=0)
    if clamp:
        v = _clamp_variance(v, p)
    return _wrap(img, v)


def _features(a: np.ndarray, p: MindParams) -> np.ndarray:
    d = _distances(a, p.offsets, p)
    v = _clamp_variance(_distances(a, NEIGHBOURS_4, p).mean(axis=0), p)
    ratio = np.minimum(d / v[None], MAX_EXPONENT)
    return np.exp(ratio.min(axis=0, keepdims=True) - ratio)


def mind_extract(img, p: MindParams = MindParams()) -> MindFeatureMap:
    """Descriptor of a 2-D image; every voxel's largest component is exactly 1."""
    return MindFeatureMap(_features(_array(img), p), p)


def mind_l1(a, b, p: MindParams = MindParams()) -> float:
    """Mean absolute descriptor difference over voxels and channels."""
    fa = a if isinstance(a, MindFeatureMap) else mind_extract(a, p)
    fb = b if isinstance(b, MindFeatureMap) else mind_extract(b, p)
    if fa.data.shape != fb.data.shape:
        raise ValueError("feature maps differ in shape")
    return float(np.mean(np.abs(fa.data.astype(np.float64) - fb.data.astype(np.float64))))
