"""Synthetic-CT evaluation: MAE, PSNR, SSIM and SSIM over high-gradient voxels.

Everything is computed slice-wise in 2-D inside a head mask and pooled over
the masked voxels of a volume.  SSIM uses an 11x11 Gaussian window
(sigma 1.5, unit sum, edge-replicated borders) with K1 = 0.01, K2 = 0.03 and
a dynamic range of 4500 HU.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from ._numeric import gaussian_kernel1d, separable_correlate
from .imagecore import Image2D, Mask2D, Volume3D

__all__ = [
    "PEAK",
    "head_mask",
    "head_masks",
    "mae",
    "psnr",
    "ssim_map",
    "ssim",
    "high_gradient_region",
    "ssim_hg",
    "VolumeMetrics",
    "MetricReport",
    "evaluate_volume",
    "evaluate",
]

PEAK = 4500.0
SSIM_RADIUS = 5
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return yy ** 2 + xx ** 2 <= radius ** 2


def head_mask(mr: Image2D, threshold: float = 0.02, closing_radius: int = 3) -> Mask2D:
    """Threshold at 2% of the MR range, close, keep the largest component, fill holes."""
    lo, hi = mr.intensity_range
    fg = mr.data > lo + threshold * (hi - lo)
    if not fg.any():
        return Mask2D(np.zeros(mr.shape, bool))
    r = closing_radius
    if r > 0:
        padded = np.pad(fg, r)
        padded = ndimage.binary_closing(padded, structure=_disk(r))
        fg = padded[r:-r, r:-r]
    labels, n = ndimage.label(fg)
    if n > 1:
        sizes = ndimage.sum(fg, labels, index=np.arange(1, n + 1))
        fg = labels == (1 + int(np.argmax(sizes)))
    return Mask2D(ndimage.binary_fill_holes(fg))


def head_masks(mr: Volume3D, **kw) -> List[Mask2D]:
    return [head_mask(mr.slice(k), **kw) for k in range(mr.n_slices)]


def _stack_mask(mask, shape) -> np.ndarray:
    """Accept a Mask2D, a list of them, or a bool array; return a bool array of ``shape``."""
    if isinstance(mask, Mask2D):
        m = mask.data
    elif isinstance(mask, (list, tuple)):
        m = np.stack([x.data if isinstance(x, Mask2D) else np.asarray(x, bool) for x in mask])
    else:
        m = np.asarray(mask, dtype=bool)
    if m.shape != tuple(shape):
        raise ValueError(f"mask shape {m.shape} does not match image shape {tuple(shape)}")
    return m


def _pair(gt, syn):
    a = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    b = np.asarray(getattr(syn, "data", syn), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _masked(mask_arr: np.ndarray) -> np.ndarray:
    if not mask_arr.any():
        raise ValueError("empty mask")
    return mask_arr


def mae(gt, syn, mask) -> float:
    a, b = _pair(gt, syn)
    m = _masked(_stack_mask(mask, a.shape))
    return float(np.mean(np.abs(a - b)[m]))


def psnr(gt, syn, mask, peak: float = PEAK) -> float:
    """``20 log10(peak) - 10 log10(MSE)`` over the mask; ``inf`` for identical inputs."""
    a, b = _pair(gt, syn)
    m = _masked(_stack_mask(mask, a.shape))
    mse = float(np.mean(((a - b) ** 2)[m]))
    if mse == 0.0:
        return math.inf
    return 20.0 * math.log10(peak) - 10.0 * math.log10(mse)


def _window_mean(x: np.ndarray) -> np.ndarray:
    r = SSIM_RADIUS
    k = gaussian_kernel1d(r, SSIM_SIGMA)
    return separable_correlate(np.pad(x, r, mode="edge"), k, k)


def ssim_map(gt, syn, dynamic_range: float = PEAK) -> np.ndarray:
    """Per-pixel SSIM of two 2-D images."""
    a, b = _pair(gt, syn)
    if a.ndim != 2:
        raise ValueError("ssim_map works on 2-D images")
    c1 = (K1 * dynamic_range) ** 2
    c2 = (K2 * dynamic_range) ** 2
    mu_a, mu_b = _window_mean(a), _window_mean(b)
    var_a = _window_mean(a * a) - mu_a * mu_a
    var_b = _window_mean(b * b) - mu_b * mu_b
    cov = _window_mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def _slices(a: np.ndarray) -> np.ndarray:
    return a[None] if a.ndim == 2 else a


def ssim(gt, syn, mask, dynamic_range: float = PEAK) -> float:
    """Mean SSIM over the mask; for volumes, slice means weighted by mask size."""
    a, b = _pair(gt, syn)
    m = _masked(_stack_mask(mask, a.shape))
    total, count = 0.0, 0
    for sa, sb, sm in zip(_slices(a), _slices(b), _slices(m)):
        if sm.any():
            total += float(ssim_map(sa, sb, dynamic_range)[sm].sum())
            count += int(sm.sum())
    return total / count


def _sobel_magnitude(a: np.ndarray) -> np.ndarray:
    gy = ndimage.sobel(a, axis=0, mode="nearest")
    gx = ndimage.sobel(a, axis=1, mode="nearest")
    return np.hypot(gx, gy)


def high_gradient_region(gt, mask, percentile: float = 90.0) -> np.ndarray:
    """Mask voxels whose ground-truth Sobel magnitude reaches the in-mask percentile.

    Thresholds are computed per slice.
    """
    a = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    m = _stack_mask(mask, a.shape)
    out = np.zeros(a.shape, bool)
    for sa, sm, so in zip(_slices(a), _slices(m), _slices(out)):
        if not sm.any():
            continue
        mag = _sobel_magnitude(sa)
        thr = np.percentile(mag[sm], percentile)
        so[...] = sm & (mag >= thr)
    return out


def ssim_hg(gt, syn, mask, percentile: float = 90.0, dynamic_range: float = PEAK) -> float:
    region = high_gradient_region(gt, mask, percentile)
    if not region.any():
        raise ValueError("empty high-gradient region")
    return ssim(gt, syn, region, dynamic_range)


# ----------------------------------------------------------------------------
# reports


@dataclass
class VolumeMetrics:
    name: str
    mae: float
    psnr: float
    ssim: float
    ssim_hg: float
    mask_voxels: int
    hg_voxels: int


METRIC_FIELDS = ("mae", "psnr", "ssim", "ssim_hg")


@dataclass
class MetricReport:
    volumes: List[VolumeMetrics] = field(default_factory=list)
    mask_source: str = "head_mask(MR)"

    def aggregate(self) -> dict:
        out = {}
        for f in METRIC_FIELDS:
            vals = np.array([getattr(v, f) for v in self.volumes], dtype=np.float64)
            if np.all(vals == vals[0]):
                # also covers a set of identical infinite PSNRs
                out[f] = {"mean": float(vals[0]), "std": 0.0}
            elif np.all(np.isfinite(vals)):
                out[f] = {"mean": float(vals.mean()), "std": float(vals.std())}
            else:
                # mixed finite / infinite PSNR: mean is inf, spread undefined
                out[f] = {"mean": float(vals.mean()), "std": math.nan}
        return out

    def to_dict(self) -> dict:
        return {
            "mask_source": self.mask_source,
            "volumes": [_jsonable(asdict(v)) for v in self.volumes],
            "aggregate": _jsonable(self.aggregate()),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", *METRIC_FIELDS, "mask_voxels", "hg_voxels"])
        for v in self.volumes:
            w.writerow([v.name, *(_fmt(getattr(v, f)) for f in METRIC_FIELDS),
                        v.mask_voxels, v.hg_voxels])
        agg = self.aggregate()
        w.writerow(["mean", *(_fmt(agg[f]["mean"]) for f in METRIC_FIELDS), "", ""])
        w.writerow(["std", *(_fmt(agg[f]["std"]) for f in METRIC_FIELDS), "", ""])
        return buf.getvalue()


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    return obj


def evaluate_volume(gt: Volume3D, syn: Volume3D, masks: Sequence[Mask2D], name: str = "volume",
                    percentile: float = 90.0) -> VolumeMetrics:
    m = _stack_mask(list(masks), gt.shape)
    hg = high_gradient_region(gt, m, percentile)
    return VolumeMetrics(
        name=name,
        mae=mae(gt, syn, m),
        psnr=psnr(gt, syn, m),
        ssim=ssim(gt, syn, m),
        ssim_hg=ssim(gt, syn, _masked(hg)),
        mask_voxels=int(m.sum()),
        hg_voxels=int(hg.sum()),
    )


def evaluate(gts: Sequence[Volume3D], syns: Sequence[Volume3D], mrs: Sequence[Volume3D],
             names: Optional[Sequence[str]] = None) -> MetricReport:
    """Metrics for each (ground truth, synthetic, MR) triple; masks come from the MR."""
    if not (len(gts) == len(syns) == len(mrs)):
        raise ValueError("need the same number of gt, syn and mr volumes")
    names = list(names) if names is not None else [f"volume{i}" for i in range(len(gts))]
    report = MetricReport()
    for gt, syn, mr, name in zip(gts, syns, mrs, names):
        report.volumes.append(evaluate_volume(gt, syn, head_masks(mr), name))
    return report
