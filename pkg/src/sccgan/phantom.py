"""Paired pseudo-MR / pseudo-CT head phantoms with known geometry.

Each slice is a composite of elliptical layers (scalp, skull shell, brain,
white matter, ventricles) plus a few seeded blobs.  The head shrinks towards
both ends of the volume, so peripheral slices carry less "tissue" than medial
ones.  MR and CT renderings share one label map; the label-to-intensity
tables are deliberately not monotone with respect to each other (the skull is
dark on MR and bright on CT, for instance), so intensity-based similarity
fails while structural similarity holds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
from scipy import ndimage

from .imagecore import CT_RANGE, MR_RANGE, Mask2D, Modality, Volume3D

__all__ = [
    "PhantomSpec",
    "Phantom",
    "LABELS",
    "MR_VALUES",
    "CT_VALUES",
    "generate",
    "corrupt",
    "CORRUPTIONS",
]

LABELS = {
    0: "background",
    1: "scalp",
    2: "skull",
    3: "grey matter",
    4: "white matter",
    5: "ventricle",
    6: "lesion",
    7: "calcification",
}

# geometry -> intensity lookup tables.  Soft-tissue CT contrast is exaggerated
# so that each modality has visible internal structure at 64x64.
MR_VALUES = {0: 0.0, 1: 1400.0, 2: 250.0, 3: 1000.0, 4: 1600.0, 5: 300.0, 6: 2600.0, 7: 600.0}
CT_VALUES = {0: -1000.0, 1: 100.0, 2: 1600.0, 3: 500.0, 4: 250.0, 5: 0.0, 6: 900.0, 7: 1400.0}

CORRUPTIONS = ("permute_blocks", "affine_intensity", "local_deform")


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    slices: int = 24
    height: int = 64
    width: int = 64
    n_structures: int = 3
    skull: bool = True
    blur: float = 0.6
    noise: float = 0.0
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    mr_values: Dict[int, float] = field(default_factory=lambda: dict(MR_VALUES))
    ct_values: Dict[int, float] = field(default_factory=lambda: dict(CT_VALUES))

    def __post_init__(self):
        if self.slices < 1 or self.height < 8 or self.width < 8:
            raise ValueError("phantom needs >= 1 slice and at least 8x8 pixels")
        if self.n_structures < 0:
            raise ValueError("n_structures must be >= 0")
        if self.blur < 0 or self.noise < 0:
            raise ValueError("blur and noise must be >= 0")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "slices": self.slices, "height": self.height,
            "width": self.width, "n_structures": self.n_structures, "skull": self.skull,
            "blur": self.blur, "noise": self.noise, "spacing": list(self.spacing),
        }


@dataclass(frozen=True, eq=False)
class Phantom:
    mr: Volume3D
    ct: Volume3D
    masks: List[Mask2D]
    labels: Volume3D

    def __iter__(self):
        return iter((self.mr, self.ct, self.masks, self.labels))


def _ellipse(yy, xx, cy, cx, ay, ax, theta=0.0):
    c, s = np.cos(theta), np.sin(theta)
    u = (yy - cy) * c + (xx - cx) * s
    v = -(yy - cy) * s + (xx - cx) * c
    return (u / ay) ** 2 + (v / ax) ** 2 <= 1.0


def _slice_labels(spec: PhantomSpec, geom: dict, t: float) -> np.ndarray:
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    extent = np.sqrt(max(0.0, 1.0 - 0.75 * (2.0 * t - 1.0) ** 2))
    cy, cx, theta = geom["cy"], geom["cx"], geom["theta"]
    ay = geom["ay"] * extent
    ax = geom["ax"] * extent
    lab = np.zeros((h, w), np.int16)
    if ay < 1.0 or ax < 1.0:
        return lab

    lab[_ellipse(yy, xx, cy, cx, ay, ax, theta)] = 1
    shell = 0.86 if spec.skull else 1.0
    inner = 0.72
    if spec.skull:
        lab[_ellipse(yy, xx, cy, cx, ay * shell, ax * shell, theta)] = 2
    brain = _ellipse(yy, xx, cy, cx, ay * inner, ax * inner, theta)
    lab[brain] = 3
    wob = 1.0 + 0.08 * np.sin(geom["wm_freq"] * np.arctan2(yy - cy, xx - cx) + geom["wm_phase"])
    wm = _ellipse(yy, xx, cy + 0.05 * ay, cx, ay * 0.5 * wob, ax * 0.48 * wob, theta) & brain
    lab[wm] = 4
    vent_scale = max(0.0, 1.0 - 2.2 * abs(t - 0.5))
    if vent_scale > 0.15:
        for side in (-1.0, 1.0):
            vy = cy - 0.05 * ay
            vx = cx + side * 0.16 * ax
            v = _ellipse(yy, xx, vy, vx, 0.22 * ay * vent_scale, 0.07 * ax * vent_scale + 0.6,
                         theta + side * 0.25)
            lab[v & brain] = 5
    for blob in geom["blobs"]:
        prof = max(0.0, 1.0 - ((t - blob["t0"]) / blob["tw"]) ** 2)
        if prof <= 0.05:
            continue
        by = cy + blob["ry"] * ay * inner
        bx = cx + blob["rx"] * ax * inner
        b = _ellipse(yy, xx, by, bx, blob["size"] * prof * ay + 0.5, blob["size"] * prof * ax + 0.5)
        lab[b & brain] = blob["label"]
    return lab


def _geometry(spec: PhantomSpec, rng: np.random.Generator) -> dict:
    h, w = spec.height, spec.width
    geom = {
        "cy": h / 2.0 + rng.uniform(-0.03, 0.03) * h,
        "cx": w / 2.0 + rng.uniform(-0.03, 0.03) * w,
        "ay": rng.uniform(0.40, 0.45) * h,
        "ax": rng.uniform(0.33, 0.40) * w,
        "theta": rng.uniform(-0.2, 0.2),
        "wm_freq": float(rng.integers(3, 7)),
        "wm_phase": rng.uniform(0, 2 * np.pi),
        "blobs": [],
    }
    for _ in range(spec.n_structures):
        r = rng.uniform(0.1, 0.6)
        phi = rng.uniform(0, 2 * np.pi)
        geom["blobs"].append({
            "ry": r * np.sin(phi),
            "rx": r * np.cos(phi),
            "size": rng.uniform(0.06, 0.13),
            "t0": rng.uniform(0.25, 0.75),
            "tw": rng.uniform(0.2, 0.45),
            "label": int(rng.choice([6, 7])),
        })
    return geom


def _render(labels: np.ndarray, table: Dict[int, float], spec: PhantomSpec,
            rng: np.random.Generator, value_range) -> np.ndarray:
    lut = np.zeros(max(LABELS) + 1)
    for k, v in table.items():
        lut[k] = v
    img = lut[labels]
    if spec.blur > 0:
        img = ndimage.gaussian_filter(img, sigma=(0, spec.blur, spec.blur), mode="nearest")
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, img.shape) * (labels > 0)
    return np.clip(img, *value_range)


def generate(spec: PhantomSpec = PhantomSpec()) -> Phantom:
    """Render a paired MR/CT phantom; identical seeds give bit-identical output."""
    rng = np.random.default_rng(spec.seed)
    geom = _geometry(spec, rng)
    k = spec.slices
    ts = np.linspace(0.0, 1.0, k) if k > 1 else np.array([0.5])
    labels = np.stack([_slice_labels(spec, geom, float(t)) for t in ts])
    noise_rng = np.random.default_rng([spec.seed, 1])
    mr = _render(labels, spec.mr_values, spec, noise_rng, MR_RANGE)
    ct = _render(labels, spec.ct_values, spec, noise_rng, CT_RANGE)
    spacing = spec.spacing
    return Phantom(
        mr=Volume3D(mr, Modality.MR, MR_RANGE, spacing),
        ct=Volume3D(ct, Modality.CT, CT_RANGE, spacing),
        masks=[Mask2D(lab > 0) for lab in labels],
        labels=Volume3D(labels.astype(np.float32), Modality.OTHER,
                        (0.0, float(max(LABELS))), spacing),
    )


# ----------------------------------------------------------------------------
# controlled degradations


def _permute_blocks(a: np.ndarray, rng, block: int) -> np.ndarray:
    h, w = a.shape
    nby, nbx = h // block, w // block
    out = a.copy()
    tiles = [(by, bx) for by in range(nby) for bx in range(nbx)]
    order = rng.permutation(len(tiles))
    for (by, bx), src in zip(tiles, order):
        sy, sx = tiles[src]
        out[by * block:(by + 1) * block, bx * block:(bx + 1) * block] = \
            a[sy * block:(sy + 1) * block, sx * block:(sx + 1) * block]
    return out


def _local_deform(a: np.ndarray, rng, strength: float, smoothness: float) -> np.ndarray:
    h, w = a.shape
    field_ = rng.standard_normal((2, h, w))
    field_ = np.stack([ndimage.gaussian_filter(f, smoothness, mode="wrap") for f in field_])
    peak = np.max(np.sqrt((field_ ** 2).sum(axis=0)))
    if peak > 0:
        field_ *= strength / peak
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return ndimage.map_coordinates(a, [yy + field_[0], xx + field_[1]], order=1, mode="nearest")


def corrupt(vol: Volume3D, kind: str, rng: np.random.Generator, strength: float = 1.0,
            block: int = 8) -> Volume3D:
    """Slice-wise controlled degradation of ``vol``.

    - ``permute_blocks``: shuffle ``block x block`` tiles (structure destroyed;
      ``strength`` unused).
    - ``affine_intensity``: ``a*v + b`` with ``a`` in [0.6, 1.4] and ``|b|`` up
      to ``100*strength`` (structure kept).
    - ``local_deform``: smooth random warp whose largest displacement is
      ``2*strength`` pixels; ``strength=0`` returns the input unchanged.
    """
    data = vol.data.astype(np.float64)
    if kind == "affine_intensity":
        a = rng.uniform(0.6, 1.4)
        b = rng.uniform(-100.0, 100.0) * strength
        out = a * data + b
    elif kind == "permute_blocks":
        out = np.stack([_permute_blocks(s, rng, block) for s in data])
    elif kind == "local_deform":
        if strength == 0:
            return vol
        out = np.stack([_local_deform(s, rng, 2.0 * strength, 4.0) for s in data])
    else:
        raise ValueError(f"unknown corruption {kind!r}; expected one of {CORRUPTIONS}")
    return Volume3D(out, vol.modality, vol.intensity_range, vol.spacing)
