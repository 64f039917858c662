"""Selection of unpaired MR/CT training slices.

Position-based selection (PBS) linearly aligns the two volumes by slice index
and picks a CT slice a few positions around the aligned one::

    b = round(i * (K_ct - 1) / (K_mr - 1))          # half away from zero
    T(i) = b + m,  m ~ U{-j..j}    if j <= b < K_ct - j
    T(i) = b                       otherwise

with jitter ``j = 5`` by default.  The band condition keeps ``T(i)`` inside
``[0, K_ct - 1]`` without clamping.  RANDOM mode draws both slices
independently.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .imagecore import Image2D, Volume3D, augment_crop

__all__ = [
    "SamplingMode",
    "PairingPlan",
    "base_index",
    "pbs_index",
    "next_pair_indices",
    "next_pair",
    "PAPER_MARGINS",
]

# 400x284 padding around 384x256 slices
PAPER_MARGINS = (16, 28)


class SamplingMode(str, enum.Enum):
    PBS = "PBS"
    RANDOM = "RANDOM"


@dataclass(frozen=True)
class PairingPlan:
    k_mr: int
    k_ct: int
    mode: SamplingMode = SamplingMode.PBS
    jitter: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.k_mr < 2 or self.k_ct < 2:
            raise ValueError("PBS needs at least two slices per volume")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        object.__setattr__(self, "mode", SamplingMode(self.mode))

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)

    def to_dict(self) -> dict:
        return {"k_mr": self.k_mr, "k_ct": self.k_ct, "mode": self.mode.value,
                "jitter": self.jitter, "seed": self.seed}


def base_index(i: int, k_mr: int, k_ct: int) -> int:
    """``round(i * (k_ct - 1) / (k_mr - 1))`` in exact integer arithmetic (halves round up)."""
    num = i * (k_ct - 1)
    den = k_mr - 1
    return (2 * num + den) // (2 * den)


def pbs_index(i: int, plan: PairingPlan, rng: np.random.Generator) -> int:
    if not 0 <= i < plan.k_mr:
        raise IndexError(f"MR slice {i} outside [0, {plan.k_mr - 1}]")
    b = base_index(i, plan.k_mr, plan.k_ct)
    j = plan.jitter
    if j <= b < plan.k_ct - j:
        return b + int(rng.integers(-j, j + 1))
    return b


def next_pair_indices(plan: PairingPlan, rng: np.random.Generator) -> Tuple[int, int]:
    i = int(rng.integers(0, plan.k_mr))
    if plan.mode is SamplingMode.PBS:
        return i, pbs_index(i, plan, rng)
    return i, int(rng.integers(0, plan.k_ct))


def next_pair(
    plan: PairingPlan,
    mr_vol: Volume3D,
    ct_vol: Volume3D,
    rng: np.random.Generator,
    margins: Optional[Tuple[int, int]] = PAPER_MARGINS,
) -> Tuple[Image2D, Image2D]:
    """Draw one (MR, CT) training pair and pass both through :func:`augment_crop`.

    ``margins`` is the extra (rows, cols) of padding before the random crop;
    ``None`` or ``(0, 0)`` disables the augmentation.
    """
    if mr_vol.n_slices < 1 or ct_vol.n_slices < 1:
        raise ValueError("empty volume")
    if (mr_vol.n_slices, ct_vol.n_slices) != (plan.k_mr, plan.k_ct):
        raise ValueError(
            f"plan expects {plan.k_mr}/{plan.k_ct} slices, volumes have "
            f"{mr_vol.n_slices}/{ct_vol.n_slices}"
        )
    i, j = next_pair_indices(plan, rng)
    mr, ct = mr_vol.slice(i), ct_vol.slice(j)
    if margins is not None and tuple(margins) != (0, 0):
        mr = _crop(mr, rng, margins)
        ct = _crop(ct, rng, margins)
    return mr, ct


def _crop(img: Image2D, rng, margins) -> Image2D:
    shape = img.shape
    padded = (shape[0] + margins[0], shape[1] + margins[1])
    return augment_crop(img, rng, crop_shape=shape, padded_shape=padded)
