"""Training objectives: least-squares adversarial, cycle consistency, structure consistency.

All functions take and return :class:`~sccgan.autodiff.Tensor` values so the
generator parameters receive gradients through every term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, ops
from .mind import MAX_EXPONENT, NEIGHBOURS_4, MindParams

__all__ = [
    "LossWeights",
    "LossComponents",
    "lsgan_d",
    "lsgan_g",
    "cycle_loss",
    "mind_features",
    "structure_term",
    "structure_loss",
    "total_loss",
    "cyclegan_objective",
]


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 10.0
    lambda2: float = 5.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class LossComponents:
    """Generator-side terms of the objective (floats or scalar tensors)."""

    adv_ct: object
    adv_mr: object
    cycle: object
    structure: object

    def as_floats(self) -> dict:
        return {k: float(np.asarray(getattr(v, "data", v)))
                for k, v in vars(self).items()}


def _nonempty(t: Tensor, name: str) -> None:
    if t.size == 0:
        raise ValueError(f"{name} is empty")


def _one_minus(t: Tensor) -> Tensor:
    return ops.sub(1.0, t)


def lsgan_d(d_on_fake: Tensor, d_on_real: Tensor) -> Tensor:
    """Discriminator loss ``mean(D(fake)^2) + mean((1 - D(real))^2)``."""
    _nonempty(d_on_fake, "d_on_fake")
    _nonempty(d_on_real, "d_on_real")
    return ops.add(ops.mean(ops.square(d_on_fake)),
                   ops.mean(ops.square(_one_minus(d_on_real))))


def lsgan_g(d_on_fake: Tensor) -> Tensor:
    """Generator loss ``mean((1 - D(fake))^2)``."""
    _nonempty(d_on_fake, "d_on_fake")
    return ops.mean(ops.square(_one_minus(d_on_fake)))


def _mae(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return ops.scale(ops.l1_norm(a, b), 1.0 / a.size)


def cycle_loss(rec_mr: Tensor, mr: Tensor, rec_ct: Tensor, ct: Tensor) -> Tensor:
    """Per-voxel mean L1 reconstruction error, summed over both directions."""
    return ops.add(_mae(rec_mr, mr), _mae(rec_ct, ct))


def _as_plane(x: Tensor) -> Tensor:
    if x.ndim == 2:
        return x
    if x.ndim == 4 and x.shape[:2] == (1, 1) or x.ndim == 3 and x.shape[0] == 1:
        return ops.reshape(x, x.shape[-2:])
    raise ValueError(f"expected a single image (H,W) or (1,1,H,W), got {x.shape}")


def mind_features(x: Tensor, p: MindParams = MindParams()) -> Tensor:
    """Differentiable descriptor of one image, shape ``(channels, H, W)``.

    Same channel order, clamping and exponent cap as :func:`sccgan.mind.mind_extract`.
    """
    x = _as_plane(x)
    h, w = x.shape
    offsets = p.offsets
    c = len(offsets)

    xb = ops.broadcast_to(ops.reshape(x, (1, h, w)), (c, h, w))
    sq = ops.square(ops.sub(xb, ops.translate_stack(x, offsets)))
    r = p.patch_radius
    if r > 0:
        k = p.kernel1d
        d = ops.separable_conv2d(ops.pad(sq, (r, r, r, r), "replicate"), k, k)
    else:
        d = sq

    neighbour_idx = [offsets.index(n) for n in NEIGHBOURS_4]
    v_raw = ops.mean(ops.take(d, neighbour_idx, axis=0), axis=0)
    m = ops.mean(v_raw)
    if float(m.data) == 0.0:
        v = Tensor(np.full((h, w), p.epsilon), dtype=x.dtype)
    else:
        lo, hi = p.variance_clamp
        v = ops.clamp(v_raw, ops.scale(m, lo), ops.scale(m, hi))

    inv_v = ops.broadcast_to(ops.reshape(ops.reciprocal(v), (1, h, w)), (c, h, w))
    ratio = ops.clamp(ops.mul(d, inv_v), None, MAX_EXPONENT)
    rmin = ops.broadcast_to(ops.min(ratio, axis=0, keepdims=True), (c, h, w))
    return ops.exp(ops.sub(rmin, ratio))


def structure_term(syn: Tensor, src, p: MindParams = MindParams()) -> Tensor:
    """``(1 / (N |R|)) * sum_x ||F_x(syn) - F_x(src)||_1`` for one direction.

    ``src`` may be an image tensor or precomputed ``(channels, H, W)`` features
    (constant with respect to the generators, so they can be cached).
    """
    f_syn = mind_features(syn, p)
    if isinstance(src, Tensor) and src.ndim == 3 and src.shape[0] == p.n_channels:
        f_src = src
    else:
        src = src if isinstance(src, Tensor) else Tensor(src)
        if _as_plane(src).shape != f_syn.shape[1:]:
            raise ValueError(f"shape mismatch: {syn.shape} vs {src.shape}")
        f_src = mind_features(src, p)
    if f_src.shape != f_syn.shape:
        raise ValueError(f"shape mismatch: {f_syn.shape} vs {f_src.shape}")
    return ops.scale(ops.l1_norm(f_syn, f_src), 1.0 / f_syn.size)


def structure_loss(syn_ct: Tensor, mr, syn_mr: Tensor, ct, p: MindParams = MindParams()) -> Tensor:
    """Descriptor agreement of each synthetic image with its own source-modality input.

    The synthetic CT is compared with the MR it was generated from, and the
    synthetic MR with its source CT.
    """
    return ops.add(structure_term(syn_ct, mr, p), structure_term(syn_mr, ct, p))


def _check_finite(name: str, value) -> None:
    v = float(np.asarray(getattr(value, "data", value)))
    if not math.isfinite(v):
        raise FloatingPointError(f"loss term {name!r} is not finite ({v})")


def total_loss(components: LossComponents, w: LossWeights = LossWeights()):
    """``adv_ct + adv_mr + lambda1 * cycle + lambda2 * structure``.

    Works on plain floats as well as tensors.
    """
    for name, value in vars(components).items():
        if value is not None:
            _check_finite(name, value)
    adv = components.adv_ct + components.adv_mr
    out = adv + _weighted(components.cycle, w.lambda1)
    if w.lambda2 != 0:
        out = out + _weighted(components.structure, w.lambda2)
    return out


def cyclegan_objective(components: LossComponents, lambda1: float = 10.0):
    """The objective without the structure term: ``adv_ct + adv_mr + lambda1 * cycle``."""
    return (components.adv_ct + components.adv_mr) + _weighted(components.cycle, lambda1)


def _weighted(value, weight: float):
    if isinstance(value, Tensor):
        return ops.scale(value, weight)
    return weight * value
