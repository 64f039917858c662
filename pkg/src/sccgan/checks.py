"""Finite-difference checks for every differentiable op and each training loss.

Each case builds a scalar function of one leaf tensor (16x16 spatial size)
from seeded random data.  Elementwise ops are reduced through a fixed random
weighting so that every output coordinate influences the result.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from .autodiff import Tensor, grad_check, ops, precision
from .losses import cycle_loss, lsgan_d, lsgan_g, mind_features, structure_loss
from .mind import MindParams
from .networks import Discriminator, DiscriminatorConfig

__all__ = ["CASES", "CheckResult", "run_case", "run_all", "TOL"]

SIZE = 16
TOL = {np.dtype(np.float32): 1e-3, np.dtype(np.float64): 1e-6}

Case = Callable[[np.random.Generator], Tuple[Callable[[Tensor], Tensor], np.ndarray]]


def _weighted(y: Tensor, r: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(y, Tensor(r, dtype=y.dtype)))


def _unary(op, make_x=None):
    def case(rng):
        x = make_x(rng) if make_x else rng.normal(size=(SIZE, SIZE))
        r = None

        def f(t):
            nonlocal r
            y = op(t)
            if r is None:
                r = rng.normal(size=y.shape)
            return _weighted(y, r)
        return f, x
    return case


def _binary(op, make_b=None):
    """Gradient with respect to both operands, packed as one (2, H, W) leaf."""
    def case(rng):
        x = rng.normal(size=(2, SIZE, SIZE))
        if make_b is not None:
            x[1] = make_b(rng)
        r = rng.normal(size=(SIZE, SIZE))

        def f(t):
            a = ops.reshape(ops.take(t, [0], axis=0), (SIZE, SIZE))
            b = ops.reshape(ops.take(t, [1], axis=0), (SIZE, SIZE))
            return _weighted(op(a, b), r)
        return f, x
    return case


def _away_from_zero(rng, shape=(SIZE, SIZE)):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.5, 2.0, size=shape)


def _conv_case(stride: int, wrt: str, replicate: bool):
    def case(rng):
        xv = rng.normal(size=(1, 2, SIZE, SIZE))
        wv = rng.normal(size=(3, 2, 3, 3)) * 0.3
        bv = rng.normal(size=(3,))
        mode = "replicate" if replicate else "zero"
        r = None

        def build(x, w, b):
            nonlocal r
            y = ops.conv2d(ops.pad(x, (1, 1, 1, 1), mode), w, b, stride=stride)
            if r is None:
                r = rng.normal(size=y.shape)
            return _weighted(y, r)

        if wrt == "x":
            return (lambda t: build(t, Tensor(wv, dtype=t.dtype), Tensor(bv, dtype=t.dtype))), xv
        if wrt == "w":
            return (lambda t: build(Tensor(xv, dtype=t.dtype), t, Tensor(bv, dtype=t.dtype))), wv
        return (lambda t: build(Tensor(xv, dtype=t.dtype), Tensor(wv, dtype=t.dtype), t)), bv
    return case


def _convT_case(wrt: str):
    def case(rng):
        xv = rng.normal(size=(1, 2, SIZE // 2, SIZE // 2))
        wv = rng.normal(size=(2, 3, 3, 3)) * 0.3
        r = rng.normal(size=(1, 3, SIZE, SIZE))

        def build(x, w):
            return _weighted(ops.conv_transpose2d(x, w), r)

        if wrt == "x":
            return (lambda t: build(t, Tensor(wv, dtype=t.dtype))), xv
        return (lambda t: build(Tensor(xv, dtype=t.dtype), t)), wv
    return case


def _reduction(op, **kw):
    def case(rng):
        x = rng.normal(size=(3, SIZE, SIZE))

        def f(t):
            y = op(t, **kw)
            if y.ndim == 0:
                return ops.scale(y, 1.7)
            return _weighted(y, np.random.default_rng(7).normal(size=y.shape))
        return f, x
    return case


def _instance_norm(rng):
    x = rng.normal(size=(1, 2, SIZE, SIZE)) * 2.0 + 1.0
    r = rng.normal(size=x.shape)
    return (lambda t: _weighted(ops.instance_norm(t), r)), x


def _separable(rng):
    k = MindParams().kernel1d
    x = rng.normal(size=(2, SIZE + 6, SIZE + 6))
    r = rng.normal(size=(2, SIZE, SIZE))
    return (lambda t: _weighted(ops.separable_conv2d(t, k, k), r)), x


def _translate(rng):
    x = rng.normal(size=(SIZE, SIZE))
    r = rng.normal(size=(SIZE, SIZE))
    alpha = (int(rng.integers(-4, 5)), int(rng.integers(-4, 5)))
    return (lambda t: _weighted(ops.translate(t, alpha), r)), x


def _translate_stack(rng):
    x = rng.normal(size=(SIZE, SIZE))
    offs = MindParams().offsets[::7]
    r = rng.normal(size=(len(offs), SIZE, SIZE))
    return (lambda t: _weighted(ops.translate_stack(t, offs), r)), x


def _broadcast(rng):
    x = rng.normal(size=(1, SIZE))
    r = rng.normal(size=(3, SIZE, SIZE))
    return (lambda t: _weighted(ops.broadcast_to(t, (3, SIZE, SIZE)), r)), x


def _clamp(rng):
    x = rng.normal(size=(SIZE, SIZE))
    r = rng.normal(size=(SIZE, SIZE))
    return (lambda t: _weighted(ops.clamp(t, -0.7, 0.9), r)), x


def _clamp_bounds(rng):
    """Tensor-valued bounds derived from the input (the MIND variance clamp pattern)."""
    x = np.abs(rng.normal(size=(SIZE, SIZE))) + 0.05
    r = rng.normal(size=(SIZE, SIZE))

    def f(t):
        m = ops.mean(t)
        return _weighted(ops.clamp(t, ops.scale(m, 0.5), ops.scale(m, 1.5)), r)
    return f, x


def _l1(rng):
    b = rng.normal(size=(SIZE, SIZE))
    return (lambda t: ops.l1_norm(t, Tensor(b, dtype=t.dtype))), rng.normal(size=(SIZE, SIZE))


def _unit(rng, shape=(SIZE, SIZE)):
    return np.tanh(rng.normal(size=shape))


def _tiny_disc(rng) -> Discriminator:
    return Discriminator(DiscriminatorConfig(n_layers=2, base_channels=4), rng)


def _lsgan_g_case(rng):
    d = _tiny_disc(rng).requires_grad_(False)
    x = _unit(rng, (1, 1, SIZE, SIZE))
    return (lambda t: lsgan_g(d(t))), x


def _lsgan_d_case(rng):
    """Gradient with respect to the discriminator's first weight."""
    d = _tiny_disc(rng).requires_grad_(False)
    fake, real = _unit(rng, (1, 1, SIZE, SIZE)), _unit(rng, (1, 1, SIZE, SIZE))
    w0 = d.params["conv0.w"].data.astype(np.float64) * 10

    def f(t):
        saved = d.params["conv0.w"]
        d.params["conv0.w"] = t
        try:
            ft, rt = Tensor(fake, dtype=t.dtype), Tensor(real, dtype=t.dtype)
            return lsgan_d(d(ft), d(rt))
        finally:
            d.params["conv0.w"] = saved
    return f, w0


def _cycle_case(rng):
    mr, ct, rec_ct = (_unit(rng) for _ in range(3))
    return (lambda t: cycle_loss(t, Tensor(mr, dtype=t.dtype), Tensor(rec_ct, dtype=t.dtype),
                                 Tensor(ct, dtype=t.dtype))), _unit(rng)


def _structure_case(rng):
    mr, ct, syn_mr = (_unit(rng) for _ in range(3))

    def f(t):
        return structure_loss(t, Tensor(mr, dtype=t.dtype), Tensor(syn_mr, dtype=t.dtype),
                              Tensor(ct, dtype=t.dtype))
    return f, _unit(rng)


def _mind_case(rng):
    x = _unit(rng)
    r = rng.normal(size=(MindParams().n_channels, SIZE, SIZE))
    return (lambda t: _weighted(mind_features(t), r)), x


CASES: Dict[str, Case] = {
    "add": _binary(ops.add),
    "sub": _binary(ops.sub),
    "mul": _binary(ops.mul),
    "scale": _unary(lambda t: ops.scale(t, -2.5)),
    "neg": _unary(ops.neg),
    "square": _unary(ops.square),
    "exp": _unary(ops.exp),
    "reciprocal": _unary(ops.reciprocal, _away_from_zero),
    "tanh": _unary(ops.tanh),
    "relu": _unary(ops.relu),
    "leaky_relu": _unary(lambda t: ops.leaky_relu(t, 0.2)),
    "abs": _unary(ops.abs),
    "clamp": _clamp,
    "clamp_tensor_bounds": _clamp_bounds,
    "sum": _reduction(ops.sum),
    "sum_axis": _reduction(ops.sum, axis=0),
    "mean": _reduction(ops.mean),
    "mean_axis": _reduction(ops.mean, axis=(1, 2)),
    "max_axis": _reduction(ops.max, axis=0),
    "min_axis": _reduction(ops.min, axis=0, keepdims=True),
    "reshape": _unary(lambda t: ops.reshape(t, (4, SIZE * SIZE // 4))),
    "broadcast_to": _broadcast,
    "take": _reduction(ops.take, indices=[2, 0, 2], axis=0),
    "pad_zero": _unary(lambda t: ops.pad(t, (1, 2, 3, 0), "zero")),
    "pad_replicate": _unary(lambda t: ops.pad(t, (3, 1, 0, 2), "replicate")),
    "translate": _translate,
    "translate_stack": _translate_stack,
    "conv2d[x]": _conv_case(1, "x", True),
    "conv2d[w]": _conv_case(1, "w", True),
    "conv2d[b]": _conv_case(1, "b", True),
    "conv2d_stride2[x]": _conv_case(2, "x", False),
    "conv2d_stride2[w]": _conv_case(2, "w", False),
    "conv_transpose2d[x]": _convT_case("x"),
    "conv_transpose2d[w]": _convT_case("w"),
    "separable_conv2d": _separable,
    "instance_norm": _instance_norm,
    "l1_norm": _l1,
    "l2_sq": _unary(ops.l2_sq),
    "mind_features": _mind_case,
    "lsgan_g": _lsgan_g_case,
    "lsgan_d": _lsgan_d_case,
    "cycle_loss": _cycle_case,
    "structure_loss": _structure_case,
}


@dataclass
class CheckResult:
    name: str
    dtype: str
    max_rel_error: float
    mean_rel_error: float
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def run_case(name: str, dtype=np.float32, seed: int = 0, tol=None) -> CheckResult:
    dt = np.dtype(dtype)
    tol = TOL[dt] if tol is None else tol
    rng = np.random.default_rng([seed, sorted(CASES).index(name)])
    with precision(dt):
        f, x = CASES[name](rng)
        rep = grad_check(f, x.astype(dt), tol=tol, seed=seed)
    return CheckResult(name, dt.name, rep.max_rel_error, rep.mean_rel_error, rep.n_checked, tol)


def run_all(dtype=np.float32, seed: int = 0, names=None) -> List[CheckResult]:
    return [run_case(n, dtype, seed) for n in (names or CASES)]
