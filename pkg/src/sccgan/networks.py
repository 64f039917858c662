"""Generator / discriminator topologies and the Adam optimiser.

Generator (ResNet style)::

    pad3 -> conv7 (1 -> c)  -> IN -> ReLU
    conv3/2 (c -> 2c)        -> IN -> ReLU
    conv3/2 (2c -> 4c)       -> IN -> ReLU
    n_res_blocks x [pad1 conv3 IN ReLU pad1 conv3 IN] + skip
    convT3/2 (4c -> 2c)      -> IN -> ReLU
    convT3/2 (2c -> c)       -> IN -> ReLU
    pad3 -> conv7 (c -> 1)   -> tanh

Discriminator (patch classifier): ``n_layers`` 4x4 convolutions with zero
padding 1; all but the last two have stride 2.  Channels grow as
``base * min(2**i, 8)`` and the last layer emits one score per patch; no
normalisation on the first and last layer, LeakyReLU(0.2) between layers.
With ``n_layers=5`` the receptive field is 70x70.

Spatial padding inside the generator is edge replication; strided layers use
zeros.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Tuple

import numpy as np

from .autodiff import Tensor, ops

__all__ = [
    "GeneratorConfig",
    "DiscriminatorConfig",
    "Network",
    "Generator",
    "Discriminator",
    "build_generator",
    "build_discriminator",
    "patch_map_shape",
    "receptive_field",
    "Adam",
    "PAPER_GENERATOR",
    "PAPER_DISCRIMINATOR",
]

INIT_STD = 0.02


@dataclass(frozen=True)
class GeneratorConfig:
    base_channels: int = 8
    n_res_blocks: int = 2
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.n_res_blocks < 0:
            raise ValueError("n_res_blocks must be >= 0")


@dataclass(frozen=True)
class DiscriminatorConfig:
    n_layers: int = 3
    base_channels: int = 8
    in_channels: int = 1

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")

    @property
    def strides(self) -> List[int]:
        return [2 if i < self.n_layers - 2 else 1 for i in range(self.n_layers)]

    @property
    def channels(self) -> List[int]:
        chans = [self.base_channels * min(2 ** i, 8) for i in range(self.n_layers - 1)]
        return chans + [1]


PAPER_GENERATOR = GeneratorConfig(base_channels=64, n_res_blocks=9)
PAPER_DISCRIMINATOR = DiscriminatorConfig(n_layers=5, base_channels=64)

_D_KERNEL = 4
_D_PAD = 1


def patch_map_shape(cfg: DiscriminatorConfig, height: int, width: int) -> Tuple[int, int]:
    """Score-map size: each layer maps ``n -> (n + 2 - 4) // stride + 1``."""
    h, w = height, width
    for s in cfg.strides:
        h = (h + 2 * _D_PAD - _D_KERNEL) // s + 1
        w = (w + 2 * _D_PAD - _D_KERNEL) // s + 1
        if h < 1 or w < 1:
            raise ValueError(f"input {height}x{width} too small for {cfg.n_layers} layers")
    return h, w


def receptive_field(cfg: DiscriminatorConfig) -> int:
    """Side of the input patch seen by one output score."""
    rf, jump = 1, 1
    for s in cfg.strides:
        rf += (_D_KERNEL - 1) * jump
        jump *= s
    return rf


class Network:
    """Ordered collection of named parameter tensors."""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

    def _param(self, name: str, shape, rng: np.random.Generator, zero: bool = False) -> Tensor:
        data = np.zeros(shape) if zero else rng.normal(0.0, INIT_STD, size=shape)
        t = Tensor(data.astype(np.float32), requires_grad=True, dtype=np.float32)
        self.params[name] = t
        return t

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterable[Tuple[str, Tensor]]:
        return self.params.items()

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Network":
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            arr = np.asarray(state[k], dtype=np.float32)
            if arr.shape != v.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {v.shape}")
            v.data = arr.copy()

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


def _as_batch(x: Tensor) -> Tensor:
    if x.ndim == 2:
        return ops.reshape(x, (1, 1) + x.shape)
    if x.ndim != 4:
        raise ValueError(f"expected (N,C,H,W) or (H,W), got {x.shape}")
    return x


class Generator(Network):
    def __init__(self, cfg: GeneratorConfig = GeneratorConfig(), rng=None, zero_final: bool = False):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        c = cfg.base_channels
        self._param("in.w", (c, cfg.in_channels, 7, 7), rng)
        self._param("down1.w", (2 * c, c, 3, 3), rng)
        self._param("down2.w", (4 * c, 2 * c, 3, 3), rng)
        for i in range(cfg.n_res_blocks):
            self._param(f"res{i}.a.w", (4 * c, 4 * c, 3, 3), rng)
            self._param(f"res{i}.b.w", (4 * c, 4 * c, 3, 3), rng)
        self._param("up1.w", (4 * c, 2 * c, 3, 3), rng)
        self._param("up2.w", (2 * c, c, 3, 3), rng)
        self._param("out.w", (cfg.out_channels, c, 7, 7), rng, zero=zero_final)
        self._param("out.b", (cfg.out_channels,), rng, zero=True)

    def forward(self, x: Tensor) -> Tensor:
        x = _as_batch(x)
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"generator input sides must be multiples of 4, got {h}x{w}")
        p = self.params
        y = ops.conv2d(ops.pad(x, (3, 3, 3, 3), "replicate"), p["in.w"])
        y = ops.relu(ops.instance_norm(y))
        y = ops.conv2d(ops.pad(y, (1, 1, 1, 1)), p["down1.w"], stride=2)
        y = ops.relu(ops.instance_norm(y))
        y = ops.conv2d(ops.pad(y, (1, 1, 1, 1)), p["down2.w"], stride=2)
        y = ops.relu(ops.instance_norm(y))
        for i in range(self.cfg.n_res_blocks):
            r = ops.conv2d(ops.pad(y, (1, 1, 1, 1), "replicate"), p[f"res{i}.a.w"])
            r = ops.relu(ops.instance_norm(r))
            r = ops.conv2d(ops.pad(r, (1, 1, 1, 1), "replicate"), p[f"res{i}.b.w"])
            y = ops.add(y, ops.instance_norm(r))
        y = ops.relu(ops.instance_norm(ops.conv_transpose2d(y, p["up1.w"])))
        y = ops.relu(ops.instance_norm(ops.conv_transpose2d(y, p["up2.w"])))
        y = ops.conv2d(ops.pad(y, (3, 3, 3, 3), "replicate"), p["out.w"], p["out.b"])
        return ops.tanh(y)


class Discriminator(Network):
    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig(), rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        c_in = cfg.in_channels
        for i, c_out in enumerate(cfg.channels):
            self._param(f"conv{i}.w", (c_out, c_in, _D_KERNEL, _D_KERNEL), rng)
            self._param(f"conv{i}.b", (c_out,), rng, zero=True)
            c_in = c_out

    def forward(self, x: Tensor) -> Tensor:
        x = _as_batch(x)
        patch_map_shape(self.cfg, *x.shape[-2:])
        n = self.cfg.n_layers
        y = x
        for i, s in enumerate(self.cfg.strides):
            y = ops.conv2d(ops.pad(y, (_D_PAD,) * 4), self.params[f"conv{i}.w"],
                           self.params[f"conv{i}.b"], stride=s)
            if i == n - 1:
                break
            if i > 0:
                y = ops.instance_norm(y)
            y = ops.leaky_relu(y, 0.2)
        return y


def build_generator(cfg: GeneratorConfig = GeneratorConfig(), rng=None, zero_final: bool = False) -> Generator:
    return Generator(cfg, rng, zero_final)


def build_discriminator(cfg: DiscriminatorConfig = DiscriminatorConfig(), rng=None) -> Discriminator:
    return Discriminator(cfg, rng)


class Adam:
    """Adam with bias correction; state kept in float32 alongside the parameters."""

    def __init__(self, params: List[Tensor], lr: float = 2e-4, betas=(0.5, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        step_size = np.float32(self.lr * np.sqrt(c2) / c1)
        eps = np.float32(self.eps * np.sqrt(c2))
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float32, copy=False)
            m *= np.float32(b1)
            m += np.float32(1.0 - b1) * g
            v *= np.float32(b2)
            v += np.float32(1.0 - b2) * g * g
            p.data = p.data - step_size * m / (np.sqrt(v) + eps)

    def state(self) -> dict:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps, "t": self.t}

    def moments(self) -> List[np.ndarray]:
        return self.m + self.v

    def load_moments(self, arrays: List[np.ndarray], t: int) -> None:
        n = len(self.params)
        for dst, src in zip(self.m + self.v, arrays):
            dst[...] = src
        if len(arrays) != 2 * n:
            raise ValueError("moment count mismatch")
        self.t = int(t)


def config_dict(cfg) -> dict:
    return asdict(cfg)
