"""Alternating discriminator/generator updates and the toy training experiment.

One :func:`train_step` runs both generators once, updates the two
discriminators on the detached synthetic images, then updates both
generators on ``adv_ct + adv_mr + lambda1*cycle + lambda2*structure`` with
the discriminators frozen.  Batch size is one slice pair.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import metrics
from .autodiff import Tensor, backward, ops
from .imagecore import CT_RANGE, Image2D, Modality, Volume3D, from_unit_range, to_unit_range
from .losses import (LossComponents, LossWeights, cycle_loss, lsgan_d, lsgan_g,
                     mind_features, structure_term, total_loss)
from .mind import MindParams, mind_l1
from .networks import (Adam, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
                       build_discriminator, build_generator)
from .phantom import Phantom, PhantomSpec, generate
from .sampler import PairingPlan, SamplingMode, next_pair

__all__ = [
    "HyperParams",
    "TrainState",
    "StepLosses",
    "LossTermError",
    "init_state",
    "train_step",
    "translate_volume",
    "evaluate_synthesis",
    "ToyResult",
    "run_toy",
    "toy_data",
    "save_checkpoint",
    "load_checkpoint",
    "smoothed",
]

NETS = ("g_ct", "g_mr", "d_ct", "d_mr")
TOY_MARGINS = (4, 4)


class LossTermError(FloatingPointError):
    """A loss term became NaN or infinite; ``term`` names it."""

    def __init__(self, term: str, value: float, step: int):
        super().__init__(f"loss term {term!r} is {value} at step {step}")
        self.term = term
        self.value = value
        self.step = step


@dataclass(frozen=True)
class HyperParams:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda1: float = 10.0
    lambda2: float = 5.0

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2)


@dataclass
class TrainState:
    g_ct: Generator
    g_mr: Generator
    d_ct: Discriminator
    d_mr: Discriminator
    opt_g: Adam
    opt_d: Adam
    seed: int
    rng: np.random.Generator
    step: int = 0

    def nets(self) -> Dict[str, object]:
        return {"g_ct": self.g_ct, "g_mr": self.g_mr, "d_ct": self.d_ct, "d_mr": self.d_mr}

    def all_finite(self) -> bool:
        return all(np.isfinite(p.data).all() for n in self.nets().values() for p in n.parameters())


@dataclass
class StepLosses:
    d: float
    adv_ct: float
    adv_mr: float
    cycle: float
    structure: float
    g_total: float

    def as_dict(self) -> dict:
        return asdict(self)


def init_state(seed: int = 0, g_cfg: GeneratorConfig = GeneratorConfig(),
               d_cfg: DiscriminatorConfig = DiscriminatorConfig(),
               hp: HyperParams = HyperParams(), zero_final: bool = False) -> TrainState:
    init_rng = np.random.default_rng([seed, 0])
    g_ct = build_generator(g_cfg, init_rng, zero_final)
    g_mr = build_generator(g_cfg, init_rng, zero_final)
    d_ct = build_discriminator(d_cfg, init_rng)
    d_mr = build_discriminator(d_cfg, init_rng)
    betas = (hp.beta1, hp.beta2)
    opt_g = Adam(g_ct.parameters() + g_mr.parameters(), hp.lr, betas)
    opt_d = Adam(d_ct.parameters() + d_mr.parameters(), hp.lr, betas)
    return TrainState(g_ct, g_mr, d_ct, d_mr, opt_g, opt_d, seed, np.random.default_rng([seed, 1]))


def _to_tensor(img) -> Tensor:
    a = img.data if isinstance(img, Image2D) else np.asarray(img)
    return Tensor(a.reshape((1, 1) + a.shape), dtype=np.float32)


def _check(name: str, t, step: int) -> float:
    v = float(np.asarray(getattr(t, "data", t)))
    if not math.isfinite(v):
        raise LossTermError(name, v, step)
    return v


def train_step(state: TrainState, batch: Tuple[Image2D, Image2D], hp: HyperParams = HyperParams(),
               mind: MindParams = MindParams()) -> Tuple[TrainState, StepLosses]:
    """One discriminator update followed by one generator update.

    ``batch`` holds unit-range MR and CT slices (not necessarily paired).
    With ``lambda2 == 0`` the structure term is still evaluated for logging
    but contributes no gradient.
    """
    mr_img, ct_img = batch
    for img in batch:
        a = img.data if isinstance(img, Image2D) else np.asarray(img)
        if a.min() < -1.0 - 1e-6 or a.max() > 1.0 + 1e-6:
            raise ValueError("train_step expects unit-range images in [-1, 1]")
    mr, ct = _to_tensor(mr_img), _to_tensor(ct_img)
    step = state.step + 1

    syn_ct = state.g_ct(mr)
    syn_mr = state.g_mr(ct)

    # discriminators, generators fixed
    state.opt_d.zero_grad()
    loss_d = ops.add(lsgan_d(state.d_ct(syn_ct.detach()), state.d_ct(ct)),
                     lsgan_d(state.d_mr(syn_mr.detach()), state.d_mr(mr)))
    d_val = _check("discriminator", loss_d, step)
    backward(loss_d)
    state.opt_d.step()

    # generators, discriminators fixed
    state.d_ct.requires_grad_(False)
    state.d_mr.requires_grad_(False)
    try:
        adv_ct = lsgan_g(state.d_ct(syn_ct))
        adv_mr = lsgan_g(state.d_mr(syn_mr))
    finally:
        state.d_ct.requires_grad_(True)
        state.d_mr.requires_grad_(True)
    cyc = cycle_loss(state.g_mr(syn_ct), mr, state.g_ct(syn_mr), ct)
    if hp.lambda2 > 0:
        struct = ops.add(structure_term(syn_ct, mind_features(mr, mind), mind),
                         structure_term(syn_mr, mind_features(ct, mind), mind))
    else:
        struct = ops.add(structure_term(syn_ct.detach(), mr, mind),
                         structure_term(syn_mr.detach(), ct, mind))
    comps = LossComponents(adv_ct, adv_mr, cyc, struct)
    for name, value in vars(comps).items():
        _check(name, value, step)
    g_loss = total_loss(comps, hp.weights)
    g_val = _check("generator_total", g_loss, step)
    state.opt_g.zero_grad()
    backward(g_loss)
    state.opt_g.step()
    state.opt_d.zero_grad()
    state.step = step

    f = comps.as_floats()
    return state, StepLosses(d_val, f["adv_ct"], f["adv_mr"], f["cycle"], f["structure"], g_val)


def translate_volume(g: Generator, vol: Volume3D, out_modality: Modality = Modality.CT,
                     out_range=CT_RANGE) -> Volume3D:
    """Run a generator slice by slice; returns a volume in ``out_range`` units."""
    g.requires_grad_(False)
    try:
        unit = to_unit_range(vol)
        out = [g(_to_tensor(unit.data[k])).data[0, 0] for k in range(vol.n_slices)]
    finally:
        g.requires_grad_(True)
    syn_unit = Volume3D(np.stack(out), out_modality, out_range, vol.spacing)
    return from_unit_range(syn_unit)


def evaluate_synthesis(syn_ct: Volume3D, gt_ct: Volume3D, mr: Volume3D,
                       mind: MindParams = MindParams()) -> dict:
    """Directional toy metrics for a synthetic CT against its paired ground truth.

    ``mind_error`` is the slice-averaged descriptor L1 between synthetic and
    true CT; ``median_ssim_hg`` is the median over slices with a non-empty
    head mask.  Volume-level MAE/PSNR/SSIM/SSIM(HG) are included as well.
    """
    masks = metrics.head_masks(mr)
    mind_err = float(np.mean([mind_l1(syn_ct.data[k], gt_ct.data[k], mind)
                              for k in range(gt_ct.n_slices)]))
    per_slice = []
    for k, m in enumerate(masks):
        if m.count == 0:
            continue
        hg = metrics.high_gradient_region(gt_ct.data[k], m)
        if hg.any():
            per_slice.append(metrics.ssim(gt_ct.data[k], syn_ct.data[k], hg))
    vm = metrics.evaluate_volume(gt_ct, syn_ct, masks, "test")
    return {
        "mind_error": mind_err,
        "median_ssim_hg": float(np.median(per_slice)),
        "mae": vm.mae,
        "psnr": vm.psnr,
        "ssim": vm.ssim,
        "ssim_hg": vm.ssim_hg,
    }


def smoothed(values, window: int = 20) -> np.ndarray:
    """Trailing moving average (valid part only)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        raise ValueError("fewer values than the smoothing window")
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


@dataclass
class ToyResult:
    history: List[StepLosses]
    final: dict
    state: TrainState
    config: dict = field(default_factory=dict)

    def history_csv(self) -> str:
        cols = list(StepLosses.__dataclass_fields__)
        lines = [",".join(["step"] + cols)]
        for i, h in enumerate(self.history, 1):
            lines.append(",".join([str(i)] + [repr(getattr(h, c)) for c in cols]))
        return "\n".join(lines) + "\n"


def toy_data(seed: int, spec: PhantomSpec = PhantomSpec()) -> Tuple[Phantom, Phantom, Phantom]:
    """MR source, CT source (different geometry, hence unpaired) and a paired test phantom."""
    mk = lambda s: generate(PhantomSpec(**{**spec.to_dict(), "spacing": tuple(spec.spacing), "seed": s}))
    return mk(seed), mk(seed + 1), mk(seed + 2)


def run_toy(steps: int = 2000, seed: int = 0, hp: HyperParams = HyperParams(),
            g_cfg: GeneratorConfig = GeneratorConfig(), d_cfg: DiscriminatorConfig = DiscriminatorConfig(),
            spec: PhantomSpec = PhantomSpec(), mode: SamplingMode = SamplingMode.PBS,
            jitter: int = 5, margins=TOY_MARGINS, mind: MindParams = MindParams(),
            progress=None) -> ToyResult:
    """Train on phantoms and evaluate the CT generator on a held-out paired phantom."""
    src_mr, src_ct, test = toy_data(seed, spec)
    mr_vol, ct_vol = src_mr.mr, src_ct.ct
    plan = PairingPlan(mr_vol.n_slices, ct_vol.n_slices, mode, jitter, seed)
    state = init_state(seed, g_cfg, d_cfg, hp)
    history = []
    for _ in range(steps):
        mr, ct = next_pair(plan, mr_vol, ct_vol, state.rng, margins)
        state, losses = train_step(state, (to_unit_range(mr), to_unit_range(ct)), hp, mind)
        history.append(losses)
        if progress is not None:
            progress(state.step, losses)
    syn = translate_volume(state.g_ct, test.mr)
    final = evaluate_synthesis(syn, test.ct, test.mr, mind)
    final["structure_loss"] = float(np.mean([h.structure for h in history[-min(50, len(history)):]])) \
        if history else float("nan")
    config = {"steps": steps, "seed": seed, "hp": asdict(hp), "generator": asdict(g_cfg),
              "discriminator": asdict(d_cfg), "phantom": spec.to_dict(), "mode": SamplingMode(mode).value,
              "jitter": jitter, "margins": list(margins) if margins else None, "mind": mind.to_dict()}
    return ToyResult(history, final, state, config)


# ----------------------------------------------------------------------------
# checkpoints: <stem>.json header + <stem>.bin little-endian float32 blob


def _ckpt_paths(path) -> Tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".bin")


def _blob_order(state: TrainState):
    """(name, array) pairs in file order: parameters per net, then Adam moments."""
    for net_name in NETS:
        for pname, t in state.nets()[net_name].named_parameters():
            yield f"{net_name}/{pname}", t.data
    for opt_name in ("opt_g", "opt_d"):
        opt = getattr(state, opt_name)
        for i, arr in enumerate(opt.m):
            yield f"{opt_name}/m{i}", arr
        for i, arr in enumerate(opt.v):
            yield f"{opt_name}/v{i}", arr


def save_checkpoint(state: TrainState, path, hp: Optional[HyperParams] = None) -> None:
    header_path, blob_path = _ckpt_paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset, chunks = [], 0, []
    for name, arr in _blob_order(state):
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        chunks.append(a.tobytes())
    header = {
        "format": "sccgan-checkpoint-1",
        "dtype": "f32le",
        "step": state.step,
        "seed": state.seed,
        "generator": asdict(state.g_ct.cfg),
        "discriminator": asdict(state.d_ct.cfg),
        "adam": {"g": state.opt_g.state(), "d": state.opt_d.state()},
        "rng_state": state.rng.bit_generator.state,
        "hp": asdict(hp) if hp is not None else None,
        "tensors": entries,
    }
    header_path.write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    blob_path.write_bytes(b"".join(chunks))


def load_checkpoint(path) -> TrainState:
    header_path, blob_path = _ckpt_paths(path)
    header = json.loads(header_path.read_text())
    blob = np.frombuffer(blob_path.read_bytes(), dtype="<f4")
    g_cfg = GeneratorConfig(**header["generator"])
    d_cfg = DiscriminatorConfig(**header["discriminator"])
    hp = HyperParams(**header["hp"]) if header.get("hp") else HyperParams()
    state = init_state(header["seed"], g_cfg, d_cfg, hp)
    arrays = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"]))
        if e["offset"] + n > blob.size:
            raise ValueError(f"checkpoint blob too short for {e['name']}")
        arrays[e["name"]] = blob[e["offset"]:e["offset"] + n].reshape(e["shape"])
    for net_name in NETS:
        net = state.nets()[net_name]
        net.load_state_dict({k: arrays[f"{net_name}/{k}"] for k, _ in net.named_parameters()})
    for opt_name, key in (("opt_g", "g"), ("opt_d", "d")):
        opt = getattr(state, opt_name)
        n = len(opt.params)
        moments = [arrays[f"{opt_name}/m{i}"] for i in range(n)] + \
                  [arrays[f"{opt_name}/v{i}"] for i in range(n)]
        opt.load_moments(moments, header["adam"][key]["t"])
    state.rng.bit_generator.state = header["rng_state"]
    state.step = int(header["step"])
    return state
