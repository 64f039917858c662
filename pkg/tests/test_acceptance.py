"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import json
import math
import time

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE
from sccgan.autodiff import Tensor, precision
from sccgan.checks import TOL, run_all
from sccgan.cli import main
from sccgan.imagecore import CT_RANGE, Modality, Volume3D, to_unit_range
from sccgan.losses import LossComponents, LossWeights, cyclegan_objective, structure_loss, total_loss
from sccgan.metrics import PEAK, mae, psnr, ssim, ssim_map
from sccgan.mind import MindParams, mind_extract, patch_distance_conv, patch_distance_direct
from sccgan.phantom import PhantomSpec, corrupt, generate
from sccgan.sampler import PairingPlan, base_index, pbs_index
from sccgan.trainer import HyperParams, run_toy


def _verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


# ---------------------------------------------------------------- 1

def test_criterion_1_mind_direct_equals_conv():
    p = MindParams()
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        h, w = (int(v) for v in rng.integers(12, 33, 2))
        a = rng.normal(size=(h, w))
        for alpha in p.offsets:
            d1 = patch_distance_direct(a, alpha, p)
            d2 = patch_distance_conv(a, alpha, p)
            rel = np.abs(d1 - d2) / np.maximum(np.abs(d1), np.finfo(float).tiny)
            worst = max(worst, float(rel.max()))
    dt = time.perf_counter() - t0
    _verdict(1, worst <= 1e-5 and dt < 30, f"max rel err {worst:.2e}, {dt:.1f}s")


# ---------------------------------------------------------------- 2

def test_criterion_2_mind_invariances():
    aff, rng_ok, eq = 0.0, True, 0.0
    for seed in range(20):
        rng = np.random.default_rng([seed, 2])
        a = rng.uniform(0, 100, (24, 24))
        f = mind_extract(a).data
        s, b = rng.uniform(0.1, 10), rng.uniform(-500, 500)
        aff = max(aff, float(np.abs(mind_extract(s * a + b).data - f).max()))
        rng_ok &= bool(f.min() > 0 and f.max() <= 1 and np.all(f.max(axis=0) == 1.0))
        big = rng.normal(size=(44, 44))
        sy, sx = (int(v) for v in rng.integers(-3, 4, 2))
        fa = mind_extract(big[4:36, 4:36]).data
        fb = mind_extract(big[4 + sy:36 + sy, 4 + sx:36 + sx]).data
        m = 11
        eq = max(eq, float(np.abs(fb[:, m:32 - m, m:32 - m]
                                  - fa[:, m + sy:32 - m + sy, m + sx:32 - m + sx]).max()))
    ok = aff <= 1e-5 and rng_ok and eq <= 1e-5
    _verdict(2, ok, f"affine {aff:.1e}, range/max ok={rng_ok}, interior shift {eq:.1e}")


# ---------------------------------------------------------------- 3

def test_criterion_3_gradient_checks():
    t0 = time.perf_counter()
    res32 = run_all(np.float32)
    res64 = run_all(np.float64)
    dt = time.perf_counter() - t0
    bad = [f"{r.name}/{r.dtype}" for r in res32 + res64 if not r.passed]
    w32 = max(r.max_rel_error for r in res32)
    w64 = max(r.max_rel_error for r in res64)
    ok = not bad and dt < 120 and w32 <= TOL[np.dtype(np.float32)] and w64 <= TOL[np.dtype(np.float64)]
    _verdict(3, ok, f"{len(res32)} cases x2, worst f32 {w32:.1e} f64 {w64:.1e}, {dt:.1f}s"
             + (f", failed {bad}" if bad else ""))


# ---------------------------------------------------------------- 4

def test_criterion_4_loss_arithmetic():
    v = total_loss(LossComponents(1, 1, 1, 1), LossWeights(10, 5))
    rng = np.random.default_rng(4)
    same = all(
        total_loss(c, LossWeights(10, 0)) == cyclegan_objective(c, 10)
        for c in (LossComponents(*rng.uniform(0, 2, 4)) for _ in range(100))
    )
    _verdict(4, v == 17 and same, f"total={v!r}, lambda2=0 matches cycleGAN: {same}")


# ---------------------------------------------------------------- 5

def test_criterion_5_pbs_distribution():
    plan = PairingPlan(270, 270)
    rng = np.random.default_rng(5)
    draws = np.array([pbs_index(135, plan, rng) for _ in range(10_000)])
    counts = np.bincount(draws - 130, minlength=11)
    p = stats.chisquare(counts).pvalue if counts.size == 11 else 0.0
    in_range = True
    for k_mr in range(2, 65):
        for k_ct in range(2, 65):
            pl = PairingPlan(k_mr, k_ct)
            r = np.random.default_rng([k_mr, k_ct])
            for i in range(k_mr):
                outs = {pbs_index(i, pl, r) for _ in range(5)}
                b = base_index(i, k_mr, k_ct)
                if 5 <= b < k_ct - 5:
                    outs |= {b - 5, b + 5}  # band extremes must also be legal
                in_range &= min(outs) >= 0 and max(outs) <= k_ct - 1
    _verdict(5, p > 0.01 and in_range, f"chi-square p={p:.3f}, exhaustive range ok={in_range}")


# ---------------------------------------------------------------- 6

def _loop_ssim(a, b, m, r=5, sigma=1.5):
    h, w = a.shape
    g = [math.exp(-(i * i) / (2 * sigma * sigma)) for i in range(-r, r + 1)]
    tot = sum(g) ** 2
    c1, c2 = (0.01 * PEAK) ** 2, (0.03 * PEAK) ** 2
    vals = []
    for y, x in zip(*np.nonzero(m)):
        ma = mb = saa = sbb = sab = 0.0
        for i in range(-r, r + 1):
            for j in range(-r, r + 1):
                wt = g[i + r] * g[j + r] / tot
                yy, xx = min(max(y + i, 0), h - 1), min(max(x + j, 0), w - 1)
                p, q = float(a[yy, xx]), float(b[yy, xx])
                ma += wt * p
                mb += wt * q
                saa += wt * p * p
                sbb += wt * q * q
                sab += wt * p * q
        va, vb, cv = saa - ma * ma, sbb - mb * mb, sab - ma * mb
        vals.append(((2 * ma * mb + c1) * (2 * cv + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def test_criterion_6_metric_oracles():
    ph = generate(PhantomSpec(seed=6, slices=3, height=32, width=32))
    rng = np.random.default_rng(6)
    syn = ph.ct.data.astype(np.float64) + rng.normal(0, 80, ph.ct.shape)
    k = 1
    gt, sy, m = ph.ct.data[k].astype(np.float64), syn[k], ph.masks[k].data
    idx = list(zip(*np.nonzero(m)))
    d = [float(gt[i]) - float(sy[i]) for i in idx]
    ref_mae = sum(abs(v) for v in d) / len(d)
    ref_psnr = 10 * math.log10(PEAK ** 2 / (sum(v * v for v in d) / len(d)))
    e_mae = abs(mae(gt, sy, m) - ref_mae)
    e_psnr = abs(psnr(gt, sy, m) - ref_psnr)
    e_ssim = abs(ssim(gt, sy, m) - _loop_ssim(gt, sy, m))
    sharp = generate(PhantomSpec(seed=6, slices=3, height=32, width=32, blur=0.0))
    shifted = Volume3D(sharp.ct.data + 45.0, Modality.CT, CT_RANGE)
    e40 = abs(psnr(sharp.ct, shifted, sharp.masks) - 40.0)
    ok = e_mae <= 1e-6 and e_psnr <= 1e-6 and e_ssim <= 1e-4 and e40 <= 1e-9
    _verdict(6, ok, f"|dMAE| {e_mae:.1e}, |dPSNR| {e_psnr:.1e}, |dSSIM| {e_ssim:.1e}, 40dB err {e40:.1e}")


# ---------------------------------------------------------------- 7

def _T(a):
    return Tensor(np.asarray(a, np.float64), dtype=np.float64)


def test_criterion_7_structure_ranking():
    held, worst_aff = 0, 0.0
    for seed in range(20):
        ph = generate(PhantomSpec(seed=seed, slices=5))
        rng = np.random.default_rng([seed, 7])
        mr_u, ct_u = to_unit_range(ph.mr).data[2], to_unit_range(ph.ct).data[2]
        vals = {}
        for kind in ("affine_intensity", "local_deform", "permute_blocks"):
            # each synthetic image is a degraded copy of its own source
            syn_ct = to_unit_range(corrupt(ph.mr, kind, rng)).data[2]
            syn_mr = to_unit_range(corrupt(ph.ct, kind, rng)).data[2]
            with precision(np.float64):
                vals[kind] = float(structure_loss(_T(syn_ct), _T(mr_u), _T(syn_mr), _T(ct_u)).data)
        a, d, p = vals["affine_intensity"], vals["local_deform"], vals["permute_blocks"]
        worst_aff = max(worst_aff, a)
        held += a <= 1e-5 and d >= 100 * 1e-5 and d < p
    _verdict(7, held >= 19, f"ordering held on {held}/20 seeds, worst affine {worst_aff:.1e}")


# ---------------------------------------------------------------- 8

@pytest.mark.slow
def test_criterion_8_toy_training_direction():
    t0 = time.perf_counter()
    base = run_toy(2000, seed=0, hp=HyperParams(lambda2=0.0)).final
    sc = run_toy(2000, seed=0, hp=HyperParams(lambda2=5.0)).final
    dt = time.perf_counter() - t0
    gain = 1 - sc["mind_error"] / base["mind_error"]
    ok = gain >= 0.10 and sc["median_ssim_hg"] > base["median_ssim_hg"]
    _verdict(8, ok, f"MIND error {base['mind_error']:.4f} -> {sc['mind_error']:.4f} ({100 * gain:.1f}% lower), "
             f"median SSIM(HG) {base['median_ssim_hg']:.4f} -> {sc['median_ssim_hg']:.4f}, {dt / 60:.1f} min")


# ---------------------------------------------------------------- 9

def _snapshot(d):
    out = {}
    for p in sorted(d.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if p.name == "config.json":
                cfg = json.loads(data)
                cfg.pop("out", None)
                data = json.dumps(cfg, sort_keys=True).encode()
            out[p.relative_to(d).as_posix()] = data
    return out


def test_criterion_9_reproducible_outputs(tmp_path):
    ph = tmp_path / "ph"
    assert main(["phantom-gen", "--slices", "4", "--height", "32", "--width", "32",
                 "--noise", "25", "--seed", "9", "--out", str(ph)]) == 0
    small = ["--slices", "4", "--height", "16", "--width", "16", "--base-channels", "2",
             "--res-blocks", "1", "--d-layers", "2", "--d-channels", "2"]
    commands = [
        ["phantom-gen", "--slices", "4", "--height", "32", "--width", "32", "--noise", "25", "--seed", "9"],
        ["extract-mind", "--input", str(ph / "mr"), "--slice", "2"],
        ["evaluate", "--gt", str(ph / "ct"), "--syn", str(ph / "mr"), "--mr", str(ph / "mr")],
        ["pbs-check", "--k-mr", "50", "--k-ct", "40", "--draws", "200", "--seed", "9"],
        ["train-toy", "--steps", "5", "--seed", "9", "--quiet", *small],
        ["grad-check", "--op", "conv2d[w]", "--op", "structure_loss", "--seed", "9"],
    ]
    same = []
    for k, argv in enumerate(commands):
        snaps = []
        for rep in range(2):
            d = tmp_path / f"c{k}_{rep}"
            assert main(argv + ["--out", str(d)]) == 0, argv[0]
            snaps.append(_snapshot(d))
        same.append(snaps[0] == snaps[1] and len(snaps[0]) > 1)
    names = [c[0] for c in commands]
    _verdict(9, all(same), ", ".join(f"{n}={'same' if s else 'DIFF'}" for n, s in zip(names, same)))
