"""``sccgan`` command line.

Subcommands: phantom-gen, extract-mind, evaluate, pbs-check, train-toy,
grad-check.  Every subcommand accepts ``--seed``, ``--threads``, ``--out`` and
``--config`` (a flat JSON object whose keys are flag names; explicit flags
win over file values).  The effective configuration is written to
``<out>/config.json``.

Exit codes:

    0  success
    2  bad flags or config file
    3  missing input file
    4  validation failure (bad input data, failed check)
    5  numerical failure (NaN/inf during computation)

On failure one JSON line ``{"error": ..., "code": ..., "message": ...}`` is
printed to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from collections import Counter
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_VALIDATION = 4
EXIT_NUMERIC = 5

_ERROR_NAMES = {EXIT_USAGE: "usage", EXIT_MISSING: "missing_file",
                EXIT_VALIDATION: "validation", EXIT_NUMERIC: "numerical"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, message)


def _common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--seed", type=int, default=0, help="global RNG seed (default 0)")
    p.add_argument("--threads", type=int, default=1,
                   help="cap on BLAS/OpenMP threads (default 1)")
    p.add_argument("--out", default=out_default, help=f"output directory (default {out_default})")
    p.add_argument("--config", default=None, help="flat JSON file of flag values")


def _phantom_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--slices", type=int, default=24, help="slices per volume (default 24)")
    p.add_argument("--height", type=int, default=64, help="rows per slice (default 64)")
    p.add_argument("--width", type=int, default=64, help="columns per slice (default 64)")
    p.add_argument("--n-structures", type=int, default=3, help="number of random blobs (default 3)")
    p.add_argument("--no-skull", action="store_true", help="omit the skull shell")
    p.add_argument("--blur", type=float, default=0.6, help="Gaussian blur sigma in pixels (default 0.6)")
    p.add_argument("--noise", type=float, default=0.0, help="additive noise std inside the head (default 0)")


def _mind_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--region-radius", type=int, default=4, help="offset window radius (default 4, i.e. 9x9)")
    p.add_argument("--patch-radius", type=int, default=3, help="patch radius (default 3, i.e. 7x7)")
    p.add_argument("--sigma", type=float, default=2.0, help="patch Gaussian sigma (default 2)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sccgan", description="Structure-constrained MR-to-CT synthesis toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("phantom-gen", help="write a paired MR/CT phantom and its label volume")
    _common(p, "phantom")
    _phantom_flags(p)

    p = sub.add_parser("extract-mind", help="compute descriptor features of a volume")
    _common(p, "mind")
    p.add_argument("--input", required=True, help="volume path: stem, .json or .raw (required)")
    p.add_argument("--slice", type=int, default=None, help="only this slice (default: all)")
    _mind_flags(p)

    p = sub.add_parser("evaluate", help="MAE/PSNR/SSIM/SSIM(HG) of a synthetic CT")
    _common(p, "evaluation")
    p.add_argument("--gt", required=True, help="ground-truth CT volume (required)")
    p.add_argument("--syn", required=True, help="synthetic CT volume (required)")
    p.add_argument("--mr", default=None,
                   help="MR volume used for the head mask (default: mask from the ground truth)")
    p.add_argument("--percentile", type=float, default=90.0,
                   help="gradient percentile defining the HG region (default 90)")
    p.add_argument("--name", default="volume0", help="row name in the report")

    p = sub.add_parser("pbs-check", help="histogram of position-based slice choices")
    _common(p, "pbs")
    p.add_argument("--k-mr", type=int, required=True, help="number of MR slices (required)")
    p.add_argument("--k-ct", type=int, required=True, help="number of CT slices (required)")
    p.add_argument("--draws", type=int, default=1000, help="draws per MR slice (default 1000)")
    p.add_argument("--jitter", type=int, default=5, help="jitter half-width (default 5)")
    p.add_argument("--mode", choices=["PBS", "RANDOM"], default="PBS", help="sampling mode (default PBS)")
    p.add_argument("--index", type=int, action="append", default=None,
                   help="MR slice to audit (repeatable; default all)")

    p = sub.add_parser("train-toy", help="train the toy model on phantoms and report test metrics")
    _common(p, "train")
    p.add_argument("--steps", type=int, default=2000, help="training steps (default 2000)")
    p.add_argument("--lambda1", type=float, default=10.0, help="cycle weight (default 10)")
    p.add_argument("--lambda2", type=float, default=5.0, help="structure weight (default 5)")
    p.add_argument("--lr", type=float, default=2e-4, help="Adam learning rate (default 2e-4)")
    p.add_argument("--mode", choices=["PBS", "RANDOM"], default="PBS", help="slice sampling (default PBS)")
    p.add_argument("--jitter", type=int, default=5, help="PBS jitter (default 5)")
    p.add_argument("--base-channels", type=int, default=8, help="generator width (default 8)")
    p.add_argument("--res-blocks", type=int, default=2, help="generator residual blocks (default 2)")
    p.add_argument("--d-layers", type=int, default=3, help="discriminator layers (default 3)")
    p.add_argument("--d-channels", type=int, default=8, help="discriminator width (default 8)")
    p.add_argument("--margin", type=int, default=4,
                   help="augmentation padding per axis before the random crop (default 4)")
    _phantom_flags(p)
    p.add_argument("--quiet", action="store_true", help="no per-step progress on stderr")

    p = sub.add_parser("grad-check", help="finite-difference checks of ops and losses")
    _common(p, "gradcheck")
    p.add_argument("--all", action="store_true", help="run every registered case")
    p.add_argument("--op", action="append", default=None, help="case name (repeatable)")
    p.add_argument("--precision", choices=["32", "64"], default="32", help="storage precision (default 32)")
    p.add_argument("--list", action="store_true", help="list case names and exit")
    return parser


# ----------------------------------------------------------------------------
# config handling


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    # first pass without required-flag checks so that a config file may supply them
    required = []
    for name in COMMANDS:
        for a in _subparser(parser, name)._actions:
            if a.required:
                required.append(a)
                a.required = False
    args = parser.parse_args(argv)
    for a in required:
        a.required = True
    if args.config is None:
        return parser.parse_args(argv)
    path = Path(args.config)
    if not path.exists():
        raise CliError(EXIT_MISSING, f"config file not found: {path}")
    try:
        values = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_USAGE, f"config file is not valid JSON: {exc}")
    if not isinstance(values, dict):
        raise CliError(EXIT_USAGE, "config file must hold a flat JSON object")
    sp = _subparser(parser, args.command)
    known = {a.dest for a in sp._actions}
    values = {k.replace("-", "_"): v for k, v in values.items() if k != "command"}
    unknown = sorted(set(values) - known)
    if unknown:
        raise CliError(EXIT_USAGE, f"unknown config keys for {args.command}: {unknown}")
    values.pop("config", None)
    for a in sp._actions:
        if a.dest in values:
            a.required = False
    sp.set_defaults(**values)
    return parser.parse_args(argv)


def _effective_config(args: argparse.Namespace) -> Dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("config",)}
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load(path):
    from .imagecore import load_volume
    return load_volume(path)


# ----------------------------------------------------------------------------
# commands


def cmd_phantom_gen(args) -> int:
    from .imagecore import Volume3D, Modality, save_volume
    from .phantom import PhantomSpec, generate
    spec = PhantomSpec(seed=args.seed, slices=args.slices, height=args.height, width=args.width,
                       n_structures=args.n_structures, skull=not args.no_skull,
                       blur=args.blur, noise=args.noise)
    ph = generate(spec)
    out = _out_dir(args)
    save_volume(ph.mr, out / "mr")
    save_volume(ph.ct, out / "ct")
    save_volume(ph.labels, out / "labels")
    mask = np.stack([m.data for m in ph.masks]).astype(np.float32)
    save_volume(Volume3D(mask, Modality.OTHER, (0.0, 1.0), ph.mr.spacing), out / "mask")
    print(f"wrote {out}/{{mr,ct,labels,mask}}.{{json,raw}}")
    return EXIT_OK


def cmd_extract_mind(args) -> int:
    from .imagecore import save_volume
    from .mind import MindParams, mind_extract
    vol = _load(args.input)
    p = MindParams(region_radius=args.region_radius, patch_radius=args.patch_radius, sigma=args.sigma)
    if args.slice is not None and not 0 <= args.slice < vol.n_slices:
        raise CliError(EXIT_VALIDATION, f"slice {args.slice} outside [0, {vol.n_slices - 1}]")
    ks = [args.slice] if args.slice is not None else range(vol.n_slices)
    out = _out_dir(args)
    for k in ks:
        save_volume(mind_extract(vol.slice(k), p).to_volume(), out / f"mind_{k:04d}")
    _write_json(out / "mind_params.json", p.to_dict())
    print(f"wrote {len(ks)} feature volume(s) with {p.n_channels} channels to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from . import metrics
    from .imagecore import Modality, Volume3D
    gt, syn = _load(args.gt), _load(args.syn)
    if gt.shape != syn.shape:
        raise CliError(EXIT_VALIDATION, f"shape mismatch: gt {gt.shape} vs syn {syn.shape}")
    if args.mr is not None:
        mr = _load(args.mr)
        if mr.shape != gt.shape:
            raise CliError(EXIT_VALIDATION, f"shape mismatch: mr {mr.shape} vs gt {gt.shape}")
        source = "head_mask(MR)"
    else:
        mr = Volume3D(gt.data, Modality.OTHER, gt.intensity_range, gt.spacing)
        source = "head_mask(ground truth)"
    masks = metrics.head_masks(mr)
    if sum(m.count for m in masks) == 0:
        raise CliError(EXIT_VALIDATION, "head mask is empty")
    report = metrics.MetricReport(mask_source=source)
    report.volumes.append(metrics.evaluate_volume(gt, syn, masks, args.name, args.percentile))
    out = _out_dir(args)
    (out / "metrics.csv").write_text(report.to_csv())
    (out / "metrics.json").write_text(report.to_json())
    v = report.volumes[0]
    print(f"mae={v.mae:.4f} psnr={v.psnr:.4f} ssim={v.ssim:.6f} ssim_hg={v.ssim_hg:.6f}")
    return EXIT_OK


def cmd_pbs_check(args) -> int:
    from .sampler import PairingPlan, SamplingMode, pbs_index
    plan = PairingPlan(args.k_mr, args.k_ct, SamplingMode(args.mode), args.jitter, args.seed)
    if args.draws < 1:
        raise CliError(EXIT_USAGE, "--draws must be >= 1")
    rng = plan.rng()
    indices = args.index if args.index else list(range(args.k_mr))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["i", "ct_index", "count"])
    bad = 0
    for i in indices:
        if not 0 <= i < args.k_mr:
            raise CliError(EXIT_VALIDATION, f"MR slice {i} outside [0, {args.k_mr - 1}]")
        if plan.mode is SamplingMode.PBS:
            draws = [pbs_index(i, plan, rng) for _ in range(args.draws)]
        else:
            draws = rng.integers(0, args.k_ct, size=args.draws).tolist()
        counts = Counter(draws)
        bad += sum(c for j, c in counts.items() if not 0 <= j < args.k_ct)
        for j in sorted(counts):
            w.writerow([i, j, counts[j]])
    out = _out_dir(args)
    (out / "pbs_histogram.csv").write_text(buf.getvalue())
    if bad:
        raise CliError(EXIT_VALIDATION, f"{bad} draws fell outside [0, {args.k_ct - 1}]")
    print(f"wrote {out}/pbs_histogram.csv ({len(indices)} MR slices x {args.draws} draws)")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    from .networks import DiscriminatorConfig, GeneratorConfig
    from .phantom import PhantomSpec
    from .sampler import SamplingMode
    from .trainer import HyperParams, run_toy, save_checkpoint
    hp = HyperParams(lr=args.lr, lambda1=args.lambda1, lambda2=args.lambda2)
    g_cfg = GeneratorConfig(args.base_channels, args.res_blocks)
    d_cfg = DiscriminatorConfig(args.d_layers, args.d_channels)
    spec = PhantomSpec(slices=args.slices, height=args.height, width=args.width,
                       n_structures=args.n_structures, skull=not args.no_skull,
                       blur=args.blur, noise=args.noise)
    if args.steps < 0:
        raise CliError(EXIT_USAGE, "--steps must be >= 0")

    def progress(step, losses):
        if not args.quiet and (step % 100 == 0 or step == args.steps):
            print(f"step {step}/{args.steps} g_total={losses.g_total:.4f} "
                  f"structure={losses.structure:.4f} d={losses.d:.4f}", file=sys.stderr)

    result = run_toy(args.steps, args.seed, hp, g_cfg, d_cfg, spec, SamplingMode(args.mode),
                     args.jitter, (args.margin, args.margin), progress=progress)
    out = _out_dir(args)
    (out / "history.csv").write_text(result.history_csv())
    final = dict(result.final)
    final["lambda2"] = args.lambda2
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = sorted(final)
    w.writerow(keys)
    w.writerow([repr(float(final[k])) for k in keys])
    (out / "metrics.csv").write_text(buf.getvalue())
    _write_json(out / "metrics.json", {k: float(v) for k, v in final.items()})
    save_checkpoint(result.state, out / "checkpoint", hp)
    print(" ".join(f"{k}={final[k]:.6g}" for k in keys))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .checks import CASES, run_case
    if args.list:
        print("\n".join(CASES))
        return EXIT_OK
    if args.all:
        names = list(CASES)
    elif args.op:
        names = args.op
        unknown = [n for n in names if n not in CASES]
        if unknown:
            raise CliError(EXIT_USAGE, f"unknown case(s) {unknown}; see --list")
    else:
        raise CliError(EXIT_USAGE, "pass --all or --op NAME")
    dtype = np.float32 if args.precision == "32" else np.float64
    results = [run_case(n, dtype, args.seed) for n in names]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case", "dtype", "max_rel_error", "mean_rel_error", "coords", "tol", "status"])
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        w.writerow([r.name, r.dtype, repr(r.max_rel_error), repr(r.mean_rel_error),
                    r.n_checked, r.tol, status])
        print(f"{status} {r.name:<22} max_rel={r.max_rel_error:.3e}")
    out = _out_dir(args)
    (out / "grad_check.csv").write_text(buf.getvalue())
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CliError(EXIT_VALIDATION, f"gradient check failed for {failed}")
    return EXIT_OK


COMMANDS = {
    "phantom-gen": cmd_phantom_gen,
    "extract-mind": cmd_extract_mind,
    "evaluate": cmd_evaluate,
    "pbs-check": cmd_pbs_check,
    "train-toy": cmd_train_toy,
    "grad-check": cmd_grad_check,
}


def _fail(code: int, message: str) -> int:
    print(json.dumps({"error": _ERROR_NAMES[code], "code": code, "message": message}), file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except CliError as exc:
        return _fail(exc.code, str(exc))
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    from threadpoolctl import threadpool_limits
    from .imagecore import VolumeFormatError

    if args.threads < 1:
        return _fail(EXIT_USAGE, "--threads must be >= 1")
    try:
        with threadpool_limits(limits=args.threads):
            code = COMMANDS[args.command](args)
        if not getattr(args, "list", False):
            _write_json(_out_dir(args) / "config.json", _effective_config(args))
        return code
    except CliError as exc:
        return _fail(exc.code, str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, str(exc))
    except FloatingPointError as exc:
        return _fail(EXIT_NUMERIC, str(exc))
    except (VolumeFormatError, ValueError, IndexError) as exc:
        return _fail(EXIT_VALIDATION, str(exc))


if __name__ == "__main__":
    sys.exit(main())
