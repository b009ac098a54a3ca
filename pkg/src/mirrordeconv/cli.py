"""Command-line front end.

Subcommands cover the full workflow:

* ``simulate``    write a synthetic calibration or scene dataset
* ``calibrate``   fit a blur model from a calibration dataset
* ``deconvolve``  restore one scene from its focal stack
* ``evaluate``    fit + restore with several methods and tabulate metrics
* ``report``      tabulate previously written report JSON files
* ``selftest``    tiny deterministic end-to-end run with a digest

Config files use one ``key = value`` pair per line (``#`` comments);
``--set key=value`` overrides file entries and explicit flags override
both.  Exit codes: 0 success, 1 failure while computing (solver or
denoiser trouble), 2 bad inputs or configuration.
"""

import argparse
import hashlib
import json
import logging
import re
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._backend import active_backend, set_thread_count
from ._config import mapping_kwargs
from .baselines import (CoordGateOperator, averaged_observation,
                        averaged_operator, fit_patchwise, petzval_composite,
                        single_slice)
from .calib import (CalibConfig, fit_model, generate_target,
                    radiometric_correct, read_dataset, write_dataset)
from .imgio import FocalStack, load_model, save_model, write_pfm
from .metrics import evaluate_frame, format_table
from .simulate import (AberrationSpec, make_scene, offset_frame, render_stack,
                       vignetting_frame)
from .solver import DenoiserError, SolveConfig, deconvolve

log = logging.getLogger("mirrordeconv")

TARGET_KINDS = ("binary_random", "random_dots", "dot_grid", "sector_star", "mixed")
EVAL_METHODS = "seidelconv,coordgate,patchwise11,avg,petzval,single"


# --------------------------------------------------------------------------
# config plumbing


def parse_kv_file(path):
    """Read a ``key = value`` config file into a {str: str} dict."""
    mapping = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, val = line.split("=", 1)
        mapping[key.strip()] = val.strip()
    return mapping


def _parse_set_pairs(pairs):
    mapping = {}
    for item in pairs or ():
        if "=" not in item:
            raise ValueError(f"--set needs key=value, got {item!r}")
        key, val = item.split("=", 1)
        mapping[key.strip()] = val.strip()
    return mapping


def _merged_mapping(args, flag_keys=()):
    """Combine config file, --set pairs and explicit flags (low to high)."""
    mapping = {}
    if getattr(args, "config", None):
        mapping.update(parse_kv_file(args.config))
    mapping.update(_parse_set_pairs(getattr(args, "set", None)))
    for dest, key in flag_keys:
        val = getattr(args, dest)
        if val is not None:
            mapping[key] = val
    return mapping


def _solve_config(args, use_config_file=True):
    """Solver settings from flags (and, for deconvolve, the config file)."""
    flags = [("prior", "prior"), ("lam", "lam"), ("iters", "iters"),
             ("step", "step"), ("init", "init"), ("sigma_max", "sigma_max"),
             ("sigma_min", "sigma_min"), ("data_steps", "data_steps"),
             ("denoiser_cmd", "denoiser_cmd"),
             ("denoiser_timeout", "denoiser_timeout")]
    flags = [f for f in flags if hasattr(args, f[0])]
    if use_config_file:
        mapping = _merged_mapping(args, flags)
    else:
        mapping = {key: getattr(args, dest) for dest, key in flags
                   if getattr(args, dest) is not None}
    return SolveConfig(**mapping_kwargs(SolveConfig, mapping, "solver option"))


def _calib_config(args):
    mapping = _merged_mapping(args)
    if args.seed is not None:
        mapping["seed"] = args.seed
    return CalibConfig(**mapping_kwargs(CalibConfig, mapping,
                                        "calibration option"))


def _progress_callback(total):
    every = max(1, total // 10)
    def cb(epoch, model, loss):
        if epoch == 0 or (epoch + 1) % every == 0:
            log.info("epoch %4d/%d  loss %.4e", epoch + 1, total, loss)
    return cb


def _load_corrected(path):
    """Dataset with every stack brought to the corrected photometric frame."""
    ds = read_dataset(path)
    if ds["cal"] is not None:
        ds["stacks"] = [radiometric_correct(s, ds["cal"]) for s in ds["stacks"]]
    return ds


def _write_report(path, metrics, iters):
    rep = {key: float(metrics[key]) for key in
           ("psnr_full", "psnr_on_axis", "psnr_off_axis", "ssim_full")}
    rep["iters"] = int(iters)
    Path(path).write_bytes(json.dumps(rep, sort_keys=True).encode() + b"\n")
    return rep


# --------------------------------------------------------------------------
# simulate


def cmd_simulate(args):
    seed = args.seed or 0
    mapping = _merged_mapping(args)
    spec = AberrationSpec(**mapping_kwargs(AberrationSpec, mapping,
                                           "optics parameter"))
    h, w = args.height, args.width
    shape = (h, w)
    radiometric = spec.vignette_strength != 0 or args.offset_level > 0
    offset = offset_frame(shape, args.offset_level) if radiometric else None

    targets, stacks = [], []
    for i in range(args.count):
        if args.kind == "scene":
            truth = make_scene(h, w, seed=seed + i, kind=args.scene_kind)
            label = args.scene_kind
        else:
            kinds = ("binary_random", "random_dots")
            label = kinds[i % 2] if args.target_kind == "mixed" else args.target_kind
            truth = generate_target(label, h, w, seed=seed + i)
        stack, _ = render_stack(truth, spec, args.z0, args.dz, args.slices,
                                seed=100003 * seed + i)
        if offset is not None:
            stack = FocalStack(stack.data + offset, stack.z0, stack.dz,
                               corrected=False)
        targets.append(truth)
        stacks.append(stack)
        log.info("rendered %s %03d (%s)", args.kind, i, label)

    kwargs = {}
    if offset is not None:
        zs = stacks[0].zs()
        kwargs = {"offset": offset, "cal_vign_z": zs,
                  "cal_vign_maps": [vignetting_frame(spec, z, shape) for z in zs]}
    write_dataset(args.out, targets, stacks,
                  extra_meta={"kind": args.kind, "seed": seed}, **kwargs)
    print(f"wrote {args.count} {args.kind} stack(s) under {args.out}")
    return 0


# --------------------------------------------------------------------------
# calibrate


def cmd_calibrate(args):
    cfg = _calib_config(args)
    ds = _load_corrected(args.data)
    log.info("fitting %d components of size %d to %d stacks (%s backend)",
             cfg.n_components, cfg.kernel_size, len(ds["stacks"]),
             active_backend())
    t0 = time.monotonic()
    model, history = fit_model(ds["targets"], ds["stacks"], cfg,
                               callback=_progress_callback(cfg.epochs))
    save_model(model, args.out)
    print(f"fitted model: {model.n_slices} slice(s), "
          f"{model.n_components} components, kernel {model.kernel_size}px, "
          f"final loss {history['loss'][-1]:.4e} "
          f"({time.monotonic() - t0:.1f}s)")
    print(f"wrote {args.out}")
    return 0


# --------------------------------------------------------------------------
# deconvolve


def cmd_deconvolve(args):
    cfg = _solve_config(args)
    model = load_model(args.model)
    ds = _load_corrected(args.data)
    if not 0 <= args.index < len(ds["stacks"]):
        raise ValueError(f"stack index {args.index} out of range "
                         f"(dataset has {len(ds['stacks'])})")
    stack = ds["stacks"][args.index]
    log.info("deconvolving stack %03d with prior=%s", args.index, cfg.prior)
    x, info = deconvolve(model, stack, cfg)
    print(f"prior={cfg.prior} iters={info['iters']} "
          f"loss={info['loss'][-1]:.4e} restarts={info['restarts']}")
    if args.out:
        write_pfm(x, args.out)
        print(f"wrote {args.out}")
    if args.report:
        truth = ds["targets"][args.index]
        rep = _write_report(args.report, evaluate_frame(x, truth),
                            info["iters"])
        print(f"psnr_full={rep['psnr_full']:.2f}dB "
              f"psnr_off_axis={rep['psnr_off_axis']:.2f}dB "
              f"ssim_full={rep['ssim_full']:.4f}")
        print(f"wrote {args.report}")
    return 0


# --------------------------------------------------------------------------
# evaluate


def _fit_eval_models(args, methods, calib_ds):
    """Fit every operator family the requested methods need."""
    targets, stacks = calib_ds["targets"], calib_ds["stacks"]
    fitted = {}
    need_seidel = methods & {"seidelconv", "avg", "petzval", "single"}
    if need_seidel:
        if args.model:
            fitted["seidelconv"] = load_model(args.model)
        else:
            cfg = _calib_config(args)
            log.info("fitting warped-component model")
            fitted["seidelconv"], _ = fit_model(
                targets, stacks, cfg, callback=_progress_callback(cfg.epochs))
    if "coordgate" in methods:
        mapping = _merged_mapping(args)
        mapping["freeze_warps"] = True
        if args.seed is not None:
            mapping["seed"] = args.seed
        cfg = CalibConfig(**mapping_kwargs(CalibConfig, mapping,
                                           "calibration option"))
        log.info("fitting warp-free gated model")
        frozen, _ = fit_model(targets, stacks, cfg,
                              callback=_progress_callback(cfg.epochs))
        fitted["coordgate"] = CoordGateOperator.from_seidelconv(frozen)
    for name in methods:
        m = re.fullmatch(r"patchwise(\d+)", name)
        if m:
            log.info("fitting %s", name)
            fitted[name] = fit_patchwise(targets, stacks,
                                         kernel_size=int(m.group(1)))
    return fitted


def _method_problem(name, fitted, stack):
    """Operator/observation pair for one restoration method."""
    if name in ("seidelconv", "coordgate") or name.startswith("patchwise"):
        return fitted[name], stack
    model = fitted["seidelconv"]
    if name == "avg":
        return averaged_operator(model), averaged_observation(stack)
    if name == "petzval":
        return petzval_composite(model, stack)
    if name == "single":
        op, obs, k = single_slice(model, stack)
        log.info("single-slice baseline picked slice %d", k)
        return op, obs
    raise ValueError(f"unknown method {name!r}")


def cmd_evaluate(args):
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for name in methods:
        if name not in ("seidelconv", "coordgate", "avg", "petzval",
                        "single") and not re.fullmatch(r"patchwise\d+", name):
            raise ValueError(f"unknown method {name!r}")
    scfg = _solve_config(args, use_config_file=False)
    calib_ds = _load_corrected(args.calib)
    scene_ds = _load_corrected(args.scene)
    fitted = _fit_eval_models(args, set(methods), calib_ds)

    results = {}
    for name in methods:
        sums = None
        for i, stack in enumerate(scene_ds["stacks"]):
            op, obs = _method_problem(name, fitted, stack)
            x, _ = deconvolve(op, obs, scfg)
            frame = evaluate_frame(x, scene_ds["targets"][i])
            sums = frame if sums is None else \
                {k: sums[k] + frame[k] for k in sums}
            log.info("%s scene %03d: psnr_full %.2f dB", name, i,
                     frame["psnr_full"])
        results[name] = {k: v / len(scene_ds["stacks"])
                         for k, v in sums.items()}
    print(format_table(results))
    if args.json:
        Path(args.json).write_text(json.dumps(results, sort_keys=True,
                                              indent=2) + "\n")
        print(f"wrote {args.json}")
    return 0


# --------------------------------------------------------------------------
# report


def cmd_report(args):
    results = {}
    for path in args.files:
        results[Path(path).stem] = json.loads(Path(path).read_text())
    print(format_table(results))
    return 0


# --------------------------------------------------------------------------
# selftest


def run_selftest(workdir):
    """End-to-end miniature pipeline; returns (digest, report dict).

    Everything is seeded, so two runs (at any thread count) must produce
    byte-identical model/output/report files and the same digest.
    """
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    h = w = 64
    n, z0, dz = 2, 0.0, 250.0
    spec = AberrationSpec(pixel_pitch_um=130.0, decenter_x_px=1.0,
                          decenter_y_px=-0.5, vignette_strength=0.15,
                          noise_sigma=0.003)
    shape = (h, w)
    offset = offset_frame(shape)
    zs = [z0 + k * dz for k in range(n)]
    vmaps = [vignetting_frame(spec, z, shape) for z in zs]

    def raw(stack):
        return FocalStack(stack.data + offset, stack.z0, stack.dz,
                          corrected=False)

    # binary calibration targets keep the little fit well conditioned
    targets, stacks = [], []
    for i in range(4):
        t = generate_target("binary_random", h, w, seed=10 + i)
        s, _ = render_stack(t, spec, z0, dz, n, seed=100 + i)
        targets.append(t)
        stacks.append(raw(s))
    write_dataset(work / "calib", targets, stacks, offset=offset,
                  cal_vign_z=zs, cal_vign_maps=vmaps)

    scene = make_scene(h, w, seed=5)
    sstack, _ = render_stack(scene, spec, z0, dz, n, seed=200)
    write_dataset(work / "scene", [scene], [raw(sstack)], offset=offset,
                  cal_vign_z=zs, cal_vign_maps=vmaps)

    ds = _load_corrected(work / "calib")
    cfg = CalibConfig(n_components=4, kernel_size=7, epochs=30,
                      batch_size=4, lr=1e-2, lambda_kern=1e-5,
                      weight_downsample=8, seed=0)
    model, history = fit_model(ds["targets"], ds["stacks"], cfg)
    save_model(model, work / "model.scnv")
    log.info("selftest fit loss %.4e", history["loss"][-1])

    sds = _load_corrected(work / "scene")
    x, info = deconvolve(model, sds["stacks"][0],
                         SolveConfig(prior="tv", lam=2e-3, iters=40))
    write_pfm(x, work / "out.pfm")
    rep = _write_report(work / "report.json", evaluate_frame(x, sds["targets"][0]),
                        info["iters"])

    digest = hashlib.sha256()
    for name in ("model.scnv", "out.pfm", "report.json"):
        digest.update((work / name).read_bytes())
    return digest.hexdigest(), rep


def cmd_selftest(args):
    t0 = time.monotonic()
    workdir = args.workdir or tempfile.mkdtemp(prefix="mirrordeconv-selftest-")
    keep = args.keep or args.workdir is not None
    try:
        digest, rep = run_selftest(workdir)
    finally:
        if not keep:
            shutil.rmtree(workdir, ignore_errors=True)
    print(f"selftest metrics psnr_full={rep['psnr_full']:.2f}dB "
          f"psnr_off_axis={rep['psnr_off_axis']:.2f}dB "
          f"ssim_full={rep['ssim_full']:.4f} iters={rep['iters']}")
    print(f"selftest digest {digest}")
    if rep["psnr_full"] < 15.0:
        print(f"selftest FAILED: restoration quality is far below normal "
              f"({rep['psnr_full']:.2f} dB)")
        return 1
    print(f"selftest ok ({time.monotonic() - t0:.1f}s, "
          f"{active_backend()} backend)")
    return 0


# --------------------------------------------------------------------------
# parser


def _add_common(sub):
    sub.add_argument("--seed", type=int, default=None,
                     help="base RNG seed (default 0)")
    sub.add_argument("--threads", type=int, default=None,
                     help="compute threads for the accelerated backend")
    sub.add_argument("-v", "--verbose", action="count", default=0,
                     help="log progress (-vv for debug)")


def _add_config(sub, what):
    sub.add_argument("--config", metavar="FILE",
                     help=f"{what} config file (key = value lines)")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help=f"override one {what} option")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mirrordeconv",
        description="Spatially varying deblurring of focal stacks from "
                    "curved-mirror optics.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="COMMAND")

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--kind", choices=("calibration", "scene"),
                   default="calibration")
    p.add_argument("--count", type=int, default=4,
                   help="number of targets/scenes (default 4)")
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--slices", type=int, default=3)
    p.add_argument("--z0", type=float, default=0.0,
                   help="first sensor position in um")
    p.add_argument("--dz", type=float, default=200.0,
                   help="sensor spacing in um")
    p.add_argument("--target-kind", choices=TARGET_KINDS, default="mixed")
    p.add_argument("--scene-kind", choices=("blobs", "bars", "textured"),
                   default="blobs")
    p.add_argument("--offset-level", type=float, default=0.02,
                   help="sensor dark level (0 with vignette_strength=0 "
                        "writes a dataset without radiometric files)")
    _add_config(p, "optics")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="fit a blur model from a dataset")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="MODEL.scnv")
    _add_config(p, "calibration")
    _add_common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("deconvolve", help="restore a scene from its stack")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--index", type=int, default=0,
                   help="stack index inside the dataset (default 0)")
    p.add_argument("--model", required=True, metavar="MODEL.scnv")
    p.add_argument("--out", metavar="OUT.pfm")
    p.add_argument("--report", metavar="REPORT.json",
                   help="write metrics against the stored ground truth")
    p.add_argument("--prior", choices=("tv", "l2", "none", "pnp"))
    p.add_argument("--lambda", dest="lam", type=float,
                   help="regularization weight")
    p.add_argument("--iters", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--init", choices=("stack_average", "zeros"))
    p.add_argument("--sigma-max", type=float)
    p.add_argument("--sigma-min", type=float)
    p.add_argument("--data-steps", type=int)
    p.add_argument("--denoiser-cmd", metavar="CMD")
    p.add_argument("--denoiser-timeout", type=float)
    _add_config(p, "solver")
    _add_common(p)
    p.set_defaults(func=cmd_deconvolve)

    p = sub.add_parser("evaluate",
                       help="compare restoration methods on a scene dataset")
    p.add_argument("--calib", required=True, metavar="DIR")
    p.add_argument("--scene", required=True, metavar="DIR")
    p.add_argument("--methods", default=EVAL_METHODS,
                   help=f"comma list (default {EVAL_METHODS})")
    p.add_argument("--model", metavar="MODEL.scnv",
                   help="reuse a fitted model instead of fitting here")
    p.add_argument("--prior", choices=("tv", "l2", "none", "pnp"))
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--json", metavar="OUT.json")
    _add_config(p, "calibration")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="print a table from report JSON files")
    p.add_argument("files", nargs="+", metavar="REPORT.json")
    _add_common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest",
                       help="deterministic end-to-end smoke test")
    p.add_argument("--workdir", metavar="DIR",
                   help="run here and keep the files (default: temp dir)")
    p.add_argument("--keep", action="store_true",
                   help="keep the temporary directory")
    _add_common(p)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    try:
        if args.threads is not None:
            set_thread_count(args.threads)
        return args.func(args) or 0
    except DenoiserError as exc:
        log.error("denoiser failure: %s", exc)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        log.error("%s", exc)
        return 2
    except (RuntimeError, np.linalg.LinAlgError) as exc:
        log.error("computation failed: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
