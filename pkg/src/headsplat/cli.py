"""Command-line entry point.

Exit codes: 0 success, 1 contract violation or bad usage, 2 I/O failure.
The library is imported only after flags are parsed so that `--threads`
can size the numba pool before it starts.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import __version__

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_IO = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 is reserved for I/O failures here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _rgb(text):
    vals = _float_list(text)
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected r,g,b, got {text!r}")
    return tuple(vals)


def _lr_scale(text):
    group, sep, value = text.partition("=")
    try:
        if not sep:
            raise ValueError
        return group.strip(), float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected GROUP=VALUE, got {text!r}")


def _version_string():
    import numba
    import numpy
    return f"headsplat {__version__} (numpy {numpy.__version__}, numba {numba.__version__})"


class _VersionAction(argparse.Action):
    def __init__(self, option_strings, dest, **kw):
        super().__init__(option_strings, dest, nargs=0, help="print version and exit")

    def __call__(self, parser, namespace, values, option_string=None):
        print(_version_string())
        parser.exit()


def build_parser() -> argparse.ArgumentParser:
    def globals_parser(suppress):
        # subcommand copies use SUPPRESS so they never clobber flags given earlier
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        gp = _Parser(add_help=False)
        g = gp.add_argument_group("global")
        g.add_argument("--seed", type=int, default=d(42), help="RNG seed (default 42)")
        g.add_argument("--threads", type=int, default=d(None),
                       help="numba worker threads (default: all logical cores)")
        g.add_argument("-v", "--verbose", action="count", default=d(0))
        return gp

    top, common = globals_parser(False), globals_parser(True)

    p = _Parser(prog="headsplat", parents=[top],
                description="Gaussian splat head reconstruction and residual diffusion tools.")
    p.add_argument("--version", action=_VersionAction)
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("rig", parents=[common], help="write a camera rig JSON")
    s.add_argument("--elevations", type=_float_list, default=None,
                   help="comma-separated elevations in degrees (default -10..40 step 10)")
    s.add_argument("--azimuths", type=int, default=16, help="cameras per elevation ring")
    s.add_argument("--radius", type=float, default=None)
    s.add_argument("--fov", type=float, default=None, help="vertical field of view, degrees")
    s.add_argument("--size", type=int, default=None, help="square image size in pixels")
    s.add_argument("--out", required=True, type=Path)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic head and its renders")
    s.add_argument("--blobs", type=int, default=4, help="number of feature blobs")
    s.add_argument("--expression", type=_float_list, default=None)
    s.add_argument("--accessory", action="store_true")
    s.add_argument("--cameras", type=Path, default=None,
                   help="camera JSON to render (default: 16-view ring at elevation 0)")
    s.add_argument("--size", type=int, default=None, help="image size for the default ring")
    s.add_argument("--background", type=_rgb, default=(1.0, 1.0, 1.0))
    s.add_argument("--out", required=True, type=Path, help="output directory")

    s = sub.add_parser("render", parents=[common], help="render a PLY cloud")
    s.add_argument("--cloud", required=True, type=Path)
    s.add_argument("--cameras", required=True, type=Path)
    s.add_argument("--background", type=_rgb, default=(1.0, 1.0, 1.0))
    s.add_argument("--out", required=True, type=Path, help="output directory")

    for name, helptext in (("optimize", "refine a cloud against reference views"),
                           ("reconstruct", "initialise from 4 views and refine")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--refs", required=True, type=Path, help="directory of reference PNGs")
        s.add_argument("--cameras", required=True, type=Path)
        s.add_argument("--out", required=True, type=Path, help="output PLY")
        s.add_argument("--report", type=Path, default=None, help="report JSON")
        s.add_argument("--figure", type=Path, default=None, help="loss curve PNG")
        s.add_argument("--iters", type=int, default=None)
        s.add_argument("--lr", type=float, default=None)
        s.add_argument("--holdout", type=_int_list, default=[])
        s.add_argument("--eval-every", type=int, default=None)
        s.add_argument("--lr-scale", type=_lr_scale, action="append", default=[],
                       metavar="GROUP=X",
                       help="per-group lr multiplier (color, scale, position, rotation, opacity)")
        s.add_argument("--views-per-iter", type=int, default=None,
                       help="training views sampled per iteration (default all)")
        s.add_argument("--lambda-p", type=float, default=1.0)
        s.add_argument("--lambda-i", type=float, default=1.0)
        s.add_argument("--background", type=_rgb, default=(1.0, 1.0, 1.0))
        if name == "optimize":
            s.add_argument("--init", required=True, type=Path, help="starting PLY cloud")
        else:
            s.add_argument("--grid", type=int, default=128, help="init grid size per view")

    s = sub.add_parser("eval", parents=[common], help="metrics between two image directories")
    s.add_argument("--pred", required=True, type=Path)
    s.add_argument("--ref", required=True, type=Path)
    s.add_argument("--id-ref", type=Path, default=None,
                   help="identity reference image (default: first reference view)")
    s.add_argument("--out", required=True, type=Path, help="metrics JSON")
    s.add_argument("--csv", type=Path, default=None, help="per-view metrics CSV")

    s = sub.add_parser("diffuse-sim", parents=[common], help="trace the residual diffusion scheduler")
    s.add_argument("--mode", required=True, choices=("forward", "reverse", "oracle-sample"))
    s.add_argument("--T", type=int, default=50)
    s.add_argument("--xi1", type=float, default=0.4)
    s.add_argument("--xi2", type=float, default=0.6)
    s.add_argument("--beta-min", type=float, default=1e-4)
    s.add_argument("--beta-max", type=float, default=0.02)
    s.add_argument("--spacing", choices=("linear", "cosine"), default="linear")
    s.add_argument("--sigma", choices=("posterior", "beta", "zero"), default="zero")
    s.add_argument("--shape", type=_int_list, default=[3, 16, 16], help="tensor shape C,h,w")
    s.add_argument("--out", required=True, type=Path)

    s = sub.add_parser("run-experiment", parents=[common], help="run an experiment spec end to end")
    s.add_argument("--spec", type=Path, default=None, help="JSON or TOML spec (default built-in)")
    s.add_argument("--out", required=True, type=Path, help="output directory")
    s.add_argument("--no-figures", action="store_true")
    return p


# ------------------------------------------------------------------ commands

def _cmd_rig(a):
    from .geometry import (DATASET_ELEVATIONS, DEFAULT_FOV_Y, DEFAULT_RADIUS, DEFAULT_SIZE, Rig,
                           rig_poses, save_cameras)
    size = a.size or DEFAULT_SIZE
    rig = Rig(tuple(a.elevations or DATASET_ELEVATIONS), a.azimuths, a.radius or DEFAULT_RADIUS,
              a.fov or DEFAULT_FOV_Y, size, size)
    poses = rig_poses(rig)
    save_cameras(poses, a.out)
    logging.info("wrote %d poses to %s", len(poses), a.out)


def _cmd_synth(a):
    from .geometry import load_cameras, orbit_band
    from .harness import RING_RADIUS, gen_subject, render_subject, save_multiview
    from .splats import export_ply
    poses = (load_cameras(a.cameras) if a.cameras is not None
             else orbit_band(0.0, 16, RING_RADIUS, width=a.size or 256, height=a.size or 256))
    subject = gen_subject(a.seed, a.blobs, a.expression, a.accessory)
    mvs = render_subject(subject, poses, a.background)
    save_multiview(mvs, a.out)
    export_ply(subject.cloud, a.out / "subject.ply")
    logging.info("subject %d: %d splats, %d views", a.seed, len(subject.cloud), len(poses))


def _cmd_render(a):
    from .geometry import load_cameras
    from .io import write_json, write_png
    from .rasterizer import render
    from .splats import import_ply
    cloud = import_ply(a.cloud)
    poses = load_cameras(a.cameras)
    stats = []
    for i, pose in enumerate(poses):
        view = render(cloud, pose, a.background)
        write_png(a.out / f"view_{i:03d}.png", view.color)
        stats.append({"view": i, **view.stats})
    write_json(a.out / "stats.json", {"views": stats})


def _load_refs(a):
    from .geometry import load_cameras
    from .io import read_image_dir
    from .optimizer import MultiViewSet
    poses = load_cameras(a.cameras)
    _, images = read_image_dir(a.refs)
    if len(images) != len(poses):
        from .errors import ContractViolation
        raise ContractViolation(f"{len(images)} images in {a.refs} but {len(poses)} cameras")
    return MultiViewSet(images, poses, a.background)


def _optim_config(a):
    from .optimizer import OptimConfig
    kw = {"held_out_views": tuple(a.holdout), "seed": a.seed}
    if a.iters is not None:
        kw["iterations"] = a.iters
    if a.lr is not None:
        kw["learning_rate"] = a.lr
    if a.eval_every is not None:
        kw["eval_every"] = a.eval_every
    if a.lr_scale:
        kw["lr_scales"] = dict(a.lr_scale)
    if a.views_per_iter is not None:
        kw["views_per_iteration"] = a.views_per_iter
    return OptimConfig(**kw)


def _write_optim_outputs(a, cloud, report):
    from .io import write_json
    from .splats import export_ply
    export_ply(cloud, a.out)
    if a.report is not None:
        write_json(a.report, report.to_dict())
    if a.figure is not None:
        from .plotting import loss_curve
        loss_curve(report, a.figure)


def _cmd_optimize(a):
    from .objective import LossWeights
    from .optimizer import optimize_subject
    from .splats import import_ply
    refs = _load_refs(a)
    cfg = _optim_config(a)
    cloud = import_ply(a.init)
    cloud, report = optimize_subject(cloud, refs, cfg, LossWeights(a.lambda_p, a.lambda_i))
    _write_optim_outputs(a, cloud, report)


def _cmd_reconstruct(a):
    from .objective import LossWeights
    from .optimizer import reconstruct
    refs = _load_refs(a)
    cfg = _optim_config(a)
    cloud, report = reconstruct(refs, cfg, LossWeights(a.lambda_p, a.lambda_i), grid=(a.grid, a.grid))
    _write_optim_outputs(a, cloud, report)


def _cmd_eval(a):
    from . import objective as obj
    from .errors import ContractViolation
    from .harness import METRICS, mean_stderr
    from .io import read_image_dir, read_png, write_csv, write_json
    pred_names, pred = read_image_dir(a.pred)
    ref_names, ref = read_image_dir(a.ref)
    if pred.shape != ref.shape:
        raise ContractViolation(f"prediction stack {pred.shape} != reference stack {ref.shape}")
    id_ref = read_png(a.id_ref) if a.id_ref is not None else ref[0]
    rows = []
    for name, p, r in zip(pred_names, pred, ref):
        total, terms = obj.total_loss(p[None], r[None], obj.default_embedder(), id_ref=id_ref)
        rows.append({"view": name, "psnr": obj.psnr(p, r), "mse": terms["mse"],
                     "perceptual_proxy": terms["perceptual_proxy"], "csim": obj.csim(p, r),
                     "id_loss": terms["id_loss"], "total": total})
    doc = {"views": rows, "aggregate": {m: mean_stderr(r[m] for r in rows) for m in METRICS}}
    write_json(a.out, doc)
    if a.csv is not None:
        write_csv(a.csv, ["view", *METRICS], [[r["view"], *(r[m] for m in METRICS)] for r in rows])


def _cmd_diffuse_sim(a):
    import numpy as np
    from . import scheduler as sch
    from .io import write_json
    sched = sch.make_schedule(a.T, a.beta_min, a.beta_max, a.spacing, a.sigma)
    w = sch.MixWeights(a.xi1, a.xi2)
    rng = np.random.default_rng(a.seed)
    shape = tuple(a.shape)
    # a smooth stand-in for the upsampled low-resolution result
    yy, xx = np.meshgrid(np.linspace(-1, 1, shape[-2]), np.linspace(-1, 1, shape[-1]), indexing="ij")
    j_bar = np.broadcast_to(np.sin(2.0 * xx) * np.cos(1.5 * yy), shape).copy()
    target = 0.5 * j_bar + 0.1 * rng.standard_normal(shape)
    trace = []
    doc = {"mode": a.mode, "T": a.T, "xi1": a.xi1, "xi2": a.xi2, "seed": a.seed,
           "spacing": a.spacing, "sigma": a.sigma, "shape": list(shape)}
    if a.mode == "forward":
        eps = rng.standard_normal(shape)
        z = target.copy()
        trace.append(sch.tensor_stats(z, 0))
        for t in range(1, a.T + 1):
            z = sch.forward_mix_step(z, eps, j_bar, t, sched, w)
            trace.append(sch.tensor_stats(z, t))
        closed = sch.forward_closed_form(target, eps, j_bar, a.T, sched, w)
        doc["closed_form_max_abs_err"] = float(np.max(np.abs(closed - z)))
    elif a.mode == "reverse":
        z = sch.sample_stage2(j_bar, sch.ZeroDenoiser(), sched, w, seed=a.seed, trace=trace)
    else:
        den = sch.MixedOracleDenoiser(target, sched)
        z = sch.sample_stage2(j_bar, den, sched, w, seed=a.seed, trace=trace)
        doc["target_max_abs_err"] = float(np.max(np.abs(z - target)))
    doc["final"] = sch.tensor_stats(z, 0)
    doc["trace"] = trace
    write_json(a.out, doc)


def _cmd_run_experiment(a):
    from .harness import DEFAULT_EXPERIMENT, run_experiment
    spec = a.spec if a.spec is not None else dict(DEFAULT_EXPERIMENT)
    bundle = run_experiment(spec, a.out, figures=not a.no_figures)
    for var in bundle["variants"]:
        agg = var["aggregate"]
        if agg["final_psnr"]["n"]:
            logging.info("%s: held-out PSNR %.2f +- %.2f dB (init %.2f)", var["name"],
                         agg["final_psnr"]["mean"], agg["final_psnr"]["stderr"],
                         agg["init_psnr"]["mean"])


COMMANDS = {
    "rig": _cmd_rig, "synth": _cmd_synth, "render": _cmd_render, "optimize": _cmd_optimize,
    "reconstruct": _cmd_reconstruct, "eval": _cmd_eval, "diffuse-sim": _cmd_diffuse_sim,
    "run-experiment": _cmd_run_experiment,
}


def _setup_threads(n):
    if n is None:
        return
    if n < 1:
        raise UsageError(f"--threads must be >= 1, got {n}")
    os.environ["NUMBA_NUM_THREADS"] = str(n)
    import numba
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _setup_logging(verbosity):
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    fmt = "%(levelname)s %(name)s: %(message)s"
    if not os.environ.get("NO_COLOR") and sys.stderr.isatty():
        fmt = "\033[2m%(levelname)s\033[0m %(name)s: %(message)s"
    logging.basicConfig(level=level, format=fmt, stream=sys.stderr, force=True)


def _one_line(exc):
    return " ".join(str(exc).split()) or type(exc).__name__


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _setup_threads(args.threads)
    except UsageError as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_CONTRACT
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    _setup_logging(args.verbose)

    from .errors import ContractViolation, OptimizationAborted
    try:
        COMMANDS[args.command](args)
    except OSError as exc:
        where = exc.filename or ""
        print(f"error: I/O failure{f' on {where}' if where else ''}: {exc.strerror or exc}",
              file=sys.stderr)
        return EXIT_IO
    except OptimizationAborted as exc:
        print(f"error: {_one_line(exc)} (iteration {exc.iteration})", file=sys.stderr)
        return EXIT_CONTRACT
    except (ContractViolation, ValueError) as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_CONTRACT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
