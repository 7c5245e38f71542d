"""Command-line entry point: gen, train, eval, trace, validate, demo1d."""

from __future__ import annotations

import argparse
import csv
import hashlib
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CheckpointError, HotspotError, InvalidArgument, InvalidConfig, ParseError, TrainingDivergence
from .evaluation import (camera_ring, compare_grids, default_grid, grid_eval, render_outputs, sphere_trace)
from .field import read_checkpoint, set_default_threads, write_checkpoint
from .geometry import SHAPE_BUILDERS, ScalarGrid, load_cloud, load_grid, make_shape, sample_boundary, save_cloud, \
    save_grid, shape_grid
from .losses import parse_key_values
from .trainer import (Demo1DConfig, TrainHistory, config_from_mapping, config_to_text, demo_1d, demo_max_error,
                      probe_grid_1d, sdf_1d, stderr_progress, train)
from .validation import SUITES, run_suites

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DIVERGED = 2
EXIT_INCOMPATIBLE = 3

CLOUD_NAME = "cloud.xyz"
GT_GRID_NAME = "gt_grid.bin"

# flag name -> builder keyword, per shape
SHAPE_FLAGS = {"r": "r", "half": "half", "outer": "outer", "inner": "inner", "points": "points",
               "major": "major", "minor": "minor"}


class UsageError(Exception):
    pass


class Incompatible(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_manifest(out: Path, command: str, argv: list[str], seed: int, started: float,
                   inputs: list, outputs: list, config_text: str = "") -> None:
    lines = [f"command = {command}", f"argv = {' '.join(argv)}", f"version = {__version__}", f"seed = {seed}",
             f"wall_clock_s = {time.perf_counter() - started:.3f}"]
    for p in inputs:
        lines.append(f"input = {p} sha256={sha256_file(p)}")
    for p in outputs:
        lines.append(f"output = {p} sha256={sha256_file(p)}")
    lines += [f"config.{line}" for line in config_text.splitlines() if line.strip()]
    write_atomic(out / "manifest.txt", "\n".join(lines) + "\n")


def _ensure_out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_magic(path) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{path}: no such file")
    with open(p, "rb") as fh:
        return fh.read(12)


def _write_rows(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(val) -> str:
    if val is None:
        return "absent"
    if isinstance(val, (bool, np.bool_)):
        return str(int(val))
    if isinstance(val, (int, np.integer)):
        return str(int(val))
    return f"{float(val):.9g}"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    params = {SHAPE_FLAGS[k]: getattr(args, k) for k in SHAPE_FLAGS if getattr(args, k) is not None}
    if args.shape not in SHAPE_BUILDERS:
        raise UsageError(f"unknown shape {args.shape!r}; choose from {', '.join(sorted(SHAPE_BUILDERS))}")
    try:
        shape = make_shape(args.shape, **params)
    except TypeError:
        raise UsageError(f"shape {args.shape} does not take {', '.join('--' + k for k in params)}") from None
    if args.n <= 0:
        raise UsageError("--n must be positive")
    out = _ensure_out(args.out)
    cloud = sample_boundary(shape, args.n, args.seed)
    save_cloud(cloud, out / CLOUD_NAME)
    spec = default_grid(shape.dim, args.res)
    save_grid(shape_grid(shape, spec), out / GT_GRID_NAME)
    config = "\n".join([f"shape = {args.shape}"] + [f"{k} = {v!r}" for k, v in params.items()]
                       + [f"n = {args.n}", f"res = {spec.res[0]}"])
    write_manifest(out, "gen", args.argv, args.seed, args.started, [],
                   [out / CLOUD_NAME, out / GT_GRID_NAME], config)
    print(f"wrote {len(cloud)} points and a {'x'.join(map(str, spec.res))} grid to {out}")
    return EXIT_OK


def _load_config_items(args) -> dict[str, str]:
    items: dict[str, str] = {}
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise UsageError(f"{args.config}: no such config file")
        items.update(parse_key_values(p.read_text(encoding="utf-8")))
    for assignment in args.set or []:
        if "=" not in assignment:
            raise UsageError(f"--set expects key=value, got {assignment!r}")
        key, val = assignment.split("=", 1)
        items[key.strip()] = val.strip()
    if args.iterations is not None:
        items["iterations"] = str(args.iterations)
    if args.seed is not None:
        items["seed"] = str(args.seed)
    return items


def _merge_history(path: Path, start: int, history: TrainHistory) -> None:
    """Keep rows up to ``start`` from an earlier history file and append the new rows."""
    kept: list[str] = []
    if start > 0 and path.is_file():
        old = path.read_text().splitlines()
        kept = [line for line in old[1:] if line and int(line.split(",", 1)[0]) <= start]
    tmp = path.with_name(path.name + ".new")
    history.write_csv(tmp)
    new = tmp.read_text().splitlines()
    tmp.unlink()
    write_atomic(path, "\n".join([new[0]] + kept + new[1:]) + "\n")


def cmd_train(args) -> int:
    if not Path(args.cloud).is_file():
        raise UsageError(f"{args.cloud}: no such cloud file")
    cloud = load_cloud(args.cloud)
    config = config_from_mapping(_load_config_items(args), cloud.dim)
    out = _ensure_out(args.out)
    ckpt = out / "model.ckpt"
    config = replace(config, checkpoint_path=str(ckpt), threads=args.threads)
    resume = None
    start = 0
    if args.resume:
        if not ckpt.is_file():
            raise UsageError(f"--resume given but {ckpt} does not exist")
        resume = ckpt
        start = read_checkpoint(ckpt)[2]
    inputs = [Path(args.cloud)] + ([Path(args.config)] if args.config else [])
    try:
        fld, history = train(cloud, config, resume_from=resume,
                             progress=stderr_progress(config.iterations, args.log_machine))
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    _merge_history(out / "history.csv", start, history)
    last = history.rows[-1].losses if history.rows else {}
    write_atomic(out / "summary.txt", " ".join(f"{k}={_fmt(v)}" for k, v in last.items()) + "\n")
    write_manifest(out, "train", args.argv, config.seed, args.started, inputs,
                   [ckpt, out / "history.csv", out / "summary.txt"], config_to_text(config))
    return EXIT_OK


def _load_prediction(path, spec_source: ScalarGrid | None):
    magic = _read_magic(path)
    if magic.startswith(b"HOTSPOT-GRID"):
        return load_grid(path), None
    if magic.startswith(b"HOTSPOT-CKPT"):
        fld = read_checkpoint(path)[0]
        if spec_source is not None and spec_source.spec.dim != fld.arch.in_dim:
            raise Incompatible(f"checkpoint is {fld.arch.in_dim}D but the grid is {spec_source.spec.dim}D")
        return None, fld
    raise UsageError(f"{path}: neither a checkpoint nor a grid file")


def cmd_eval(args) -> int:
    if not Path(args.gt).is_file():
        raise UsageError(f"{args.gt}: ground-truth grid not found")
    gt = load_grid(args.gt)
    pred, fld = _load_prediction(args.model, gt)
    if pred is None:
        pred = grid_eval(fld, gt.spec)
    elif pred.spec != gt.spec:
        raise Incompatible("prediction and ground-truth grids have different specifications")
    out = _ensure_out(args.out)
    renders = _ensure_out(out / "renders")
    report = compare_grids(pred, gt, n_samples=args.samples, seed=args.seed)
    _write_rows(out / "metrics.csv", ["metric", "value"], [(k, _fmt(v)) for k, v in report.as_dict().items()])
    line = report.summary_line()
    write_atomic(out / "summary.txt", line + "\n")
    render_outputs(pred, "sdf_heatmap", renders / "sdf_heatmap.ppm")
    render_outputs(gt, "sdf_heatmap", renders / "gt_heatmap.ppm")
    write_manifest(out, "eval", args.argv, args.seed, args.started, [Path(args.model), Path(args.gt)],
                   [out / "metrics.csv", out / "summary.txt", renders / "sdf_heatmap.ppm"])
    print(line)
    return EXIT_OK


def cmd_trace(args) -> int:
    if _read_magic(args.model) != b"HOTSPOT-CKPT":
        raise UsageError(f"{args.model}: not a checkpoint")
    fld = read_checkpoint(args.model)[0]
    if fld.arch.in_dim != 3:
        raise Incompatible(f"sphere tracing needs a 3D field, checkpoint is {fld.arch.in_dim}D")
    out = _ensure_out(args.out)
    renders = _ensure_out(out / "renders")
    cams = camera_ring(args.poses, args.radius, args.elevation, width=args.size, height=args.size)
    total = np.zeros(args.max_steps + 1, dtype=np.int64)
    hit_iters = []
    rows = []
    written = []
    for k, cam in enumerate(cams):
        res = sphere_trace(fld, cam, args.max_steps, args.threshold)
        for kind, suffix in (("iteration_map", "iterations.ppm"), ("depth_map", "depth.ppm"),
                             ("normal_map", "normals.ppm"), ("iteration_histogram_csv", "histogram.csv")):
            path = renders / f"pose_{k:02d}_{suffix}"
            render_outputs(res, kind, path)
            written.append(path)
        total += np.bincount(res.iterations, minlength=args.max_steps + 1)
        hit_iters.append(res.iterations[res.hit])
        rows.append([k] + [_fmt(v) for v in res.stats().values()])
    _write_rows(renders / "iteration_histogram.csv", ["iterations", "pixels"], enumerate(total.tolist()))
    header = ["pose"] + list(res.stats().keys())
    _write_rows(out / "metrics.csv", header, rows)
    hits = np.concatenate(hit_iters)
    mean = float(hits.mean()) if hits.size else float("nan")
    line = f"poses={len(cams)} hit_pixels={hits.size} trace_mean_iters={_fmt(mean)}"
    write_atomic(out / "summary.txt", line + "\n")
    write_manifest(out, "trace", args.argv, args.seed, args.started, [Path(args.model)],
                   [out / "metrics.csv", renders / "iteration_histogram.csv"] + written)
    print(line)
    return EXIT_OK


def cmd_validate(args) -> int:
    if args.configs <= 0:
        raise UsageError("--configs must be positive")
    checks = run_suites(args.suite, configs=args.configs, seed=args.seed)
    for c in checks:
        print(c.row())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    if args.out:
        out = _ensure_out(args.out)
        _write_rows(out / "metrics.csv", ["suite", "check", "passed", "measured", "limit"],
                    [(c.suite, c.name, int(c.passed), _fmt(c.measured), c.limit) for c in checks])
        write_atomic(out / "summary.txt", f"checks={len(checks)} failed={failed}\n")
        write_manifest(out, "validate", args.argv, args.seed, args.started, [],
                       [out / "metrics.csv", out / "summary.txt"], f"suite = {args.suite}\nconfigs = {args.configs}")
    return EXIT_OK if failed == 0 else EXIT_DIVERGED


def cmd_demo1d(args) -> int:
    config = Demo1DConfig()
    if args.iterations is not None:
        if args.iterations <= 0:
            raise UsageError("--iterations must be positive")
        config = replace(config, iterations=args.iterations)
    out = _ensure_out(args.out)
    modes = ["eikonal_only", "with_heat"] if args.mode == "both" else [args.mode]
    probe = probe_grid_1d(exclude=0.0)
    target = sdf_1d(probe)
    profile_cols = [probe]
    curve_rows = []
    summary = []
    outputs = []
    for mode in modes:
        fld, curve = demo_1d(mode, args.seed, config)
        profile_cols.append(fld.forward(probe[:, None]))
        curve_rows += [(mode, int(it), repr(float(err))) for it, err in curve]
        summary.append(f"{mode}_max_error={_fmt(demo_max_error(fld))}")
        ckpt = out / f"{mode}.ckpt"
        write_checkpoint(ckpt, fld)
        outputs.append(ckpt)
    _write_rows(out / "curve.csv", ["mode", "iteration", "max_error"], curve_rows)
    _write_rows(out / "profile.csv", ["x"] + [f"u_{m}" for m in modes] + ["u_star"],
                ([repr(float(v)) for v in row] for row in zip(*profile_cols, target)))
    write_atomic(out / "summary.txt", " ".join(summary) + "\n")
    outputs += [out / "curve.csv", out / "profile.csv", out / "summary.txt"]
    write_manifest(out, "demo1d", args.argv, args.seed, args.started, [], outputs,
                   "\n".join(f"{k} = {v!r}" for k, v in vars(config).items()))
    print(" ".join(summary))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="hotspot", description="Neural signed distance fields with a heat loss.",
                     formatter_class=fmt, allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"hotspot {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False, allow_abbrev=False)
    common.add_argument("--threads", type=int, default=None,
                        help="worker cap (fallback: HOTSPOT_THREADS, then all cores)")

    def add(name, func, help_text, seed_default=0):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                           formatter_class=fmt, allow_abbrev=False)
        p.add_argument("--seed", type=int, default=seed_default, help="root random seed")
        p.set_defaults(func=func)
        return p

    p = add("gen", cmd_gen, "sample a point cloud and a ground-truth distance grid for a named shape")
    p.add_argument("shape", help=f"one of: {', '.join(sorted(SHAPE_BUILDERS))}")
    p.add_argument("--n", type=int, default=10_000, help="number of boundary points")
    p.add_argument("--res", type=int, default=None, help="grid cells per axis (default 256 in 2D, 128 in 3D)")
    p.add_argument("--out", required=True, help="output directory")
    for flag in SHAPE_FLAGS:
        p.add_argument(f"--{flag}", type=float, default=None, help="shape parameter (shape default if unset)")

    p = add("train", cmd_train, "fit a field to a point cloud", seed_default=None)
    p.add_argument("cloud", help="point cloud file")
    p.add_argument("--config", default=None, help="key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--iterations", type=int, default=None, help="override the iteration count")
    p.add_argument("--resume", action="store_true", help="continue from <out>/model.ckpt")
    p.add_argument("--log-machine", action="store_true", help="print machine-readable progress lines to stdout")
    p.add_argument("--out", required=True, help="output directory")

    p = add("eval", cmd_eval, "compare a checkpoint (or a grid) with a ground-truth grid")
    p.add_argument("model", help="checkpoint or grid file")
    p.add_argument("--gt", required=True, help="ground-truth grid file")
    p.add_argument("--samples", type=int, default=10_000, help="level-set samples for Chamfer/Hausdorff")
    p.add_argument("--out", required=True, help="output directory")

    p = add("trace", cmd_trace, "sphere trace a 3D checkpoint from a ring of cameras")
    p.add_argument("model", help="3D checkpoint")
    p.add_argument("--poses", type=int, default=10, help="number of cameras on the ring")
    p.add_argument("--radius", type=float, default=1.0, help="ring radius")
    p.add_argument("--elevation", type=float, default=0.5, help="ring height above the origin")
    p.add_argument("--size", type=int, default=500, help="image width and height in pixels")
    p.add_argument("--max-steps", type=int, default=30, help="iteration cap per ray")
    p.add_argument("--threshold", type=float, default=5e-5, help="hit threshold on |u|")
    p.add_argument("--out", required=True, help="output directory")

    p = add("validate", cmd_validate, "run the reference-solution and derivative checks")
    p.add_argument("suite", choices=list(SUITES) + ["all"], help="which suite to run")
    p.add_argument("--configs", type=int, default=100, help="random configurations for the bounds suite")
    p.add_argument("--out", default=None, help="optional output directory")

    p = add("demo1d", cmd_demo1d, "two-point 1D fit from an adversarial initialisation")
    p.add_argument("mode", choices=["eikonal_only", "with_heat", "both"], help="loss variant")
    p.add_argument("--iterations", type=int, default=None, help="override the iteration count")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    args.started = time.perf_counter()
    if args.threads is not None and args.threads < 1:
        print("hotspot: error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    set_default_threads(args.threads)
    try:
        return args.func(args)
    except (UsageError, InvalidConfig, ParseError) as exc:
        print(f"hotspot: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (Incompatible, CheckpointError) as exc:
        print(f"hotspot: error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except InvalidArgument as exc:
        print(f"hotspot: error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except HotspotError as exc:
        print(f"hotspot: error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
