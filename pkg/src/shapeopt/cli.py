"""Command-line front end.

    shapeopt train <config> [--force | --resume]
    shapeopt evaluate <config> <checkpoint> --top k
    shapeopt render <checkpoint|shapefile> [--config cfg] [--snapshots n]
    shapeopt reference <config>

Failures print one ``shapeopt: error=<kind> reason="..."`` line on stderr.
Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import agent, envloop
from .config import ParseError, RunConfig, ValidationError, parse_config, write_resolved
from .flow import cell_centered_u, run_flow, write_forces_csv, write_ppm
from .geometry import (Polygon, ShapeSpec, build_shape, polygon_area, read_outline,
                       reference_points, write_outline)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SEED_ENV = "SHAPEOPT_SEED"

log = logging.getLogger("shapeopt")


class CliError(Exception):
    def __init__(self, kind: str, reason: str, code: int):
        super().__init__(reason)
        self.kind, self.reason, self.code = kind, reason, code


def _fail(kind: str, reason: str, code: int = EXIT_CONFIG):
    raise CliError(kind, reason, code)


def load_config(path: str | Path) -> RunConfig:
    try:
        cfg = parse_config(path)
    except FileNotFoundError:
        _fail("config", f"no such file: {path}")
    except ParseError as exc:
        _fail("parse", f"{path}: {exc}")
    except ValidationError as exc:
        _fail("validation", str(exc))
    seed = os.environ.get(SEED_ENV)
    if seed is not None and seed.strip():
        try:
            cfg = cfg.with_run(seed=int(seed))
        except ValueError:
            _fail("config", f"{SEED_ENV} must be an integer, got {seed!r}")
    return cfg


def _run_config_for(artifact: Path, explicit: Optional[str]) -> RunConfig:
    if explicit:
        return load_config(explicit)
    resolved = artifact.parent / "resolved.cfg"
    if resolved.exists():
        return load_config(resolved)
    return RunConfig()


# ---------------------------------------------------------------- svg

def write_svg(poly: Polygon, path: str | Path, r_inner: float, r_outer: float,
              points: Sequence = ()) -> Path:
    """Shape outline with the inner and outer constraint circles, y up."""
    path = Path(path)
    ext = max(r_outer, float(np.max(np.abs(poly.vertices)))) * 1.1
    scale = 200.0 / ext
    size = 400

    def xy(x, y):
        return 200.0 + scale * x, 200.0 - scale * y

    pts = " ".join(f"{a:.3f},{b:.3f}" for a, b in (xy(x, y) for x, y in poly.vertices))
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           '<rect width="100%" height="100%" fill="white"/>',
           f'<circle cx="200" cy="200" r="{scale * r_inner:.3f}" fill="none" stroke="gray" '
           'stroke-dasharray="4 3" class="inner"/>',
           f'<circle cx="200" cy="200" r="{scale * r_outer:.3f}" fill="none" stroke="gray" '
           'stroke-dasharray="4 3" class="outer"/>',
           f'<polygon points="{pts}" fill="#9ecae1" stroke="black" stroke-width="1"/>']
    for p in points:
        cx, cy = xy(p.x, p.y)
        out.append(f'<circle cx="{cx:.3f}" cy="{cy:.3f}" r="3" fill="red"/>')
    out.append("</svg>")
    path.write_text("\n".join(out) + "\n")
    return path


# ---------------------------------------------------------------- commands

def _prepare_outdir(outdir: Path, force: bool, resume: bool) -> None:
    if outdir.exists() and any(outdir.iterdir()) and not (force or resume):
        _fail("outdir", f"{outdir} exists and is not empty; pass --force to overwrite or --resume")
    if force and not resume and outdir.exists():
        for name in ("history.csv", envloop.CHECKPOINT_NAME, envloop.STATE_NAME):
            (outdir / name).unlink(missing_ok=True)
        for old in outdir.glob("shape_*.dat"):
            old.unlink()
    outdir.mkdir(parents=True, exist_ok=True)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.outdir:
        cfg = cfg.with_run(outdir=args.outdir)
    if args.workers:
        cfg = cfg.with_run(workers=args.workers)
    outdir = Path(cfg.run.outdir)
    _prepare_outdir(outdir, args.force, args.resume)
    write_resolved(cfg, outdir)

    def progress(updates, history):
        ma = history.moving_average()
        log.info("update %d: episodes %d, moving average %.4f", updates, len(history), ma[-1])

    try:
        history = envloop.train(cfg, outdir, resume=args.resume, progress=progress)
    except agent.NonFiniteLoss as exc:
        _fail("numeric", f"non-finite loss: {exc}", EXIT_NUMERIC)
    ma = history.moving_average()
    print(f"episodes={len(history)} final_moving_average={ma[-1] if ma.size else float('nan'):.6g} "
          f"outdir={outdir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    ckpt = Path(args.checkpoint)
    try:
        params, _ = agent.load_checkpoint(ckpt)
    except (OSError, ValueError) as exc:
        _fail("checkpoint", str(exc))
    if params.act_dim != cfg.act_dim or params.obs_dim != cfg.run.obs_dim:
        _fail("checkpoint", f"checkpoint dims ({params.obs_dim}, {params.act_dim}) do not match "
                            f"config ({cfg.run.obs_dim}, {cfg.act_dim})")
    outdir = Path(args.outdir) if args.outdir else ckpt.parent / "evaluation"
    _prepare_outdir(outdir, args.force, False)
    records = envloop.evaluate(params, cfg, args.top)
    summary = []
    for rank, rec in enumerate(records):
        spec = rec.spec(cfg)
        if spec is not None:
            write_outline(build_shape(spec), outdir / f"top_{rank}.dat")
        summary.append({"rank": rank, "episode": rec.episode, "reward": rec.reward,
                        "mean_cd": rec.mean_cd, "mean_cl": rec.mean_cl, "area": rec.area,
                        "failed": rec.failed, "failure_reason": rec.failure_reason,
                        "points": [[p.x, p.y, p.e] for p in rec.points]})
    (outdir / "summary.json").write_text(json.dumps(summary, indent=1))
    best = records[0]
    print(f"reward={best.reward:.6g} mean_cd={best.mean_cd:.6g} mean_cl={best.mean_cl:.6g} "
          f"area={best.area:.6g} failed={int(best.failed)}")
    return EXIT_OK


def _shape_from(artifact: Path, cfg: RunConfig):
    """Polygon and control points from a checkpoint (policy mean) or an outline file."""
    try:
        params, _ = agent.load_checkpoint(artifact)
    except ValueError:
        return read_outline(artifact), []
    obs = np.ones(params.obs_dim)
    mean, _ = agent.forward_policy(params, obs)
    pts = envloop.decode_action(np.clip(mean, -1.0, 1.0), cfg)
    spec = ShapeSpec(tuple(pts), cfg.geometry.smoothing, cfg.geometry.samples)
    return build_shape(spec), list(spec.points)


def cmd_render(args) -> int:
    artifact = Path(args.artifact)
    if not artifact.exists():
        _fail("input", f"no such file: {artifact}")
    cfg = _run_config_for(artifact, args.config)
    try:
        poly, pts = _shape_from(artifact, cfg)
    except Exception as exc:
        _fail("input", f"cannot read shape from {artifact}: {exc}")
    outdir = Path(args.outdir) if args.outdir else artifact.parent / f"render_{artifact.stem}"
    outdir.mkdir(parents=True, exist_ok=True)
    g = cfg.geometry
    svg = write_svg(poly, outdir / "shape.svg", g.r_min * g.r_max, g.r_max, pts)
    print(f"svg={svg}")
    if args.snapshots > 0:
        flow = cfg.flow
        if args.t_max:
            flow = replace(flow, t_max=args.t_max)
        n_steps = int(math.ceil(flow.t_end / flow.dt - 1e-9))
        every = max(1, n_steps // args.snapshots)
        count = [0]

        def snap(state):
            mask = state.mask
            write_ppm(cell_centered_u(state), outdir / f"u_{count[0]:03d}.ppm",
                      lo=-flow.v_in, hi=flow.v_in, mask=mask)
            count[0] += 1

        result = run_flow(poly, flow, snapshot_every=every, on_snapshot=snap)
        write_forces_csv(result.samples, outdir / "forces.csv")
        print(f"snapshots={count[0]} mean_cd={result.mean_cd:.6g} mean_cl={result.mean_cl:.6g} "
              f"failed={int(result.failed)}")
    return EXIT_OK


def cmd_reference(args) -> int:
    cfg = load_config(args.config)
    flow = cfg.flow
    if args.t_max:
        flow = replace(flow, t_max=args.t_max)
    spec = ShapeSpec(tuple(reference_points(cfg.geometry.n)), cfg.geometry.smoothing,
                     cfg.geometry.samples)
    poly = build_shape(spec)
    result = run_flow(poly, flow)
    if args.forces:
        write_forces_csv(result.samples, args.forces)
    if result.failed:
        _fail("numeric", f"reference simulation failed: {result.failure_reason}", EXIT_NUMERIC)
    print(f"mean_cd={result.mean_cd:.6g} mean_cl={result.mean_cl:.6g} "
          f"cl_amplitude={result.cl_amplitude:.6g} mean_ratio={result.mean_ratio:.6g} "
          f"area={polygon_area(poly):.6g}")
    return EXIT_OK


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shapeopt", description="Shape optimisation by single-step PPO")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy")
    p.add_argument("config")
    p.add_argument("--outdir")
    p.add_argument("--workers", type=int)
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score the policy mean")
    p.add_argument("config")
    p.add_argument("checkpoint")
    p.add_argument("--top", type=int, default=1)
    p.add_argument("--outdir")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", help="draw a shape and optional velocity snapshots")
    p.add_argument("artifact", help="checkpoint or shape outline file")
    p.add_argument("--config")
    p.add_argument("--outdir")
    p.add_argument("--snapshots", type=int, default=0)
    p.add_argument("--t-max", type=float)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("reference", help="simulate the reference cylinder")
    p.add_argument("config")
    p.add_argument("--t-max", type=float)
    p.add_argument("--forces", help="write the force history to this CSV file")
    p.set_defaults(func=cmd_reference)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        reason = exc.reason.replace('"', "'")
        print(f'shapeopt: error={exc.kind} reason="{reason}"', file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
