"""``polgs`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Progress goes to stderr; results are written to files only.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import torch

from .dataset import DatasetError, load_dataset, load_scene_info, make_scene, make_synthetic_dataset
from .imageio import write_exr
from .metrics import evaluate, export_decomposition, export_pointcloud
from .render import render_stokes
from .scene import load_checkpoint
from .stokes import ETA, POLARIZER_ANGLES, quad_from_stokes
from .trainer import CHECKPOINT_NAME, NumericalError, TrainConfig, set_threads, train

log = logging.getLogger("polgs")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="polgs", description="Polarimetric Gaussian-surfel reconstruction.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic polarized dataset")
    s.add_argument("--shape", choices=("sphere", "plane", "superellipsoid"), default="sphere")
    s.add_argument("--views", type=int, default=8)
    s.add_argument("--res", type=int, default=128)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--samples", type=int, default=1024, help="Monte Carlo samples per pixel and lobe")
    s.add_argument("--eta", type=float, default=ETA)
    s.add_argument("--roughness", type=float, default=0.15)
    s.add_argument("--albedo", type=float, nargs=3, default=(0.5, 0.5, 0.5), metavar=("R", "G", "B"))
    s.add_argument("--environment", default="procedural", help="'procedural' or a constant radiance")
    s.add_argument("--threads", type=int, default=None)

    t = sub.add_parser("train", help="optimize surfels and cubemap on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--iters", type=int, default=None)
    t.add_argument("--warmup", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--config", default=None, help="JSON file overriding training defaults")
    t.add_argument("--no-pol", action="store_true", help="drop the polarimetric loss (ablation)")
    t.add_argument("--eta", type=float, default=None)
    t.add_argument("--cubemap-res", type=int, default=None)
    t.add_argument("--threads", type=int, default=None)
    t.add_argument("--init-points", default=None, help="PLY point cloud used as initialization")

    for name, helptext in (("render", "render Stokes and polarizer images of the dataset views"),
                           ("decompose", "write diffuse/specular/AoP/DoP/normal/depth images")):
        r = sub.add_parser(name, help=helptext)
        r.add_argument("--run", required=True, help="training output directory or checkpoint file")
        r.add_argument("--data", required=True, help="dataset providing the cameras")
        r.add_argument("--out", required=True)
        r.add_argument("--view", default=None, help="only this view name")
        r.add_argument("--eta", type=float, default=None)
        r.add_argument("--threads", type=int, default=None)

    e = sub.add_parser("export", help="write the surfel point cloud as PLY")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True, help="dataset whose cameras orient the normals")
    e.add_argument("--out", required=True)
    e.add_argument("--threads", type=int, default=None)

    v = sub.add_parser("eval", help="normal MAE and Chamfer distance against ground truth")
    v.add_argument("--pred", required=True, help="training output directory or checkpoint file")
    v.add_argument("--gt", required=True, help="synthetic dataset with ground-truth normals/depth")
    v.add_argument("--out", default=None, help="report path (default: <pred>/eval.json)")
    v.add_argument("--eta", type=float, default=None)
    v.add_argument("--threads", type=int, default=None)
    return p


def _dataset(path):
    if not Path(path).exists():
        raise DatasetError(f"dataset not found: {path}")
    return load_dataset(path)


def _checkpoint(run):
    path = Path(run)
    if path.is_dir():
        path = path / CHECKPOINT_NAME
    if not path.is_file():
        raise DatasetError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError) as e:
        raise DatasetError(str(e)) from None


def _threads(n):
    set_threads(n if n else (os.cpu_count() or 1))


def _select(views, name):
    if name is None:
        return views
    sel = [v for v in views if v.name == name]
    if not sel:
        raise DatasetError(f"view {name} not in dataset")
    return sel


def cmd_synth(a) -> None:
    if a.views < 2 or a.res <= 0 or a.samples <= 0:
        raise UsageError("synth needs --views >= 2, --res > 0 and --samples > 0")
    _threads(a.threads)
    scene = make_scene(a.shape, a.environment, albedo=tuple(a.albedo), eta=a.eta, roughness=a.roughness)
    make_synthetic_dataset(scene, a.views, a.res, a.seed, a.out, samples=a.samples)
    log.info("wrote %d views to %s", a.views, a.out)


def train_config(a) -> TrainConfig:
    cfg = TrainConfig.load(a.config) if a.config else TrainConfig()
    overrides = {"iterations": a.iters, "warmup": a.warmup, "seed": a.seed, "eta": a.eta,
                 "cubemap_res": a.cubemap_res, "threads": a.threads}
    d = {k: v for k, v in overrides.items() if v is not None}
    if a.threads is None and not a.config:
        d["threads"] = os.cpu_count() or 1
    if a.no_pol:
        d["use_pol"] = False
    if "iterations" in d and "warmup" not in d and d["iterations"] <= cfg.warmup:
        raise UsageError(f"--iters {d['iterations']} does not exceed the warm-up ({cfg.warmup}); pass --warmup")
    return TrainConfig.from_dict(d, cfg)


def cmd_train(a) -> None:
    if a.config and not Path(a.config).is_file():
        raise UsageError(f"config file not found: {a.config}")
    try:
        cfg = train_config(a)
    except ValueError as e:
        raise UsageError(str(e)) from None
    views = _dataset(a.data)
    init = a.init_points
    if init is None and (Path(a.data) / "points.ply").is_file():
        init = Path(a.data) / "points.ply"

    def progress(rep):
        if rep.iteration % 100 == 0:
            log.info("iter %5d  total %.5f  rgb %.5f  pol %.5f", rep.iteration, rep.total, rep.rgb, rep.pol)

    res = train(views, cfg, a.out, init_points=init, progress=progress)
    log.info("trained %d iterations in %.1f s, %d surfels", cfg.iterations, res.seconds, len(res.cloud))


def cmd_render(a) -> None:
    cloud, cube, _, meta = _checkpoint(a.run)
    views = _select(_dataset(a.data), a.view)
    _threads(a.threads)
    eta = a.eta or meta.get("eta", ETA)
    out = Path(a.out)
    for v in views:
        d = out / v.name
        d.mkdir(parents=True, exist_ok=True)
        with torch.no_grad():
            S = render_stokes(cloud, cube, v.camera, deferred=meta.get("use_specular", True), eta=eta).stokes.numpy()
        for k, name in enumerate(("s0", "s1", "s2")):
            write_exr(d / f"{name}.exr", S[..., k])
        for deg, img in zip(POLARIZER_ANGLES, quad_from_stokes(S)):
            write_exr(d / f"I{deg:03d}.exr", img)
        log.info("rendered %s", v.name)


def cmd_decompose(a) -> None:
    cloud, cube, _, meta = _checkpoint(a.run)
    views = _select(_dataset(a.data), a.view)
    _threads(a.threads)
    eta = a.eta or meta.get("eta", ETA)
    for v in views:
        export_decomposition(cloud, cube, v.camera, Path(a.out) / v.name, eta)
        log.info("decomposed %s", v.name)


def cmd_export(a) -> None:
    cloud, _, _, _ = _checkpoint(a.run)
    views = _dataset(a.data)
    _threads(a.threads)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    export_pointcloud(cloud, a.out, [v.camera for v in views])
    log.info("wrote %d surfels to %s", len(cloud), a.out)


def cmd_eval(a) -> None:
    cloud, cube, _, meta = _checkpoint(a.pred)
    views = _dataset(a.gt)
    _threads(a.threads)
    info = load_scene_info(a.gt) or {}
    try:
        rep = evaluate(cloud, cube, views, a.eta or meta.get("eta", ETA), info.get("units", "scene"))
    except ValueError as e:
        raise DatasetError(str(e)) from None
    out = Path(a.out) if a.out else (Path(a.pred) if Path(a.pred).is_dir() else Path(a.pred).parent) / "eval.json"
    rep.save(out)
    cd = "n/a" if rep.cd is None else f"{rep.cd:.5f}"
    log.info("MAE %.3f deg  CD %s  -> %s", rep.mae, cd, out)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "decompose": cmd_decompose,
            "export": cmd_export, "eval": cmd_eval}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        COMMANDS[args.command](args)
    except UsageError as e:
        print(f"polgs {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, FileNotFoundError) as e:
        print(f"polgs {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as e:
        print(f"polgs {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
