"""Command-line entry point: ``relightgs <subcommand> [flags]``.

Exit codes: 0 success, 2 usage error, 3 bad or missing input, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import io
from .core import DiagnosticsError, RelightGSError, ShapeMismatchError
from .metrics import chamfer_distance, extract_point_cloud, f_score, psnr, ssim
from .optim import EmptySupervisionError, FitConfig, LossWeights, SupervisionSet, View, fit_scene
from .render import render
from .shading import project_envmap_to_sh
from .synth import make_scene

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3, 4
RENDER_MAPS = ("color", "pbr", "normal", "albedo", "roughness", "metallic", "depth")
_MAP_ATTR = {
    "color": "color",
    "pbr": "pbr_color",
    "normal": "normal",
    "albedo": "albedo_map",
    "roughness": "roughness_map",
    "metallic": "metallic_map",
    "depth": "depth",
    "alpha": "accum_alpha",
}

log = logging.getLogger("relightgs")


class UsageError(RelightGSError):
    pass


class InputError(RelightGSError):
    pass


def _echo(command: str, resolved: dict) -> None:
    print(json.dumps({"command": command, **resolved}, sort_keys=True, default=str), flush=True)


def _view_name(i: int, name: str) -> str:
    return f"{i:03d}_{name}"


def _write_maps(out_dir: Path, index: int, rend, maps) -> None:
    for name in maps:
        arr = getattr(rend, _MAP_ATTR[name])
        io.write_float(out_dir / (_view_name(index, name) + ".npy"), arr)
        if name in ("color", "pbr", "albedo"):
            io.write_ldr(out_dir / (_view_name(index, name) + ".png"), arr)


# --------------------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    if args.views < 1:
        raise UsageError("--views must be >= 1")
    if args.primitives < 1:
        raise UsageError("--primitives must be >= 1")
    resolved = dict(out=str(args.out), seed=args.seed, views=args.views, primitives=args.primitives,
                    kind=args.kind, resolution=args.resolution, samples=args.samples)
    _echo("synth", resolved)
    scene = make_scene(args.seed, args.primitives, args.views, kind=args.kind,
                       resolution=(args.resolution, args.resolution), samples=args.samples)
    out = io.ensure_dir(args.out)
    io.save_asset(scene.asset, out / "asset.rgsa")
    io.save_sh(scene.asset.lighting, out / "lighting.sh")
    io.save_cameras(scene.cameras, out / "cameras.json")
    (out / "synth.json").write_text(json.dumps(resolved, sort_keys=True, indent=1))
    for i, rend in enumerate(scene.renders):
        _write_maps(out, i, rend, RENDER_MAPS + ("alpha",))
    return EXIT_OK


def _load_supervision(data: Path, with_materials: bool) -> SupervisionSet:
    cams_path = data / "cameras.json"
    if not cams_path.exists():
        raise InputError(f"{data}: missing cameras.json")
    cams = io.load_cameras(cams_path)
    views = []
    for i, cam in enumerate(cams):
        def get(name, required=True):
            p = data / (_view_name(i, name) + ".npy")
            if p.exists():
                return io.read_float(p).astype(np.float64)
            png = data / (_view_name(i, name) + ".png")
            if png.exists():
                return io.read_ldr(png)
            if required:
                raise InputError(f"{data}: missing image for view {i} ({name})")
            return None

        image = get("pbr")
        if image.shape[:2] != (cam.height, cam.width):
            raise ShapeMismatchError(f"view {i}: image {image.shape[:2]} does not match camera {cam.height}x{cam.width}")
        alpha = get("alpha", required=False)
        mask = alpha > 0.5 if alpha is not None else np.ones(image.shape[:2], bool)
        mats = {}
        if with_materials:
            for name in ("albedo", "roughness", "metallic"):
                m = get(name, required=False)
                if m is not None:
                    mats[name] = m
        views.append(View(cam, image, mask, **mats))
    return SupervisionSet(views)


def _fit_config(args) -> FitConfig:
    cfg = io.load_config(args.config) if args.config else FitConfig()
    over = {k: v for k, v in dict(iterations=args.iterations, n_primitives=args.primitives,
                                  samples=args.samples, seed=args.seed, workers=args.workers).items()
            if v is not None}
    w = cfg.weights
    if args.no_material:
        w = LossWeights(**{**w.__dict__, "material": 0.0})
    return FitConfig(**{**cfg.__dict__, **over, "weights": w, "learning_rates": dict(cfg.learning_rates)})


def cmd_fit(args) -> int:
    cfg = _fit_config(args)
    _echo("fit", dict(data=str(args.data), out=str(args.out), **cfg.to_dict()))
    sup = _load_supervision(Path(args.data), with_materials=not args.no_material)
    result = fit_scene(sup, cfg)
    out = io.ensure_dir(args.out)
    io.save_asset(result.asset, out / "asset.rgsa")
    io.save_config(cfg, out / "config.txt")
    (out / "loss.csv").write_text(result.trace_csv())
    with open(out / "metrics.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["view", "psnr", "ssim"])
        for i, v in enumerate(sup.views):
            pred = render(result.asset.cloud, result.asset.lighting, v.camera, cfg.samples,
                          cfg.raster_settings).pbr_color
            wr.writerow([i, repr(psnr(pred, v.image)), repr(ssim(pred, v.image))])
    return EXIT_OK


def _cameras_for(args, asset_dir: Path | None):
    path = Path(args.cameras) if args.cameras else (asset_dir / "cameras.json" if asset_dir else None)
    if path is None or not path.exists():
        raise InputError("no camera file (pass --cameras)")
    cams = io.load_cameras(path)
    if args.view is not None:
        if not 0 <= args.view < len(cams):
            raise UsageError(f"--view {args.view} out of range (0..{len(cams) - 1})")
        return [(args.view, cams[args.view])]
    return list(enumerate(cams))


def cmd_render(args) -> int:
    maps = args.maps.split(",") if args.maps else list(RENDER_MAPS)
    unknown = [m for m in maps if m not in RENDER_MAPS]
    if unknown:
        raise UsageError(f"unknown map(s) {unknown}; choose from {list(RENDER_MAPS)}")
    _echo("render", dict(asset=str(args.asset), cameras=args.cameras, view=args.view, maps=maps,
                         samples=args.samples, out=str(args.out)))
    asset = io.load_asset(args.asset)
    out = io.ensure_dir(args.out)
    for i, cam in _cameras_for(args, Path(args.asset).parent):
        _write_maps(out, i, render(asset.cloud, asset.lighting, cam, args.samples), maps)
    return EXIT_OK


def cmd_relight(args) -> int:
    if (args.sh is None) == (args.env is None):
        raise UsageError("pass exactly one of --sh or --env")
    _echo("relight", dict(asset=str(args.asset), sh=args.sh, env=args.env, env_samples=args.env_samples,
                          seed=args.seed, cameras=args.cameras, view=args.view, samples=args.samples,
                          out=str(args.out)))
    asset = io.load_asset(args.asset)
    if args.sh:
        lighting = io.load_sh(args.sh)
    else:
        lighting = project_envmap_to_sh(io.read_hdr_equirect(args.env), args.env_samples, seed=args.seed)
    out = io.ensure_dir(args.out)
    io.save_sh(lighting, out / "lighting.sh")
    for i, cam in _cameras_for(args, Path(args.asset).parent):
        _write_maps(out, i, render(asset.cloud, lighting, cam, args.samples), ["pbr"])
    return EXIT_OK


def cmd_project_env(args) -> int:
    _echo("project-env", dict(env=str(args.env), samples=args.samples, seed=args.seed, out=str(args.out)))
    lighting = project_envmap_to_sh(io.read_hdr_equirect(args.env), args.samples, seed=args.seed)
    io.save_sh(lighting, args.out)
    return EXIT_OK


def _images(folder: Path, pattern: str) -> dict[str, Path]:
    return {p.stem: p for p in sorted(folder.glob(pattern))}


def cmd_eval(args) -> int:
    _echo("eval", dict(pred=str(args.pred), ref=str(args.ref), method=args.method, pattern=args.pattern,
                       tau=args.tau, opacity_min=args.opacity_min, out=args.out))
    pred_dir, ref_dir = Path(args.pred), Path(args.ref)
    for d in (pred_dir, ref_dir):
        if not d.is_dir():
            raise InputError(f"{d}: not a directory")
    preds, refs = _images(pred_dir, args.pattern), _images(ref_dir, args.pattern)
    missing = sorted(set(refs) - set(preds))
    if missing:
        raise InputError(f"prediction is missing {missing}")
    if not refs:
        raise InputError(f"no reference images match {args.pattern!r} in {ref_dir}")

    chamfer = fscore = math.nan
    if (pred_dir / "asset.rgsa").exists() and (ref_dir / "asset.rgsa").exists():
        pa = extract_point_cloud(io.load_asset(pred_dir / "asset.rgsa"), args.opacity_min)
        ra = extract_point_cloud(io.load_asset(ref_dir / "asset.rgsa"), args.opacity_min)
        chamfer, fscore = chamfer_distance(pa, ra), f_score(pa, ra, args.tau)

    def load(p: Path):
        return io.read_float(p).astype(np.float64) if p.suffix == ".npy" else io.read_ldr(p)

    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        wr = csv.writer(out)
        wr.writerow(["method", "sample", "psnr", "ssim", "chamfer", "fscore"])
        for name, ref_path in refs.items():
            a, b = load(preds[name]), load(ref_path)
            wr.writerow([args.method, name, repr(psnr(a, b)), repr(ssim(a, b)), repr(chamfer), repr(fscore)])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="relightgs", description="Relightable Gaussian splatting toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a procedural ground-truth dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--views", type=int, default=16)
    p.add_argument("--primitives", type=int, default=16)
    p.add_argument("--kind", choices=("blob", "random"), default="blob")
    p.add_argument("--resolution", type=int, default=64, help="square image size in pixels")
    p.add_argument("--samples", type=int, default=64, help="hemisphere shading samples M")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit a relightable asset to a dataset directory")
    p.add_argument("--data", required=True, help="directory with cameras.json and NNN_pbr images")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key = value file; flags below override it")
    p.add_argument("--iterations", type=int, help="default 2000")
    p.add_argument("--primitives", type=int, help="primitive budget K (default 64)")
    p.add_argument("--samples", type=int, help="shading samples M (default 64)")
    p.add_argument("--seed", type=int, help="default 0")
    p.add_argument("--workers", type=int, help="threads per step; 1 is bit-reproducible (default 1)")
    p.add_argument("--no-material", action="store_true", help="drop material supervision")
    p.set_defaults(func=cmd_fit)

    for name, fn, helptext in (("render", cmd_render, "render maps of an asset"),
                               ("relight", cmd_relight, "render an asset under new lighting")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--asset", required=True)
        p.add_argument("--cameras", help="cameras.json (default: next to the asset)")
        p.add_argument("--view", type=int, help="render only this camera index")
        p.add_argument("--samples", type=int, default=512, help="shading samples M")
        p.add_argument("--out", required=True, help="output directory")
        if name == "render":
            p.add_argument("--maps", help=f"comma-separated subset of {','.join(RENDER_MAPS)}")
        else:
            p.add_argument("--sh", help="SH lighting text file")
            p.add_argument("--env", help="equirectangular .hdr or .npy environment map")
            p.add_argument("--env-samples", type=int, default=1_000_000)
            p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=fn)

    p = sub.add_parser("project-env", help="project an environment map onto SH lighting")
    p.add_argument("--env", required=True)
    p.add_argument("--samples", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="SH text file to write")
    p.set_defaults(func=cmd_project_env)

    p = sub.add_parser("eval", help="image and geometry metrics as CSV")
    p.add_argument("--pred", required=True, help="prediction directory")
    p.add_argument("--ref", required=True, help="reference directory")
    p.add_argument("--method", default="relightgs")
    p.add_argument("--pattern", default="*_pbr.npy", help="glob selecting images to compare")
    p.add_argument("--tau", type=float, default=0.01, help="F-score distance threshold")
    p.add_argument("--opacity-min", type=float, default=0.5)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DiagnosticsError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, EmptySupervisionError, ShapeMismatchError, io.AssetFormatError, io.RasterFormatError,
            FileNotFoundError, IsADirectoryError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
