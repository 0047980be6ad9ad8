"""Command-line entry point binding the library into reproducible runs.

Subcommands: poses, synth, fit, extract, render, eval, filter.  Every
run is deterministic given its flags and seed; commands that write into
an output directory also drop a `run.json` (command, configuration echo,
seed, package version — no timestamps) so reruns are byte-identical.

Exit codes: 0 on success, 1 on runtime failures (with a diagnostic on
stderr), 2 on usage errors (argparse prints usage).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from .campose import orbit_eval_poses, random_viewpoints, zero123pp_targets
from .core3d import DEFAULT_FOV_DEG, DEFAULT_RADIUS, load_poses_json, save_poses_json
from .dataio import (
    filter_manifest,
    load_manifest,
    parse_scene,
    read_obj,
    read_pfm,
    read_ppm,
    render_gt,
    save_manifest,
    write_obj,
    write_pfm,
    write_ppm,
)
from .flexigrid import build_grid, extract_mesh
from .meshmetrics import (
    align_yaw,
    chamfer,
    fscore,
    normalize_unit_cube,
    psnr,
    sample_surface,
    ssim,
)
from .optfit import FitConfig, LossWeights, fit_stage1, fit_stage2
from .raster import rasterize, shade_vertices
from .report import plot_loss_curves, write_loss_csv, write_view_metrics
from .triplane import TriplaneField, read_checkpoint, write_checkpoint
from .volren import ImageBuffer, render_volume


def _package_version() -> str:
    try:
        return version("meshfit")
    except PackageNotFoundError:
        return "unknown"


def _write_run_json(directory: Path, command: str, payload: dict) -> None:
    record = {"command": command, "version": _package_version(), **payload}
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "run.json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- view directories ---------------------------------------------------------


def _view_stem(directory: Path, index: int) -> Path:
    return directory / f"view_{index:03d}"


def write_view(directory: Path, index: int, buf: ImageBuffer) -> None:
    stem = _view_stem(directory, index)
    write_ppm(buf.rgb, stem.with_suffix(".ppm"))
    write_pfm(buf.depth, Path(f"{stem}_depth.pfm"))
    write_pfm(buf.normal, Path(f"{stem}_normal.pfm"))
    write_pfm(buf.mask, Path(f"{stem}_mask.pfm"))


def read_view(directory: Path, index: int) -> ImageBuffer:
    stem = _view_stem(directory, index)
    rgb = read_ppm(stem.with_suffix(".ppm"))
    return ImageBuffer(
        width=rgb.shape[1],
        height=rgb.shape[0],
        rgb=rgb,
        depth=read_pfm(Path(f"{stem}_depth.pfm")).astype(np.float64),
        normal=read_pfm(Path(f"{stem}_normal.pfm")).astype(np.float64),
        mask=read_pfm(Path(f"{stem}_mask.pfm")).astype(np.float64),
    )


def load_scene_dir(directory) -> list:
    """(pose, buffer) pairs from a `synth` output directory."""
    directory = Path(directory)
    poses = load_poses_json(directory / "cameras.json")
    return [(pose, read_view(directory, i)) for i, pose in enumerate(poses)]


# -- config plumbing ------------------------------------------------------------


_CONFIG_FIELDS = [f for f in dataclasses.fields(FitConfig) if f.name != "weights"]
_WEIGHT_FIELDS = list(dataclasses.fields(LossWeights))


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("fit configuration overrides")
    for f in _CONFIG_FIELDS:
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            group.add_argument(flag, default=None, action=argparse.BooleanOptionalAction)
        else:
            group.add_argument(flag, type=int if f.type == "int" else float, default=None)
    for f in _WEIGHT_FIELDS:
        group.add_argument(
            "--" + f.name.replace("_", "-"), type=float, default=None
        )


def config_from_args(args) -> FitConfig:
    """Config file (if given) with any explicitly passed flags layered on top."""
    config = FitConfig.load(args.config) if args.config else FitConfig()
    overrides = {}
    for f in _CONFIG_FIELDS:
        value = getattr(args, f.name)
        if value is not None:
            overrides[f.name] = int(value) if f.type == "int" else value
    weight_overrides = {}
    for f in _WEIGHT_FIELDS:
        value = getattr(args, f.name)
        if value is not None:
            weight_overrides[f.name] = value
    if weight_overrides:
        overrides["weights"] = dataclasses.replace(config.weights, **weight_overrides)
    return config.override(**overrides) if overrides else config


# -- subcommands -----------------------------------------------------------------


def cmd_poses(args) -> int:
    if args.protocol == "zero123pp":
        poses = zero123pp_targets(
            args.query_azimuth, args.radius, args.fov, args.width, args.height
        )
    elif args.protocol == "orbit":
        poses = orbit_eval_poses(
            args.n, radius=args.radius, fov_deg=args.fov,
            width=args.width, height=args.height,
        )
    else:
        poses = random_viewpoints(
            args.n, args.seed, radius=args.radius, fov_deg=args.fov,
            width=args.width, height=args.height,
        )
    print(json.dumps([pose.to_json() for pose in poses], indent=2))
    return 0


def cmd_synth(args) -> int:
    scene = parse_scene(args.scene)
    poses = load_poses_json(args.poses)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    buffers = render_gt(scene, poses)
    for i, buf in enumerate(buffers):
        write_view(out, i, buf)
    save_poses_json(poses, out / "cameras.json")
    _write_run_json(out, "synth", {"scene": args.scene, "n_views": len(poses)})
    print(f"wrote {len(poses)} views to {out}")
    return 0


def cmd_fit(args) -> int:
    if args.stage == "2" and not args.init_ckpt:
        raise ValueError("--stage 2 needs --init-ckpt with a stage-1 checkpoint")
    config = config_from_args(args)
    views = load_scene_dir(args.scene)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    if args.stage == "2":
        field = read_checkpoint(args.init_ckpt)
    elif args.init_ckpt:
        field = read_checkpoint(args.init_ckpt)
    else:
        field = TriplaneField(
            resolution=config.triplane_resolution,
            channels=config.triplane_channels,
            seed=config.seed,
        )

    trace1, trace2 = [], []
    mesh = None
    if args.stage in ("1", "both"):
        field = fit_stage1(field, views, config, trace=trace1)
    if args.stage in ("2", "both"):
        field, mesh = fit_stage2(field, views, config, trace=trace2)

    write_checkpoint(field, out)
    if mesh is not None:
        write_obj(mesh, out.with_suffix(".obj"))
    csv_path = out.parent / (out.stem + "_loss.csv")
    write_loss_csv(csv_path, trace1, trace2)
    plot_loss_curves(trace1, trace2, csv_path.with_suffix(".png"))
    _write_run_json(
        out.parent,
        "fit",
        {"config": config.to_dict(), "seed": config.seed, "stage": args.stage,
         "scene_dir": str(args.scene)},
    )
    final = trace2[-1]["total"] if trace2 else (trace1[-1]["total"] if trace1 else None)
    print(f"fit complete; final loss {final}")
    return 0


def cmd_extract(args) -> int:
    field = read_checkpoint(args.ckpt)
    mesh = shade_vertices(field, extract_mesh(build_grid(field, args.grid)))
    write_obj(mesh, args.out)
    print(f"extracted {len(mesh.triangles)} triangles to {args.out}")
    return 0


def cmd_render(args) -> int:
    if (args.mesh is None) == (args.ckpt is None):
        raise ValueError("pass exactly one of --mesh or --ckpt")
    poses = load_poses_json(args.poses)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mesh:
        mesh = read_obj(args.mesh)
        buffers = [rasterize(mesh, pose) for pose in poses]
        source = str(args.mesh)
    else:
        field = read_checkpoint(args.ckpt)
        buffers = [
            render_volume(field, pose, args.samples, threads=args.threads)
            for pose in poses
        ]
        source = str(args.ckpt)
    for i, buf in enumerate(buffers):
        write_view(out, i, buf)
    save_poses_json(poses, out / "cameras.json")
    _write_run_json(out, "render", {"source": source, "n_views": len(poses)})
    print(f"wrote {len(poses)} views to {out}")
    return 0


def cmd_eval(args) -> int:
    pred = read_obj(args.pred)
    gt = read_obj(args.gt)
    pred_norm = normalize_unit_cube(pred)
    gt_norm = normalize_unit_cube(gt)
    aligned_yaw = 0.0
    if args.align_yaw:
        pred_norm, aligned_yaw = align_yaw(pred_norm, gt_norm)
    pred_cloud = sample_surface(pred_norm, args.n_points, args.seed)
    gt_cloud = sample_surface(gt_norm, args.n_points, args.seed)
    report = {
        "psnr": None,
        "ssim": None,
        "cd": chamfer(pred_cloud, gt_cloud),
        "fscore": fscore(pred_cloud, gt_cloud, args.tau),
        "n_points": args.n_points,
        "seed": args.seed,
        "aligned_yaw_deg": aligned_yaw,
    }
    per_view = []
    if args.views:
        poses = load_poses_json(args.views)
        for i, pose in enumerate(poses):
            pred_img = rasterize(pred, pose)
            gt_img = rasterize(gt, pose)
            per_view.append(
                {"view": i, "psnr": psnr(pred_img, gt_img), "ssim": ssim(pred_img, gt_img)}
            )
        report["psnr"] = float(np.mean([row["psnr"] for row in per_view]))
        report["ssim"] = float(np.mean([row["ssim"] for row in per_view]))
    if args.report_dir:
        write_view_metrics(args.report_dir, per_view)
        with open(Path(args.report_dir) / "metrics.json", "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_filter(args) -> int:
    entries = load_manifest(args.manifest)
    kept, rejected = filter_manifest(entries)
    save_manifest(kept, args.out)
    rejected_path = args.rejected or Path(args.out).with_suffix(".rejected.json")
    with open(rejected_path, "w", encoding="utf-8") as fh:
        json.dump(
            [{**entry.to_json(), "reason": reason} for entry, reason in rejected],
            fh,
            indent=2,
        )
        fh.write("\n")
    print(f"kept {len(kept)} of {len(entries)}")
    return 0


# -- parser ------------------------------------------------------------------------


def _add_pose_flags(parser, with_size=True):
    parser.add_argument("--radius", type=float, default=DEFAULT_RADIUS)
    parser.add_argument("--fov", type=float, default=DEFAULT_FOV_DEG)
    if with_size:
        parser.add_argument("--width", type=int, default=320)
        parser.add_argument("--height", type=int, default=320)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshfit",
        description="Sparse-view mesh reconstruction toolkit",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("poses", help="emit camera pose JSON to stdout")
    p.add_argument("--protocol", choices=("zero123pp", "orbit", "random"), required=True)
    p.add_argument("--query-azimuth", type=float, default=0.0)
    p.add_argument("--n", type=int, default=21)
    p.add_argument("--seed", type=int, default=0)
    _add_pose_flags(p)
    p.set_defaults(func=cmd_poses)

    p = sub.add_parser("synth", help="render ground-truth views of an analytic scene")
    p.add_argument("--scene", required=True, help="e.g. 'sphere:0.5#ff0000+box:0.25@0.5,0,0'")
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="two-stage reconstruction from a view directory")
    p.add_argument("--scene", required=True, help="directory produced by `synth`")
    p.add_argument("--config", default=None, help="FitConfig JSON file")
    p.add_argument("--out", required=True, help="checkpoint path (.tpf)")
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--init-ckpt", default=None, help="checkpoint to start from")
    _add_config_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("extract", help="iso-surface mesh from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--grid", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("render", help="render a mesh or checkpoint at given poses")
    p.add_argument("--mesh", default=None)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=96, help="volume samples per ray")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="compare a predicted mesh against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--views", default=None, help="poses JSON for image metrics")
    p.add_argument("--n-points", type=int, default=16384)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=0.2, help="f-score threshold")
    p.add_argument("--align-yaw", action="store_true")
    p.add_argument("--report-dir", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("filter", help="apply the dataset quality rules to a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rejected", default=None)
    p.set_defaults(func=cmd_filter)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help exits 0; usage errors exit 2
        return int(exc.code or 0)
    try:
        return int(args.func(args) or 0)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
