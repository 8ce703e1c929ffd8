"""Command-line front end: detect, solve, georef, serve.

Exit codes: 0 success, 2 usage/input error, 3 degenerate solve. The log
level comes from the MONOPLOT_LOG environment variable (default WARNING).
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import georef as georef_mod
from .camera import CameraParams, intrinsics_from_fov
from .dem import DemError, DemRaster, pixel_to_world, read_asc
from .imageio import load_gray, save_png
from .keypoints import DemGcp, DetectorConfig, detect_dem_gcps, detect_keypoints
from .registration import solve as solve_problem
from .registration import write_trace_csv
from .session import Session, SessionError, load_session
from .synthetic import look_at_camera

log = logging.getLogger("monoplot")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DEGENERATE = 3


def _setup_logging() -> None:
    level = os.environ.get("MONOPLOT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def default_initial_camera(dem: DemRaster) -> CameraParams:
    """A deterministic starting view: south of the DEM, looking at its center."""
    nr, nc = dem.n_rows, dem.n_cols
    xs, ys = pixel_to_world(dem, np.array([0.0, nc - 1.0]), np.array([0.0, nr - 1.0]))
    zmin, zmax = dem.z_range()
    cx, cy = xs.mean(), ys.mean()
    span = max(xs.max() - xs.min(), ys.max() - ys.min())
    position = (cx, ys.min() - 0.4 * span, zmax + 0.3 * span)
    target = (cx, cy, 0.5 * (zmin + zmax))
    return look_at_camera(position, target, roll=0.0, fov=math.pi / 3)


def _detector_config(args: argparse.Namespace) -> DetectorConfig:
    return DetectorConfig(
        max_keypoints=args.max_keypoints,
        fast_threshold=args.fast_threshold,
        nms_radius=args.nms_radius,
        harris_k=args.harris_k,
        grid_cells=args.grid_cells,
    )


def cmd_detect(args: argparse.Namespace) -> int:
    try:
        photo = load_gray(args.photo)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        dem = read_asc(args.dem)
    except (FileNotFoundError, DemError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    cfg = _detector_config(args)
    try:
        image_gcps = detect_keypoints(photo, cfg)
        dem_gcps = detect_dem_gcps(dem, cfg)
    except (ValueError, DemError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    if not image_gcps:
        print("warning: no keypoints detected in the photo", file=sys.stderr)
    if not dem_gcps:
        print("warning: no GCPs detected in the DEM", file=sys.stderr)

    session = Session(
        photo_path=str(args.photo),
        dem_path=str(args.dem),
        width=photo.shape[1],
        height=photo.shape[0],
        image_gcps=image_gcps,
        dem_gcps=dem_gcps,
        initial_camera=default_initial_camera(dem),
    )
    session.save(args.out)
    print(f"detected {len(image_gcps)} image GCPs, {len(dem_gcps)} DEM GCPs "
          f"-> {args.out}")
    return EXIT_OK


def _parse_init(text: str) -> CameraParams:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 7:
        raise ValueError("--init needs 7 comma-separated values: "
                         "tx,ty,tz,yaw,pitch,roll,fov")
    return CameraParams.from_vector(np.array(parts))


def cmd_solve(args: argparse.Namespace) -> int:
    try:
        session = load_session(args.session)
    except (FileNotFoundError, SessionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    if args.init:
        try:
            session.initial_camera = _parse_init(args.init)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INPUT
    try:
        problem = session.registration_problem()
    except SessionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    result = solve_problem(problem, seed=args.seed)
    session.record_result(result, seed=args.seed)
    session.save(args.session)
    if args.trace_csv:
        write_trace_csv(result.trace, args.trace_csv)

    if result.status == "degenerate":
        print(f"degenerate solve after {result.restarts_used} restarts: "
              f"{result.diagnostic}", file=sys.stderr)
        return EXIT_DEGENERATE
    print(f"final S = {result.final_s:.6g} px, iterations = {result.iterations}, "
          f"status = {result.status}")
    return EXIT_OK


def cmd_georef(args: argparse.Namespace) -> int:
    try:
        session = load_session(args.session)
    except (FileNotFoundError, SessionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if session.solved_camera is None:
        print("error: session has no solved camera; run `monoplot solve` first",
              file=sys.stderr)
        return EXIT_INPUT

    dem = read_asc(session.dem_path)
    photo = load_gray(session.photo_path)
    cam = session.solved_camera
    intr = intrinsics_from_fov(cam.fov, session.width, session.height)
    method = {"raytrace": "raytrace", "zbuffer": "zbuffer"}[args.method]
    maps = georef_mod.georeference_image(cam, intr, dem, session.width,
                                         session.height, method=method,
                                         stride=args.stride)
    out = Path(args.out)
    header_path, bin_path = georef_mod.write_maps(maps, out)
    for band, arr in (("x", maps.x_map), ("y", maps.y_map), ("z", maps.z_map)):
        png = georef_mod.apply_colormap(arr, maps.valid)
        save_png(png, out / f"{band}.png")
        vals = arr[maps.valid]
        if len(vals):
            print(f"{band}: min = {vals.min():.6g}, max = {vals.max():.6g}")
        else:
            print(f"{band}: no valid pixels")
    save_png((maps.valid * np.uint8(255)), out / "valid.png")
    overlay = georef_mod.render_overlay(photo, maps, args.opacity)
    save_png(overlay, out / "overlay.png")
    print(f"wrote {header_path}, {bin_path}, band PNGs and overlay.png "
          f"({maps.valid.mean() * 100:.1f}% valid)")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    try:
        session = load_session(args.session)
    except (FileNotFoundError, SessionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    from .server import serve_session
    try:
        return serve_session(session, Path(args.session), port=args.port,
                             ui_dir=args.ui)
    except OSError as exc:
        print(f"error: cannot bind port {args.port}: {exc}", file=sys.stderr)
        return EXIT_INPUT


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="monoplot",
        description="Georeference a single oblique photograph against a DEM.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="detect GCP candidates in photo and DEM")
    p.add_argument("--photo", required=True)
    p.add_argument("--dem", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-keypoints", type=int, default=50)
    p.add_argument("--fast-threshold", type=int, default=20)
    p.add_argument("--nms-radius", type=float, default=8.0)
    p.add_argument("--harris-k", type=float, default=0.04)
    p.add_argument("--grid-cells", type=int, default=4)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("solve", help="recover the camera from selected GCPs")
    p.add_argument("--session", required=True)
    p.add_argument("--init", help="tx,ty,tz,yaw,pitch,roll,fov (radians)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace-csv", help="also write the iteration trace as CSV")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("georef", help="compute per-pixel world coordinates")
    p.add_argument("--session", required=True)
    p.add_argument("--method", choices=["raytrace", "zbuffer"], default="raytrace")
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--opacity", type=float, default=0.5)
    p.set_defaults(func=cmd_georef)

    p = sub.add_parser("serve", help="serve the HTTP API and companion UI")
    p.add_argument("--session", required=True)
    p.add_argument("--port", type=int, default=8764)
    p.add_argument("--ui", help="directory with the static UI bundle")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
