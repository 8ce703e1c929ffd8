"""Synthetic box-world scenes for validation and demos.

The classic validation setup is a flat DEM carrying three rectangular
plateaus of different sizes viewed by a known oblique camera: corner
detection finds the box corners in both the DEM raster and a rendered
"photo", and the known camera lets every stage be checked end to end.
"""

from __future__ import annotations

import math

import numpy as np

from .camera import CameraParams, intrinsics_from_fov
from .dem import DemRaster, GeoTransform
from .georef import georeference_image
from .keypoints import DetectorConfig, detect_dem_gcps
from .registration import RegistrationProblem


def make_box_dem(size: int = 256, cell: float = 1.0, base: float = 0.0,
                 boxes: tuple[tuple[int, int, int, int, float], ...] = (),
                 x_origin: float = 0.0, y_origin: float = 0.0) -> DemRaster:
    """Flat DEM with rectangular plateaus; boxes are (r0, r1, c0, c1, height)."""
    elev = np.full((size, size), base, dtype=np.float64)
    for r0, r1, c0, c1, h in boxes:
        elev[r0:r1, c0:c1] = base + h
    transform = GeoTransform(
        x_geo_ul=x_origin,
        y_geo_ul=y_origin + size * cell,
        p_width=cell,
        p_height=-cell,
    )
    return DemRaster(elev, transform)


THREE_BOXES = (
    (150, 190, 50, 95, 12.0),
    (130, 175, 120, 180, 22.0),
    (60, 110, 90, 150, 35.0),
)


def three_box_dem(size: int = 256, cell: float = 1.0) -> DemRaster:
    """The three-plateau validation DEM."""
    scale = size / 256.0
    boxes = tuple((int(r0 * scale), int(r1 * scale), int(c0 * scale),
                   int(c1 * scale), h) for r0, r1, c0, c1, h in THREE_BOXES)
    return make_box_dem(size=size, cell=cell, boxes=boxes)


def look_at_camera(position, target, roll: float = 0.0,
                   fov: float = math.pi / 3) -> CameraParams:
    """Camera at ``position`` whose optical axis passes through ``target``.

    Solves yaw/pitch from the viewing direction, picking the Euler branch
    whose image v-axis points world-down (natural orientation: sky up).
    Roll then spins the image plane.
    """
    position = np.asarray(position, dtype=np.float64)
    d = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(d)
    if norm == 0:
        raise ValueError("target coincides with the camera position")
    d = d / norm
    pitch = math.atan2(d[1], math.hypot(d[0], d[2]))
    yaw = math.atan2(-d[0], d[2])
    # Two Euler branches give the same optical axis; the other is this one
    # rolled by pi. Pick the branch whose image v-axis points world-down
    # (ties broken toward the down-looking branch).
    v_z = -math.sin(pitch) * math.cos(yaw)
    if v_z > 0 or (v_z == 0 and d[2] < 0):
        pitch = math.pi - pitch
        yaw = yaw + math.pi
        if yaw > math.pi:
            yaw -= 2 * math.pi
    return CameraParams(t_x=-position[0], t_y=-position[1], t_z=-position[2],
                        yaw=yaw, pitch=pitch, roll=roll, fov=fov)


def default_scene_camera(size: int = 256, cell: float = 1.0) -> CameraParams:
    """Oblique view from south of the three-box DEM, all plateaus in frame."""
    ext = size * cell
    position = (0.5 * ext, -0.31 * ext, 0.27 * ext)
    target = (0.5 * ext, 0.55 * ext, 0.04 * ext)
    return look_at_camera(position, target, roll=0.0, fov=math.pi / 3)


def render_photo(cam: CameraParams, dem: DemRaster, width: int = 640,
                 height: int = 480) -> np.ndarray:
    """Grayscale "photo" of the DEM: elevation-banded terrain on black sky.

    Plateau tops render as distinct flat tones with hard silhouette edges,
    which is exactly what a corner detector wants.
    """
    intr = intrinsics_from_fov(cam.fov, width, height)
    maps = georeference_image(cam, intr, dem, width, height, method="zbuffer")
    zmin, zmax = dem.z_range()
    span = zmax - zmin if zmax > zmin else 1.0
    shade = 40.0 + 215.0 * (maps.z_map - zmin) / span
    photo = np.where(maps.valid, shade, 0.0)
    return np.floor(np.clip(photo, 0, 255) + 0.5).astype(np.uint8)


def exact_fit_problem(dem: DemRaster, camera: CameraParams, width: int = 640,
                      height: int = 480,
                      cfg: DetectorConfig | None = None) -> RegistrationProblem:
    """Registration problem whose image GCPs are exact projections.

    DEM GCPs are detected on the DEM raster; the ones visible from the
    ground-truth camera are projected to form the image GCP set, so the true
    camera attains S = 0. The returned problem's initial camera is the truth;
    perturb it before solving.
    """
    gcps = detect_dem_gcps(dem, cfg or DetectorConfig())
    if not gcps:
        raise ValueError("no DEM GCPs detected on this scene")
    world = np.array([[g.world.x, g.world.y, g.world.z] for g in gcps])
    intr = intrinsics_from_fov(camera.fov, width, height)
    from .camera import project_set
    proj = project_set(camera, intr, world, width, height)
    strict = proj.visible & (proj.uv[:, 0] >= 0) & (proj.uv[:, 0] < width) \
        & (proj.uv[:, 1] >= 0) & (proj.uv[:, 1] < height)
    if strict.sum() < 4:
        raise ValueError("fewer than 4 DEM GCPs are visible from the camera")
    return RegistrationProblem(
        image_gcps=proj.uv[strict],
        world_gcps=world,
        width=width,
        height=height,
        initial_camera=camera,
    )


def perturb_camera(camera: CameraParams, rng: np.random.Generator,
                   extent: float, angle_deg: float = 5.0,
                   translation_frac: float = 0.05) -> CameraParams:
    """Random pose offset within the stated bounds (angles in degrees)."""
    vec = camera.as_vector()
    vec[0:3] += rng.uniform(-translation_frac, translation_frac, 3) * extent
    vec[3:6] += rng.uniform(-math.radians(angle_deg), math.radians(angle_deg), 3)
    return CameraParams.from_vector(vec)
