"""Per-pixel georeferencing of a solved photo against the DEM.

Two visibility methods are implemented and cross-checked against each
other: heightfield ray marching (step = half a cell, bisection-refined)
and a depth buffer over the triangulated DEM with perspective-correct
depth. Output is one world coordinate triple per photo pixel plus a
validity mask, serialized as a header JSON + raw float32 binary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import CameraParams, Intrinsics, rotation_from_euler
from .dem import DemRaster, WorldPoint, pixel_to_world, sample_elevation

# Bisection stops once the bracket is narrower than this fraction of a cell.
REFINE_TOL = 1e-3
# Matches camera.EPS_DEPTH; triangles are clipped against this plane.
EPS_DEPTH = 1e-6


@dataclass(frozen=True)
class Ray:
    """World-space ray from the camera center through a pixel."""

    origin: np.ndarray
    direction: np.ndarray  # unit length

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass
class CoordinateMaps:
    """Per-pixel world coordinates; arrays may be strided for previews.

    Map cell (i, j) corresponds to photo pixel (col = j * stride,
    row = i * stride). ``width``/``height`` are the photo dimensions.
    """

    width: int
    height: int
    x_map: np.ndarray
    y_map: np.ndarray
    z_map: np.ndarray
    valid: np.ndarray
    stride: int = 1

    @property
    def map_shape(self) -> tuple[int, int]:
        return self.x_map.shape

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """(u, v) photo coordinates of every map cell."""
        rows = np.arange(0, self.height, self.stride)
        cols = np.arange(0, self.width, self.stride)
        u, v = np.meshgrid(cols.astype(np.float64), rows.astype(np.float64))
        return u, v


@dataclass
class DepthBuffer:
    """Nearest camera-frame depth per pixel; inf where nothing rendered."""

    width: int
    height: int
    depth: np.ndarray
    source: np.ndarray  # triangle id, -1 where empty


def pixel_ray(cam: CameraParams, intr: Intrinsics, u: float, v: float) -> Ray:
    """Ray through pixel (u, v): the inverse of the projection equation."""
    d_cam = np.array([(u - intr.c_x) / intr.f_x, (v - intr.c_y) / intr.f_y, 1.0])
    r = rotation_from_euler(cam.yaw, cam.pitch, cam.roll)
    d = r.T @ d_cam
    d /= np.linalg.norm(d)
    return Ray(origin=cam.position, direction=d)


def _pixel_ray_batch(cam: CameraParams, intr: Intrinsics,
                     u: np.ndarray, v: np.ndarray) -> np.ndarray:
    d_cam = np.stack([(u - intr.c_x) / intr.f_x,
                      (v - intr.c_y) / intr.f_y,
                      np.ones_like(u)], axis=-1)
    r = rotation_from_euler(cam.yaw, cam.pitch, cam.roll)
    d = d_cam @ r  # rows times R^T transposed == d_cam @ R
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _dem_aabb(dem: DemRaster) -> tuple[np.ndarray, np.ndarray]:
    nr, nc = dem.n_rows, dem.n_cols
    corners_c = np.array([0.0, nc - 1, 0.0, nc - 1])
    corners_r = np.array([0.0, 0.0, nr - 1, nr - 1])
    xs, ys = pixel_to_world(dem, corners_c, corners_r)
    zmin, zmax = dem.z_range()
    lo = np.array([xs.min(), ys.min(), zmin])
    hi = np.array([xs.max(), ys.max(), zmax])
    return lo, hi


def _slab_entry_exit(origins: np.ndarray, dirs: np.ndarray,
                     lo: np.ndarray, hi: np.ndarray):
    """Ray/AABB intersection parameters (t_entry, t_exit) per ray."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    parallel_out = (dirs == 0) & ((origins < lo) | (origins > hi))
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_entry = tmin.max(axis=-1)
    t_exit = tmax.min(axis=-1)
    t_exit = np.where(parallel_out.any(axis=-1), -np.inf, t_exit)
    return t_entry, t_exit


def march_rays(origin: np.ndarray, dirs: np.ndarray, dem: DemRaster):
    """First terrain intersection of many rays sharing one origin.

    Marches in half-cell steps from the DEM bounding-box entry, looking for
    the first sign change of (ray height - terrain height), then bisects the
    bracketing interval down to REFINE_TOL of a cell. Exiting the hull, a
    nodata cell, or starting below the terrain all yield a miss.

    Returns (points (N, 3), hit (N,) bool).
    """
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    origin = np.asarray(origin, dtype=np.float64)
    n = len(dirs)
    points = np.full((n, 3), np.nan)
    hit = np.zeros(n, dtype=bool)

    lo, hi = _dem_aabb(dem)
    pad = 1e-9 * max(1.0, float(np.abs(hi).max()), float(np.abs(lo).max()))
    t_entry, t_exit = _slab_entry_exit(origin[None, :], dirs, lo - pad, hi + pad)
    t_entry = np.maximum(t_entry, 0.0)
    zmax = hi[2]

    step = dem.transform.cell_size / 2.0
    alive = np.flatnonzero(t_exit >= t_entry)
    t = t_entry[alive]
    t_end = t_exit[alive]
    d = dirs[alive]
    entered = np.zeros(len(alive), dtype=bool)
    prev_h = np.zeros(len(alive))
    prev_t = np.zeros(len(alive))

    brackets_lo: list[np.ndarray] = []
    brackets_hi: list[np.ndarray] = []
    bracket_idx: list[np.ndarray] = []

    while len(alive):
        p = origin[None, :] + t[:, None] * d
        terr = sample_elevation(dem, p[:, 0], p[:, 1])
        h = p[:, 2] - terr
        valid = np.isfinite(h)

        entering = ~entered & valid
        below_at_entry = entering & (h <= 0)
        entered = entered | entering
        crossed = valid & ~entering & (prev_h > 0) & (h <= 0)
        exited = ~valid & entered & ~entering
        # Climbing above the terrain ceiling can never come back down to it.
        escaped = valid & (p[:, 2] > zmax) & (d[:, 2] >= 0)
        overran = t > t_end

        if crossed.any():
            brackets_lo.append(prev_t[crossed])
            brackets_hi.append(t[crossed])
            bracket_idx.append(alive[crossed])

        done = below_at_entry | crossed | exited | escaped | overran
        keep = ~done
        prev_h = np.where(valid, h, prev_h)
        prev_t = np.where(valid, t, prev_t)

        alive = alive[keep]
        t = t[keep] + step
        t_end = t_end[keep]
        d = d[keep]
        entered = entered[keep]
        prev_h = prev_h[keep]
        prev_t = prev_t[keep]

    if bracket_idx:
        idx = np.concatenate(bracket_idx)
        t_lo = np.concatenate(brackets_lo)
        t_hi = np.concatenate(brackets_hi)
        d = dirs[idx]
        tol = REFINE_TOL * dem.transform.cell_size
        iters = max(1, math.ceil(math.log2((step + tol) / tol)) + 1)
        for _ in range(iters):
            mid = 0.5 * (t_lo + t_hi)
            p = origin[None, :] + mid[:, None] * d
            h = p[:, 2] - sample_elevation(dem, p[:, 0], p[:, 1])
            above = h > 0
            t_lo = np.where(above, mid, t_lo)
            t_hi = np.where(above, t_hi, mid)
        t_star = 0.5 * (t_lo + t_hi)
        points[idx] = origin[None, :] + t_star[:, None] * dirs[idx]
        hit[idx] = True
    return points, hit


def intersect_dem(ray: Ray, dem: DemRaster) -> WorldPoint | None:
    """Nearest terrain intersection of a single ray, or None on a miss."""
    points, hit = march_rays(ray.origin, ray.direction.reshape(1, 3), dem)
    if not hit[0]:
        return None
    return WorldPoint(float(points[0, 0]), float(points[0, 1]), float(points[0, 2]))


def _triangulate(dem: DemRaster):
    """DEM cells split into two triangles along the fixed LL-UR diagonal.

    Returns (verts (V, 3), tris (T, 3) vertex indices); triangles touching a
    nodata vertex are omitted but triangle ids stay aligned to 2 * cell + k.
    """
    nr, nc = dem.n_rows, dem.n_cols
    cols, rows = np.meshgrid(np.arange(nc, dtype=np.float64),
                             np.arange(nr, dtype=np.float64))
    xs, ys = pixel_to_world(dem, cols, rows)
    verts = np.stack([xs.ravel(), ys.ravel(), dem.elevations.ravel()], axis=1)

    r, c = np.meshgrid(np.arange(nr - 1), np.arange(nc - 1), indexing="ij")
    v00 = (r * nc + c).ravel()
    v01 = v00 + 1
    v10 = v00 + nc
    v11 = v10 + 1
    tris = np.empty((2 * len(v00), 3), dtype=np.int64)
    tris[0::2] = np.stack([v00, v01, v10], axis=1)
    tris[1::2] = np.stack([v01, v11, v10], axis=1)
    ok = ~np.isnan(verts[:, 2])[tris].any(axis=1) if np.isnan(verts[:, 2]).any() \
        else np.ones(len(tris), dtype=bool)
    return verts, tris, ok


def _clip_poly_to_near(q: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a camera-space polygon to q_z >= EPS_DEPTH."""
    out = []
    m = len(q)
    for i in range(m):
        a, b = q[i], q[(i + 1) % m]
        ina, inb = a[2] >= EPS_DEPTH, b[2] >= EPS_DEPTH
        if ina:
            out.append(a)
        if ina != inb:
            s = (EPS_DEPTH - a[2]) / (b[2] - a[2])
            out.append(a + s * (b - a))
    return np.array(out) if out else np.empty((0, 3))


def _raster_tri(uv: np.ndarray, z: np.ndarray, tri_id: int,
                depth: np.ndarray, source: np.ndarray) -> None:
    """Half-plane rasterization with perspective-correct (1/z) interpolation."""
    h, w = depth.shape
    x0 = max(int(math.floor(uv[:, 0].min())), 0)
    x1 = min(int(math.ceil(uv[:, 0].max())), w - 1)
    y0 = max(int(math.floor(uv[:, 1].min())), 0)
    y1 = min(int(math.ceil(uv[:, 1].max())), h - 1)
    if x1 < x0 or y1 < y0:
        return
    (ax, ay), (bx, by), (cx, cy) = uv
    area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    if abs(area) < 1e-12:
        return
    xs = np.arange(x0, x1 + 1, dtype=np.float64)
    ys = np.arange(y0, y1 + 1, dtype=np.float64)
    px, py = np.meshgrid(xs, ys)
    w0 = ((cx - bx) * (py - by) - (cy - by) * (px - bx)) / area
    w1 = ((ax - cx) * (py - cy) - (ay - cy) * (px - cx)) / area
    w2 = 1.0 - w0 - w1
    inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    if not inside.any():
        return
    iz = w0 / z[0] + w1 / z[1] + w2 / z[2]
    with np.errstate(divide="ignore"):
        zpix = 1.0 / iz
    zpix = np.where(inside & (iz > 0), zpix, np.inf)
    window = depth[y0:y1 + 1, x0:x1 + 1]
    closer = zpix < window
    window[closer] = zpix[closer]
    source[y0:y1 + 1, x0:x1 + 1][closer] = tri_id


def render_depth_buffer(cam: CameraParams, intr: Intrinsics, dem: DemRaster,
                        width: int, height: int) -> DepthBuffer:
    """Rasterize the triangulated DEM, keeping the nearest depth per pixel."""
    verts, tris, ok = _triangulate(dem)
    r = rotation_from_euler(cam.yaw, cam.pitch, cam.roll)
    t = np.array([cam.t_x, cam.t_y, cam.t_z])
    q = (verts + t) @ r.T
    front = q[:, 2] > EPS_DEPTH
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([intr.f_x * q[:, 0] / q[:, 2] + intr.c_x,
                       intr.f_y * q[:, 1] / q[:, 2] + intr.c_y], axis=1)

    depth = np.full((height, width), np.inf)
    source = np.full((height, width), -1, dtype=np.int64)
    n_front = front[tris].sum(axis=1)

    for tid in np.flatnonzero(ok & (n_front > 0)):
        vid = tris[tid]
        if n_front[tid] == 3:
            _raster_tri(uv[vid], q[vid, 2], tid, depth, source)
            continue
        poly = _clip_poly_to_near(q[vid])
        if len(poly) < 3:
            continue
        puv = np.stack([intr.f_x * poly[:, 0] / poly[:, 2] + intr.c_x,
                        intr.f_y * poly[:, 1] / poly[:, 2] + intr.c_y], axis=1)
        for k in range(1, len(poly) - 1):
            fan = [0, k, k + 1]
            _raster_tri(puv[fan], poly[fan, 2], tid, depth, source)
    return DepthBuffer(width=width, height=height, depth=depth, source=source)


def georeference_image(cam: CameraParams, intr: Intrinsics, dem: DemRaster,
                       width: int, height: int, method: str = "raytrace",
                       stride: int = 1, progress=None) -> CoordinateMaps:
    """World coordinates for every (strided) photo pixel.

    ``raytrace`` marches a ray per pixel through the heightfield;
    ``zbuffer`` rasterizes the DEM triangles and inverts the nearest
    triangle by ray/plane intersection. ``progress`` (a callable taking a
    fraction in [0, 1]) is reported as row bands complete.
    """
    if method not in ("raytrace", "zbuffer"):
        raise ValueError(f"unknown georeferencing method: {method!r}")
    rows = np.arange(0, height, stride)
    cols = np.arange(0, width, stride)
    u, v = np.meshgrid(cols.astype(np.float64), rows.astype(np.float64))
    shape = u.shape
    dirs = _pixel_ray_batch(cam, intr, u.ravel(), v.ravel())
    origin = cam.position

    if method == "raytrace":
        n = len(dirs)
        band = max(1, shape[1] * max(1, shape[0] // 16))
        points = np.full((n, 3), np.nan)
        hit = np.zeros(n, dtype=bool)
        for start in range(0, n, band):
            stop = min(start + band, n)
            points[start:stop], hit[start:stop] = march_rays(origin, dirs[start:stop], dem)
            if progress is not None:
                progress(stop / n)
    else:
        buf = render_depth_buffer(cam, intr, dem, width, height)
        if progress is not None:
            progress(0.8)
        verts, tris, _ = _triangulate(dem)
        tri_ids = buf.source[v.ravel().astype(np.int64), u.ravel().astype(np.int64)]
        hit = tri_ids >= 0
        points = np.full((len(dirs), 3), np.nan)
        if hit.any():
            vid = tris[tri_ids[hit]]
            a = verts[vid[:, 0]]
            normal = np.cross(verts[vid[:, 1]] - a, verts[vid[:, 2]] - a)
            denom = np.einsum("ij,ij->i", normal, dirs[hit])
            tnum = np.einsum("ij,ij->i", normal, a - origin[None, :])
            with np.errstate(divide="ignore", invalid="ignore"):
                tt = tnum / denom
            good = np.isfinite(tt) & (tt > 0)
            pts = origin[None, :] + tt[:, None] * dirs[hit]
            pts[~good] = np.nan
            points[hit] = pts
            hit = hit.copy()
            hit[np.flatnonzero(hit)[~good]] = False

    if progress is not None:
        progress(1.0)
    return CoordinateMaps(
        width=width, height=height,
        x_map=points[:, 0].reshape(shape),
        y_map=points[:, 1].reshape(shape),
        z_map=points[:, 2].reshape(shape),
        valid=hit.reshape(shape),
        stride=stride,
    )


# ---------------------------------------------------------------------------
# Rendering: hillshade, colormaps, overlays, map serialization
# ---------------------------------------------------------------------------

# Terrain colormap control points (normalized value, r, g, b).
_RAMP = np.array([
    [0.00, 40, 54, 110],
    [0.25, 44, 127, 184],
    [0.50, 65, 171, 93],
    [0.75, 254, 217, 118],
    [1.00, 240, 59, 32],
])


def apply_colormap(values: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Linear colormap over the finite value range; invalid cells dark gray."""
    vals = np.asarray(values, dtype=np.float64)
    if valid is None:
        valid = np.isfinite(vals)
    else:
        valid = valid & np.isfinite(vals)
    out = np.full(vals.shape + (3,), 48, dtype=np.uint8)
    if valid.any():
        vmin = vals[valid].min()
        vmax = vals[valid].max()
        span = vmax - vmin if vmax > vmin else 1.0
        norm = np.clip((vals - vmin) / span, 0.0, 1.0)
        for ch in range(3):
            band = np.interp(norm, _RAMP[:, 0], _RAMP[:, ch + 1])
            out[..., ch] = np.where(valid, np.floor(band + 0.5), out[..., ch]).astype(np.uint8)
    return out


def hillshade(dem: DemRaster, azimuth_deg: float = 315.0,
              altitude_deg: float = 45.0) -> np.ndarray:
    """Horn hillshade of the DEM as an 8-bit image (nodata renders black)."""
    z = dem.elevations
    cell = dem.transform.cell_size
    zf = np.where(np.isnan(z), np.nanmin(z) if not np.all(np.isnan(z)) else 0.0, z)
    gy, gx = np.gradient(zf, cell)
    az = math.radians(360.0 - azimuth_deg + 90.0)
    alt = math.radians(altitude_deg)
    slope = np.pi / 2.0 - np.arctan(np.hypot(gx, gy))
    aspect = np.arctan2(-gx, gy)
    shaded = (np.sin(alt) * np.sin(slope)
              + np.cos(alt) * np.cos(slope) * np.cos(az - aspect))
    img = np.floor(np.clip(shaded, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    img[np.isnan(z)] = 0
    return img


def render_elevation(maps: CoordinateMaps) -> np.ndarray:
    """Elevation-colored render of the georeferenced scene (photo geometry)."""
    return apply_colormap(maps.z_map, maps.valid)


def render_overlay(photo: np.ndarray, maps: CoordinateMaps, opacity: float) -> np.ndarray:
    """Alpha-blend the photo over the elevation render.

    opacity is the photo weight: 0 shows the render alone, 1 the photo alone.
    """
    if not 0.0 <= opacity <= 1.0:
        raise ValueError("opacity must lie in [0, 1]")
    photo = np.asarray(photo)
    render = render_elevation(maps)
    if maps.stride != 1:
        render = np.repeat(np.repeat(render, maps.stride, axis=0), maps.stride, axis=1)
        render = render[:photo.shape[0], :photo.shape[1]]
    if photo.shape[:2] != render.shape[:2]:
        raise ValueError(
            f"photo dimensions {photo.shape[:2]} do not match maps {render.shape[:2]}")
    if photo.ndim == 2:
        photo = np.stack([photo] * 3, axis=-1)
    blend = opacity * photo.astype(np.float64) + (1.0 - opacity) * render.astype(np.float64)
    return np.floor(blend + 0.5).astype(np.uint8)


def write_maps(maps: CoordinateMaps, out_dir: str | Path, basename: str = "maps"):
    """Serialize maps as header JSON + band-sequential little-endian f32.

    Bands x, y, z, valid (valid stored as 0/1) in row-major order. Returns
    (header_path, binary_path).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h, w = maps.map_shape
    header = {
        "width": w,
        "height": h,
        "dtype": "f32",
        "bands": ["x", "y", "z", "valid"],
        "stride": maps.stride,
        "photo_width": maps.width,
        "photo_height": maps.height,
    }
    header_path = out_dir / f"{basename}.json"
    bin_path = out_dir / f"{basename}.bin"
    header_path.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
    bands = [maps.x_map, maps.y_map, maps.z_map, maps.valid.astype(np.float64)]
    with open(bin_path, "wb") as fh:
        for band in bands:
            fh.write(np.ascontiguousarray(band, dtype="<f4").tobytes())
    return header_path, bin_path


def read_maps(header_path: str | Path) -> CoordinateMaps:
    header_path = Path(header_path)
    header = json.loads(header_path.read_text())
    w, h = header["width"], header["height"]
    raw = np.frombuffer((header_path.parent / (header_path.stem + ".bin")).read_bytes(),
                        dtype="<f4")
    bands = raw.reshape(4, h, w).astype(np.float64)
    return CoordinateMaps(
        width=header.get("photo_width", w),
        height=header.get("photo_height", h),
        x_map=bands[0], y_map=bands[1], z_map=bands[2],
        valid=bands[3] > 0.5,
        stride=header.get("stride", 1),
    )
