"""Digital elevation model rasters and the pixel/world affine geotransform.

A DEM is a grid of elevations plus a six-coefficient affine map between
fractional pixel indices and projected world coordinates:

    X = x_geo_ul + col * p_width  + row * row_rot
    Y = y_geo_ul + row * p_height + col * col_rot

Pixel indices refer to cell centers, so the map applies to fractional
indices directly and bilinear sampling is symmetric around them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DemError(ValueError):
    """Raised for malformed DEM files or degenerate rasters."""


@dataclass(frozen=True)
class GeoTransform:
    """Affine pixel-to-world map.

    x_geo_ul / y_geo_ul are the world coordinates of pixel (col=0, row=0);
    p_width / p_height are the signed cell sizes (p_height is negative for
    north-up rasters); row_rot / col_rot are shear/rotation coefficients in
    world units per pixel.
    """

    x_geo_ul: float
    y_geo_ul: float
    p_width: float
    p_height: float
    row_rot: float = 0.0
    col_rot: float = 0.0

    def __post_init__(self) -> None:
        if self.det == 0.0:
            raise DemError("geotransform is not invertible (zero determinant)")

    @property
    def det(self) -> float:
        return self.p_width * self.p_height - self.row_rot * self.col_rot

    @property
    def cell_size(self) -> float:
        """Smallest cell extent, used as the ray-marching length scale."""
        return min(abs(self.p_width), abs(self.p_height))


@dataclass(frozen=True)
class WorldPoint:
    """A georeferenced 3-D point (projected CRS, elevation in the same units)."""

    x: float
    y: float
    z: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)):
            raise ValueError("world point components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


class DemRaster:
    """Immutable elevation raster with a geotransform.

    Nodata cells are stored as NaN internally; ``nodata`` keeps the sentinel
    used on disk. Safe to share across threads once constructed.
    """

    def __init__(self, elevations: np.ndarray, transform: GeoTransform,
                 nodata: float = -9999.0):
        elev = np.asarray(elevations, dtype=np.float64).copy()
        if elev.ndim != 2 or elev.shape[0] < 2 or elev.shape[1] < 2:
            raise DemError("DEM must be a 2-D grid with at least 2 rows and 2 columns")
        elev[elev == nodata] = np.nan
        if np.any(np.isinf(elev)):
            raise DemError("DEM contains non-finite elevations")
        elev.setflags(write=False)
        self.elevations = elev
        self.transform = transform
        self.nodata = float(nodata)

    @property
    def n_rows(self) -> int:
        return self.elevations.shape[0]

    @property
    def n_cols(self) -> int:
        return self.elevations.shape[1]

    def z_range(self) -> tuple[float, float]:
        """(min, max) elevation over non-nodata cells."""
        if np.all(np.isnan(self.elevations)):
            raise DemError("empty DEM")
        return float(np.nanmin(self.elevations)), float(np.nanmax(self.elevations))


def pixel_to_world(dem: DemRaster | GeoTransform, col, row):
    """Map fractional pixel indices to world (x, y).

    The affine map is global: extrapolation beyond the raster is permitted.
    Accepts scalars or arrays (broadcast).
    """
    t = dem.transform if isinstance(dem, DemRaster) else dem
    col = np.asarray(col, dtype=np.float64)
    row = np.asarray(row, dtype=np.float64)
    x = t.x_geo_ul + col * t.p_width + row * t.row_rot
    y = t.y_geo_ul + row * t.p_height + col * t.col_rot
    if x.ndim == 0:
        return float(x), float(y)
    return x, y


def world_to_pixel(dem: DemRaster | GeoTransform, x, y):
    """Invert the affine map: world (x, y) to fractional (col, row)."""
    t = dem.transform if isinstance(dem, DemRaster) else dem
    dx = np.asarray(x, dtype=np.float64) - t.x_geo_ul
    dy = np.asarray(y, dtype=np.float64) - t.y_geo_ul
    det = t.det
    col = (t.p_height * dx - t.row_rot * dy) / det
    row = (t.p_width * dy - t.col_rot * dx) / det
    if col.ndim == 0:
        return float(col), float(row)
    return col, row


def sample_elevation(dem: DemRaster, x, y):
    """Bilinear terrain height at world (x, y); NaN outside the raster hull.

    Any stencil that touches a nodata cell yields NaN rather than a partial
    interpolation. Accepts scalars or arrays.
    """
    col, row = world_to_pixel(dem, x, y)
    col = np.atleast_1d(np.asarray(col, dtype=np.float64))
    row = np.atleast_1d(np.asarray(row, dtype=np.float64))
    nr, nc = dem.n_rows, dem.n_cols

    inside = (col >= 0) & (col <= nc - 1) & (row >= 0) & (row <= nr - 1)
    c0 = np.clip(np.floor(col).astype(np.int64), 0, nc - 2)
    r0 = np.clip(np.floor(row).astype(np.int64), 0, nr - 2)
    fc = col - c0
    fr = row - r0

    e = dem.elevations
    z00 = e[r0, c0]
    z01 = e[r0, c0 + 1]
    z10 = e[r0 + 1, c0]
    z11 = e[r0 + 1, c0 + 1]
    z = (z00 * (1 - fr) * (1 - fc) + z01 * (1 - fr) * fc
         + z10 * fr * (1 - fc) + z11 * fr * fc)
    z = np.where(inside, z, np.nan)
    if np.isscalar(x) or np.asarray(x).ndim == 0:
        return float(z[0])
    return z


def dem_to_grayscale(dem: DemRaster) -> np.ndarray:
    """Linearly rescale elevations to an 8-bit image for corner detection.

    Min elevation maps to 0, max to 255, rounded half-up; nodata cells map
    to 0. A flat raster (max == min) maps everything to 0.
    """
    zmin, zmax = dem.z_range()
    e = dem.elevations
    if zmax == zmin:
        scaled = np.zeros_like(e)
    else:
        scaled = (e - zmin) * (255.0 / (zmax - zmin))
    gray = np.floor(scaled + 0.5)
    gray[np.isnan(gray)] = 0.0
    return gray.astype(np.uint8)


def _parse_asc_header(lines: list[str], path: str) -> tuple[dict, int]:
    header: dict[str, float] = {}
    keys = {"ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value"}
    i = 0
    for i, line in enumerate(lines):
        parts = line.split()
        if len(parts) == 2 and parts[0].lower() in keys:
            try:
                header[parts[0].lower()] = float(parts[1])
            except ValueError:
                raise DemError(f"{path}: bad header value on line {i + 1}: {line.strip()!r}")
        else:
            break
    else:
        i += 1
    required = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize")
    missing = [k for k in required if k not in header]
    if missing:
        raise DemError(f"{path}: missing header field(s): {', '.join(missing)}")
    return header, i


def read_asc(path: str | Path) -> DemRaster:
    """Load an ESRI ASCII grid (.asc), honoring a ``<name>.geo.json`` sidecar.

    Header order: ncols, nrows, xllcorner, yllcorner, cellsize,
    NODATA_value; then row-major elevations, first row northernmost. The
    header carries no rotation; a sidecar JSON with the six geotransform
    fields overrides the header-derived transform when present.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"DEM file not found: {path}")
    lines = path.read_text().splitlines()
    header, data_start = _parse_asc_header(lines, str(path))

    ncols = int(header["ncols"])
    nrows = int(header["nrows"])
    nodata = header.get("nodata_value", -9999.0)

    values: list[float] = []
    for lineno, line in enumerate(lines[data_start:], start=data_start + 1):
        if not line.strip():
            continue
        for tok in line.split():
            try:
                values.append(float(tok))
            except ValueError:
                raise DemError(f"{path}: bad elevation token {tok!r} on line {lineno}")
    if len(values) != nrows * ncols:
        raise DemError(
            f"{path}: expected {nrows * ncols} elevation values, got {len(values)}")
    elev = np.array(values, dtype=np.float64).reshape(nrows, ncols)

    transform = GeoTransform(
        x_geo_ul=header["xllcorner"],
        y_geo_ul=header["yllcorner"] + nrows * header["cellsize"],
        p_width=header["cellsize"],
        p_height=-header["cellsize"],
    )
    sidecar = path.with_name(path.stem + ".geo.json")
    if sidecar.exists():
        fields = json.loads(sidecar.read_text())
        transform = GeoTransform(
            x_geo_ul=float(fields["x_geo_ul"]),
            y_geo_ul=float(fields["y_geo_ul"]),
            p_width=float(fields["p_width"]),
            p_height=float(fields["p_height"]),
            row_rot=float(fields.get("row_rot", 0.0)),
            col_rot=float(fields.get("col_rot", 0.0)),
        )
    return DemRaster(elev, transform, nodata=nodata)


def write_asc(dem: DemRaster, path: str | Path) -> None:
    """Write a DemRaster as an ESRI ASCII grid.

    Only axis-aligned transforms (no rotation) fit the .asc header; a
    rotated transform is written alongside as a ``.geo.json`` sidecar.
    """
    path = Path(path)
    t = dem.transform
    cellsize = abs(t.p_width)
    yll = t.y_geo_ul - dem.n_rows * cellsize
    with open(path, "w") as fh:
        fh.write(f"ncols {dem.n_cols}\n")
        fh.write(f"nrows {dem.n_rows}\n")
        fh.write(f"xllcorner {float(t.x_geo_ul)!r}\n")
        fh.write(f"yllcorner {float(yll)!r}\n")
        fh.write(f"cellsize {float(cellsize)!r}\n")
        fh.write(f"NODATA_value {float(dem.nodata)!r}\n")
        e = np.where(np.isnan(dem.elevations), dem.nodata, dem.elevations)
        for r in range(dem.n_rows):
            fh.write(" ".join(repr(float(v)) for v in e[r]) + "\n")
    if t.row_rot != 0.0 or t.col_rot != 0.0 or t.p_width != -t.p_height:
        sidecar = path.with_name(path.stem + ".geo.json")
        sidecar.write_text(json.dumps({
            "x_geo_ul": t.x_geo_ul, "y_geo_ul": t.y_geo_ul,
            "p_width": t.p_width, "p_height": t.p_height,
            "row_rot": t.row_rot, "col_rot": t.col_rot,
        }))
