"""Corner-like GCP candidate detection in photos and DEM rasters.

Detection is the FAST-9 segment test scored by the Harris response (the
detection half of ORB; descriptors are unnecessary because correspondence
comes from projection geometry, not matching). Candidates are refined to
subpixel accuracy, non-maximum suppressed, and spatially bucketed so the
returned set is well distributed across the image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dem import DemRaster, WorldPoint, dem_to_grayscale, pixel_to_world, sample_elevation

# Bresenham circle of radius 3: 16 perimeter offsets, clockwise from the top.
_CIRCLE = np.array([
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
])  # (du, dv)

_ARC = 9          # contiguous circle pixels required by the segment test
_BORDER = 3       # detector window half-size; candidates keep this margin


@dataclass
class Keypoint:
    """A detected corner; ``selected`` is the human-in-the-loop flag."""

    u: float
    v: float
    score: float
    selected: bool = True

    def to_json(self) -> dict:
        return {"u": self.u, "v": self.v, "score": self.score, "selected": self.selected}

    @classmethod
    def from_json(cls, obj: dict) -> "Keypoint":
        return cls(u=float(obj["u"]), v=float(obj["v"]),
                   score=float(obj["score"]), selected=bool(obj["selected"]))


@dataclass(frozen=True)
class DetectorConfig:
    max_keypoints: int = 50
    fast_threshold: int = 20
    nms_radius: float = 8.0
    harris_k: float = 0.04
    grid_cells: int = 4

    def __post_init__(self) -> None:
        if self.max_keypoints < 1:
            raise ValueError("max_keypoints must be >= 1")
        if not 1 <= self.fast_threshold <= 128:
            raise ValueError("fast_threshold must lie in [1, 128]")
        if self.nms_radius < 1:
            raise ValueError("nms_radius must be >= 1")


def fast_corners(img: np.ndarray, threshold: int) -> np.ndarray:
    """FAST-9 segment-test candidates as an (N, 2) array of (v, u).

    A pixel is a candidate when at least 9 contiguous circle pixels are all
    brighter than center + threshold or all darker than center - threshold.
    """
    im = np.asarray(img, dtype=np.int16)
    h, w = im.shape
    if h < 2 * _BORDER + 2 or w < 2 * _BORDER + 2:
        return np.empty((0, 2), dtype=np.int64)
    center = im[_BORDER:h - _BORDER, _BORDER:w - _BORDER]

    brighter = np.empty((16,) + center.shape, dtype=bool)
    darker = np.empty_like(brighter)
    for k, (du, dv) in enumerate(_CIRCLE):
        ring = im[_BORDER + dv:h - _BORDER + dv, _BORDER + du:w - _BORDER + du]
        brighter[k] = ring > center + threshold
        darker[k] = ring < center - threshold

    # Quick reject via the 4 compass points: an arc of 9 always covers >= 2.
    compass = (0, 4, 8, 12)
    maybe = (brighter[compass, :, :].sum(axis=0) >= 2) | (darker[compass, :, :].sum(axis=0) >= 2)

    corner = np.zeros(center.shape, dtype=bool)
    if maybe.any():
        wrapped_b = np.concatenate([brighter, brighter[:_ARC - 1]], axis=0)
        wrapped_d = np.concatenate([darker, darker[:_ARC - 1]], axis=0)
        for s in range(16):
            seg = wrapped_b[s:s + _ARC].all(axis=0) | wrapped_d[s:s + _ARC].all(axis=0)
            corner |= seg & maybe
    vs, us = np.nonzero(corner)
    return np.stack([vs + _BORDER, us + _BORDER], axis=1)


def harris_response(img: np.ndarray, k: float = 0.04) -> np.ndarray:
    """Harris corner response det(M) - k * trace(M)^2 over a 5x5 window."""
    im = np.asarray(img, dtype=np.float64)
    ix = ndimage.sobel(im, axis=1, mode="nearest")
    iy = ndimage.sobel(im, axis=0, mode="nearest")
    sxx = ndimage.uniform_filter(ix * ix, size=5, mode="nearest")
    syy = ndimage.uniform_filter(iy * iy, size=5, mode="nearest")
    sxy = ndimage.uniform_filter(ix * iy, size=5, mode="nearest")
    return (sxx * syy - sxy * sxy) - k * (sxx + syy) ** 2


def _subpixel_offsets(resp: np.ndarray, vs: np.ndarray, us: np.ndarray):
    """Quadratic-fit refinement of the response peak over a 3x3 neighborhood.

    Offsets are clamped to half a pixel: a larger shift means the quadratic
    model does not hold and the integer location is kept.
    """
    c = resp[vs, us]
    gx = 0.5 * (resp[vs, us + 1] - resp[vs, us - 1])
    gy = 0.5 * (resp[vs + 1, us] - resp[vs - 1, us])
    hxx = resp[vs, us + 1] - 2 * c + resp[vs, us - 1]
    hyy = resp[vs + 1, us] - 2 * c + resp[vs - 1, us]
    hxy = 0.25 * (resp[vs + 1, us + 1] - resp[vs + 1, us - 1]
                  - resp[vs - 1, us + 1] + resp[vs - 1, us - 1])
    det = hxx * hyy - hxy * hxy
    with np.errstate(divide="ignore", invalid="ignore"):
        du = -(hyy * gx - hxy * gy) / det
        dv = -(hxx * gy - hxy * gx) / det
    bad = ~np.isfinite(du) | ~np.isfinite(dv)
    du = np.where(bad, 0.0, np.clip(du, -0.5, 0.5))
    dv = np.where(bad, 0.0, np.clip(dv, -0.5, 0.5))
    return du, dv


def detect_keypoints(img: np.ndarray, cfg: DetectorConfig | None = None) -> list[Keypoint]:
    """Detect up to max_keypoints corners, strongest first.

    Greedy non-maximum suppression guarantees pairwise distance greater than
    nms_radius; a per-grid-cell cap of ceil(max_keypoints / grid_cells^2) * 2
    keeps the result spatially distributed. Deterministic: identical inputs
    give the identical list.
    """
    cfg = cfg or DetectorConfig()
    img = np.asarray(img)
    h, w = img.shape
    if h < 8 or w < 8:
        raise ValueError(f"image must be at least 8x8 pixels, got {w}x{h}")

    cand = fast_corners(img, cfg.fast_threshold)
    if len(cand) == 0:
        return []
    resp = harris_response(img, cfg.harris_k)
    vs, us = cand[:, 0], cand[:, 1]
    scores = resp[vs, us]

    # Edge-like responses (non-positive Harris) are not corners; dropping
    # them also keeps the score >= 0 contract.
    keep = scores > 0
    vs, us, scores = vs[keep], us[keep], scores[keep]
    if len(vs) == 0:
        return []

    inner = (vs >= 1) & (vs <= h - 2) & (us >= 1) & (us <= w - 2)
    du = np.zeros(len(vs))
    dv = np.zeros(len(vs))
    du[inner], dv[inner] = _subpixel_offsets(resp, vs[inner], us[inner])
    uf = us + du
    vf = vs + dv

    order = np.lexsort((uf, vf, -scores))
    uf, vf, scores = uf[order], vf[order], scores[order]

    cell_w = w / cfg.grid_cells
    cell_h = h / cfg.grid_cells
    cell_cap = math.ceil(cfg.max_keypoints / cfg.grid_cells ** 2) * 2
    cell_counts = np.zeros((cfg.grid_cells, cfg.grid_cells), dtype=np.int64)

    picked: list[Keypoint] = []
    picked_uv: list[tuple[float, float]] = []
    r2 = cfg.nms_radius ** 2
    for u, v, s in zip(uf, vf, scores):
        if len(picked) >= cfg.max_keypoints:
            break
        cu = min(int(u / cell_w), cfg.grid_cells - 1)
        cv = min(int(v / cell_h), cfg.grid_cells - 1)
        if cell_counts[cv, cu] >= cell_cap:
            continue
        if any((u - pu) ** 2 + (v - pv) ** 2 <= r2 for pu, pv in picked_uv):
            continue
        picked.append(Keypoint(u=float(u), v=float(v), score=float(s)))
        picked_uv.append((u, v))
        cell_counts[cv, cu] += 1
    return picked


@dataclass
class DemGcp:
    """A DEM keypoint paired with its georeferenced world coordinates."""

    keypoint: Keypoint
    world: WorldPoint

    def to_json(self) -> dict:
        kp = self.keypoint
        return {"u": kp.u, "v": kp.v, "x": self.world.x, "y": self.world.y,
                "z": self.world.z, "score": kp.score, "selected": kp.selected}

    @classmethod
    def from_json(cls, obj: dict) -> "DemGcp":
        kp = Keypoint(u=float(obj["u"]), v=float(obj["v"]),
                      score=float(obj["score"]), selected=bool(obj["selected"]))
        return cls(keypoint=kp, world=WorldPoint(float(obj["x"]), float(obj["y"]),
                                                 float(obj["z"])))


def detect_dem_gcps(dem: DemRaster, cfg: DetectorConfig | None = None) -> list[DemGcp]:
    """Detect corners in the grayscale DEM and georeference them.

    Each keypoint (u, v) maps through the affine transform to world (x, y)
    and samples the terrain for z; keypoints over nodata are dropped.
    """
    gray = dem_to_grayscale(dem)
    gcps = []
    for kp in detect_keypoints(gray, cfg):
        x, y = pixel_to_world(dem, kp.u, kp.v)
        z = sample_elevation(dem, x, y)
        if math.isnan(z):
            continue
        gcps.append(DemGcp(keypoint=kp, world=WorldPoint(x, y, z)))
    return gcps
