"""Seven-parameter pinhole camera: translation, Euler angles, field of view.

Projection follows p = K R [P + T]: world points are translated by T and
then rotated, so the optical center sits at world position -T. Image
coordinates are u rightward, v downward, origin at the top-left pixel
center. Rotations compose as R = Rz(roll) @ Rx(pitch) @ Ry(yaw) acting on
world coordinates (documented as ``euler_zxy`` in session files).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .dem import WorldPoint

# Behind-camera cutoff: camera-frame depth below this is treated as invisible.
EPS_DEPTH = 1e-6

# Out-of-frame margin for projected GCPs, as a fraction of max(width, height).
FRAME_MARGIN = 0.5


@dataclass(frozen=True)
class CameraParams:
    """The 7 optimization unknowns. Angles in radians; T in world units."""

    t_x: float
    t_y: float
    t_z: float
    yaw: float
    pitch: float
    roll: float
    fov: float

    def __post_init__(self) -> None:
        if not 0.0 < self.fov < math.pi:
            raise ValueError(f"fov must lie in (0, pi), got {self.fov}")
        for name in ("t_x", "t_y", "t_z", "yaw", "pitch", "roll"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def position(self) -> np.ndarray:
        """Camera optical center in world coordinates (-T)."""
        return -np.array([self.t_x, self.t_y, self.t_z], dtype=np.float64)

    def as_vector(self) -> np.ndarray:
        """(t_x, t_y, t_z, yaw, pitch, roll, fov) for the optimizer."""
        return np.array([self.t_x, self.t_y, self.t_z,
                         self.yaw, self.pitch, self.roll, self.fov], dtype=np.float64)

    @classmethod
    def from_vector(cls, v) -> "CameraParams":
        v = [float(x) for x in v]
        return cls(t_x=v[0], t_y=v[1], t_z=v[2], yaw=v[3], pitch=v[4],
                   roll=v[5], fov=v[6])

    def with_fov(self, fov: float) -> "CameraParams":
        return replace(self, fov=fov)

    def to_json(self, width: int, height: int) -> dict:
        return {
            "t": [self.t_x, self.t_y, self.t_z],
            "euler_zxy": [self.yaw, self.pitch, self.roll],
            "fov_rad": self.fov,
            "image": {"width": width, "height": height},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CameraParams":
        if "euler_zxy" not in obj:
            raise ValueError("camera JSON must carry the 'euler_zxy' convention tag")
        t = obj["t"]
        e = obj["euler_zxy"]
        return cls(t_x=t[0], t_y=t[1], t_z=t[2], yaw=e[0], pitch=e[1],
                   roll=e[2], fov=obj["fov_rad"])


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics; square pixels (f_x == f_y by construction)."""

    f_x: float
    f_y: float
    c_x: float
    c_y: float

    def __post_init__(self) -> None:
        if self.f_x <= 0 or self.f_y <= 0:
            raise ValueError("focal lengths must be positive")

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.f_x, 0.0, self.c_x],
                         [0.0, self.f_y, self.c_y],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class PixelPoint:
    """Projected image point with camera-frame depth kept for visibility."""

    u: float
    v: float
    depth: float


def intrinsics_from_fov(fov: float, width: int, height: int) -> Intrinsics:
    """Focal length and principal point from the horizontal field of view.

    f = (width/2) / tan(fov/2); the principal point is the image center.
    """
    if not 0.0 < fov < math.pi:
        raise ValueError(f"fov must lie in (0, pi), got {fov}")
    if width < 1 or height < 1:
        raise ValueError("image dimensions must be at least 1 pixel")
    f = (width / 2.0) / math.tan(fov / 2.0)
    return Intrinsics(f_x=f, f_y=f, c_x=width / 2.0, c_y=height / 2.0)


def _ry(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rx(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rz(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_euler(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """World-to-camera rotation R = Rz(roll) @ Rx(pitch) @ Ry(yaw)."""
    return _rz(roll) @ _rx(pitch) @ _ry(yaw)


def rotation_derivatives(yaw: float, pitch: float, roll: float):
    """dR/dyaw, dR/dpitch, dR/droll for the analytic projection gradient."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    ry, rx, rz = _ry(yaw), _rx(pitch), _rz(roll)
    dry = np.array([[-sy, 0.0, cy], [0.0, 0.0, 0.0], [-cy, 0.0, -sy]])
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -sp, -cp], [0.0, cp, -sp]])
    drz = np.array([[-sr, -cr, 0.0], [cr, -sr, 0.0], [0.0, 0.0, 0.0]])
    return rz @ rx @ dry, rz @ drx @ ry, drz @ rx @ ry


def project_points(cam: CameraParams, intr: Intrinsics, points: np.ndarray):
    """Vectorized p = K R [P + T] over an (N, 3) array of world points.

    Returns (uv, depth): uv is (N, 2); rows with depth <= EPS_DEPTH hold
    NaN coordinates since the perspective division is meaningless there.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    r = rotation_from_euler(cam.yaw, cam.pitch, cam.roll)
    a0 = pts[:, 0] + cam.t_x
    a1 = pts[:, 1] + cam.t_y
    a2 = pts[:, 2] + cam.t_z
    # component-wise rotation: identical floating-point results for any
    # batch size (matmul kernels differ between shapes)
    qx = r[0, 0] * a0 + r[0, 1] * a1 + r[0, 2] * a2
    qy = r[1, 0] * a0 + r[1, 1] * a1 + r[1, 2] * a2
    depth = r[2, 0] * a0 + r[2, 1] * a1 + r[2, 2] * a2
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.f_x * qx / depth + intr.c_x
        v = intr.f_y * qy / depth + intr.c_y
    uv = np.stack([u, v], axis=1)
    uv[depth <= EPS_DEPTH] = np.nan
    return uv, depth


def project(cam: CameraParams, intr: Intrinsics,
            p: WorldPoint | np.ndarray) -> PixelPoint | None:
    """Project a single world point; None marks behind-camera."""
    arr = p.as_array() if isinstance(p, WorldPoint) else np.asarray(p, dtype=np.float64)
    uv, depth = project_points(cam, intr, arr.reshape(1, 3))
    if depth[0] <= EPS_DEPTH:
        return None
    return PixelPoint(u=float(uv[0, 0]), v=float(uv[0, 1]), depth=float(depth[0]))


@dataclass(frozen=True)
class ProjectedSet:
    """project_set result: coordinates plus per-point visibility flags.

    ``in_front`` is the positive-depth test; ``in_frame`` the expanded image
    frame test (margin FRAME_MARGIN * max(width, height) beyond each edge);
    ``visible`` is their conjunction.
    """

    uv: np.ndarray
    depth: np.ndarray
    in_front: np.ndarray
    in_frame: np.ndarray

    @property
    def visible(self) -> np.ndarray:
        return self.in_front & self.in_frame


def project_set(cam: CameraParams, intr: Intrinsics, points: np.ndarray,
                width: int, height: int) -> ProjectedSet:
    """Element-wise projection of world points with visibility flags."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    uv, depth = project_points(cam, intr, pts)
    in_front = depth > EPS_DEPTH
    margin = FRAME_MARGIN * max(width, height)
    with np.errstate(invalid="ignore"):
        in_frame = ((uv[:, 0] >= -margin) & (uv[:, 0] <= width + margin)
                    & (uv[:, 1] >= -margin) & (uv[:, 1] <= height + margin))
    in_frame &= in_front
    return ProjectedSet(uv=uv, depth=depth, in_front=in_front, in_frame=in_frame)
