"""Session state for the semi-automatic loop, persisted as versioned JSON.

A session carries everything the human-in-the-loop workflow accumulates:
the photo and DEM references, detected GCPs with their selection flags, the
initial and solved cameras, the optimizer schedule, and the solve trace.
Writes are atomic (temp file + rename) so a crash cannot corrupt the file,
and serialization is deterministic so identical inputs produce
byte-identical session files.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraParams
from .keypoints import DemGcp, Keypoint
from .registration import (
    OptimizerSchedule,
    RegistrationProblem,
    RegistrationResult,
    TracePoint,
)

SCHEMA_VERSION = 1


class SessionError(ValueError):
    """Malformed or inconsistent session file."""


@dataclass
class Session:
    photo_path: str
    dem_path: str
    width: int
    height: int
    image_gcps: list[Keypoint] = field(default_factory=list)
    dem_gcps: list[DemGcp] = field(default_factory=list)
    initial_camera: CameraParams | None = None
    solved_camera: CameraParams | None = None
    schedule: OptimizerSchedule = field(default_factory=OptimizerSchedule)
    trace: list[TracePoint] | None = None
    result: dict | None = None
    seed: int | None = None

    def selected_image_gcps(self) -> np.ndarray:
        return np.array([[k.u, k.v] for k in self.image_gcps if k.selected],
                        dtype=np.float64).reshape(-1, 2)

    def selected_world_gcps(self) -> np.ndarray:
        return np.array([[g.world.x, g.world.y, g.world.z]
                         for g in self.dem_gcps if g.keypoint.selected],
                        dtype=np.float64).reshape(-1, 3)

    def registration_problem(self) -> RegistrationProblem:
        img = self.selected_image_gcps()
        world = self.selected_world_gcps()
        if len(img) < 1:
            raise SessionError("no selected image GCPs")
        if len(world) < 1:
            raise SessionError("no selected DEM GCPs")
        if self.initial_camera is None:
            raise SessionError("no initial camera set")
        return RegistrationProblem(
            image_gcps=img,
            world_gcps=world,
            width=self.width,
            height=self.height,
            initial_camera=self.initial_camera,
            schedule=self.schedule,
        )

    def record_result(self, result: RegistrationResult, seed: int) -> None:
        self.solved_camera = result.camera
        self.trace = result.trace
        self.seed = seed
        self.result = {
            "final_s": result.final_s if math.isfinite(result.final_s) else None,
            "final_loss": result.final_loss if math.isfinite(result.final_loss) else None,
            "status": result.status,
            "iterations": result.iterations,
            "restarts_used": result.restarts_used,
            "diagnostic": result.diagnostic,
        }

    def to_json(self) -> dict:
        def cam(c: CameraParams | None):
            return None if c is None else c.to_json(self.width, self.height)

        trace = None
        if self.trace is not None:
            trace = [[p.iteration, None if math.isinf(p.s) else p.s, p.r,
                      p.lam, p.objective] for p in self.trace]
        return {
            "schema": SCHEMA_VERSION,
            "photo": {"path": self.photo_path, "width": self.width, "height": self.height},
            "dem": {"path": self.dem_path},
            "image_gcps": [k.to_json() for k in self.image_gcps],
            "dem_gcps": [g.to_json() for g in self.dem_gcps],
            "initial_camera": cam(self.initial_camera),
            "solved_camera": cam(self.solved_camera),
            "schedule": self.schedule.to_json(),
            "trace": trace,
            "result": self.result,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Session":
        if obj.get("schema") != SCHEMA_VERSION:
            raise SessionError(f"unsupported session schema: {obj.get('schema')!r}")
        trace = None
        if obj.get("trace") is not None:
            trace = [TracePoint(iteration=int(t[0]),
                                s=math.inf if t[1] is None else float(t[1]),
                                r=float(t[2]), lam=float(t[3]), objective=float(t[4]))
                     for t in obj["trace"]]
        return cls(
            photo_path=obj["photo"]["path"],
            dem_path=obj["dem"]["path"],
            width=int(obj["photo"]["width"]),
            height=int(obj["photo"]["height"]),
            image_gcps=[Keypoint.from_json(k) for k in obj["image_gcps"]],
            dem_gcps=[DemGcp.from_json(g) for g in obj["dem_gcps"]],
            initial_camera=None if obj.get("initial_camera") is None
            else CameraParams.from_json(obj["initial_camera"]),
            solved_camera=None if obj.get("solved_camera") is None
            else CameraParams.from_json(obj["solved_camera"]),
            schedule=OptimizerSchedule.from_json(obj.get("schedule", {})),
            trace=trace,
            result=obj.get("result"),
            seed=obj.get("seed"),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        """Atomic write: temp file in the same directory, then rename."""
        path = Path(path)
        fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."),
                                   prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                fh.write(self.dumps())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def load_session(path: str | Path, check_files: bool = True) -> Session:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"session file not found: {path}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SessionError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}")
    session = Session.from_json(obj)
    if check_files:
        for name, ref in (("photo", session.photo_path), ("DEM", session.dem_path)):
            if not Path(ref).exists():
                raise SessionError(f"{path}: referenced {name} file is missing: {ref}")
    return session
