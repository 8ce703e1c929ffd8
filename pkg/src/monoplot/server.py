"""HTTP JSON API driving the human GCP-selection loop.

Single-user service over the standard-library HTTP server: reads are
concurrent, mutations are serialized behind one lock and persist to the
session file atomically, and long-running georeferencing runs as a
background job polled via /api/jobs/{id}.

Routes:
    GET    /api/session                     full session JSON
    GET    /api/photo                       photo as PNG (RGB)
    GET    /api/dem/hillshade               DEM hillshade PNG
    PATCH  /api/gcps/{image|dem}/{index}    body {"selected": bool}
    PUT    /api/camera/initial              body camera JSON
    POST   /api/solve                       body schedule overrides + seed;
                                            max_iters=0 returns projections only
    POST   /api/georef                      body {method, stride} -> {job_id}
    GET    /api/jobs/{id}                   job status/progress
    GET    /api/overlay?opacity=0.5         blended PNG (needs maps)
    GET    /api/render                      pure elevation render PNG
    GET    /api/maps                        maps header JSON
    GET    /api/maps/data                   raw f32 band data
    GET    /api/maps/probe?u=..&v=..        world coordinates at a pixel
    GET    /...                             static UI files
"""

from __future__ import annotations

import json
import math
import mimetypes
import threading
import traceback
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np

from . import georef as georef_mod
from .camera import CameraParams, intrinsics_from_fov
from .dem import read_asc
from .imageio import encode_png, load_gray
from .registration import solve as solve_problem
from .session import Session, SessionError

_PLACEHOLDER_PAGE = b"""<!doctype html>
<html><head><title>monoplot</title></head>
<body><h1>monoplot session service</h1>
<p>No UI bundle was configured (pass --ui). The JSON API is live under
<a href="/api/session">/api/session</a>.</p></body></html>
"""


class MonoplotServer(ThreadingHTTPServer):
    """Holds the mutable service state shared by request handlers."""

    daemon_threads = True

    def __init__(self, session: Session, session_path: Path, port: int = 0,
                 ui_dir: str | None = None, host: str = "127.0.0.1"):
        super().__init__((host, port), ApiHandler)
        self.session = session
        self.session_path = session_path
        self.ui_dir = Path(ui_dir) if ui_dir else None
        self.mutate_lock = threading.Lock()
        self.jobs: dict[int, dict] = {}
        self._next_job = 1
        self.maps: georef_mod.CoordinateMaps | None = None
        self.photo = load_gray(session.photo_path)
        self.dem = read_asc(session.dem_path)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def persist(self) -> None:
        self.session.save(self.session_path)

    def start_georef_job(self, method: str, stride: int) -> int:
        with self.mutate_lock:
            job_id = self._next_job
            self._next_job += 1
            self.jobs[job_id] = {"id": job_id, "status": "running", "progress": 0.0,
                                 "method": method, "stride": stride, "error": None}
        thread = threading.Thread(target=self._run_georef, args=(job_id, method, stride),
                                  daemon=True)
        thread.start()
        return job_id

    def _run_georef(self, job_id: int, method: str, stride: int) -> None:
        job = self.jobs[job_id]
        try:
            cam = self.session.solved_camera
            if cam is None:
                raise SessionError("session has no solved camera")
            intr = intrinsics_from_fov(cam.fov, self.session.width, self.session.height)

            def progress(frac: float) -> None:
                job["progress"] = round(float(frac), 4)

            maps = georef_mod.georeference_image(
                cam, intr, self.dem, self.session.width, self.session.height,
                method=method, stride=stride, progress=progress)
            out_dir = self.session_path.parent / (self.session_path.stem + "_maps")
            georef_mod.write_maps(maps, out_dir)
            self.maps = maps
            job["progress"] = 1.0
            job["status"] = "done"
        except Exception as exc:  # job errors surface through polling
            job["status"] = "error"
            job["error"] = f"{type(exc).__name__}: {exc}"
            traceback.print_exc()


class ApiHandler(BaseHTTPRequestHandler):
    server: MonoplotServer
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # quiet by default
        pass

    # -- helpers ----------------------------------------------------------
    def _json(self, obj, code: int = 200) -> None:
        body = json.dumps(obj).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _bytes(self, data: bytes, content_type: str, code: int = 200) -> None:
        self.send_response(code)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _error(self, code: int, message: str) -> None:
        self._json({"error": message}, code=code)

    def _body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        if length == 0:
            return {}
        return json.loads(self.rfile.read(length).decode())

    # -- GET ---------------------------------------------------------------
    def do_GET(self) -> None:
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        try:
            if url.path == "/api/session":
                self._json(self.server.session.to_json())
            elif url.path == "/api/photo":
                photo = self.server.photo
                rgb = np.stack([photo] * 3, axis=-1)
                self._bytes(encode_png(rgb), "image/png")
            elif url.path == "/api/dem/hillshade":
                self._bytes(encode_png(georef_mod.hillshade(self.server.dem)), "image/png")
            elif url.path == "/api/render":
                self._send_render(opacity=0.0)
            elif url.path == "/api/overlay":
                q = parse_qs(url.query)
                opacity = float(q.get("opacity", ["0.5"])[0])
                self._send_render(opacity=opacity)
            elif url.path == "/api/maps":
                self._send_maps_header()
            elif url.path == "/api/maps/data":
                self._send_maps_data()
            elif url.path == "/api/maps/probe":
                q = parse_qs(url.query)
                self._probe(float(q["u"][0]), float(q["v"][0]))
            elif len(parts) == 3 and parts[:2] == ["api", "jobs"]:
                job = self.server.jobs.get(int(parts[2]))
                if job is None:
                    self._error(404, "no such job")
                else:
                    self._json(job)
            elif parts and parts[0] == "api":
                self._error(404, f"unknown endpoint: {url.path}")
            else:
                self._static(url.path)
        except BrokenPipeError:
            pass
        except Exception as exc:
            self._error(500, f"{type(exc).__name__}: {exc}")

    def _send_render(self, opacity: float) -> None:
        maps = self.server.maps
        if maps is None:
            self._error(409, "no coordinate maps computed yet; POST /api/georef first")
            return
        if not 0.0 <= opacity <= 1.0:
            self._error(400, "opacity must lie in [0, 1]")
            return
        img = georef_mod.render_overlay(self.server.photo, maps, opacity)
        self._bytes(encode_png(img), "image/png")

    def _send_maps_header(self) -> None:
        maps = self.server.maps
        if maps is None:
            self._error(409, "no coordinate maps computed yet")
            return
        h, w = maps.map_shape
        self._json({"width": w, "height": h, "dtype": "f32",
                    "bands": ["x", "y", "z", "valid"], "stride": maps.stride,
                    "photo_width": maps.width, "photo_height": maps.height})

    def _send_maps_data(self) -> None:
        maps = self.server.maps
        if maps is None:
            self._error(409, "no coordinate maps computed yet")
            return
        bands = [maps.x_map, maps.y_map, maps.z_map, maps.valid.astype(np.float64)]
        raw = b"".join(np.ascontiguousarray(b, dtype="<f4").tobytes() for b in bands)
        self._bytes(raw, "application/octet-stream")

    def _probe(self, u: float, v: float) -> None:
        maps = self.server.maps
        if maps is None:
            self._error(409, "no coordinate maps computed yet")
            return
        i = int(v) // maps.stride
        j = int(u) // maps.stride
        h, w = maps.map_shape
        if not (0 <= i < h and 0 <= j < w):
            self._error(400, "pixel outside the photo")
            return
        valid = bool(maps.valid[i, j])
        # float32 values, matching the serialized binary byte-for-byte
        self._json({
            "u": u, "v": v, "valid": valid,
            "x": float(np.float32(maps.x_map[i, j])) if valid else None,
            "y": float(np.float32(maps.y_map[i, j])) if valid else None,
            "z": float(np.float32(maps.z_map[i, j])) if valid else None,
        })

    def _static(self, path: str) -> None:
        if path == "/":
            path = "/index.html"
        ui = self.server.ui_dir
        if ui is None:
            if path == "/index.html":
                self._bytes(_PLACEHOLDER_PAGE, "text/html")
            else:
                self._error(404, "no UI bundle configured")
            return
        target = (ui / path.lstrip("/")).resolve()
        if not str(target).startswith(str(ui.resolve())) or not target.is_file():
            self._error(404, f"not found: {path}")
            return
        ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
        self._bytes(target.read_bytes(), ctype)

    # -- mutations ---------------------------------------------------------
    def do_PATCH(self) -> None:
        parts = [p for p in urlparse(self.path).path.split("/") if p]
        if len(parts) == 4 and parts[:2] == ["api", "gcps"] and parts[2] in ("image", "dem"):
            try:
                body = self._body()
                selected = bool(body["selected"])
                index = int(parts[3])
            except (KeyError, ValueError, json.JSONDecodeError):
                self._error(400, 'body must be {"selected": true|false}')
                return
            with self.server.mutate_lock:
                session = self.server.session
                pool = session.image_gcps if parts[2] == "image" else session.dem_gcps
                if not 0 <= index < len(pool):
                    self._error(404, f"no {parts[2]} GCP with index {index}")
                    return
                if parts[2] == "image":
                    pool[index].selected = selected
                    payload = pool[index].to_json()
                else:
                    pool[index].keypoint.selected = selected
                    payload = pool[index].to_json()
                self.server.persist()
            self._json(payload)
        else:
            self._error(404, "unknown endpoint")

    def do_PUT(self) -> None:
        if urlparse(self.path).path != "/api/camera/initial":
            self._error(404, "unknown endpoint")
            return
        try:
            camera = CameraParams.from_json(self._body())
        except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
            self._error(400, f"invalid camera JSON: {exc}")
            return
        with self.server.mutate_lock:
            self.server.session.initial_camera = camera
            self.server.persist()
        self._json(camera.to_json(self.server.session.width, self.server.session.height))

    def do_POST(self) -> None:
        path = urlparse(self.path).path
        if path == "/api/solve":
            self._post_solve()
        elif path == "/api/georef":
            self._post_georef()
        else:
            self._error(404, "unknown endpoint")

    def _post_solve(self) -> None:
        try:
            body = self._body()
        except json.JSONDecodeError:
            self._error(400, "invalid JSON body")
            return
        session = self.server.session
        seed = int(body.pop("seed", 0))
        max_iters = body.get("max_iters")

        if max_iters == 0:
            camera = session.solved_camera or session.initial_camera
            if camera is None:
                self._error(409, "no camera set")
                return
            self._json({"camera": camera.to_json(session.width, session.height),
                        "projections": _projection_payload(camera, session)})
            return

        with self.server.mutate_lock:
            try:
                overrides = {k: v for k, v in body.items() if v is not None}
                if overrides:
                    session.schedule = type(session.schedule).from_json(
                        {**session.schedule.to_json(), **overrides})
                problem = session.registration_problem()
            except (SessionError, ValueError, TypeError) as exc:
                self._error(409, str(exc))
                return
            result = solve_problem(problem, seed=seed)
            session.record_result(result, seed=seed)
            self.server.persist()
        trace = [[p.iteration, None if math.isinf(p.s) else p.s, p.r, p.lam, p.objective]
                 for p in result.trace]
        self._json({
            "result": session.result,
            "camera": result.camera.to_json(session.width, session.height),
            "trace": trace,
            "projections": _projection_payload(result.camera, session),
        })

    def _post_georef(self) -> None:
        try:
            body = self._body()
        except json.JSONDecodeError:
            self._error(400, "invalid JSON body")
            return
        method = body.get("method", "raytrace")
        stride = int(body.get("stride", 4))
        if method not in ("raytrace", "zbuffer"):
            self._error(400, f"unknown method: {method!r}")
            return
        if self.server.session.solved_camera is None:
            self._error(409, "session has no solved camera")
            return
        job_id = self.server.start_georef_job(method, stride)
        self._json({"job_id": job_id}, code=202)


def _projection_payload(camera: CameraParams, session: Session) -> list[dict]:
    """Projections of every DEM GCP (any selection state) at the camera."""
    from .camera import project_set

    world = np.array([[g.world.x, g.world.y, g.world.z] for g in session.dem_gcps],
                     dtype=np.float64).reshape(-1, 3)
    if len(world) == 0:
        return []
    intr = intrinsics_from_fov(camera.fov, session.width, session.height)
    ps = project_set(camera, intr, world, session.width, session.height)
    out = []
    for k in range(len(world)):
        front = bool(ps.in_front[k])
        out.append({
            "index": k,
            "u": float(ps.uv[k, 0]) if front else None,
            "v": float(ps.uv[k, 1]) if front else None,
            "in_front": front,
            "visible": bool(ps.visible[k]),
            "selected": session.dem_gcps[k].keypoint.selected,
        })
    return out


def serve_session(session: Session, session_path: Path, port: int,
                  ui_dir: str | None = None) -> int:
    server = MonoplotServer(session, session_path, port=port, ui_dir=ui_dir)
    print(f"serving session {session_path} on http://127.0.0.1:{server.port}/")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0
