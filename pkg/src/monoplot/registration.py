"""Camera recovery by regularized descent over mismatched GCP sets.

The data loss S is the average distance from each image GCP to its nearest
visible projected DEM GCP, which tolerates unequal set sizes. A centroid
regularizer R pulls the projected cloud toward the image cloud when the two
are far apart; its weight lambda is adapted from the current S so it fades
out as the match tightens. The full objective is (1 - lambda) S + lambda R.

Each iteration solves a Levenberg-damped Gauss-Newton model of the
objective (IRLS weights linearize the mean-of-norms loss) built from the
same analytic projection Jacobians that back the public ``gradient``; the
damping rises whenever a step fails to decrease the objective, which in the
limit reduces the step to plain scaled gradient descent. Per-parameter step
sizes act as the trust metric. Plain first-order descent stalls on this
problem: the fov/translation coupling leaves the Gauss-Newton Hessian with
a condition number around 1e4-1e5, so curvature information is required to
reach sub-pixel matches in bounded iterations.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .camera import (
    CameraParams,
    intrinsics_from_fov,
    project_set,
    rotation_derivatives,
    rotation_from_euler,
)

# Sentinel objective recorded on iterations where no projected point lands
# inside the expanded frame; R is added so backtracking can still compare.
DEGENERATE_OBJECTIVE = 1e9


class DegenerateProjectionError(RuntimeError):
    """No visible projected GCPs: the data loss is undefined at this camera."""


@dataclass(frozen=True)
class OptimizerSchedule:
    """Descent schedule; step sizes set the per-parameter trust scale.

    step_translation defaults to 1% of the scene extent (the diagonal of
    the world-GCP bounding box) when left as None. Runs ending above
    restart_s_threshold (or degenerate) trigger jittered restarts.
    """

    max_iters: int = 500
    step_translation: float | None = None
    step_angle: float = 0.002
    step_fov: float = 0.001
    lambda_0: float = 0.9
    s_ref: float = 50.0
    convergence_tol: float = 1e-6
    patience: int = 30
    restarts: int = 5
    restart_s_threshold: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.lambda_0 <= 1.0:
            raise ValueError("lambda_0 must lie in [0, 1]")
        if self.convergence_tol <= 0:
            raise ValueError("convergence_tol must be positive")

    def to_json(self) -> dict:
        return {
            "max_iters": self.max_iters,
            "step_translation": self.step_translation,
            "step_angle": self.step_angle,
            "step_fov": self.step_fov,
            "lambda_0": self.lambda_0,
            "s_ref": self.s_ref,
            "convergence_tol": self.convergence_tol,
            "patience": self.patience,
            "restarts": self.restarts,
            "restart_s_threshold": self.restart_s_threshold,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "OptimizerSchedule":
        return cls(**{k: obj[k] for k in cls().to_json() if k in obj})


@dataclass
class RegistrationProblem:
    """Selected GCPs plus everything needed to evaluate the objective."""

    image_gcps: np.ndarray          # (n, 2) pixel coordinates
    world_gcps: np.ndarray          # (n_dp, 3) world coordinates
    width: int                      # photo dimensions, for fov -> K
    height: int
    initial_camera: CameraParams
    schedule: OptimizerSchedule = field(default_factory=OptimizerSchedule)

    def __post_init__(self) -> None:
        self.image_gcps = np.asarray(self.image_gcps, dtype=np.float64).reshape(-1, 2)
        self.world_gcps = np.asarray(self.world_gcps, dtype=np.float64).reshape(-1, 3)
        if len(self.image_gcps) < 1 or len(self.world_gcps) < 1:
            raise ValueError("need at least one GCP on each side")

    def scene_extent(self) -> float:
        span = self.world_gcps.max(axis=0) - self.world_gcps.min(axis=0)
        extent = float(np.linalg.norm(span))
        return extent if extent > 0 else 1.0


@dataclass
class TracePoint:
    iteration: int
    s: float            # inf when no projected point was visible
    r: float
    lam: float
    objective: float


@dataclass
class RegistrationResult:
    camera: CameraParams
    final_loss: float
    final_s: float
    trace: list[TracePoint]
    status: str          # "converged" | "max-iters" | "degenerate"
    iterations: int
    restarts_used: int
    diagnostic: str = ""


def chamfer_loss(image_gcps: np.ndarray, projected: np.ndarray) -> float:
    """Average distance from each image GCP to its nearest projected point."""
    image_gcps = np.asarray(image_gcps, dtype=np.float64).reshape(-1, 2)
    projected = np.asarray(projected, dtype=np.float64).reshape(-1, 2)
    if len(projected) == 0:
        raise DegenerateProjectionError("no visible projected GCPs")
    d = image_gcps[:, None, :] - projected[None, :, :]
    dist = np.sqrt(d[:, :, 0] ** 2 + d[:, :, 1] ** 2)
    return float(np.mean(dist.min(axis=1)))


def nearest_projected_indices(image_gcps: np.ndarray, projected: np.ndarray) -> np.ndarray:
    """Per image GCP, the index of its nearest projected point (ties: lowest)."""
    d = image_gcps[:, None, :] - projected[None, :, :]
    dist2 = d[:, :, 0] ** 2 + d[:, :, 1] ** 2
    return dist2.argmin(axis=1)


def centroid_regularizer(image_gcps: np.ndarray, projected: np.ndarray) -> float:
    """Squared distance between the two centroids, in pixels^2."""
    image_gcps = np.asarray(image_gcps, dtype=np.float64).reshape(-1, 2)
    projected = np.asarray(projected, dtype=np.float64).reshape(-1, 2)
    if len(projected) == 0:
        raise DegenerateProjectionError("no projected GCPs in front of the camera")
    dx = projected[:, 0].mean() - image_gcps[:, 0].mean()
    dy = projected[:, 1].mean() - image_gcps[:, 1].mean()
    return float(dx * dx + dy * dy)


def adapt_lambda(s: float, lambda_0: float = 0.9, s_ref: float = 50.0) -> float:
    """Regularization weight from the current data loss: lambda_0 * S/(S + s_ref).

    Strictly increasing in S, zero when converged, bounded below lambda_0.
    """
    if s < 0:
        raise ValueError("S must be non-negative")
    if s == 0.0:
        return 0.0
    return lambda_0 * s / (s + s_ref)


@dataclass
class _Projection:
    """One camera evaluation: projections, flags, and both loss terms."""

    uv: np.ndarray
    in_front: np.ndarray
    visible: np.ndarray
    s: float | None      # None when no point is visible
    r: float | None      # None when no point is in front


def _evaluate(camera: CameraParams, problem: RegistrationProblem) -> _Projection:
    intr = intrinsics_from_fov(camera.fov, problem.width, problem.height)
    proj = project_set(camera, intr, problem.world_gcps, problem.width, problem.height)
    visible = proj.visible
    in_front = proj.in_front
    s = chamfer_loss(problem.image_gcps, proj.uv[visible]) if visible.any() else None
    r = centroid_regularizer(problem.image_gcps, proj.uv[in_front]) if in_front.any() else None
    return _Projection(uv=proj.uv, in_front=in_front, visible=visible, s=s, r=r)


def objective(camera: CameraParams, problem: RegistrationProblem, lam: float) -> float:
    """(1 - lambda) S + lambda R at the given camera."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    ev = _evaluate(camera, problem)
    if ev.s is None:
        raise DegenerateProjectionError("no visible projected GCPs")
    return (1.0 - lam) * ev.s + lam * ev.r


def _projection_jacobians(camera: CameraParams, problem: RegistrationProblem):
    """Per-point partials of (u, v) w.r.t. the 7 camera parameters.

    Returns (uv, depth, j_u, j_v) with j_* of shape (n_dp, 7) in the order
    (t_x, t_y, t_z, yaw, pitch, roll, fov). Behind-camera rows are junk and
    must be masked by the caller.
    """
    pts = problem.world_gcps
    w = problem.width
    half = math.tan(camera.fov / 2.0)
    f = (w / 2.0) / half
    df_dfov = -w / (4.0 * math.sin(camera.fov / 2.0) ** 2)

    r = rotation_from_euler(camera.yaw, camera.pitch, camera.roll)
    dr_yaw, dr_pitch, dr_roll = rotation_derivatives(camera.yaw, camera.pitch, camera.roll)
    t = np.array([camera.t_x, camera.t_y, camera.t_z])
    a = pts + t
    q = a @ r.T
    x, y, z = q[:, 0], q[:, 1], q[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        iz = 1.0 / z
    u = f * x * iz + w / 2.0
    v = f * y * iz + problem.height / 2.0

    n = len(pts)
    j_u = np.empty((n, 7))
    j_v = np.empty((n, 7))
    fx_iz2 = f * x * iz * iz
    fy_iz2 = f * y * iz * iz
    for k in range(3):
        j_u[:, k] = f * iz * r[0, k] - fx_iz2 * r[2, k]
        j_v[:, k] = f * iz * r[1, k] - fy_iz2 * r[2, k]
    for k, dr in enumerate((dr_yaw, dr_pitch, dr_roll)):
        dq = a @ dr.T
        j_u[:, 3 + k] = f * iz * dq[:, 0] - fx_iz2 * dq[:, 2]
        j_v[:, 3 + k] = f * iz * dq[:, 1] - fy_iz2 * dq[:, 2]
    j_u[:, 6] = x * iz * df_dfov
    j_v[:, 6] = y * iz * df_dfov
    return np.stack([u, v], axis=1), z, j_u, j_v


def gradient(camera: CameraParams, problem: RegistrationProblem, lam: float) -> np.ndarray:
    """Analytic gradient of the objective w.r.t. the 7 camera parameters.

    The nearest-neighbor assignment and the visibility set are held fixed
    (the objective is piecewise smooth; this is its subgradient).
    """
    uv, depth, j_u, j_v = _projection_jacobians(camera, problem)
    ev = _evaluate(camera, problem)
    if not ev.in_front.any():
        raise DegenerateProjectionError("no projected GCPs in front of the camera")

    grad_r = _centroid_gradient(problem.image_gcps, uv, j_u, j_v, ev.in_front)
    if ev.s is None:
        return grad_r
    grad_s = _chamfer_gradient(problem.image_gcps, uv, j_u, j_v, ev.visible)
    return (1.0 - lam) * grad_s + lam * grad_r


def _chamfer_gradient(image_gcps, uv, j_u, j_v, visible) -> np.ndarray:
    vis_idx = np.flatnonzero(visible)
    nearest = nearest_projected_indices(image_gcps, uv[vis_idx])
    j = vis_idx[nearest]
    diff = uv[j] - image_gcps
    dist = np.sqrt(diff[:, 0] ** 2 + diff[:, 1] ** 2)
    safe = dist > 1e-12
    wx = np.where(safe, diff[:, 0] / np.where(safe, dist, 1.0), 0.0)
    wy = np.where(safe, diff[:, 1] / np.where(safe, dist, 1.0), 0.0)
    return (wx[:, None] * j_u[j] + wy[:, None] * j_v[j]).mean(axis=0)


def _centroid_gradient(image_gcps, uv, j_u, j_v, in_front) -> np.ndarray:
    front = np.flatnonzero(in_front)
    dx = uv[front, 0].mean() - image_gcps[:, 0].mean()
    dy = uv[front, 1].mean() - image_gcps[:, 1].mean()
    return 2.0 * dx * j_u[front].mean(axis=0) + 2.0 * dy * j_v[front].mean(axis=0)


def _step_sizes(problem: RegistrationProblem) -> np.ndarray:
    sched = problem.schedule
    st = sched.step_translation
    if st is None:
        st = 0.01 * problem.scene_extent()
    return np.array([st, st, st, sched.step_angle, sched.step_angle,
                     sched.step_angle, sched.step_fov])


def _clamp_fov(vec: np.ndarray) -> np.ndarray:
    vec = vec.copy()
    vec[6] = min(max(vec[6], 1e-3), math.pi - 1e-3)
    return vec


@dataclass
class _RunOutcome:
    camera: CameraParams
    final_s: float       # inf when degenerate
    trace: list[TracePoint]
    status: str
    iterations: int


def _iteration_value(ev: _Projection, lam: float) -> float:
    """Comparable objective for backtracking; degenerate states sort worst."""
    if ev.r is None:
        return math.inf
    if ev.s is None:
        return DEGENERATE_OBJECTIVE + ev.r
    return (1.0 - lam) * ev.s + lam * ev.r


def _model_terms(camera: CameraParams, problem: RegistrationProblem,
                 ev: _Projection, lam: float, scale: np.ndarray):
    """Gradient and Gauss-Newton Hessian of the objective in scaled coordinates.

    The mean-of-norms loss is linearized with IRLS weights 1/|r_i|; the
    centroid term is an exact sum of squares. Zero residuals get a floored
    weight, which pins already-matched GCPs in place.
    """
    uv, _, j_u, j_v = _projection_jacobians(camera, problem)
    img = problem.image_gcps
    n = len(img)
    jus = j_u * scale
    jvs = j_v * scale
    g = np.zeros(7)
    h = np.zeros((7, 7))

    if ev.s is not None and lam < 1.0:
        vis_idx = np.flatnonzero(ev.visible)
        j = vis_idx[nearest_projected_indices(img, uv[vis_idx])]
        r = uv[j] - img
        dist = np.sqrt(r[:, 0] ** 2 + r[:, 1] ** 2)
        # Floor the IRLS weights relative to the mean distance so a single
        # coincidentally-matched point cannot pin the whole solve.
        floor = max(0.1 * float(dist.mean()), 1e-9)
        w = 1.0 / np.maximum(dist, floor)
        g_s = ((r[:, 0] * w)[:, None] * jus[j] + (r[:, 1] * w)[:, None] * jvs[j]).mean(axis=0)
        h_s = (np.einsum("ni,nj->ij", jus[j] * w[:, None], jus[j])
               + np.einsum("ni,nj->ij", jvs[j] * w[:, None], jvs[j])) / n
        g += (1.0 - lam) * g_s
        h += (1.0 - lam) * h_s

    if lam > 0.0:
        front = np.flatnonzero(ev.in_front)
        dx = uv[front, 0].mean() - img[:, 0].mean()
        dy = uv[front, 1].mean() - img[:, 1].mean()
        ju_m = jus[front].mean(axis=0)
        jv_m = jvs[front].mean(axis=0)
        g += lam * (2.0 * dx * ju_m + 2.0 * dy * jv_m)
        h += lam * (2.0 * np.outer(ju_m, ju_m) + 2.0 * np.outer(jv_m, jv_m))
    return g, h


def _descend(init: CameraParams, problem: RegistrationProblem,
             lam_override: float | None = None,
             start_iteration: int = 0) -> _RunOutcome:
    """One damped-model descent run; returns the best-S camera seen.

    lam_override pins the regularization weight (0 gives the pure data-loss
    run used to finish a solve, matching the adaptive rule's convergence
    limit); None applies the adaptive rule each iteration.
    """
    sched = problem.schedule
    scale = _step_sizes(problem)
    theta = _clamp_fov(init.as_vector())
    camera = CameraParams.from_vector(theta)

    trace: list[TracePoint] = []
    best_s = math.inf
    best_camera = camera
    anchor_s = math.inf
    since_improvement = 0
    mu = 1.0
    status = "max-iters"
    it = 0

    for it in range(1, sched.max_iters + 1):
        ev = _evaluate(camera, problem)
        if ev.r is None:
            return _RunOutcome(best_camera, best_s, trace, "degenerate", it)

        if ev.s is None:
            lam = 1.0
            s_rec = math.inf
        else:
            lam = adapt_lambda(ev.s, sched.lambda_0, sched.s_ref) \
                if lam_override is None else lam_override
            s_rec = ev.s
        value = _iteration_value(ev, lam)
        trace.append(TracePoint(iteration=start_iteration + it, s=s_rec, r=ev.r,
                                lam=lam, objective=value))

        if ev.s is not None:
            if ev.s < best_s:
                best_s = ev.s
                best_camera = camera
            if best_s < anchor_s - sched.convergence_tol:
                anchor_s = best_s
                since_improvement = 0
            else:
                since_improvement += 1
            if since_improvement >= sched.patience:
                status = "converged"
                break

        g, h = _model_terms(camera, problem, ev, lam, scale)
        if float(np.linalg.norm(g)) < 1e-15:
            status = "converged"
            break

        # Damped model solve; raising mu on rejection shrinks and bends the
        # step toward -scale^2 * gradient, i.e. scaled gradient descent.
        accepted = False
        eye = np.eye(7)
        for _ in range(30):
            try:
                delta = np.linalg.solve(h + mu * eye, -g)
            except np.linalg.LinAlgError:
                mu *= 4.0
                continue
            cand_vec = _clamp_fov(theta + scale * delta)
            cand = CameraParams.from_vector(cand_vec)
            cand_value = _iteration_value(_evaluate(cand, problem), lam)
            if cand_value <= value:
                theta = cand_vec
                camera = cand
                mu = max(mu * 0.5, 1e-10)
                accepted = True
                break
            mu *= 4.0
        if not accepted:
            # No improvement even under maximal damping: done.
            status = "converged"
            break

    if math.isinf(best_s):
        final_ev = _evaluate(camera, problem)
        if final_ev.r is None:
            status = "degenerate"
        best_camera = camera
    return _RunOutcome(best_camera, best_s, trace, status, it)


def _jitter(init: CameraParams, problem: RegistrationProblem,
            rng: np.random.Generator) -> CameraParams:
    """Restart perturbation: +-10 degrees per angle, +-10% extent per axis."""
    extent = problem.scene_extent()
    vec = init.as_vector()
    vec[0:3] += rng.uniform(-0.1, 0.1, size=3) * extent
    vec[3:6] += rng.uniform(-math.radians(10), math.radians(10), size=3)
    return CameraParams.from_vector(_clamp_fov(vec))


def _attempt(init: CameraParams, problem: RegistrationProblem) -> _RunOutcome:
    """One solve attempt: adaptive-lambda descent, then a zero-lambda finish.

    The adaptive run supplies the global pull toward the image GCP cloud;
    continuing from its best-S camera with lambda = 0 (the adaptive rule's
    convergence limit) removes the centroid term's bias, which never reaches
    zero when spurious DEM GCPs offset the projected centroid. If that still
    leaves a poor match, a zero-lambda run straight from the initial camera
    is tried as well; the best final S wins.
    """
    run = _descend(init, problem)
    if run.status != "degenerate" and run.final_s <= problem.schedule.convergence_tol:
        return run
    if run.status != "degenerate":
        finish = _descend(run.camera, problem, lam_override=0.0,
                          start_iteration=run.trace[-1].iteration if run.trace else 0)
        run = _RunOutcome(
            camera=finish.camera if finish.final_s <= run.final_s else run.camera,
            final_s=min(run.final_s, finish.final_s),
            trace=run.trace + finish.trace,
            status=finish.status,
            iterations=run.iterations + finish.iterations,
        )
    if run.status == "degenerate" or run.final_s > problem.schedule.restart_s_threshold:
        direct = _descend(init, problem, lam_override=0.0)
        if direct.status != "degenerate" and direct.final_s < run.final_s:
            return direct
    return run


def solve(problem: RegistrationProblem, seed: int = 0) -> RegistrationResult:
    """Recover the camera, restarting from jittered initial cameras when a
    run is degenerate or stalls above the restart threshold; returns the
    best run by final S."""
    sched = problem.schedule
    rng = np.random.default_rng(seed)
    runs: list[_RunOutcome] = []
    for attempt in range(sched.restarts + 1):
        init = problem.initial_camera if attempt == 0 \
            else _jitter(problem.initial_camera, problem, rng)
        run = _attempt(init, problem)
        runs.append(run)
        if run.status != "degenerate" and run.final_s <= sched.restart_s_threshold:
            break

    best_idx = min(range(len(runs)), key=lambda i: (runs[i].final_s, i))
    best = runs[best_idx]
    diagnostic = ""
    if best.status == "degenerate":
        diagnostic = ("all restarts degenerate: no DEM GCP projected in front of the "
                      "camera; the initial camera likely faces away from the terrain")

    final_s = best.final_s
    if math.isfinite(final_s):
        final_s = chamfer_at(best.camera, problem)
        lam = adapt_lambda(final_s, sched.lambda_0, sched.s_ref)
        final_loss = objective(best.camera, problem, lam)
    else:
        final_loss = math.inf
    return RegistrationResult(
        camera=best.camera,
        final_loss=final_loss,
        final_s=final_s,
        trace=best.trace,
        status=best.status,
        iterations=best.iterations,
        restarts_used=len(runs) - 1,
        diagnostic=diagnostic,
    )


def chamfer_at(camera: CameraParams, problem: RegistrationProblem) -> float:
    """S evaluated from scratch at a camera (used to report final_s)."""
    ev = _evaluate(camera, problem)
    if ev.s is None:
        raise DegenerateProjectionError("no visible projected GCPs")
    return ev.s


def projected_gcps(camera: CameraParams, problem: RegistrationProblem):
    """Projections of the world GCPs for UI preview: (uv, in_front, visible)."""
    ev = _evaluate(camera, problem)
    return ev.uv, ev.in_front, ev.visible


def write_trace_csv(trace: list[TracePoint], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "S", "R", "lambda", "objective"])
        for p in trace:
            writer.writerow([p.iteration, p.s, p.r, p.lam, p.objective])
