"""Shared fixtures: the three-box validation scene in several forms."""

from __future__ import annotations

import numpy as np
import pytest

from monoplot import synthetic
from monoplot.camera import CameraParams
from monoplot.dem import DemRaster
from monoplot.registration import RegistrationProblem


@pytest.fixture(scope="session")
def box_dem() -> DemRaster:
    return synthetic.three_box_dem()


@pytest.fixture(scope="session")
def true_camera() -> CameraParams:
    return synthetic.default_scene_camera()


@pytest.fixture(scope="session")
def exact_problem(box_dem, true_camera) -> RegistrationProblem:
    """Image GCPs are exact projections of detected DEM GCPs: S(truth) = 0."""
    return synthetic.exact_fit_problem(box_dem, true_camera)


@pytest.fixture()
def perturbed_problem(exact_problem, true_camera) -> RegistrationProblem:
    rng = np.random.default_rng(42)
    return RegistrationProblem(
        image_gcps=exact_problem.image_gcps,
        world_gcps=exact_problem.world_gcps,
        width=exact_problem.width,
        height=exact_problem.height,
        initial_camera=synthetic.perturb_camera(true_camera, rng,
                                                exact_problem.scene_extent()),
        schedule=exact_problem.schedule,
    )


@pytest.fixture(scope="session")
def scene_dir(tmp_path_factory, box_dem, true_camera):
    """Scene files on disk: boxes.asc, photo.png."""
    from monoplot.dem import write_asc
    from monoplot.imageio import save_png

    d = tmp_path_factory.mktemp("scene")
    write_asc(box_dem, d / "boxes.asc")
    photo = synthetic.render_photo(true_camera, box_dem, 640, 480)
    save_png(photo, d / "photo.png")
    return d
