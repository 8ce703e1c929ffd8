"""Ray marching, depth buffer, coordinate maps, and overlay tests.

Oracles: intersect_dem is compared against a dense 1/100-cell brute-force
march; the triangle rasterizer against an independent per-pixel barycentric
containment check; the two georeferencing methods against each other.
"""

import math

import numpy as np
import pytest

from monoplot import synthetic
from monoplot.camera import intrinsics_from_fov, project, project_points
from monoplot.dem import DemRaster, GeoTransform, sample_elevation
from monoplot.georef import (
    CoordinateMaps,
    Ray,
    apply_colormap,
    georeference_image,
    hillshade,
    intersect_dem,
    pixel_ray,
    read_maps,
    render_depth_buffer,
    render_elevation,
    render_overlay,
    write_maps,
)


def dense_march_oracle(ray: Ray, dem: DemRaster, step_frac=0.01, t_max=2000.0):
    """Brute-force reference: tiny fixed steps, first height sign change."""
    step = dem.transform.cell_size * step_frac
    prev_h = None
    t = 0.0
    while t < t_max:
        p = ray.at(t)
        terr = sample_elevation(dem, p[0], p[1])
        if math.isnan(terr):
            if prev_h is not None:
                return None  # exited the hull after entering
            t += step
            continue
        h = p[2] - terr
        if prev_h is None and h <= 0:
            return None
        if prev_h is not None and prev_h > 0 and h <= 0:
            return ray.at(t - step / 2)
        prev_h = h
        t += step
    return None


class TestPixelRay:
    def test_principal_point_is_on_axis(self):
        cam = synthetic.look_at_camera((0, 0, 5), (0, 0, 0))
        intr = intrinsics_from_fov(cam.fov, 100, 100)
        ray = pixel_ray(cam, intr, 50.0, 50.0)
        np.testing.assert_allclose(ray.direction, [0, 0, -1], atol=1e-12)

    def test_45_degree_ray(self):
        from monoplot.camera import CameraParams, Intrinsics
        cam = CameraParams(0, 0, 0, 0, 0, 0, math.pi / 2)
        intr = Intrinsics(100.0, 100.0, 50.0, 50.0)
        ray = pixel_ray(cam, intr, 150.0, 50.0)
        np.testing.assert_allclose(ray.direction, np.array([1, 0, 1]) / math.sqrt(2),
                                   atol=1e-12)

    def test_projection_round_trip(self):
        cam = synthetic.default_scene_camera()
        intr = intrinsics_from_fov(cam.fov, 640, 480)
        rng = np.random.default_rng(0)
        for _ in range(100):
            u, v = rng.uniform(0, 640), rng.uniform(0, 480)
            ray = pixel_ray(cam, intr, u, v)
            pix = project(cam, intr, ray.at(1.0))
            assert pix is not None
            assert math.hypot(pix.u - u, pix.v - v) < 1e-6


class TestIntersectDem:
    def test_nadir_hit_on_flat_dem(self):
        dem = synthetic.make_box_dem(size=16)
        ray = Ray(origin=np.array([8.0, 8.0, 10.0]), direction=np.array([0.0, 0.0, -1.0]))
        wp = intersect_dem(ray, dem)
        assert wp is not None
        assert wp.x == pytest.approx(8.0, abs=1e-9)
        assert wp.y == pytest.approx(8.0, abs=1e-9)
        assert wp.z == pytest.approx(0.0, abs=1e-3)

    def test_upward_ray_misses(self):
        dem = synthetic.make_box_dem(size=16)
        ray = Ray(origin=np.array([8.0, 8.0, 10.0]),
                  direction=np.array([0.0, 0.1, 1.0]) / math.hypot(0.1, 1.0, 1.0))
        d = np.array([0.0, 0.1, 1.0])
        ray = Ray(origin=np.array([8.0, 8.0, 10.0]), direction=d / np.linalg.norm(d))
        assert intersect_dem(ray, dem) is None

    def test_first_hit_on_box_face_not_terrain_behind(self):
        dem = synthetic.make_box_dem(size=64, boxes=((24, 40, 24, 40, 10.0),))
        # camera south of the box at plateau height, looking horizontally north
        origin = np.array([32.0, 5.0, 5.0])
        d = np.array([0.0, 1.0, 0.0])
        wp = intersect_dem(Ray(origin=origin, direction=d), dem)
        assert wp is not None
        # box footprint rows 24..39 -> world y in [24, 40]; the near (south)
        # face is at y ~ 64 - 40 = 24
        assert wp.y == pytest.approx(24.0, abs=1.0)
        assert 0.0 <= wp.z <= 10.0 + 1e-6

    def test_matches_dense_oracle(self):
        dem = synthetic.make_box_dem(size=48, boxes=((18, 30, 14, 34, 8.0),))
        rng = np.random.default_rng(1)
        checked = 0
        for _ in range(40):
            origin = np.array([rng.uniform(5, 43), rng.uniform(-25, -5),
                               rng.uniform(6, 25)])
            target = np.array([rng.uniform(10, 38), rng.uniform(15, 40), 0.0])
            d = target - origin
            d /= np.linalg.norm(d)
            ray = Ray(origin=origin, direction=d)
            got = intersect_dem(ray, dem)
            want = dense_march_oracle(ray, dem)
            if want is None:
                assert got is None
            else:
                assert got is not None
                err = np.linalg.norm(np.array([got.x, got.y, got.z]) - want)
                assert err < dem.transform.cell_size
                checked += 1
        assert checked >= 20

    def test_hit_lies_on_surface(self):
        dem = synthetic.three_box_dem()
        cam = synthetic.default_scene_camera()
        intr = intrinsics_from_fov(cam.fov, 320, 240)
        rng = np.random.default_rng(2)
        for _ in range(50):
            ray = pixel_ray(cam, intr, rng.uniform(0, 320), rng.uniform(120, 240))
            wp = intersect_dem(ray, dem)
            if wp is None:
                continue
            terr = sample_elevation(dem, wp.x, wp.y)
            # off-plateau-edge hits interpolate steeply; interior ones are tight
            assert abs(wp.z - terr) < 0.05


class TestGeoreferenceImage:
    def test_flat_nadir_x_is_affine_ramp(self):
        dem = synthetic.make_box_dem(size=64)
        cam = synthetic.look_at_camera((32.0, 32.0, 20.0), (32.0, 32.0, 0.0),
                                       fov=math.pi / 2)
        w = h = 64
        intr = intrinsics_from_fov(cam.fov, w, h)
        maps = georeference_image(cam, intr, dem, w, h, method="raytrace")
        row = maps.x_map[32]
        valid = maps.valid[32]
        assert valid.sum() > 20
        # pinhole over flat ground at height 20, f = 32: x = cx + 20*(u-32)/32
        us = np.arange(64, dtype=np.float64)
        expected = 32.0 + 20.0 * (us - 32.0) / 32.0
        assert np.abs(row[valid] - expected[valid]).max() < 0.05

    def test_box_top_elevations(self, box_dem, true_camera):
        intr = intrinsics_from_fov(true_camera.fov, 320, 240)
        maps = georeference_image(true_camera, intr, box_dem, 320, 240)
        heights = {12.0: 0, 22.0: 0, 35.0: 0}
        for h, (r0, r1, c0, c1, hh) in zip((12.0, 22.0, 35.0), synthetic.THREE_BOXES):
            inside = (maps.valid
                      & (maps.x_map > c0 + 2) & (maps.x_map < c1 - 2)
                      & (maps.y_map > 256 - r1 + 2) & (maps.y_map < 256 - r0 - 2)
                      & (maps.z_map > hh - 2))
            if inside.any():
                assert np.abs(maps.z_map[inside] - hh).max() < 1e-2
                heights[hh] = int(inside.sum())
        assert all(v > 0 for v in heights.values())

    def test_misses_marked_invalid(self, box_dem, true_camera):
        intr = intrinsics_from_fov(true_camera.fov, 160, 120)
        maps = georeference_image(true_camera, intr, box_dem, 160, 120)
        # sky pixels at the top of the frame miss the DEM
        assert not maps.valid[0].any()
        assert np.isnan(maps.x_map[0]).all()

    def test_methods_agree(self, box_dem, true_camera):
        intr = intrinsics_from_fov(true_camera.fov, 160, 120)
        rt = georeference_image(true_camera, intr, box_dem, 160, 120, method="raytrace")
        zb = georeference_image(true_camera, intr, box_dem, 160, 120, method="zbuffer")
        both = rt.valid & zb.valid
        assert both.mean() > 0.3
        d = np.sqrt((rt.x_map - zb.x_map) ** 2 + (rt.y_map - zb.y_map) ** 2
                    + (rt.z_map - zb.z_map) ** 2)
        assert (d[both] <= box_dem.transform.cell_size).mean() >= 0.99

    def test_depth_positive_for_valid(self, box_dem, true_camera):
        intr = intrinsics_from_fov(true_camera.fov, 160, 120)
        maps = georeference_image(true_camera, intr, box_dem, 160, 120)
        pts = np.stack([maps.x_map[maps.valid], maps.y_map[maps.valid],
                        maps.z_map[maps.valid]], axis=1)
        _, depth = project_points(true_camera, intr, pts)
        assert (depth > 0).all()

    def test_stride_subsamples(self, box_dem, true_camera):
        intr = intrinsics_from_fov(true_camera.fov, 160, 120)
        full = georeference_image(true_camera, intr, box_dem, 160, 120)
        strided = georeference_image(true_camera, intr, box_dem, 160, 120, stride=4)
        assert strided.map_shape == (30, 40)
        np.testing.assert_array_equal(strided.valid, full.valid[::4, ::4])
        both = strided.valid
        np.testing.assert_allclose(strided.x_map[both], full.x_map[::4, ::4][both])

    def test_unknown_method_rejected(self, box_dem, true_camera):
        intr = intrinsics_from_fov(true_camera.fov, 32, 32)
        with pytest.raises(ValueError, match="method"):
            georeference_image(true_camera, intr, box_dem, 32, 32, method="magic")


def rasterize_oracle(uv, w, h):
    """Independent containment check: sign-consistent edge functions."""
    inside = np.zeros((h, w), dtype=bool)
    (ax, ay), (bx, by), (cx, cy) = uv
    for y in range(h):
        for x in range(w):
            d0 = (bx - ax) * (y - ay) - (by - ay) * (x - ax)
            d1 = (cx - bx) * (y - by) - (cy - by) * (x - bx)
            d2 = (ax - cx) * (y - cy) - (ay - cy) * (x - cx)
            neg = (d0 < 0) or (d1 < 0) or (d2 < 0)
            pos = (d0 > 0) or (d1 > 0) or (d2 > 0)
            inside[y, x] = not (neg and pos)
    return inside


class TestRenderDepthBuffer:
    def test_single_triangle_matches_oracle(self):
        from monoplot.georef import _raster_tri
        uv = np.array([[5.2, 3.1], [28.7, 9.4], [12.0, 25.8]])
        z = np.array([2.0, 3.0, 4.0])
        depth = np.full((32, 32), np.inf)
        source = np.full((32, 32), -1, dtype=np.int64)
        _raster_tri(uv, z, 7, depth, source)
        got = np.isfinite(depth)
        want = rasterize_oracle(uv, 32, 32)
        disagree = got ^ want
        if disagree.any():
            # disagreements may only hug the triangle boundary (1 px band)
            from scipy import ndimage
            boundary = want ^ ndimage.binary_erosion(want)
            band = ndimage.binary_dilation(boundary, iterations=1)
            assert disagree[~band].sum() == 0

    def test_empty_view_all_infinite(self, box_dem):
        cam = synthetic.look_at_camera((128.0, -80.0, 50.0), (128.0, -300.0, 50.0))
        intr = intrinsics_from_fov(cam.fov, 64, 48)
        buf = render_depth_buffer(cam, intr, box_dem, 64, 48)
        assert np.isinf(buf.depth).all()
        assert (buf.source == -1).all()

    def test_interpolated_depth_matches_ray_plane_oracle(self):
        # one triangle in camera space: rasterized 1/z interpolation must
        # equal the analytic ray/plane intersection depth per pixel
        from monoplot.georef import _raster_tri
        q = np.array([[-3.0, -2.0, 8.0], [4.0, -1.0, 12.0], [0.5, 3.5, 9.0]])
        f, cx, cy = 40.0, 32.0, 32.0
        uv = np.stack([f * q[:, 0] / q[:, 2] + cx, f * q[:, 1] / q[:, 2] + cy], axis=1)
        depth = np.full((64, 64), np.inf)
        source = np.full((64, 64), -1, dtype=np.int64)
        _raster_tri(uv, q[:, 2], 0, depth, source)
        normal = np.cross(q[1] - q[0], q[2] - q[0])
        filled = np.argwhere(np.isfinite(depth))
        assert len(filled) > 50
        for vi, ui in filled:
            ray = np.array([(ui - cx) / f, (vi - cy) / f, 1.0])
            t_star = normal @ q[0] / (normal @ ray)
            assert depth[vi, ui] == pytest.approx(t_star, rel=1e-6)

    def test_vertex_depths_recovered(self, box_dem, true_camera):
        # vertices project onto pixels carrying their own camera depth,
        # except at silhouettes where the pixel center can see past the edge
        from monoplot.camera import rotation_from_euler
        from monoplot.dem import pixel_to_world
        intr = intrinsics_from_fov(true_camera.fov, 320, 240)
        buf = render_depth_buffer(true_camera, intr, box_dem, 320, 240)
        r = rotation_from_euler(true_camera.yaw, true_camera.pitch, true_camera.roll)
        t = np.array([true_camera.t_x, true_camera.t_y, true_camera.t_z])
        rng = np.random.default_rng(3)
        close = checked = 0
        for _ in range(400):
            rr = rng.integers(0, box_dem.n_rows)
            cc = rng.integers(0, box_dem.n_cols)
            x, y = pixel_to_world(box_dem, float(cc), float(rr))
            p = np.array([x, y, box_dem.elevations[rr, cc]])
            q = r @ (p + t)
            if q[2] <= 0:
                continue
            u = intr.f_x * q[0] / q[2] + intr.c_x
            v = intr.f_y * q[1] / q[2] + intr.c_y
            ui, vi = int(round(u)), int(round(v))
            if not (0 <= ui < 320 and 0 <= vi < 240):
                continue
            d = buf.depth[vi, ui]
            if not math.isfinite(d):
                continue
            checked += 1
            if abs(d - q[2]) < 1e-2 * q[2]:
                close += 1
        assert checked > 100
        assert close / checked > 0.6


class TestRenderOverlay:
    def make_maps(self):
        z = np.array([[0.0, 10.0], [20.0, np.nan]])
        valid = np.isfinite(z)
        return CoordinateMaps(width=2, height=2, x_map=z, y_map=z, z_map=z, valid=valid)

    def test_opacity_endpoints(self):
        maps = self.make_maps()
        photo = np.array([[0, 100], [200, 255]], dtype=np.uint8)
        render = render_elevation(maps)
        only_render = render_overlay(photo, maps, 0.0)
        only_photo = render_overlay(photo, maps, 1.0)
        np.testing.assert_array_equal(only_render, render)
        np.testing.assert_array_equal(only_photo, np.stack([photo] * 3, axis=-1))

    def test_half_blend_is_rounded_mean(self):
        maps = self.make_maps()
        photo = np.array([[0, 100], [200, 255]], dtype=np.uint8)
        render = render_elevation(maps)
        blend = render_overlay(photo, maps, 0.5)
        expected = np.floor(0.5 * np.stack([photo] * 3, axis=-1).astype(float)
                            + 0.5 * render.astype(float) + 0.5).astype(np.uint8)
        np.testing.assert_array_equal(blend, expected)

    def test_dimension_mismatch_rejected(self):
        maps = self.make_maps()
        with pytest.raises(ValueError, match="dimensions"):
            render_overlay(np.zeros((3, 5), dtype=np.uint8), maps, 0.5)

    def test_bad_opacity_rejected(self):
        maps = self.make_maps()
        with pytest.raises(ValueError, match="opacity"):
            render_overlay(np.zeros((2, 2), dtype=np.uint8), maps, 1.5)


class TestMapsIO:
    def test_round_trip(self, tmp_path, box_dem, true_camera):
        intr = intrinsics_from_fov(true_camera.fov, 80, 60)
        maps = georeference_image(true_camera, intr, box_dem, 80, 60, stride=2)
        header, binary = write_maps(maps, tmp_path)
        assert header.exists() and binary.exists()
        back = read_maps(header)
        assert back.stride == 2
        assert back.map_shape == maps.map_shape
        np.testing.assert_array_equal(back.valid, maps.valid)
        np.testing.assert_allclose(back.x_map[maps.valid],
                                   maps.x_map[maps.valid].astype(np.float32))

    def test_binary_layout(self, tmp_path):
        z = np.arange(6, dtype=np.float64).reshape(2, 3)
        maps = CoordinateMaps(width=3, height=2, x_map=z, y_map=z * 2, z_map=z * 3,
                              valid=np.ones((2, 3), dtype=bool))
        header, binary = write_maps(maps, tmp_path)
        raw = np.frombuffer(binary.read_bytes(), dtype="<f4")
        assert len(raw) == 4 * 6
        np.testing.assert_array_equal(raw[:6], z.ravel().astype(np.float32))
        np.testing.assert_array_equal(raw[18:24], np.ones(6, dtype=np.float32))


class TestHelpers:
    def test_hillshade_shape_and_range(self, box_dem):
        img = hillshade(box_dem)
        assert img.shape == (box_dem.n_rows, box_dem.n_cols)
        assert img.dtype == np.uint8

    def test_colormap_marks_invalid(self):
        vals = np.array([[0.0, 1.0], [np.nan, 2.0]])
        rgb = apply_colormap(vals)
        assert rgb.shape == (2, 2, 3)
        np.testing.assert_array_equal(rgb[1, 0], [48, 48, 48])
