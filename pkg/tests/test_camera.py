import numpy as np
import pytest

from lidarsplat import camera as cam_mod
from lidarsplat import spatial
from lidarsplat.camera import (ConvergenceError, PixelCoord, project,
                               project_cloud, project_jacobian, undistort)
from lidarsplat.scene import DistortedCamera, LidarCloud

from conftest import make_camera


def identity_cam(fx=100.0, fy=100.0, cx=50.0, cy=50.0, k1=0.0, k2=0.0,
                 width=100, height=100, normalized_r=False):
    return DistortedCamera(fx=fx, fy=fy, cx=cx, cy=cy, k1=k1, k2=k2,
                           rotation=np.eye(3), translation=np.zeros(3),
                           width=width, height=height, normalized_r=normalized_r)


def scalar_distort_oracle(cam, p_world):
    """Straightforward scalar transcription of the distorted projection."""
    p = cam.rotation @ np.asarray(p_world, float) + cam.translation
    nx, ny = p[0] / p[2], p[1] / p[2]
    # ideal image point and its offset from the principal point
    if cam.normalized_r:
        r2 = nx * nx + ny * ny
    else:
        r2 = (cam.fx * nx) ** 2 + (cam.fy * ny) ** 2
    f = 1.0 + cam.k1 * r2 + cam.k2 * r2 ** 2
    return cam.cx + cam.fx * nx * f, cam.cy + cam.fy * ny * f, p[2]


class TestProject:
    def test_principal_point_is_fixed_point(self):
        cam = identity_cam(k1=0.0, k2=0.0)
        for d in (0.5, 2.0, 10.0):
            pix = project(cam, [0.0, 0.0, d])
            assert pix.u == cam.cx and pix.v == cam.cy and pix.depth == d
        # distortion never moves the on-axis ray
        cam = identity_cam(k1=0.2, k2=0.05, normalized_r=True)
        pix = project(cam, [0.0, 0.0, 3.0])
        assert pix.u == cam.cx and pix.v == cam.cy

    def test_pinhole_arithmetic(self):
        cam = identity_cam()
        pix = project(cam, [1.0, 0.0, 2.0])
        assert pix.u == 100.0 and pix.v == 50.0 and pix.depth == 2.0

    def test_zero_distortion_is_pinhole_bit_exact(self):
        cam = identity_cam(k1=0.0, k2=0.0)
        # integer-exact inputs: every intermediate is exactly representable
        for p in ([1.0, 0.0, 2.0], [3.0, -2.0, 4.0], [0.5, 0.25, 2.0], [-1.0, 1.0, 8.0]):
            pix = project(cam, p)
            assert pix.u == cam.cx + cam.fx * p[0] / p[2]  # bit-identical
            assert pix.v == cam.cy + cam.fy * p[1] / p[2]
        # arbitrary inputs: bit-identical to a pinhole sharing the
        # normalized-coordinate evaluation order
        rng = np.random.default_rng(0)
        for _ in range(200):
            p = rng.uniform(-1, 1, 3) + [0, 0, 3]
            pix = project(cam, p)
            assert pix.u == cam.cx + cam.fx * (p[0] / p[2])
            assert pix.v == cam.cy + cam.fy * (p[1] / p[2])

    def test_behind_camera(self):
        cam = identity_cam()
        assert project(cam, [0.0, 0.0, -1.0]) is None
        assert project(cam, [0.0, 0.0, 0.0]) is None

    @pytest.mark.parametrize("normalized", [False, True])
    def test_matches_scalar_oracle(self, normalized):
        k1, k2 = (0.08, 0.01) if normalized else (2e-7, 3e-14)
        cam = make_camera(width=64, height=60, k1=k1, k2=k2, normalized_r=normalized)
        rng = np.random.default_rng(1)
        for _ in range(100):
            p = rng.uniform(-1.5, 1.5, 3)
            u, v, z = scalar_distort_oracle(cam, p)
            pix = project(cam, p)
            assert pix.u == pytest.approx(u, abs=1e-12)
            assert pix.v == pytest.approx(v, abs=1e-12)
            assert pix.depth == pytest.approx(z, abs=1e-12)

    def test_off_axis_radius_scaling(self):
        # ideal point 0.5 normalized units off axis, k1=0.1: the distorted
        # offset is the ideal offset times (1 + 0.1 r^2)
        cam = identity_cam(k1=0.1, k2=0.0, normalized_r=True)
        p = [0.5, 0.0, 1.0]
        pix = project(cam, p)
        r2 = 0.25
        expected_u = cam.cx + cam.fx * 0.5 * (1 + 0.1 * r2)
        assert pix.u == pytest.approx(expected_u, abs=1e-12)

    def test_distortion_is_purely_radial(self):
        cam = make_camera(width=64, height=64, k1=0.06, k2=0.004, normalized_r=True)
        rng = np.random.default_rng(2)
        for _ in range(100):
            p = rng.uniform(-1.5, 1.5, 3)
            pix = project(cam, p)
            # the ideal (pinhole) point for the same ray
            pc = cam.rotation @ p + cam.translation
            iu = cam.cx + cam.fx * pc[0] / pc[2]
            iv = cam.cy + cam.fy * pc[1] / pc[2]
            cross = (iu - cam.cx) * (pix.v - cam.cy) - (iv - cam.cy) * (pix.u - cam.cx)
            assert abs(cross) < 1e-9 * max(1.0, abs(iu) + abs(iv))


class TestUndistort:
    def test_zero_distortion_identity(self):
        cam = identity_cam()
        uv = undistort(cam, [30.0, 70.0])
        assert np.array_equal(uv, [30.0, 70.0])

    def test_principal_point_fixed_for_any_distortion(self):
        cam = identity_cam(k1=0.3, k2=0.1, normalized_r=True)
        uv = undistort(cam, [cam.cx, cam.cy])
        assert np.array_equal(uv, [cam.cx, cam.cy])

    def test_round_trip_1000_points(self):
        cam = make_camera(width=64, height=64, k1=0.05, k2=0.005, normalized_r=True)
        rng = np.random.default_rng(3)
        worst = 0.0
        n = 0
        while n < 1000:
            q = rng.uniform([0, 0], [cam.width, cam.height])
            ideal = undistort(cam, q)
            mx = (ideal[0] - cam.cx) / cam.fx
            my = (ideal[1] - cam.cy) / cam.fy
            du, dv = cam_mod.distort_offsets(cam, mx, my)
            worst = max(worst, abs(cam.cx + du - q[0]), abs(cam.cy + dv - q[1]))
            n += 1
        assert worst < 1e-6

    def test_non_convergence_raises_with_residual(self):
        cam = identity_cam(k1=-4.0, k2=3.0, normalized_r=True)
        with pytest.raises(ConvergenceError) as e:
            undistort(cam, [99.0, 99.0])
        assert e.value.residual > 0


class TestProjectJacobian:
    def test_on_axis_pinhole_closed_form(self):
        cam = identity_cam()
        z = 4.0
        J = project_jacobian(cam, [0.0, 0.0, z])
        expected = np.array([[cam.fx / z, 0, 0], [0, cam.fy / z, 0]])
        assert np.allclose(J, expected, atol=1e-12)

    def test_principal_ray_has_no_distortion_term(self):
        cam = identity_cam(k1=0.2, k2=0.05, normalized_r=True)
        z = 2.0
        J = project_jacobian(cam, [0.0, 0.0, z])
        expected = np.array([[cam.fx / z, 0, 0], [0, cam.fy / z, 0]])
        assert np.allclose(J, expected, atol=1e-12)

    @pytest.mark.parametrize("normalized", [False, True])
    def test_matches_finite_differences(self, normalized):
        k1, k2 = (0.06, 0.008) if normalized else (3e-7, 4e-14)
        cam = make_camera(width=64, height=60, k1=k1, k2=k2, normalized_r=normalized)
        rng = np.random.default_rng(4)
        h = 1e-5
        for _ in range(50):
            p = rng.uniform(-1, 1, 3)
            J = project_jacobian(cam, p)
            Jfd = np.zeros((2, 3))
            for k in range(3):
                hi, lo = p.copy(), p.copy()
                hi[k] += h
                lo[k] -= h
                a, b = project(cam, hi), project(cam, lo)
                Jfd[:, k] = [(a.u - b.u) / (2 * h), (a.v - b.v) / (2 * h)]
            rel = np.abs(J - Jfd) / np.maximum(np.abs(Jfd), 1e-3)
            assert rel.max() < 1e-4

    def test_behind_camera_raises(self):
        cam = identity_cam()
        with pytest.raises(cam_mod.BehindCameraError):
            project_jacobian(cam, [0.0, 0.0, -2.0])


class TestProjectCloud:
    def test_cloud_behind_camera_empty(self):
        cam = identity_cam()
        cloud = LidarCloud(points=np.array([[0.0, 0.0, -5.0], [1.0, 1.0, -2.0]]))
        idx, pix, depth = project_cloud(cam, cloud)
        assert len(idx) == 0

    def test_single_on_axis_point(self):
        cam = identity_cam()
        cloud = LidarCloud(points=np.array([[0.0, 0.0, 4.0]]))
        idx, pix, depth = project_cloud(cam, cloud)
        assert list(idx) == [0]
        assert pix[0, 0] == cam.cx and pix[0, 1] == cam.cy
        assert depth[0] == 4.0

    def test_plane_depths_match_ray_intersection(self):
        # oblique camera viewing z=0: each returned depth must equal the
        # analytic ray-plane intersection depth through that exact pixel
        cam = make_camera(width=64, height=64, k1=0.04, k2=0.003,
                          normalized_r=True, pos=(6.0, -4.0, 8.0))
        rng = np.random.default_rng(5)
        pts = np.column_stack([rng.uniform(-6, 6, 10000),
                               rng.uniform(-6, 6, 10000),
                               np.zeros(10000)])
        cloud = LidarCloud(points=pts)
        idx, pix, depth = project_cloud(cam, cloud)
        assert len(idx) > 1000
        assert np.all(np.diff(idx) > 0)  # order preserved
        center = cam.center
        ideal = np.stack(cam_mod.undistort_grid(cam, pix[:, 0], pix[:, 1]), axis=1)
        mx = (ideal[:, 0] - cam.cx) / cam.fx
        my = (ideal[:, 1] - cam.cy) / cam.fy
        dir_cam = np.stack([mx, my, np.ones_like(mx)], axis=1)
        dir_world = dir_cam @ cam.rotation
        # ray-plane: z = 0 -> t = -center_z / dir_z; camera depth = t
        t = -center[2] / dir_world[:, 2]
        assert np.max(np.abs(t - depth)) < 1e-6

    def test_in_bounds_only(self):
        cam = identity_cam(width=20, height=20, cx=10.0, cy=10.0)
        pts = np.array([[0.0, 0.0, 2.0], [50.0, 0.0, 2.0]])
        idx, pix, depth = project_cloud(cam, LidarCloud(points=pts))
        assert list(idx) == [0]
