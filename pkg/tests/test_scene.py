import numpy as np
import pytest

from lidarsplat import scene
from lidarsplat.scene import (DistortedCamera, Gaussian, GaussianSet, LidarCloud,
                              PlyParseError, covariance, load_ply_gaussians,
                              load_ply_points, quat_to_rotmat, save_ply_gaussians,
                              save_ply_points)

from conftest import make_random_set


def make_gaussian(position=(0, 0, 0), rotation=(1, 0, 0, 0), log_scale=(0, 0, 0),
                  logit_opacity=0.0, basis=1):
    sh = np.zeros((3, basis))
    return Gaussian(position=position, rotation=rotation, log_scale=log_scale,
                    logit_opacity=logit_opacity, sh_coeffs=sh)


class TestCovariance:
    def test_unit_isotropic(self):
        g = make_gaussian()
        assert np.allclose(covariance(g), np.eye(3), atol=1e-12)

    def test_axis_scaling_squares(self):
        g = make_gaussian(log_scale=(np.log(2.0), 0.0, 0.0))
        assert np.allclose(covariance(g), np.diag([4.0, 1.0, 1.0]), atol=1e-12)

    def test_rotated_covariance_matches_direct_product(self):
        # 90 degrees around z maps the x-axis spread onto y
        q = np.array([np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4)])
        g = make_gaussian(rotation=q, log_scale=(np.log(2.0), 0.0, 0.0))
        got = covariance(g)
        R = quat_to_rotmat(q)
        oracle = R @ np.diag([4.0, 1.0, 1.0]) @ R.T
        assert np.allclose(got, oracle, atol=1e-12)
        assert np.allclose(got, np.diag([1.0, 4.0, 1.0]), atol=1e-12)

    def test_eigenvalues_are_squared_scales(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            q = rng.standard_normal(4)
            q /= np.linalg.norm(q)
            ls = rng.uniform(-2, 1, 3)
            g = make_gaussian(rotation=q, log_scale=ls)
            ev = np.sort(np.linalg.eigvalsh(covariance(g)))
            assert np.allclose(ev, np.sort(np.exp(2 * ls)), rtol=1e-9)

    def test_psd(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            q = rng.standard_normal(4)
            g = make_gaussian(rotation=q / np.linalg.norm(q),
                              log_scale=rng.uniform(-3, 1, 3))
            assert np.linalg.eigvalsh(covariance(g)).min() >= -1e-12

    def test_decompose_recompose(self):
        # building a Gaussian from an eigendecomposition reproduces the matrix
        rng = np.random.default_rng(2)
        A = rng.standard_normal((3, 3))
        cov = A @ A.T + 0.1 * np.eye(3)
        w, v = np.linalg.eigh(cov)
        if np.linalg.det(v) < 0:
            v[:, 0] *= -1
        # rotation matrix -> quaternion via the stable branch
        t = np.trace(v)
        q = np.empty(4)
        q[0] = np.sqrt(max(1 + t, 0)) / 2
        q[1] = (v[2, 1] - v[1, 2]) / (4 * q[0])
        q[2] = (v[0, 2] - v[2, 0]) / (4 * q[0])
        q[3] = (v[1, 0] - v[0, 1]) / (4 * q[0])
        g = make_gaussian(rotation=q / np.linalg.norm(q), log_scale=0.5 * np.log(w))
        assert np.allclose(covariance(g), cov, atol=1e-9)


class TestInvariants:
    def test_scale_clamped_at_construction(self):
        g = make_gaussian(log_scale=(np.log(1e-12), 0, 0))
        assert g.scale.min() >= scene.MIN_SCALE * (1 - 1e-12)

    def test_validate_rejects_bad_quaternion(self):
        g = make_gaussian()
        g.rotation = np.array([1.0, 0.5, 0.0, 0.0])
        with pytest.raises(ValueError):
            g.validate()

    def test_opacity_in_open_interval(self):
        g = make_gaussian(logit_opacity=3.0)
        assert 0.0 < g.opacity < 1.0

    def test_set_accumulator_lengths(self):
        s = make_random_set(5)
        assert len(s.grad_accum) == len(s) == len(s.weight_accum)
        with pytest.raises(ValueError):
            GaussianSet(positions=np.zeros((2, 3)), rotations=np.zeros((3, 4)),
                        log_scales=np.zeros((2, 3)), logit_opacities=np.zeros(2),
                        sh=np.zeros((2, 3, 1)))


class TestGaussianPly:
    def test_round_trip(self, tmp_path):
        s = make_random_set(100, seed=3)
        # disk format is float32; quantize first so the trip is exact
        for name in ("positions", "rotations", "log_scales", "sh"):
            setattr(s, name, getattr(s, name).astype(np.float32).astype(np.float64))
        s.logit_opacities = s.logit_opacities.astype(np.float32).astype(np.float64)
        path = tmp_path / "g.ply"
        save_ply_gaussians(s, path)
        s2 = load_ply_gaussians(path)
        assert np.array_equal(s.positions, s2.positions)
        assert np.array_equal(s.rotations, s2.rotations)
        assert np.array_equal(s.log_scales, s2.log_scales)
        assert np.array_equal(s.logit_opacities, s2.logit_opacities)
        assert np.array_equal(s.sh, s2.sh)

    def test_truncated_file_names_problem(self, tmp_path):
        s = make_random_set(10)
        path = tmp_path / "g.ply"
        save_ply_gaussians(s, path)
        data = path.read_bytes()
        path.write_bytes(data[:-40])
        with pytest.raises(PlyParseError, match="truncated"):
            load_ply_gaussians(path)

    def test_missing_property(self, tmp_path):
        path = tmp_path / "g.ply"
        header = ("ply\nformat binary_little_endian 1.0\nelement vertex 1\n"
                  "property float x\nproperty float y\nproperty float z\n"
                  "end_header\n").encode()
        path.write_bytes(header + np.zeros(3, dtype="<f4").tobytes())
        with pytest.raises(PlyParseError, match="missing property"):
            load_ply_gaussians(path)

    def test_empty_set_round_trip(self, tmp_path):
        s = scene.empty_set()
        path = tmp_path / "empty.ply"
        save_ply_gaussians(s, path)
        s2 = load_ply_gaussians(path)
        assert len(s2) == 0

    def test_non_finite_rejected(self, tmp_path):
        s = make_random_set(4)
        path = tmp_path / "g.ply"
        save_ply_gaussians(s, path)
        raw = bytearray(path.read_bytes())
        # corrupt one float in the body with NaN
        body_at = raw.find(b"end_header\n") + len(b"end_header\n")
        raw[body_at:body_at + 4] = np.array([np.nan], dtype="<f4").tobytes()
        path.write_bytes(bytes(raw))
        with pytest.raises(PlyParseError, match="non-finite"):
            load_ply_gaussians(path)


class TestPointPly:
    def test_round_trip_with_normals(self, tmp_path):
        rng = np.random.default_rng(4)
        pts = rng.standard_normal((50, 3)).astype(np.float32).astype(np.float64)
        nrm = rng.standard_normal((50, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        nrm = nrm.astype(np.float32).astype(np.float64)
        cloud = LidarCloud(points=pts, normals=nrm)
        path = tmp_path / "p.ply"
        save_ply_points(cloud, path)
        c2 = load_ply_points(path)
        assert np.array_equal(c2.points, pts)
        # loader re-normalizes float32-quantized normals to unit length
        assert np.allclose(c2.normals, nrm, atol=1e-7)
        assert c2.index is not None

    def test_normals_estimated_when_absent(self, tmp_path):
        rng = np.random.default_rng(5)
        pts = np.column_stack([rng.uniform(0, 4, 200), rng.uniform(0, 4, 200),
                               np.full(200, 5.0)])
        cloud = LidarCloud(points=pts.astype(np.float32).astype(np.float64))
        path = tmp_path / "p.ply"
        save_ply_points(cloud, path)
        c2 = load_ply_points(path)
        assert np.allclose(np.abs(c2.normals[:, 2]), 1.0, atol=1e-6)

    def test_empty_cloud(self, tmp_path):
        cloud = LidarCloud(points=np.zeros((0, 3)))
        path = tmp_path / "p.ply"
        save_ply_points(cloud, path)
        c2 = load_ply_points(path)
        assert len(c2) == 0

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_bytes(b"not a ply file at all")
        with pytest.raises(PlyParseError):
            load_ply_points(path)


class TestCameraJson:
    def test_round_trip(self, tmp_path):
        from conftest import make_camera
        cam = make_camera(width=40, height=30, k1=0.01, k2=0.001, normalized_r=True)
        path = tmp_path / "cam.json"
        scene.save_camera(cam, path)
        c2 = scene.load_camera(path)
        assert c2.fx == cam.fx and c2.fy == cam.fy
        assert np.array_equal(c2.rotation, cam.rotation)
        assert np.array_equal(c2.translation, cam.translation)
        assert c2.normalized_r == cam.normalized_r
        c2.validate()

    def test_camera_validation(self):
        cam = DistortedCamera(fx=10, fy=10, cx=5, cy=5, k1=0, k2=0,
                              rotation=2 * np.eye(3), translation=np.zeros(3),
                              width=10, height=10)
        with pytest.raises(ValueError):
            cam.validate()

    def test_camera_list_round_trip(self, tmp_path):
        from conftest import make_camera
        cams = [make_camera(pos=(3, i, 4)) for i in range(3)]
        scene.save_cameras(cams, tmp_path / "cams.json", names=["a", "b", "c"])
        loaded, names = scene.load_cameras(tmp_path / "cams.json")
        assert names == ["a", "b", "c"]
        assert np.array_equal(loaded[1].translation, cams[1].translation)
