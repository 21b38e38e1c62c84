import numpy as np
import pytest

from lidarsplat import rasterizer
from lidarsplat.rasterizer import render, render_backward, accumulate_densify_stats
from lidarsplat.rasterizer.reference import render_reference
from lidarsplat.scene import GaussianSet, empty_set, logit

from conftest import make_camera, make_random_set


def single_gaussian_set(position=(0, 0, 0), opacity=0.9, scale=0.3, color_sh0=0.5,
                        basis=1):
    sh = np.zeros((1, 3, basis))
    sh[0, :, 0] = color_sh0
    return GaussianSet(
        positions=np.array([position], dtype=np.float64),
        rotations=np.array([[1.0, 0, 0, 0]]),
        log_scales=np.log(np.full((1, 3), scale)),
        logit_opacities=np.array([logit(opacity)]),
        sh=sh,
    )


class TestForward:
    def test_empty_set_background_only(self):
        cam = make_camera()
        out = render(empty_set(), cam, background=(0.2, 0.3, 0.4))
        assert np.all(out.alpha == 0.0)
        assert np.allclose(out.color, [0.2, 0.3, 0.4])
        assert not out.valid_mask.any()

    def test_single_gaussian_centered(self):
        # on-axis opaque Gaussian: peak at principal point, its camera depth
        # everywhere the output is alpha-valid
        cam = make_camera(width=33, height=33, k1=0.0, k2=0.0,
                          pos=(0.0, 1e-6, 4.0), target=(0.0, 0.0, 0.0))
        gs = single_gaussian_set(opacity=0.95, scale=0.4)
        out = render(gs, cam)
        peak = np.unravel_index(np.argmax(out.alpha), out.alpha.shape)
        # principal point (16.5, 16.5) lies in pixel (16, 16)
        assert peak == (16, 16)
        depths = out.depth[out.valid_mask]
        z = np.linalg.norm([0.0, 1e-6, 4.0])
        assert np.max(np.abs(depths - z)) < 1e-6

    def test_two_gaussian_compositing_formula(self):
        cam = make_camera(width=17, height=17, k1=0.0, k2=0.0,
                          pos=(0.0, 1e-6, 5.0), target=(0.0, 0.0, 0.0))
        a_op, b_op = 0.6, 0.5
        front = single_gaussian_set((0, 0, 1.0), opacity=a_op, scale=3.0, color_sh0=0.8)
        back = single_gaussian_set((0, 0, -1.0), opacity=b_op, scale=3.0, color_sh0=-0.8)
        both = GaussianSet(
            positions=np.vstack([front.positions, back.positions]),
            rotations=np.vstack([front.rotations, back.rotations]),
            log_scales=np.vstack([front.log_scales, back.log_scales]),
            logit_opacities=np.concatenate([front.logit_opacities, back.logit_opacities]),
            sh=np.vstack([front.sh, back.sh]),
        )
        out = render(both, cam)
        c, r = 8, 8  # principal pixel
        f = render(front, cam)
        b = render(back, cam)
        a1 = f.alpha[r, c]
        a2 = b.alpha[r, c]
        c1 = f.color[r, c] / max(a1, 1e-12)
        c2 = b.color[r, c] / max(a2, 1e-12)
        expected = c1 * a1 + c2 * a2 * (1 - a1)
        assert np.allclose(out.color[r, c], expected, atol=1e-12)

    def test_compositing_conservation(self):
        # alpha must equal 1 - prod(1 - alpha_i) over contributing splats
        cam = make_camera()
        gs = make_random_set(60, seed=11)
        out = render(gs, cam)
        ref = render_reference(gs, cam, terminate=0.0)
        assert np.max(np.abs(out.alpha - ref.alpha)) < 1e-6

    def test_non_finite_parameter_names_index(self):
        gs = make_random_set(5)
        gs.positions[3, 1] = np.nan
        with pytest.raises(ValueError, match="Gaussian 3"):
            render(gs, make_camera())

    def test_determinism_same_inputs_same_bits(self):
        cam = make_camera()
        gs = make_random_set(50, seed=12)
        a = render(gs, cam)
        b = render(gs, cam)
        assert np.array_equal(a.color, b.color)
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.alpha, b.alpha)
        assert np.array_equal(a.coverage, b.coverage)


class TestOracleEquivalence:
    @pytest.mark.parametrize("seed", range(5))
    def test_tiled_matches_naive_color(self, seed):
        cam = make_camera(width=40, height=36)
        gs = make_random_set(200, seed=100 + seed)
        out = render(gs, cam)
        ref = render_reference(gs, cam, terminate=1e-12)
        assert np.max(np.abs(out.color - ref.color)) < 1e-4
        assert np.max(np.abs(out.alpha - ref.alpha)) < 1e-4

    def test_all_channels_match_at_equal_termination(self):
        cam = make_camera(width=40, height=36)
        gs = make_random_set(200, seed=7)
        out = render(gs, cam, terminate=1e-12)
        ref = render_reference(gs, cam, terminate=1e-12)
        both = out.valid_mask & ref.valid_mask
        assert (out.valid_mask == ref.valid_mask).all()
        assert np.max(np.abs(out.color - ref.color)) < 1e-4
        assert np.max(np.abs(out.depth - ref.depth)[both]) < 1e-4
        assert np.max(np.abs(out.normal - ref.normal)[both]) < 1e-4
        assert np.max(np.abs(out.alpha - ref.alpha)) < 1e-4


def scalar_test_loss(gs, cam, weights):
    Gc, Ga, Gd, Gn = weights
    o = render(gs, cam)
    return float((o.color * Gc).sum() + (o.alpha * Ga).sum()
                 + (o.depth * Gd).sum() + (o.normal * Gn).sum())


@pytest.fixture(scope="module")
def backward_setup():
    cam = make_camera(width=24, height=24)
    gs = make_random_set(8, seed=2)
    rng = np.random.default_rng(7)
    out0 = render(gs, cam)
    Gc = rng.standard_normal(out0.color.shape)
    Ga = rng.standard_normal(out0.alpha.shape)
    solid = out0.alpha > 0.05  # depth/normal upstreams only on robust pixels
    Gd = np.where(solid, rng.standard_normal(out0.alpha.shape), 0.0)
    Gn = np.where(solid[:, :, None], rng.standard_normal(out0.normal.shape), 0.0)
    out = render(gs, cam)
    grads, ndc, cov = render_backward(gs, cam, out, d_color=Gc, d_depth=Gd,
                                      d_normal=Gn, d_alpha=Ga)
    return cam, gs, (Gc, Ga, Gd, Gn), grads, ndc, cov


def fd_check(gs, cam, weights, name, analytic, h=1e-4, rel_tol=2e-3):
    orig = getattr(gs, name).copy()
    g = np.zeros_like(orig)
    flat = g.reshape(-1)
    for i in range(flat.size):
        for step, sign in ((h, 1.0), (-h, -1.0)):
            arr = orig.copy()
            arr.reshape(-1)[i] += step
            setattr(gs, name, arr)
            flat[i] += sign * scalar_test_loss(gs, cam, weights)
    setattr(gs, name, orig)
    g /= 2 * h
    denom = np.maximum(np.maximum(np.abs(g), np.abs(analytic)), 1e-3)
    assert np.max(np.abs(g - analytic) / denom) < rel_tol, \
        f"{name}: max rel err {np.max(np.abs(g - analytic) / denom):.2e}"


class TestBackward:
    @pytest.mark.parametrize("param", ["positions", "rotations", "log_scales",
                                       "logit_opacities", "sh"])
    def test_gradients_match_finite_differences(self, backward_setup, param):
        cam, gs, weights, grads, _, _ = backward_setup
        fd_check(gs, cam, weights, param, getattr(grads, param))

    def test_zero_upstream_gives_zero_gradients(self):
        cam = make_camera()
        gs = make_random_set(5, seed=3)
        out = render(gs, cam)
        grads, ndc, cov = render_backward(gs, cam, out)
        for arr in (grads.positions, grads.rotations, grads.log_scales,
                    grads.logit_opacities, grads.sh, ndc):
            assert np.all(arr == 0.0)

    def test_occluded_gaussian_has_negligible_gradient(self):
        # a big opaque splat in front fully hides a splat behind it
        cam = make_camera(width=17, height=17, k1=0.0, k2=0.0,
                          pos=(0.0, 1e-6, 5.0), target=(0.0, 0.0, 0.0))
        front = single_gaussian_set((0, 0, 2.0), opacity=0.995, scale=8.0)
        hidden = single_gaussian_set((0, 0, 0.0), opacity=0.9, scale=0.2, color_sh0=1.0)
        both = GaussianSet(
            positions=np.vstack([front.positions, hidden.positions]),
            rotations=np.vstack([front.rotations, hidden.rotations]),
            log_scales=np.vstack([front.log_scales, hidden.log_scales]),
            logit_opacities=np.concatenate([front.logit_opacities, hidden.logit_opacities]),
            sh=np.vstack([front.sh, hidden.sh]),
        )
        out = render(both, cam)
        grads, _, _ = render_backward(both, cam, out, d_color=np.ones((17, 17, 3)))
        assert np.abs(grads.sh[1]).max() < 1e-8

    def test_shape_mismatch_rejected(self):
        cam = make_camera()
        gs = make_random_set(4)
        out = render(gs, cam)
        with pytest.raises(ValueError, match="d_color"):
            render_backward(gs, cam, out, d_color=np.zeros((2, 2, 3)))


class TestDensifyStats:
    def test_invisible_gaussian_leaves_accumulators_unchanged(self):
        cam = make_camera()
        gs = make_random_set(6, seed=4)
        gs.positions[2] = cam.center - 5.0 * (cam.rotation[2])  # behind camera
        out = render(gs, cam)
        grads, ndc, cov = render_backward(gs, cam, out,
                                          d_color=np.ones(out.color.shape))
        assert cov[2] == 0
        accumulate_densify_stats(gs, ndc, cov)
        assert gs.grad_accum[2] == 0.0
        assert gs.weight_accum[2] == 0.0

    def test_two_equal_views_average_to_g(self):
        gs = make_random_set(3, seed=5)
        m = np.array([10, 5, 0])
        g = np.array([0.5, 0.2, 0.0])
        accumulate_densify_stats(gs, g, m)
        accumulate_densify_stats(gs, g, m)
        seen = gs.weight_accum > 0
        avg = gs.grad_accum[seen] / gs.weight_accum[seen]
        assert np.allclose(avg, g[seen])

    def test_accumulated_ratio_matches_direct_loop(self):
        rng = np.random.default_rng(6)
        gs = make_random_set(10, seed=6)
        views = [(rng.integers(0, 20, 10).astype(float), rng.random(10))
                 for _ in range(7)]
        for m, g in views:
            accumulate_densify_stats(gs, g, m)
        # direct-sum oracle
        num = sum(m * g for m, g in views)
        den = sum(m for m, _ in views)
        seen = den > 0
        assert np.allclose(gs.grad_accum[seen] / gs.weight_accum[seen],
                           num[seen] / den[seen], rtol=1e-12)


class TestDepthPlaneProperty:
    def test_opaque_plane_depth_matches_geometry(self):
        # a dense slab of opaque Gaussians on z=0 viewed obliquely: depth at
        # high-alpha pixels equals the analytic ray-plane depth within 1%
        rng = np.random.default_rng(8)
        n = 900
        xy = rng.uniform(-3, 3, (n, 2))
        gs = GaussianSet(
            positions=np.column_stack([xy, np.zeros(n)]),
            rotations=np.tile([1.0, 0, 0, 0], (n, 1)),
            log_scales=np.log(np.tile([0.25, 0.25, 0.01], (n, 1))),
            logit_opacities=np.full(n, logit(0.95)),
            sh=np.zeros((n, 3, 1)),
        )
        cam = make_camera(width=32, height=32, k1=0.02, k2=0.001,
                          pos=(3.0, -2.0, 5.0), target=(0, 0, 0))
        out = render(gs, cam)
        solid = out.alpha > 0.99
        assert solid.sum() > 100
        from lidarsplat import camera as cm
        ys, xs = np.mgrid[0:32, 0:32]
        uu, vv = cm.undistort_grid(cam, xs + 0.5, ys + 0.5)
        mx = (uu - cam.cx) / cam.fx
        my = (vv - cam.cy) / cam.fy
        dirs = np.stack([mx, my, np.ones_like(mx)], axis=-1)
        dirs_w = dirs.reshape(-1, 3) @ cam.rotation
        t_plane = (-cam.center[2] / dirs_w[:, 2]).reshape(32, 32)
        rel = np.abs(out.depth - t_plane)[solid] / t_plane[solid]
        assert np.max(rel) < 0.01
