"""Naive full-image reference renderer.

Used as the correctness oracle for the tiled renderer: no tiles, no bounding
boxes, every splat evaluated at every pixel in a single global depth order,
and compositing runs until transmittance falls below 1e-12. It recomputes the
projection quantities from first principles (rotation matrices written out
again, covariance Jacobian by central finite differences) so it shares no
code path with the production renderer beyond the SH basis table.
"""

from __future__ import annotations

import numpy as np

from ..scene import DistortedCamera, GaussianSet
from . import sh as sh_mod
from . import RenderOutput, ALPHA_VALID, COV_DILATION, SIGMA_CUT
from ._kernels import ALPHA_CLIP


def _quat_to_rot(q):
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _project_pixel(cam: DistortedCamera, p_cam):
    x, y, z = p_cam
    nx, ny = x / z, y / z
    if cam.normalized_r:
        r2 = nx * nx + ny * ny
    else:
        r2 = (cam.fx * nx) ** 2 + (cam.fy * ny) ** 2
    f = 1.0 + cam.k1 * r2 + cam.k2 * r2 * r2
    return np.array([cam.cx + cam.fx * nx * f, cam.cy + cam.fy * ny * f])


def _fd_jacobian(cam: DistortedCamera, p_cam, rel=1e-6):
    J = np.zeros((2, 3))
    for k in range(3):
        h = rel * max(1.0, abs(p_cam[k]))
        hi, lo = p_cam.copy(), p_cam.copy()
        hi[k] += h
        lo[k] -= h
        J[:, k] = (_project_pixel(cam, hi) - _project_pixel(cam, lo)) / (2 * h)
    return J


def render_reference(
    gset: GaussianSet,
    cam: DistortedCamera,
    background=None,
    sigma_cut: float = SIGMA_CUT,
    terminate: float = 1e-12,
) -> RenderOutput:
    H, W = cam.height, cam.width
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    n = len(gset)
    R_c, t_c = cam.rotation, cam.translation
    center = -R_c.T @ t_c

    splats = []
    for i in range(n):
        p_cam = R_c @ gset.positions[i] + t_c
        if p_cam[2] <= 1e-9:
            continue
        R = _quat_to_rot(gset.rotations[i])
        S2 = np.diag(np.exp(2.0 * gset.log_scales[i]))
        sigma_w = R @ S2 @ R.T
        J = _fd_jacobian(cam, p_cam)
        cov2d = J @ (R_c @ sigma_w @ R_c.T) @ J.T + COV_DILATION * np.eye(2)
        conic = np.linalg.inv(cov2d)
        mean = _project_pixel(cam, p_cam)
        d = gset.positions[i] - center
        dirs = (d / np.linalg.norm(d))[None, :]
        color, _ = sh_mod.evaluate(gset.sh[i][None], dirs)
        axis = int(np.argmin(gset.log_scales[i]))
        n_cam = R_c @ R[:, axis]
        if float(n_cam @ p_cam) > 0:
            n_cam = -n_cam
        opac = 1.0 / (1.0 + np.exp(-gset.logit_opacities[i]))
        splats.append((p_cam[2], i, mean, conic, float(opac), color[0], n_cam))

    splats.sort(key=lambda s: s[0])  # python sort is stable

    ys, xs = np.mgrid[0:H, 0:W]
    cx_grid, cy_grid = xs + 0.5, ys + 0.5
    color_buf = np.zeros((H, W, 3))
    draw = np.zeros((H, W))
    nraw = np.zeros((H, W, 3))
    alpha_acc = np.zeros((H, W))
    T = np.ones((H, W))
    for depth, _, mean, conic, opac, col, n_cam in splats:
        dx = cx_grid - mean[0]
        dy = cy_grid - mean[1]
        sig = 0.5 * (conic[0, 0] * dx * dx + conic[1, 1] * dy * dy) + conic[0, 1] * dx * dy
        support = (sig <= sigma_cut) & (sig >= 0.0)
        alpha = np.where(support, opac * np.exp(np.where(support, -sig, 0.0)), 0.0)
        alpha = np.minimum(alpha, ALPHA_CLIP)
        w = alpha * T * (T >= terminate)
        color_buf += w[:, :, None] * col
        draw += w * depth
        nraw += w[:, :, None] * n_cam
        alpha_acc += w
        T = T * np.where(T >= terminate, 1.0 - alpha, 1.0)

    valid = alpha_acc >= ALPHA_VALID
    depth_out = np.where(valid, draw / np.where(valid, alpha_acc, 1.0), 0.0)
    nnorm = np.linalg.norm(nraw, axis=2)
    nvalid = valid & (nnorm > 1e-12)
    normal = np.where(nvalid[:, :, None], nraw / np.where(nvalid, nnorm, 1.0)[:, :, None], 0.0)
    return RenderOutput(
        color=color_buf + (1.0 - alpha_acc)[:, :, None] * bg,
        depth=depth_out, normal=normal, alpha=alpha_acc,
        valid_mask=valid, coverage=np.zeros(n, dtype=np.int64),
        ndc_grad_norm=np.zeros(n), _ctx=None,
    )
