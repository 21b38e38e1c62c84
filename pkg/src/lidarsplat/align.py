"""Pixel-level LiDAR-to-image alignment.

find_correspondences projects the cloud into the view, bins the projections
by pixel, and pairs each image feature with the best candidate inside a
pixel radius (scored by pixel distance times depth, approximating the lateral
metric offset while preferring nearer surfaces). refine_pose then solves the
6-DoF pose minimizing the distorted reprojection error with
Levenberg-Marquardt; intrinsics and distortion stay fixed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import camera as cam_mod
from .scene import DistortedCamera, LidarCloud

log = logging.getLogger(__name__)


class DegenerateGeometryError(ValueError):
    pass


@dataclass
class Correspondence:
    feature_uv: np.ndarray  # (2,) observed pixel
    lidar_point: np.ndarray  # (3,) world
    weight: float = 1.0

    def __post_init__(self):
        self.feature_uv = np.asarray(self.feature_uv, dtype=np.float64).reshape(2)
        self.lidar_point = np.asarray(self.lidar_point, dtype=np.float64).reshape(3)


def find_correspondences(
    cloud: LidarCloud,
    cam: DistortedCamera,
    features,
    voxel_size: float = 1.0,
    radius: float = 3.0,
):
    """Pair features with projected LiDAR points within `radius` pixels.

    One correspondence per feature at most; the candidate minimizing
    pixel_distance * depth wins, ties resolving to the lowest point index.
    voxel_size is kept for interface compatibility; the candidate search runs
    directly on the per-pixel bins of the projected points.
    """
    del voxel_size
    if len(cloud) == 0:
        raise ValueError("empty LiDAR cloud")
    idx, pix, depth = cam_mod.project_cloud(cam, cloud)
    out = []
    if len(idx) == 0:
        return out
    cols = np.floor(pix[:, 0]).astype(np.int64)
    rows = np.floor(pix[:, 1]).astype(np.int64)
    keys = rows * cam.width + cols
    order = np.argsort(keys, kind="stable")
    keys_s = keys[order]

    for fuv in features:
        fu, fv = float(fuv[0]), float(fuv[1])
        c0, c1 = int(np.floor(fu - radius)), int(np.floor(fu + radius))
        r0, r1 = int(np.floor(fv - radius)), int(np.floor(fv + radius))
        best = None  # (score, point index, slot)
        for rr in range(max(r0, 0), min(r1, cam.height - 1) + 1):
            lo = np.searchsorted(keys_s, rr * cam.width + max(c0, 0))
            hi = np.searchsorted(keys_s, rr * cam.width + min(c1, cam.width - 1), side="right")
            for s in order[lo:hi]:
                d = np.hypot(pix[s, 0] - fu, pix[s, 1] - fv)
                if d > radius:
                    continue
                score = (d * depth[s], int(idx[s]))
                if best is None or score < best:
                    best = score
        if best is not None:
            out.append(Correspondence(
                feature_uv=np.array([fu, fv]),
                lidar_point=cloud.points[best[1]].copy(),
            ))
    return out


def _rodrigues(omega: np.ndarray) -> np.ndarray:
    """exp([omega]x), exact for all angles."""
    theta = np.linalg.norm(omega)
    K = np.array([
        [0.0, -omega[2], omega[1]],
        [omega[2], 0.0, -omega[0]],
        [-omega[1], omega[0], 0.0],
    ])
    if theta < 1e-12:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def _residuals(cam: DistortedCamera, R, t, pts, uvs, sw):
    """Weighted residual stack (2n,), or None when a point falls behind."""
    p_cam = pts @ R.T + t
    z = p_cam[:, 2]
    if np.any(z <= cam_mod.MIN_DEPTH):
        return None
    du, dv = cam_mod.distort_offsets(cam, p_cam[:, 0] / z, p_cam[:, 1] / z)
    res = np.stack([cam.cx + du - uvs[:, 0], cam.cy + dv - uvs[:, 1]], axis=1)
    return (res * sw[:, None]).reshape(-1)


def _jacobian(cam: DistortedCamera, R, t, pts, sw):
    """(2n, 6) Jacobian w.r.t. (rotation tangent, translation)."""
    n = len(pts)
    p_cam = pts @ R.T + t
    rp = pts @ R.T  # R p; the perturbation acts on the rotated point
    J = np.zeros((2 * n, 6))
    for i in range(n):
        Jp = cam_mod.pixel_jacobian_cam(cam, p_cam[i])
        v = rp[i]
        skew = np.array([
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ])
        J[2 * i:2 * i + 2, 0:3] = -(Jp @ skew) * sw[i]
        J[2 * i:2 * i + 2, 3:6] = Jp * sw[i]
    return J


def _rms(cam, R, t, pts, uvs, weights):
    res = _residuals(cam, R, t, pts, uvs, np.sqrt(weights))
    if res is None:
        return float("inf")
    return float(np.sqrt((res ** 2).sum() / (2.0 * weights.sum())))


def refine_pose(cam: DistortedCamera, correspondences, max_iter: int = 100,
                step_tol: float = 1e-10):
    """Levenberg-Marquardt over the 6-DoF pose; rotation updates compose an
    exponential-map increment so R stays exactly orthonormal.

    Returns (refined camera, final RMS reprojection error in px per
    coordinate). The objective never increases across accepted steps.
    """
    corrs = list(correspondences)
    if len(corrs) < 3:
        raise ValueError(f"need at least 3 correspondences, got {len(corrs)}")
    pts = np.stack([c.lidar_point for c in corrs])
    uvs = np.stack([c.feature_uv for c in corrs])
    weights = np.array([c.weight for c in corrs], dtype=np.float64)
    sw = np.sqrt(weights)

    R, t = cam.rotation.copy(), cam.translation.copy()
    res = _residuals(cam, R, t, pts, uvs, sw)
    if res is None:
        raise ValueError("a correspondence lies behind the camera at the initial pose")
    J = _jacobian(cam, R, t, pts, sw)
    if np.linalg.matrix_rank(J.T @ J, tol=1e-10 * np.linalg.norm(J.T @ J)) < 6:
        raise DegenerateGeometryError(
            "rank-deficient normal equations: the correspondences are "
            "degenerate (e.g. collinear points); the pose is unobservable"
        )

    cost = float(res @ res)
    lam = 1e-3
    for _ in range(max_iter):
        J = _jacobian(cam, R, t, pts, sw)
        H = J.T @ J
        g = J.T @ res
        damped = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
        try:
            delta = np.linalg.solve(damped, -g)
        except np.linalg.LinAlgError as exc:
            raise DegenerateGeometryError(f"normal equations singular: {exc}") from exc
        R_new = _rodrigues(delta[0:3]) @ R
        t_new = t + delta[3:6]
        res_new = _residuals(cam, R_new, t_new, pts, uvs, sw)
        cost_new = float(res_new @ res_new) if res_new is not None else np.inf
        if cost_new < cost:
            R, t, res, cost = R_new, t_new, res_new, cost_new
            lam = max(lam / 10.0, 1e-12)
            if np.linalg.norm(delta) < step_tol:
                break
        else:
            lam = lam * 10.0
            if lam > 1e12:
                break
    refined = cam.replace_pose(R, t)
    return refined, _rms(cam, R, t, pts, uvs, weights)


@dataclass
class AlignmentRow:
    camera_index: int
    n_correspondences: int = 0
    rms_before: float = float("nan")
    rms_after: float = float("nan")
    error: str = None
    camera: DistortedCamera = field(default=None, repr=False)


def alignment_report(cloud: LidarCloud, cams, features_per_cam, radius: float = 3.0):
    """Run the correspondence search and pose refinement per camera; failures
    are recorded per row without aborting the batch."""
    rows = []
    for i, (cam, feats) in enumerate(zip(cams, features_per_cam)):
        row = AlignmentRow(camera_index=i)
        try:
            corrs = find_correspondences(cloud, cam, feats, radius=radius)
            row.n_correspondences = len(corrs)
            if len(corrs) < 3:
                raise ValueError(f"only {len(corrs)} correspondences found")
            pts = np.stack([c.lidar_point for c in corrs])
            uvs = np.stack([c.feature_uv for c in corrs])
            w = np.array([c.weight for c in corrs])
            row.rms_before = _rms(cam, cam.rotation, cam.translation, pts, uvs, w)
            refined, rms = refine_pose(cam, corrs)
            row.rms_after = rms
            row.camera = refined
        except (ValueError, DegenerateGeometryError) as exc:
            row.error = str(exc)
            log.warning("alignment failed for camera %d: %s", i, exc)
        rows.append(row)
    return rows
