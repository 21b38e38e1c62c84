"""Dense depth/normal maps for a camera view derived from the LiDAR cloud.

splat_sparse z-buffers every visible point into its pixel; densify_maps fills
the gaps with windowed least-squares planes fitted in (ideal image
coordinates, disparity) space, where any 3D plane seen through an undistorted
pinhole is exactly linear, so planar scenes fill exactly.
"""

from __future__ import annotations

import numpy as np

from . import camera as cam_mod
from .scene import DepthNormalMaps, DistortedCamera, LidarCloud


def splat_sparse(cloud: LidarCloud, cam: DistortedCamera) -> DepthNormalMaps:
    """Project the cloud; each visible point writes depth and camera-frame
    normal into its pixel, nearer depth winning collisions."""
    if cloud.normals is None:
        raise ValueError("cloud has no normals; estimate them first")
    H, W = cam.height, cam.width
    maps = DepthNormalMaps.all_invalid(H, W)
    if len(cloud) == 0:
        return maps
    idx, pix, depth = cam_mod.project_cloud(cam, cloud)
    if len(idx) == 0:
        return maps
    cols = np.floor(pix[:, 0]).astype(np.int64)
    rows = np.floor(pix[:, 1]).astype(np.int64)
    flat = rows * W + cols
    # winner per pixel: smallest depth, ties to the lower point index
    order = np.lexsort((idx, depth, flat))
    flat_s = flat[order]
    first = np.ones(len(flat_s), dtype=bool)
    first[1:] = flat_s[1:] != flat_s[:-1]
    win = order[first]

    p_cam = cloud.points[idx[win]] @ cam.rotation.T + cam.translation
    n_cam = cloud.normals[idx[win]] @ cam.rotation.T
    flip = np.where(np.sum(n_cam * p_cam, axis=1) > 0, -1.0, 1.0)
    n_cam = n_cam * flip[:, None]

    r, c = rows[win], cols[win]
    maps.depth[r, c] = depth[win]
    maps.normal[r, c] = n_cam
    maps.valid_mask[r, c] = True
    return maps


def _window_sums(field: np.ndarray, half: int) -> np.ndarray:
    """Sum of `field` over a (2*half+1)^2 window at every pixel (clipped)."""
    H, W = field.shape
    integ = np.zeros((H + 1, W + 1))
    np.cumsum(np.cumsum(field, axis=0), axis=1, out=integ[1:, 1:])
    ys, xs = np.arange(H), np.arange(W)
    y0 = np.clip(ys - half, 0, H)[:, None]
    y1 = np.clip(ys + half + 1, 0, H)[:, None]
    x0 = np.clip(xs - half, 0, W)[None, :]
    x1 = np.clip(xs + half + 1, 0, W)[None, :]
    return integ[y1, x1] - integ[y0, x1] - integ[y1, x0] + integ[y0, x0]


def densify_maps(sparse: DepthNormalMaps, cam: DistortedCamera, window: int = 21) -> DepthNormalMaps:
    """Fill invalid pixels whose window holds >= 3 valid pixels with the
    least-squares disparity plane over those pixels; valid input pixels pass
    through unchanged."""
    H, W = sparse.depth.shape
    half = max(int(window) // 2, 0)
    valid = sparse.valid_mask
    out = DepthNormalMaps(
        depth=sparse.depth.copy(), normal=sparse.normal.copy(), valid_mask=valid.copy(),
    )
    if not np.any(valid) or np.all(valid):
        return out

    # ideal normalized coordinates of every pixel center
    ys, xs = np.mgrid[0:H, 0:W]
    uu, vv = cam_mod.undistort_grid(cam, xs + 0.5, ys + 0.5)
    mx = (uu - cam.cx) / cam.fx
    my = (vv - cam.cy) / cam.fy

    q = np.where(valid, 1.0 / np.where(valid, sparse.depth, 1.0), 0.0)
    vmask = valid.astype(np.float64)
    fields = {
        "n": vmask,
        "x": mx * vmask, "y": my * vmask, "q": q,
        "xx": mx * mx * vmask, "xy": mx * my * vmask, "yy": my * my * vmask,
        "xq": mx * q, "yq": my * q,
    }
    sums = {k: _window_sums(f, half) for k, f in fields.items()}

    target = (~valid) & (sums["n"] >= 3)
    if not np.any(target):
        return out
    tr, tc = np.nonzero(target)
    # center coordinates on the target pixel: plane value there is the intercept
    x0, y0 = mx[tr, tc], my[tr, tc]
    n_s = sums["n"][tr, tc]
    sx = sums["x"][tr, tc] - n_s * x0
    sy = sums["y"][tr, tc] - n_s * y0
    sxx = sums["xx"][tr, tc] - 2 * x0 * sums["x"][tr, tc] + n_s * x0 * x0
    syy = sums["yy"][tr, tc] - 2 * y0 * sums["y"][tr, tc] + n_s * y0 * y0
    sxy = sums["xy"][tr, tc] - x0 * sums["y"][tr, tc] - y0 * sums["x"][tr, tc] + n_s * x0 * y0
    sq = sums["q"][tr, tc]
    sxq = sums["xq"][tr, tc] - x0 * sq
    syq = sums["yq"][tr, tc] - y0 * sq

    M = np.empty((len(tr), 3, 3))
    M[:, 0, 0], M[:, 0, 1], M[:, 0, 2] = sxx, sxy, sx
    M[:, 1, 0], M[:, 1, 1], M[:, 1, 2] = sxy, syy, sy
    M[:, 2, 0], M[:, 2, 1], M[:, 2, 2] = sx, sy, n_s
    rhs = np.stack([sxq, syq, sq], axis=1)

    det = np.linalg.det(M)
    ok = np.abs(det) > 1e-30
    coef = np.zeros((len(tr), 3))
    if np.any(ok):
        coef[ok] = np.linalg.solve(M[ok], rhs[ok][:, :, None])[:, :, 0]
    A, Bc, C = coef[:, 0], coef[:, 1], coef[:, 2]
    ok &= np.isfinite(coef).all(axis=1) & (C > 0)

    # camera-space plane A*X + B*Y + C_un*Z = 1 with the uncentered intercept
    C_un = C - A * x0 - Bc * y0
    nvec = np.stack([A, Bc, C_un], axis=1)
    norm = np.linalg.norm(nvec, axis=1)
    ok &= norm > 0
    # the viewing ray is (x0, y0, 1); dot = C > 0, so flip toward the camera
    nvec = -nvec / np.where(ok, norm, 1.0)[:, None]

    rr, cc = tr[ok], tc[ok]
    out.depth[rr, cc] = 1.0 / C[ok]
    out.normal[rr, cc] = nvec[ok]
    out.valid_mask[rr, cc] = True
    return out
