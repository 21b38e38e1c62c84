"""Projection through the even-order radial-distortion camera model.

The distortion acts on the principal-point-centered offset of the ideal
(pinhole) image point: with offsets du = fx*X/Z, dv = fy*Y/Z the observed
pixel is (cx + du*f, cy + dv*f) where f = 1 + k1*r^2 + k2*r^4. The radius r
is measured either in pixel units of the ideal offset (default) or in
normalized image-plane units (camera.normalized_r). `undistort` inverts the
mapping by fixed-point iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import DistortedCamera, LidarCloud

MIN_DEPTH = 1e-9  # camera-frame z below this is treated as behind-camera


class BehindCameraError(ValueError):
    pass


class ConvergenceError(ArithmeticError):
    """Fixed-point undistortion failed to converge; carries the residual."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


@dataclass
class PixelCoord:
    """Continuous pixel coordinate with the camera-frame depth of the point."""

    u: float
    v: float
    depth: float


def _r_scales(cam: DistortedCamera):
    # radius units: pixel offsets by default, normalized offsets on request
    if cam.normalized_r:
        return 1.0, 1.0
    return cam.fx, cam.fy


def distort_offsets(cam: DistortedCamera, nx, ny):
    """Map normalized camera coords (X/Z, Y/Z) to distorted pixel offsets."""
    su, sv = _r_scales(cam)
    r2 = (su * nx) ** 2 + (sv * ny) ** 2
    factor = 1.0 + cam.k1 * r2 + cam.k2 * r2 * r2
    return cam.fx * nx * factor, cam.fy * ny * factor


def project(cam: DistortedCamera, p_world) -> PixelCoord | None:
    """Project one world point; returns None when it lies behind the camera.

    The result may fall outside the image bounds; callers cull.
    """
    p = np.asarray(p_world, dtype=np.float64).reshape(3)
    p_cam = cam.rotation @ p + cam.translation
    z = p_cam[2]
    if z <= MIN_DEPTH:
        return None
    du, dv = distort_offsets(cam, p_cam[0] / z, p_cam[1] / z)
    return PixelCoord(u=float(cam.cx + du), v=float(cam.cy + dv), depth=float(z))


def undistort(cam: DistortedCamera, distorted_uv, max_iter: int = 50, tol: float = 1e-10):
    """Invert the distortion: observed pixel -> ideal (pinhole) pixel.

    Fixed-point iteration on the radial factor; converges when the update
    falls below `tol` pixels. Raises ConvergenceError otherwise.
    """
    uv = np.asarray(distorted_uv, dtype=np.float64).reshape(2)
    su, sv = _r_scales(cam)
    # offsets measured in pixels; the radius scale converts as needed
    ox, oy = uv[0] - cam.cx, uv[1] - cam.cy
    ex, ey = ox, oy  # ideal-offset estimate
    for _ in range(max_iter):
        r2 = (su * ex / cam.fx) ** 2 + (sv * ey / cam.fy) ** 2
        factor = 1.0 + cam.k1 * r2 + cam.k2 * r2 * r2
        nex, ney = ox / factor, oy / factor
        step = max(abs(nex - ex), abs(ney - ey))
        ex, ey = nex, ney
        if step < tol:
            return np.array([cam.cx + ex, cam.cy + ey])
    raise ConvergenceError(
        f"undistort did not converge within {max_iter} iterations (residual {step:.3e} px)",
        residual=step,
    )


def undistort_grid(cam: DistortedCamera, u, v, iters: int = 50):
    """Vectorized fixed-point undistortion of pixel arrays (non-raising)."""
    ox = np.asarray(u, dtype=np.float64) - cam.cx
    oy = np.asarray(v, dtype=np.float64) - cam.cy
    su, sv = _r_scales(cam)
    ex, ey = ox.copy(), oy.copy()
    for _ in range(iters):
        r2 = (su * ex / cam.fx) ** 2 + (sv * ey / cam.fy) ** 2
        factor = 1.0 + cam.k1 * r2 + cam.k2 * r2 * r2
        ex, ey = ox / factor, oy / factor
    return cam.cx + ex, cam.cy + ey


def pixel_jacobian_cam(cam: DistortedCamera, p_cam) -> np.ndarray:
    """2x3 Jacobian of the distorted pixel w.r.t. camera-frame coordinates."""
    X, Y, Z = np.asarray(p_cam, dtype=np.float64).reshape(3)
    if Z <= MIN_DEPTH:
        raise BehindCameraError("point is behind the camera")
    nx, ny = X / Z, Y / Z
    B = _pixel_from_normalized_B(cam, nx, ny)
    return B / Z


def _pixel_from_normalized_B(cam: DistortedCamera, nx, ny) -> np.ndarray:
    """B such that d(pixel)/d(p_cam) = B(nx, ny) / Z (columns: X, Y, Z)."""
    su, sv = _r_scales(cam)
    su2, sv2 = su * su, sv * sv
    r2 = su2 * nx * nx + sv2 * ny * ny
    f = 1.0 + cam.k1 * r2 + cam.k2 * r2 * r2
    g = cam.k1 + 2.0 * cam.k2 * r2  # d(factor)/d(r2)
    a00 = cam.fx * (f + 2.0 * su2 * nx * nx * g)
    a01 = cam.fx * 2.0 * sv2 * nx * ny * g
    a10 = cam.fy * 2.0 * su2 * nx * ny * g
    a11 = cam.fy * (f + 2.0 * sv2 * ny * ny * g)
    return np.array([
        [a00, a01, -(a00 * nx + a01 * ny)],
        [a10, a11, -(a10 * nx + a11 * ny)],
    ])


def project_jacobian(cam: DistortedCamera, p_world) -> np.ndarray:
    """Analytic 2x3 Jacobian of the projected pixel w.r.t. the world point."""
    p = np.asarray(p_world, dtype=np.float64).reshape(3)
    p_cam = cam.rotation @ p + cam.translation
    return pixel_jacobian_cam(cam, p_cam) @ cam.rotation


def project_points(cam: DistortedCamera, points: np.ndarray):
    """Vectorized projection of (N,3) world points.

    Returns (in_front mask, u, v, depth); u/v/depth are only meaningful where
    in_front holds.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    p_cam = pts @ cam.rotation.T + cam.translation
    z = p_cam[:, 2]
    in_front = z > MIN_DEPTH
    zs = np.where(in_front, z, 1.0)
    du, dv = distort_offsets(cam, p_cam[:, 0] / zs, p_cam[:, 1] / zs)
    return in_front, cam.cx + du, cam.cy + dv, z


def project_cloud(cam: DistortedCamera, cloud: LidarCloud):
    """Project every LiDAR point; keep those in front of the camera and
    inside the image. Returns (point indices, (K,2) pixel coords, depths),
    original point order preserved.
    """
    in_front, u, v, z = project_points(cam, cloud.points)
    keep = in_front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    idx = np.nonzero(keep)[0]
    return idx, np.stack([u[idx], v[idx]], axis=1), z[idx]


# ---------------------------------------------------------------------------
# Derivatives of the Jacobian itself (needed when backpropagating through the
# splat covariance projection, which reuses B at the splat mean).
# ---------------------------------------------------------------------------

def pixel_B_and_derivs(cam: DistortedCamera, nx: np.ndarray, ny: np.ndarray):
    """Vectorized B(nx, ny) plus dB/dnx and dB/dny, each shaped (N, 2, 3)."""
    su, sv = _r_scales(cam)
    su2, sv2 = su * su, sv * sv
    fx, fy, k2 = cam.fx, cam.fy, cam.k2
    r2 = su2 * nx * nx + sv2 * ny * ny
    f = 1.0 + cam.k1 * r2 + k2 * r2 * r2
    g = cam.k1 + 2.0 * k2 * r2

    a00 = fx * (f + 2.0 * su2 * nx * nx * g)
    a01 = fx * 2.0 * sv2 * nx * ny * g
    a10 = fy * 2.0 * su2 * nx * ny * g
    a11 = fy * (f + 2.0 * sv2 * ny * ny * g)

    # d(r2)/dnx = 2 su2 nx, d(g)/dnx = 2 k2 * d(r2)/dnx
    da00_x = fx * (6.0 * su2 * nx * g + 8.0 * k2 * su2 * su2 * nx ** 3)
    da00_y = fx * (2.0 * sv2 * ny * g + 8.0 * k2 * su2 * sv2 * nx * nx * ny)
    da01_x = fx * (2.0 * sv2 * ny * g + 8.0 * k2 * su2 * sv2 * nx * nx * ny)
    da01_y = fx * (2.0 * sv2 * nx * g + 8.0 * k2 * sv2 * sv2 * nx * ny * ny)
    da10_x = fy * (2.0 * su2 * ny * g + 8.0 * k2 * su2 * su2 * nx * nx * ny)
    da10_y = fy * (2.0 * su2 * nx * g + 8.0 * k2 * su2 * sv2 * nx * ny * ny)
    da11_x = fy * (2.0 * su2 * nx * g + 8.0 * k2 * su2 * sv2 * nx * ny * ny)
    da11_y = fy * (6.0 * sv2 * ny * g + 8.0 * k2 * sv2 * sv2 * ny ** 3)

    n = np.shape(nx)[0] if np.ndim(nx) else 1
    B = np.empty((n, 2, 3))
    dBx = np.empty((n, 2, 3))
    dBy = np.empty((n, 2, 3))
    B[:, 0, 0], B[:, 0, 1] = a00, a01
    B[:, 1, 0], B[:, 1, 1] = a10, a11
    B[:, 0, 2] = -(a00 * nx + a01 * ny)
    B[:, 1, 2] = -(a10 * nx + a11 * ny)

    dBx[:, 0, 0], dBx[:, 0, 1] = da00_x, da01_x
    dBx[:, 1, 0], dBx[:, 1, 1] = da10_x, da11_x
    dBx[:, 0, 2] = -(da00_x * nx + a00 + da01_x * ny)
    dBx[:, 1, 2] = -(da10_x * nx + a10 + da11_x * ny)

    dBy[:, 0, 0], dBy[:, 0, 1] = da00_y, da01_y
    dBy[:, 1, 0], dBy[:, 1, 1] = da10_y, da11_y
    dBy[:, 0, 2] = -(da00_y * nx + a01 + da01_y * ny)
    dBy[:, 1, 2] = -(da10_y * nx + a11 + da11_y * ny)
    return B, dBx, dBy
