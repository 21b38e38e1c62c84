"""Real spherical-harmonic color evaluation (degrees 0-3) with analytic
derivatives w.r.t. both the coefficients and the view direction."""

from __future__ import annotations

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def basis(dirs: np.ndarray, n_basis: int) -> np.ndarray:
    """Basis values for unit directions; dirs (N,3) -> (N, n_basis)."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.empty((len(dirs), n_basis))
    out[:, 0] = C0
    if n_basis > 1:
        out[:, 1] = -C1 * y
        out[:, 2] = C1 * z
        out[:, 3] = -C1 * x
    if n_basis > 4:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = C2[0] * x * y
        out[:, 5] = C2[1] * y * z
        out[:, 6] = C2[2] * (2.0 * zz - xx - yy)
        out[:, 7] = C2[3] * x * z
        out[:, 8] = C2[4] * (xx - yy)
    if n_basis > 9:
        out[:, 9] = C3[0] * y * (3.0 * xx - yy)
        out[:, 10] = C3[1] * x * y * z
        out[:, 11] = C3[2] * y * (4.0 * zz - xx - yy)
        out[:, 12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[:, 13] = C3[4] * x * (4.0 * zz - xx - yy)
        out[:, 14] = C3[5] * z * (xx - yy)
        out[:, 15] = C3[6] * x * (xx - 3.0 * yy)
    return out


def basis_grad(dirs: np.ndarray, n_basis: int) -> np.ndarray:
    """d(basis)/d(direction) for unit directions; (N, n_basis, 3)."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    g = np.zeros((len(dirs), n_basis, 3))
    if n_basis > 1:
        g[:, 1, 1] = -C1
        g[:, 2, 2] = C1
        g[:, 3, 0] = -C1
    if n_basis > 4:
        g[:, 4, 0] = C2[0] * y
        g[:, 4, 1] = C2[0] * x
        g[:, 5, 1] = C2[1] * z
        g[:, 5, 2] = C2[1] * y
        g[:, 6, 0] = C2[2] * (-2.0 * x)
        g[:, 6, 1] = C2[2] * (-2.0 * y)
        g[:, 6, 2] = C2[2] * (4.0 * z)
        g[:, 7, 0] = C2[3] * z
        g[:, 7, 2] = C2[3] * x
        g[:, 8, 0] = C2[4] * (2.0 * x)
        g[:, 8, 1] = C2[4] * (-2.0 * y)
    if n_basis > 9:
        xx, yy, zz = x * x, y * y, z * z
        g[:, 9, 0] = C3[0] * 6.0 * x * y
        g[:, 9, 1] = C3[0] * (3.0 * xx - 3.0 * yy)
        g[:, 10, 0] = C3[1] * y * z
        g[:, 10, 1] = C3[1] * x * z
        g[:, 10, 2] = C3[1] * x * y
        g[:, 11, 0] = C3[2] * (-2.0 * x * y)
        g[:, 11, 1] = C3[2] * (4.0 * zz - xx - 3.0 * yy)
        g[:, 11, 2] = C3[2] * (8.0 * y * z)
        g[:, 12, 0] = C3[3] * (-6.0 * x * z)
        g[:, 12, 1] = C3[3] * (-6.0 * y * z)
        g[:, 12, 2] = C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        g[:, 13, 0] = C3[4] * (4.0 * zz - 3.0 * xx - yy)
        g[:, 13, 1] = C3[4] * (-2.0 * x * y)
        g[:, 13, 2] = C3[4] * (8.0 * x * z)
        g[:, 14, 0] = C3[5] * (2.0 * x * z)
        g[:, 14, 1] = C3[5] * (-2.0 * y * z)
        g[:, 14, 2] = C3[5] * (xx - yy)
        g[:, 15, 0] = C3[6] * (3.0 * xx - 3.0 * yy)
        g[:, 15, 1] = C3[6] * (-6.0 * x * y)
    return g


def evaluate(sh: np.ndarray, dirs: np.ndarray):
    """Colors from SH coefficients (N,3,B) toward unit directions (N,3).

    Returns (colors (N,3), clamp mask (N,3)): color = max(0, sum + 0.5),
    and the mask marks channels that stayed positive (gradient passes).
    """
    b = basis(dirs, sh.shape[2])
    raw = np.einsum("ncb,nb->nc", sh, b) + 0.5
    mask = raw > 0.0
    return np.where(mask, raw, 0.0), mask


def backward(sh: np.ndarray, dirs: np.ndarray, clamp_mask: np.ndarray, d_color: np.ndarray):
    """Gradients of sum(d_color * color): returns (d_sh (N,3,B), d_dir (N,3))."""
    n_basis = sh.shape[2]
    b = basis(dirs, n_basis)
    gb = basis_grad(dirs, n_basis)
    dc = np.where(clamp_mask, d_color, 0.0)
    d_sh = np.einsum("nc,nb->ncb", dc, b)
    # d(color_c)/d(dir) = sum_b sh[c,b] * d(basis_b)/d(dir)
    d_dir = np.einsum("nc,ncb,nbk->nk", dc, sh, gb)
    return d_sh, d_dir


def dir_to_unit_backward(d_unnorm: np.ndarray, d_unit_grad: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. a normalized vector back to the raw vector."""
    norm = np.linalg.norm(d_unnorm, axis=1, keepdims=True)
    unit = d_unnorm / norm
    proj = d_unit_grad - unit * np.sum(unit * d_unit_grad, axis=1, keepdims=True)
    return proj / norm


def color_to_sh0(color) -> np.ndarray:
    """Degree-0 coefficient reproducing a flat color (inverse of evaluate)."""
    return (np.asarray(color, dtype=np.float64) - 0.5) / C0
