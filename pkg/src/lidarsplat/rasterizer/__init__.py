"""Differentiable CPU splatting of a GaussianSet through a DistortedCamera.

Forward: splats are projected with the distorted camera (mean via the exact
projection, 2D covariance via the local projection Jacobian at the mean,
J Sigma_cam J^T, plus a 0.3 px^2 anti-alias floor), depth-sorted front to
back, and alpha-composited per pixel. Splats have compact support: the
Gaussian exponent is cut at SIGMA_CUT, which the naive reference renderer
shares, so tiling never changes which pairs contribute.

Backward: analytic gradients for every Gaussian parameter plus the
per-Gaussian NDC-position gradient norm and pixel coverage that drive
densification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import camera as cam_mod
from ..scene import DistortedCamera, GaussianSet, covariance_batch, quat_normalize, quat_to_rotmat, sigmoid
from . import sh as sh_mod
from . import _kernels

TILE_SIZE = 16
SIGMA_CUT = 12.0  # exponent cutoff defining the splat's compact support
TERMINATE_T = 1e-4
ALPHA_VALID = 1e-4  # below this accumulated alpha, depth/normal are invalid
COV_DILATION = 0.3  # px^2 floor added to the 2D covariance


@dataclass
class RenderOutput:
    """Composited buffers plus the per-Gaussian densification statistics."""

    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), 0 where invalid
    normal: np.ndarray  # (H, W, 3) unit where valid, 0 elsewhere
    alpha: np.ndarray  # (H, W)
    valid_mask: np.ndarray  # (H, W) bool, alpha-valid pixels
    coverage: np.ndarray  # (N,) pixels with effective alpha > 1/255
    ndc_grad_norm: np.ndarray  # (N,) filled by render_backward
    _ctx: dict = field(default=None, repr=False)


@dataclass
class ParamGrads:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    logit_opacities: np.ndarray
    sh: np.ndarray


def _check_finite(gset: GaussianSet):
    for name, arr in (
        ("position", gset.positions),
        ("rotation", gset.rotations),
        ("log_scale", gset.log_scales),
        ("logit_opacity", gset.logit_opacities),
        ("sh", gset.sh),
    ):
        flat_bad = ~np.isfinite(arr.reshape(len(gset), -1))
        if flat_bad.any():
            idx = int(np.nonzero(flat_bad.any(axis=1))[0][0])
            raise ValueError(f"non-finite {name} in Gaussian {idx}")


def _prepare(gset: GaussianSet, cam: DistortedCamera, sigma_cut: float, tile_size: int):
    """Project all splats and build the per-tile CSR pairing."""
    n = len(gset)
    R_c, t_c = cam.rotation, cam.translation
    p_cam = gset.positions @ R_c.T + t_c
    z = p_cam[:, 2]
    vis = z > cam_mod.MIN_DEPTH
    vis_idx = np.nonzero(vis)[0]

    quats = quat_normalize(gset.rotations)
    rotmats = quat_to_rotmat(quats)

    pc = p_cam[vis_idx]
    nx, ny = pc[:, 0] / pc[:, 2], pc[:, 1] / pc[:, 2]
    B, dBx, dBy = cam_mod.pixel_B_and_derivs(cam, nx, ny)
    du, dv = cam_mod.distort_offsets(cam, nx, ny)
    means = np.stack([cam.cx + du, cam.cy + dv], axis=1)

    sigma_w = covariance_batch(quats[vis_idx], gset.log_scales[vis_idx])
    sigma_c = np.einsum("ij,njk,lk->nil", R_c, sigma_w, R_c)
    J = B / pc[:, 2, None, None]
    cov2d = np.einsum("nij,njk,nlk->nil", J, sigma_c, J)
    cov2d[:, 0, 0] += COV_DILATION
    cov2d[:, 1, 1] += COV_DILATION

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conics = np.stack([
        cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det,
    ], axis=1)
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.sqrt(2.0 * sigma_cut * lam_max)

    # cull splats whose support cannot touch the image
    u, v = means[:, 0], means[:, 1]
    keep = (u + radius > 0) & (u - radius < cam.width) & \
           (v + radius > 0) & (v - radius < cam.height)
    vis_idx = vis_idx[keep]
    means, conics, radius = means[keep], conics[keep], radius[keep]
    B, dBx, dBy, J = B[keep], dBx[keep], dBy[keep], J[keep]
    sigma_c, cov2d = sigma_c[keep], cov2d[keep]
    nx, ny = nx[keep], ny[keep]
    pc = pc[keep]

    # front-to-back order (stable: equal depths keep index order)
    order = np.argsort(pc[:, 2], kind="stable")
    vis_idx, means, conics, radius = vis_idx[order], means[order], conics[order], radius[order]
    B, dBx, dBy, J = B[order], dBx[order], dBy[order], J[order]
    sigma_c, cov2d = sigma_c[order], cov2d[order]
    nx, ny, pc = nx[order], ny[order], pc[order]

    m = len(vis_idx)
    quats_v, rotmats_v = quats[vis_idx], rotmats[vis_idx]

    dirs_raw = gset.positions[vis_idx] - cam.center
    dirs = dirs_raw / np.linalg.norm(dirs_raw, axis=1, keepdims=True)
    colors, clamp_mask = sh_mod.evaluate(gset.sh[vis_idx], dirs)

    axis = np.argmin(gset.log_scales[vis_idx], axis=1)  # ties -> lowest index
    n_world = np.take_along_axis(rotmats_v, axis[:, None, None], axis=2)[:, :, 0]
    n_cam_raw = n_world @ R_c.T
    flip = np.where(np.sum(n_cam_raw * pc, axis=1) > 0, -1.0, 1.0)
    normals_cam = n_cam_raw * flip[:, None]

    opac = sigmoid(gset.logit_opacities[vis_idx])

    # tile pairing; pairs stay in depth order inside each tile
    ntx = (cam.width + tile_size - 1) // tile_size
    nty = (cam.height + tile_size - 1) // tile_size
    clip_x = lambda a: np.clip(a, 0, ntx - 1).astype(np.int64)
    clip_y = lambda a: np.clip(a, 0, nty - 1).astype(np.int64)
    tx0 = clip_x(np.floor((means[:, 0] - radius) / tile_size))
    tx1 = clip_x(np.floor((means[:, 0] + radius) / tile_size))
    ty0 = clip_y(np.floor((means[:, 1] - radius) / tile_size))
    ty1 = clip_y(np.floor((means[:, 1] + radius) / tile_size))
    counts = (tx1 - tx0 + 1) * (ty1 - ty0 + 1)
    offsets = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    n_pairs = int(offsets[-1])
    pair_tile = np.empty(n_pairs, dtype=np.int64)
    pair_splat = np.empty(n_pairs, dtype=np.int64)
    if m:
        _kernels.fill_pairs(tx0, tx1, ty0, ty1, offsets[:-1], pair_tile, pair_splat, ntx)
    reorder = np.argsort(pair_tile, kind="stable")
    pair_tile, pair_splat = pair_tile[reorder], pair_splat[reorder]
    tile_starts = np.searchsorted(pair_tile, np.arange(ntx * nty + 1))

    return dict(
        vis_idx=vis_idx, means=means, conics=conics, cov2d=cov2d,
        B=B, dBx=dBx, dBy=dBy, J=J, sigma_c=sigma_c,
        nx=nx, ny=ny, p_cam=pc,
        quats=quats_v, quats_raw=gset.rotations[vis_idx], rotmats=rotmats_v,
        colors=colors, clamp_mask=clamp_mask, dirs_raw=dirs_raw,
        normals_cam=normals_cam, flip=flip, axis=axis, opac=opac,
        pair_splat=pair_splat, tile_starts=tile_starts,
        ntx=ntx, tile_size=tile_size,
    )


def render(
    gset: GaussianSet,
    cam: DistortedCamera,
    background=None,
    sigma_cut: float = SIGMA_CUT,
    terminate: float = TERMINATE_T,
    tile_size: int = TILE_SIZE,
) -> RenderOutput:
    """Rasterize the set into color/depth/normal/alpha buffers."""
    _check_finite(gset)
    H, W = cam.height, cam.width
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)

    color_buf = np.zeros((H, W, 3))
    draw_buf = np.zeros((H, W))
    nraw_buf = np.zeros((H, W, 3))
    alpha_buf = np.zeros((H, W))

    if len(gset) == 0:
        return RenderOutput(
            color=color_buf + bg, depth=draw_buf, normal=nraw_buf,
            alpha=alpha_buf, valid_mask=np.zeros((H, W), dtype=bool),
            coverage=np.zeros(0, dtype=np.int64), ndc_grad_norm=np.zeros(0),
            _ctx=dict(empty=True, background=bg),
        )

    ctx = _prepare(gset, cam, sigma_cut, tile_size)
    coverage_pairs = np.zeros(len(ctx["pair_splat"]), dtype=np.int64)
    _kernels.forward(
        ctx["means"], ctx["conics"], ctx["opac"], ctx["colors"],
        ctx["p_cam"][:, 2].copy(), ctx["normals_cam"],
        ctx["tile_starts"], ctx["pair_splat"],
        W, H, tile_size, ctx["ntx"], sigma_cut, terminate,
        color_buf, draw_buf, nraw_buf, alpha_buf, coverage_pairs,
    )

    coverage = np.zeros(len(gset), dtype=np.int64)
    if len(ctx["vis_idx"]):
        per_splat = np.bincount(ctx["pair_splat"], weights=coverage_pairs,
                                minlength=len(ctx["vis_idx"]))
        coverage[ctx["vis_idx"]] = per_splat.astype(np.int64)

    valid = alpha_buf >= ALPHA_VALID
    depth = np.where(valid, draw_buf / np.where(valid, alpha_buf, 1.0), 0.0)
    nnorm = np.linalg.norm(nraw_buf, axis=2)
    nvalid = valid & (nnorm > 1e-12)
    normal = np.where(nvalid[:, :, None], nraw_buf / np.where(nvalid, nnorm, 1.0)[:, :, None], 0.0)

    color = color_buf + (1.0 - alpha_buf)[:, :, None] * bg

    ctx.update(dict(
        empty=False, background=bg, sigma_cut=sigma_cut, terminate=terminate,
        draw_buf=draw_buf, nraw_buf=nraw_buf, alpha_buf=alpha_buf,
        nnorm=nnorm, nvalid=nvalid, valid=valid,
        width=W, height=H, n_total=len(gset),
    ))
    return RenderOutput(
        color=color, depth=depth, normal=normal, alpha=alpha_buf,
        valid_mask=valid, coverage=coverage, ndc_grad_norm=np.zeros(len(gset)),
        _ctx=ctx,
    )


def _quat_rotmat_backward(q_raw: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Gradient through R(q/|q|): (N,4) raw-quaternion gradients from (N,3,3)."""
    norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    q = q_raw / norm
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zl = np.zeros_like(w)
    # dR/dw, dR/dx, dR/dy, dR/dz, each (N,3,3); rows follow quat_to_rotmat
    dRw = 2.0 * np.stack([
        np.stack([zl, -z, y], axis=1),
        np.stack([z, zl, -x], axis=1),
        np.stack([-y, x, zl], axis=1),
    ], axis=1)
    dRx = 2.0 * np.stack([
        np.stack([zl, y, z], axis=1),
        np.stack([y, -2 * x, -w], axis=1),
        np.stack([z, w, -2 * x], axis=1),
    ], axis=1)
    dRy = 2.0 * np.stack([
        np.stack([-2 * y, x, w], axis=1),
        np.stack([x, zl, z], axis=1),
        np.stack([-w, z, -2 * y], axis=1),
    ], axis=1)
    dRz = 2.0 * np.stack([
        np.stack([-2 * z, -w, x], axis=1),
        np.stack([w, -2 * z, y], axis=1),
        np.stack([x, y, zl], axis=1),
    ], axis=1)
    dq_hat = np.stack([
        np.einsum("nij,nij->n", dR, dRw),
        np.einsum("nij,nij->n", dR, dRx),
        np.einsum("nij,nij->n", dR, dRy),
        np.einsum("nij,nij->n", dR, dRz),
    ], axis=1)
    # chain through the normalization q_hat = q/|q|
    return (dq_hat - q * np.sum(q * dq_hat, axis=1, keepdims=True)) / norm


def render_backward(
    gset: GaussianSet,
    cam: DistortedCamera,
    output: RenderOutput,
    d_color=None,
    d_depth=None,
    d_normal=None,
    d_alpha=None,
):
    """Backpropagate upstream buffer gradients to all Gaussian parameters.

    Returns (ParamGrads, ndc_grad_norm (N,), coverage (N,)); also fills
    output.ndc_grad_norm in place.
    """
    ctx = output._ctx
    if ctx is None:
        raise ValueError("output does not carry a backward context")
    H, W = cam.height, cam.width
    n = len(gset)
    if not ctx.get("empty") and ctx["n_total"] != n:
        raise ValueError("Gaussian set size changed since render")

    zeros3 = lambda: np.zeros((H, W, 3))
    zeros1 = lambda: np.zeros((H, W))
    d_color = zeros3() if d_color is None else np.asarray(d_color, dtype=np.float64)
    d_depth = zeros1() if d_depth is None else np.asarray(d_depth, dtype=np.float64)
    d_normal = zeros3() if d_normal is None else np.asarray(d_normal, dtype=np.float64)
    d_alpha = zeros1() if d_alpha is None else np.asarray(d_alpha, dtype=np.float64)
    for name, arr, shape in (("d_color", d_color, (H, W, 3)), ("d_depth", d_depth, (H, W)),
                             ("d_normal", d_normal, (H, W, 3)), ("d_alpha", d_alpha, (H, W))):
        if arr.shape != shape:
            raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")

    grads = ParamGrads(
        positions=np.zeros((n, 3)),
        rotations=np.zeros((n, 4)),
        log_scales=np.zeros((n, 3)),
        logit_opacities=np.zeros(n),
        sh=np.zeros_like(gset.sh),
    )
    ndc_norm = np.zeros(n)
    if ctx.get("empty"):
        return grads, ndc_norm, output.coverage

    bg = ctx["background"]
    valid = ctx["valid"]
    alpha_buf, draw_buf = ctx["alpha_buf"], ctx["draw_buf"]
    nraw, nnorm, nvalid = ctx["nraw_buf"], ctx["nnorm"], ctx["nvalid"]

    # chain the buffer post-processing back onto the raw composited sums
    safe_a = np.where(valid, alpha_buf, 1.0)
    d_draw = np.where(valid, d_depth / safe_a, 0.0)
    d_alpha_eff = d_alpha - np.einsum("hwc,c->hw", d_color, bg)
    d_alpha_eff = d_alpha_eff - np.where(valid, d_depth * draw_buf / (safe_a * safe_a), 0.0)
    safe_n = np.where(nvalid, nnorm, 1.0)[:, :, None]
    unit_n = np.where(nvalid[:, :, None], nraw / safe_n, 0.0)
    d_nraw = np.where(
        nvalid[:, :, None],
        (d_normal - unit_n * np.sum(unit_n * d_normal, axis=2, keepdims=True)) / safe_n,
        0.0,
    )

    pair_splat, tile_starts = ctx["pair_splat"], ctx["tile_starts"]
    pair_grads = np.zeros((len(pair_splat), 13))
    _kernels.backward(
        ctx["means"], ctx["conics"], ctx["opac"], ctx["colors"],
        ctx["p_cam"][:, 2].copy(), ctx["normals_cam"],
        tile_starts, pair_splat,
        W, H, ctx["tile_size"], ctx["ntx"], ctx["sigma_cut"], ctx["terminate"],
        np.ascontiguousarray(d_color), d_draw, np.ascontiguousarray(d_nraw), d_alpha_eff,
        pair_grads,
    )
    m = len(ctx["vis_idx"])
    splat_grads = np.zeros((m, 13))
    _kernels.merge_pair_grads(pair_splat, pair_grads, splat_grads)

    d_mean = splat_grads[:, 0:2]
    d_conic = splat_grads[:, 2:5]
    d_opac = splat_grads[:, 5]
    d_col = splat_grads[:, 6:9]
    d_depth_splat = splat_grads[:, 9]
    d_ncam = splat_grads[:, 10:13]

    conics, cov2d, J, sigma_c = ctx["conics"], ctx["cov2d"], ctx["J"], ctx["sigma_c"]
    B, dBx, dBy = ctx["B"], ctx["dBx"], ctx["dBy"]
    nx, ny, pc = ctx["nx"], ctx["ny"], ctx["p_cam"]
    z = pc[:, 2]
    R_c = cam.rotation

    # conic -> 2D covariance: d_sigma2d = -Lam dLam Lam with dLam symmetrized
    dLam = np.empty((m, 2, 2))
    dLam[:, 0, 0] = d_conic[:, 0]
    dLam[:, 0, 1] = dLam[:, 1, 0] = 0.5 * d_conic[:, 1]
    dLam[:, 1, 1] = d_conic[:, 2]
    Lam = np.empty((m, 2, 2))
    Lam[:, 0, 0], Lam[:, 0, 1] = conics[:, 0], conics[:, 1]
    Lam[:, 1, 0], Lam[:, 1, 1] = conics[:, 1], conics[:, 2]
    d_sigma2d = -np.einsum("nij,njk,nkl->nil", Lam, dLam, Lam)

    d_sigma_cam = np.einsum("nji,njk,nkl->nil", J, d_sigma2d, J)
    dJ = 2.0 * np.einsum("nij,njk,nkl->nil", d_sigma2d, J, sigma_c)

    # J = B/z: gradients flow to (nx, ny) through B and to z directly
    dB = dJ / z[:, None, None]
    d_nx = np.einsum("nij,nij->n", dB, dBx)
    d_ny = np.einsum("nij,nij->n", dB, dBy)
    d_z = -np.einsum("nij,nij->n", dJ, J) / z

    # the 2D mean depends on (nx, ny) through the first two columns of B
    d_nx += np.einsum("ni,ni->n", d_mean, B[:, :, 0])
    d_ny += np.einsum("ni,ni->n", d_mean, B[:, :, 1])
    # the splat's depth channel value is the camera-frame z itself
    d_z += d_depth_splat

    d_pcam = np.stack([
        d_nx / z,
        d_ny / z,
        -(nx * d_nx + ny * d_ny) / z + d_z,
    ], axis=1)
    d_pos = d_pcam @ R_c

    # world covariance: sigma_w = R S^2 R^T
    d_sigma_w = np.einsum("ji,njk,kl->nil", R_c, d_sigma_cam, R_c)
    rotmats = ctx["rotmats"]
    s2 = np.exp(2.0 * gset.log_scales[ctx["vis_idx"]])
    dR = 2.0 * np.einsum("nij,njk,nk->nik", d_sigma_w, rotmats, s2)
    d_s2 = np.einsum("nji,njk,nki->ni", rotmats, d_sigma_w, rotmats)
    d_log_scales = 2.0 * s2 * d_s2

    # normal channel: n_cam = flip * R_c R[:, axis]
    d_nworld = (d_ncam * ctx["flip"][:, None]) @ R_c
    axis = ctx["axis"]
    for k in range(3):
        sel = axis == k
        dR[sel, :, k] += d_nworld[sel]

    d_quat = _quat_rotmat_backward(ctx["quats_raw"], dR)

    # spherical harmonics: coefficients and the view-direction position path
    d_sh_vis, d_dir_unit = sh_mod.backward(
        gset.sh[ctx["vis_idx"]], ctx["dirs_raw"] / np.linalg.norm(ctx["dirs_raw"], axis=1, keepdims=True),
        ctx["clamp_mask"], d_col,
    )
    d_pos += sh_mod.dir_to_unit_backward(ctx["dirs_raw"], d_dir_unit)

    opac = ctx["opac"]
    d_logit = d_opac * opac * (1.0 - opac)

    vis_idx = ctx["vis_idx"]
    grads.positions[vis_idx] = d_pos
    grads.rotations[vis_idx] = d_quat
    grads.log_scales[vis_idx] = d_log_scales
    grads.logit_opacities[vis_idx] = d_logit
    grads.sh[vis_idx] = d_sh_vis

    ndc = np.sqrt((0.5 * W * d_mean[:, 0]) ** 2 + (0.5 * H * d_mean[:, 1]) ** 2)
    ndc_norm[vis_idx] = ndc
    output.ndc_grad_norm = ndc_norm
    return grads, ndc_norm, output.coverage


def accumulate_densify_stats(gset: GaussianSet, ndc_grad_norm: np.ndarray, coverage: np.ndarray):
    """Fold one view's backward statistics into the running accumulators:
    grad_accum += coverage * |dL/d(ndc mean)|, weight_accum += coverage."""
    if len(ndc_grad_norm) != len(gset) or len(coverage) != len(gset):
        raise ValueError("statistic length does not match the Gaussian set")
    gset.grad_accum += coverage * ndc_grad_norm
    gset.weight_accum += coverage
