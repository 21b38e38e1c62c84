"""Training objective: photometric (L1 + D-SSIM) and geometric (depth,
normal, scale) terms, each returning its value together with the analytic
gradient w.r.t. the rendered buffer (or log scales) it constrains."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .scene import GaussianSet

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    alpha: float = 100.0  # depth
    beta: float = 0.001  # normal
    gamma: float = 0.001  # scale
    lam: float = 0.2  # D-SSIM share of the photometric term


def _as_array(img):
    data = getattr(img, "data", img)
    return np.asarray(data, dtype=np.float64)


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def l1_loss(rendered, gt):
    """Mean absolute difference over all elements; gradient w.r.t. rendered."""
    a, b = _as_array(rendered), _as_array(gt)
    _check_same_shape(a, b)
    diff = a - b
    n = diff.size
    return float(np.abs(diff).mean()), np.sign(diff) / n


def _gauss_window():
    half = SSIM_WINDOW // 2
    t = np.arange(SSIM_WINDOW) - half
    g = np.exp(-(t * t) / (2.0 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _corr_valid(x, g):
    half = SSIM_WINDOW // 2
    y = ndimage.correlate1d(x, g, axis=0, mode="constant")
    y = ndimage.correlate1d(y, g, axis=1, mode="constant")
    return y[half:-half, half:-half]


def _corr_adjoint(G, shape, g):
    half = SSIM_WINDOW // 2
    emb = np.zeros(shape)
    emb[half:-half, half:-half] = G
    y = ndimage.correlate1d(emb, g, axis=0, mode="constant")
    return ndimage.correlate1d(y, g, axis=1, mode="constant")


def _ssim_channel(x, y, g):
    """Mean SSIM of one channel plus d(mssim)/dx; valid-window region only."""
    mu_x = _corr_valid(x, g)
    mu_y = _corr_valid(y, g)
    mu_xx = _corr_valid(x * x, g)
    mu_yy = _corr_valid(y * y, g)
    mu_xy = _corr_valid(x * y, g)
    sig_x = mu_xx - mu_x * mu_x
    sig_y = mu_yy - mu_y * mu_y
    sig_xy = mu_xy - mu_x * mu_y

    A1 = 2 * mu_x * mu_y + SSIM_C1
    B1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    A2 = 2 * sig_xy + SSIM_C2
    B2 = sig_x + sig_y + SSIM_C2
    D = B1 * B2
    S = (A1 * A2) / D
    n_win = S.size

    # partials w.r.t. the window accumulators of x
    dS_dmux = (2 * mu_y * (A2 - A1)) / D + 2 * mu_x * S * (1.0 / B2 - 1.0 / B1)
    dS_dmuxx = -S / B2
    dS_dmuxy = 2 * A1 / D

    w = 1.0 / n_win
    grad = _corr_adjoint(dS_dmux * w, x.shape, g)
    grad += 2 * x * _corr_adjoint(dS_dmuxx * w, x.shape, g)
    grad += y * _corr_adjoint(dS_dmuxy * w, x.shape, g)
    return float(S.mean()), grad


def ssim_value_and_grad(rendered, gt):
    """Mean SSIM over channels (11x11 Gaussian window, sigma 1.5) and its
    gradient w.r.t. the rendered image."""
    a, b = _as_array(rendered), _as_array(gt)
    _check_same_shape(a, b)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = _gauss_window()
    vals, grads = [], np.zeros_like(a)
    for c in range(a.shape[2]):
        v, gr = _ssim_channel(a[:, :, c], b[:, :, c], g)
        vals.append(v)
        grads[:, :, c] = gr
    return float(np.mean(vals)), grads / a.shape[2]


def dssim_loss(rendered, gt):
    """(1 - SSIM)/2 with gradient w.r.t. rendered."""
    v, gr = ssim_value_and_grad(rendered, gt)
    return (1.0 - v) / 2.0, -0.5 * gr


def depth_loss(d_hat, d_bar, mask, literal: bool = False, reduction: str = "mean"):
    """L1 depth residual over valid pixels; `literal` adds the printed
    |1 - product| penalty as well."""
    d_hat, d_bar = np.asarray(d_hat, dtype=np.float64), np.asarray(d_bar, dtype=np.float64)
    _check_same_shape(d_hat, d_bar)
    mask = np.asarray(mask, dtype=bool)
    _check_same_shape(d_hat, mask)
    n = int(mask.sum())
    if n == 0:
        log.debug("depth loss: no valid pixels, returning 0")
        return 0.0, np.zeros_like(d_hat)
    scale = 1.0 if reduction == "sum" else 1.0 / n
    diff = np.where(mask, d_hat - d_bar, 0.0)
    value = np.abs(diff).sum() * scale
    grad = np.sign(diff) * scale
    if literal:
        prod = np.where(mask, 1.0 - d_hat * d_bar, 0.0)
        value += np.abs(prod).sum() * scale
        grad += np.where(mask, -np.sign(prod) * d_bar, 0.0) * scale
    return float(value), grad


def normal_loss(n_hat, n_bar, mask, reduction: str = "mean"):
    """Per valid pixel: L1 vector difference plus 1 - cosine, averaged."""
    n_hat, n_bar = np.asarray(n_hat, dtype=np.float64), np.asarray(n_bar, dtype=np.float64)
    _check_same_shape(n_hat, n_bar)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != n_hat.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match {n_hat.shape[:2]}")
    n = int(mask.sum())
    if n == 0:
        log.debug("normal loss: no valid pixels, returning 0")
        return 0.0, np.zeros_like(n_hat)
    scale = 1.0 if reduction == "sum" else 1.0 / n
    m3 = mask[:, :, None]
    diff = np.where(m3, n_hat - n_bar, 0.0)
    dot = np.sum(n_hat * n_bar, axis=2)
    cosres = np.where(mask, 1.0 - dot, 0.0)
    value = (np.abs(diff).sum() + np.abs(cosres).sum()) * scale
    grad = np.sign(diff) * scale
    grad += np.where(m3, -np.sign(cosres)[:, :, None] * n_bar, 0.0) * scale
    return float(value), grad


def scale_loss(gset: GaussianSet):
    """Mean over Gaussians of the smallest axis scale (meters); the gradient
    touches only each Gaussian's smallest axis (lowest index on ties)."""
    n = len(gset)
    grad = np.zeros_like(gset.log_scales)
    if n == 0:
        return 0.0, grad
    s = np.exp(gset.log_scales)
    jmin = np.argmin(s, axis=1)  # first occurrence wins ties
    smin = s[np.arange(n), jmin]
    grad[np.arange(n), jmin] = smin / n  # d/d(log s) = s
    return float(smin.mean()), grad


def total_loss(
    render_out,
    gt_image,
    maps,
    gset: GaussianSet,
    weights: LossWeights,
    literal_depth: bool = False,
    reduction: str = "mean",
):
    """Full objective (1-lam)L1 + lam*DSSIM + alpha*depth + beta*normal
    + gamma*scale.

    Returns (total, components dict, gradients dict with keys d_color,
    d_depth, d_normal, d_log_scales). Geometric terms are evaluated over
    pixels valid in both the LiDAR maps and the render.
    """
    gt = _as_array(gt_image)
    l1_v, l1_g = l1_loss(render_out.color, gt)
    ds_v, ds_g = dssim_loss(render_out.color, gt)
    mask = maps.valid_mask & render_out.valid_mask
    dp_v, dp_g = depth_loss(render_out.depth, maps.depth, mask,
                            literal=literal_depth, reduction=reduction)
    nm_v, nm_g = normal_loss(render_out.normal, maps.normal, mask, reduction=reduction)
    sc_v, sc_g = scale_loss(gset)

    w = weights
    total = (1 - w.lam) * l1_v + w.lam * ds_v + w.alpha * dp_v + w.beta * nm_v + w.gamma * sc_v
    components = {"l1": l1_v, "dssim": ds_v, "depth": dp_v, "normal": nm_v, "scale": sc_v}
    grads = {
        "d_color": (1 - w.lam) * l1_g + w.lam * ds_g,
        "d_depth": w.alpha * dp_g,
        "d_normal": w.beta * nm_g,
        "d_log_scales": w.gamma * sc_g,
    }
    return float(total), components, grads
