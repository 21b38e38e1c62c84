"""LiDAR-guided adaptive density control.

Gaussians that drift beyond a distance threshold from the LiDAR benchmark or
fade below an opacity floor are pruned; Gaussians whose coverage-weighted
NDC gradient average exceeds a threshold are split into two children placed
along the long axis projected onto the local LiDAR tangent plane.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import spatial
from .rasterizer import sh as sh_mod
from .scene import Gaussian, GaussianSet, LidarCloud, quat_to_rotmat

log = logging.getLogger(__name__)

DEGENERATE_TANGENT = 1e-9  # |projection| below this falls back to the long axis


class EmptySetError(RuntimeError):
    """Densification removed every Gaussian; re-initialize from the cloud."""


@dataclass
class DensifyConfig:
    sigma: float = 1.0  # prune distance threshold, meters
    epsilon: float = 0.005  # prune opacity threshold
    tau_pos: float = 0.0002  # split threshold on the averaged NDC gradient
    interval: int = 50  # iterations between passes
    split_offset: float = 0.5  # child displacement, fraction of the long-axis sigma
    scale_shrink: float = 1.6  # child scale divisor

    def validate(self):
        for name in ("sigma", "epsilon", "tau_pos", "split_offset", "scale_shrink"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")


@dataclass
class DensifyResult:
    """Bookkeeping for one pass, enough to remap optimizer state."""

    selected: np.ndarray  # indices (in the input set) chosen for splitting
    removed: np.ndarray  # indices (in the post-split set) that were pruned
    parent_of: np.ndarray  # per output Gaussian: index in the input set
    is_child: np.ndarray  # per output Gaussian: True for freshly split children
    n_fallback: int  # splits that used the unprojected long axis


def _ensure_index(cloud: LidarCloud):
    if cloud.index is None:
        cloud.index = spatial.build(cloud.points)
    return cloud.index


def nearest_distances(gset: GaussianSet, cloud: LidarCloud):
    index = _ensure_index(cloud)
    idx, dist = index.nearest_many(gset.positions)
    return idx, dist


def prune(gset: GaussianSet, cloud: LidarCloud, cfg: DensifyConfig):
    """Remove Gaussians farther than sigma from the nearest LiDAR point or
    with opacity below epsilon. Returns (pruned set, removed indices)."""
    if len(gset) == 0:
        return gset.copy(), np.zeros(0, dtype=np.int64)
    _, dist = nearest_distances(gset, cloud)
    keep = (dist <= cfg.sigma) & (gset.opacities >= cfg.epsilon)
    keep_idx = np.nonzero(keep)[0]
    removed = np.nonzero(~keep)[0]
    return gset.take(keep_idx), removed


def select_split(gset: GaussianSet, cfg: DensifyConfig) -> np.ndarray:
    """Indices whose weighted-average NDC gradient exceeds tau_pos; Gaussians
    never rendered (zero weight) are skipped."""
    seen = gset.weight_accum > 0
    avg = np.zeros(len(gset))
    avg[seen] = gset.grad_accum[seen] / gset.weight_accum[seen]
    return np.nonzero(seen & (avg > cfg.tau_pos))[0]


def long_axis(g: Gaussian) -> np.ndarray:
    """Unit world direction of the largest-scale axis (rotation column);
    argmax ties break to the lowest index."""
    r = int(np.argmax(np.exp(g.log_scale)))
    return quat_to_rotmat(g.rotation)[:, r]


def split(gset: GaussianSet, indices, cloud: LidarCloud, cfg: DensifyConfig):
    """Replace each selected Gaussian with two children displaced along its
    long axis projected onto the tangent plane of the nearest LiDAR point.

    Returns (new set, parent_of, is_child, n_fallback)."""
    indices = np.asarray(indices, dtype=np.int64)
    n = len(gset)
    keep = np.setdiff1d(np.arange(n), indices)
    if len(indices) == 0:
        return gset.copy(), np.arange(n), np.zeros(n, dtype=bool), 0

    index = _ensure_index(cloud)
    rotmats = quat_to_rotmat(gset.rotations[indices])
    scales = np.exp(gset.log_scales[indices])
    r = np.argmax(scales, axis=1)
    axes = rotmats[np.arange(len(indices)), :, r]
    s_max = scales[np.arange(len(indices)), r]

    n_fallback = 0
    dirs = np.empty_like(axes)
    for j, gi in enumerate(indices):
        nn_idx, _ = index.nearest(gset.positions[gi])
        normal = cloud.normals[nn_idx]
        proj = spatial.project_to_tangent(axes[j], normal)
        norm = np.linalg.norm(proj)
        if norm < DEGENERATE_TANGENT * np.linalg.norm(axes[j]):
            log.info("split %d: long axis parallel to the local normal, "
                     "falling back to the unprojected axis", int(gi))
            dirs[j] = axes[j]
            n_fallback += 1
        else:
            dirs[j] = proj / norm

    offset = cfg.split_offset * s_max[:, None] * dirs
    child_pos = np.concatenate([gset.positions[indices] + offset,
                                gset.positions[indices] - offset])
    child_ls = np.tile(gset.log_scales[indices] - np.log(cfg.scale_shrink), (2, 1))
    child_rot = np.tile(gset.rotations[indices], (2, 1))
    child_op = np.tile(gset.logit_opacities[indices], 2)
    child_sh = np.tile(gset.sh[indices], (2, 1, 1))

    survivors = gset.take(keep)
    new = GaussianSet(
        positions=np.concatenate([survivors.positions, child_pos]),
        rotations=np.concatenate([survivors.rotations, child_rot]),
        log_scales=np.concatenate([survivors.log_scales, child_ls]),
        logit_opacities=np.concatenate([survivors.logit_opacities, child_op]),
        sh=np.concatenate([survivors.sh, child_sh]),
        grad_accum=np.concatenate([survivors.grad_accum, np.zeros(2 * len(indices))]),
        weight_accum=np.concatenate([survivors.weight_accum, np.zeros(2 * len(indices))]),
    )
    parent_of = np.concatenate([keep, indices, indices])
    is_child = np.concatenate([np.zeros(len(keep), dtype=bool),
                               np.ones(2 * len(indices), dtype=bool)])
    return new, parent_of, is_child, n_fallback


def densify_pass(gset: GaussianSet, cloud: LidarCloud, cfg: DensifyConfig):
    """One full pass: select -> split -> prune -> reset accumulators.

    Split runs first so children violating the distance/opacity predicates
    are culled immediately. Returns (new set, DensifyResult)."""
    cfg.validate()
    selected = select_split(gset, cfg)
    after_split, parent_of, is_child, n_fb = split(gset, selected, cloud, cfg)
    pruned, removed = prune(after_split, cloud, cfg)
    if len(pruned) == 0:
        raise EmptySetError(
            "densification pruned every Gaussian; re-initialize the set from "
            "the LiDAR cloud (larger sigma or fresh init_from_cloud)"
        )
    keep = np.setdiff1d(np.arange(len(after_split)), removed)
    pruned.reset_accumulators()
    result = DensifyResult(
        selected=selected,
        removed=removed,
        parent_of=parent_of[keep],
        is_child=is_child[keep],
        n_fallback=n_fb,
    )
    return pruned, result


def init_from_cloud(
    cloud: LidarCloud,
    sh_degree: int = 2,
    opacity: float = 0.1,
    base_color=(0.5, 0.5, 0.5),
    max_points: int = None,
    seed: int = 0,
) -> GaussianSet:
    """Seed one Gaussian per (optionally subsampled) LiDAR point: isotropic
    scale from the local mean 3-NN spacing, identity rotation, flat color."""
    if len(cloud) == 0:
        raise ValueError("cannot initialize from an empty cloud")
    points = cloud.points
    if max_points is not None and len(points) > max_points:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(points), size=max_points, replace=False))
        points = points[pick]
    n = len(points)
    index = spatial.build(points)
    k = min(4, n)
    _, dist = index.k_nearest(points, k=k)
    if k > 1:
        spacing = dist[:, 1:].mean(axis=1)
        spacing = np.maximum(spacing, 1e-4)
    else:
        spacing = np.full(n, 0.1)
    basis = (sh_degree + 1) ** 2
    sh = np.zeros((n, 3, basis))
    sh[:, :, 0] = sh_mod.color_to_sh0(np.asarray(base_color))[None, :]
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianSet(
        positions=points.copy(),
        rotations=rotations,
        log_scales=np.log(spacing)[:, None].repeat(3, axis=1),
        logit_opacities=np.full(n, float(np.log(opacity / (1 - opacity)))),
        sh=sh,
    )
