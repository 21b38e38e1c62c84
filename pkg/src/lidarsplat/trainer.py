"""The optimization loop: render, loss, backward, adaptive-moment update,
and scheduled LiDAR-constrained densification.

Runs are bit-reproducible for a fixed seed: view sampling uses a seeded
generator, the rasterizer is deterministic for any worker count, and all
reductions happen in fixed order.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import densify as densify_mod
from . import rasterizer
from .losses import LossWeights, total_loss
from .metrics import psnr
from .scene import (DepthNormalMaps, DistortedCamera, GaussianSet, LidarCloud,
                    MIN_SCALE, quat_normalize, save_ply_gaussians)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    iterations: int = 30000
    seed: int = 0
    sh_degree: int = 2
    # densification schedule and thresholds
    densify_interval: int = 50
    densify_start: int = 500
    densify_stop: int = None  # defaults to iterations // 2
    sigma: float = 1.0
    epsilon: float = 0.005
    tau_pos: float = 0.0002
    split_offset: float = 0.5
    scale_shrink: float = 1.6
    # loss weights
    alpha: float = 100.0
    beta: float = 0.001
    gamma: float = 0.001
    lam: float = 0.2
    literal_depth: bool = False
    reduction: str = "mean"
    # learning rates; position decays exponentially and scales by extent
    lr_position_init: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_sh: float = 2.5e-3
    lr_sh_rest_div: float = 20.0
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15
    # bookkeeping
    val_interval: int = 100
    checkpoint_interval: int = 0  # 0 disables periodic checkpoints
    background: tuple = (0.0, 0.0, 0.0)
    init_opacity: float = 0.1
    init_max_points: int = None
    map_window: int = 21

    def validate(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        stop = self.densify_stop if self.densify_stop is not None else self.iterations // 2
        if self.iterations and not (0 < self.densify_start):
            raise ValueError("densify_start must be positive")
        if stop > self.iterations:
            raise ValueError("densify_stop must not exceed iterations")
        if self.densify_interval < 1:
            raise ValueError("densify_interval must be >= 1")

    def densify_config(self) -> densify_mod.DensifyConfig:
        return densify_mod.DensifyConfig(
            sigma=self.sigma, epsilon=self.epsilon, tau_pos=self.tau_pos,
            interval=self.densify_interval, split_offset=self.split_offset,
            scale_shrink=self.scale_shrink,
        )

    def weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta=self.beta,
                           gamma=self.gamma, lam=self.lam)


@dataclass
class TrainView:
    camera: DistortedCamera
    image: np.ndarray  # ground-truth color (H, W, 3) in [0,1]
    maps: DepthNormalMaps  # LiDAR-derived depth/normal maps
    name: str = ""


def split_views(n: int, seed: int):
    """Seeded 70/15/15 train/val/test split of view indices."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_train = max(1, int(round(0.7 * n)))
    n_val = int(round(0.15 * n))
    n_val = min(n_val, n - n_train)
    train = np.sort(perm[:n_train])
    val = np.sort(perm[n_train:n_train + n_val])
    test = np.sort(perm[n_train + n_val:])
    return train, val, test


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def adam_init(params: dict) -> dict:
    state = {"t": 0}
    for name, p in params.items():
        state[name] = {"m": np.zeros_like(p), "v": np.zeros_like(p)}
    return state


def adam_step(params: dict, grads: dict, state: dict, lrs: dict,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
    """Standard adaptive-moment update, in place. `lrs` values may be scalars
    or arrays broadcastable against the parameter's trailing axes."""
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        s = state[name]
        s["m"] = beta1 * s["m"] + (1 - beta1) * g
        s["v"] = beta2 * s["v"] + (1 - beta2) * (g * g)
        m_hat = s["m"] / bc1
        v_hat = s["v"] / bc2
        p -= lrs[name] * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def _remap_adam(state: dict, parent_of: np.ndarray, is_child: np.ndarray) -> dict:
    """Carry optimizer moments across a densify pass: survivors keep theirs,
    children start fresh."""
    new = {"t": state["t"]}
    for name, s in state.items():
        if name == "t":
            continue
        m, v = s["m"][parent_of], s["v"][parent_of]
        m[is_child] = 0.0
        v[is_child] = 0.0
        new[name] = {"m": m, "v": v}
    return new


def position_lr(cfg: TrainConfig, extent: float, it: int) -> float:
    if cfg.iterations <= 0:
        return cfg.lr_position_init * extent
    frac = min(max(it / cfg.iterations, 0.0), 1.0)
    ratio = cfg.lr_position_final / cfg.lr_position_init
    return extent * cfg.lr_position_init * ratio ** frac


def scene_extent(cloud: LidarCloud) -> float:
    center = cloud.points.mean(axis=0)
    return float(np.max(np.linalg.norm(cloud.points - center, axis=1)))


# ---------------------------------------------------------------------------
# Logging containers
# ---------------------------------------------------------------------------

LOG_FIELDS = ["iteration", "l1", "dssim", "depth", "normal", "scale",
              "total", "count", "val_psnr"]


@dataclass
class DensifyEvent:
    iteration: int
    count_before: int
    count_after: int
    n_selected: int
    n_removed: int
    max_nn_dist: float
    min_opacity: float
    rmse: float


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    events: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=LOG_FIELDS)
            w.writeheader()
            for row in self.rows:
                w.writerow(row)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    return repr(float(x))


def save_optimizer_state(state: dict, path):
    payload = {"t": np.int64(state["t"])}
    for name, s in state.items():
        if name == "t":
            continue
        payload[f"{name}__m"] = s["m"]
        payload[f"{name}__v"] = s["v"]
    np.savez(path, **payload)


def load_optimizer_state(path) -> dict:
    data = np.load(path)
    state = {"t": int(data["t"])}
    for key in data.files:
        if key == "t":
            continue
        name, kind = key.rsplit("__", 1)
        state.setdefault(name, {})[kind] = data[key]
    return state


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------

def _params_of(gset: GaussianSet) -> dict:
    return {
        "positions": gset.positions,
        "rotations": gset.rotations,
        "log_scales": gset.log_scales,
        "logit_opacities": gset.logit_opacities,
        "sh": gset.sh,
    }


def _lr_table(cfg: TrainConfig, extent: float, it: int, basis: int) -> dict:
    lr_sh = np.full(basis, cfg.lr_sh)
    if basis > 1:
        lr_sh[1:] /= cfg.lr_sh_rest_div
    return {
        "positions": position_lr(cfg, extent, it),
        "rotations": cfg.lr_rotation,
        "log_scales": cfg.lr_scale,
        "logit_opacities": cfg.lr_opacity,
        "sh": lr_sh,  # broadcasts over (N, 3, basis)
    }


def train(
    gset: GaussianSet,
    cloud: LidarCloud,
    views: list,
    cfg: TrainConfig,
    val_views: list = None,
    checkpoint_dir=None,
    on_densify=None,
):
    """Optimize `gset` against the training views. Returns (set, TrainLog).

    `views` are the training views (each a TrainView); `val_views` drive the
    periodic PSNR log column. Aborts with a descriptive error on NaN loss or
    when densification empties the set.
    """
    cfg.validate()
    if len(views) == 0:
        raise ValueError("no training views")
    if len(gset) == 0:
        raise ValueError("initial Gaussian set is empty")
    rng = np.random.default_rng(cfg.seed)
    extent = scene_extent(cloud)
    stop = cfg.densify_stop if cfg.densify_stop is not None else cfg.iterations // 2
    dcfg = cfg.densify_config()
    weights = cfg.weights()
    bg = np.asarray(cfg.background, dtype=np.float64)

    gset = gset.copy()
    state = adam_init(_params_of(gset))
    tlog = TrainLog()
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    order = np.zeros(0, dtype=np.int64)
    pos_in_epoch = 0
    for it in range(1, cfg.iterations + 1):
        if pos_in_epoch >= len(order):
            order = rng.permutation(len(views))
            pos_in_epoch = 0
        view = views[order[pos_in_epoch]]
        pos_in_epoch += 1

        out = rasterizer.render(gset, view.camera, background=bg)
        total, comps, lgrads = total_loss(
            out, view.image, view.maps, gset, weights,
            literal_depth=cfg.literal_depth, reduction=cfg.reduction,
        )
        if not math.isfinite(total):
            bad = [k for k, v in comps.items() if not math.isfinite(v)]
            raise RuntimeError(
                f"non-finite loss at iteration {it}: components {bad or 'combined'}"
            )
        pgrads, ndc_norm, coverage = rasterizer.render_backward(
            gset, view.camera, out,
            d_color=lgrads["d_color"], d_depth=lgrads["d_depth"],
            d_normal=lgrads["d_normal"],
        )
        pgrads.log_scales += lgrads["d_log_scales"]

        grads = {
            "positions": pgrads.positions,
            "rotations": pgrads.rotations,
            "log_scales": pgrads.log_scales,
            "logit_opacities": pgrads.logit_opacities,
            "sh": pgrads.sh,
        }
        adam_step(_params_of(gset), grads, state,
                  _lr_table(cfg, extent, it, gset.sh.shape[2]),
                  beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
        gset.rotations = quat_normalize(gset.rotations)
        np.maximum(gset.log_scales, np.log(MIN_SCALE), out=gset.log_scales)

        rasterizer.accumulate_densify_stats(gset, ndc_norm, coverage)

        if (cfg.densify_start <= it <= stop) and it % cfg.densify_interval == 0:
            before = len(gset)
            try:
                gset, result = densify_mod.densify_pass(gset, cloud, dcfg)
            except densify_mod.EmptySetError as exc:
                raise RuntimeError(
                    f"iteration {it}: {exc}"
                ) from exc
            state = _remap_adam(state, result.parent_of, result.is_child)
            _, dist = densify_mod.nearest_distances(gset, cloud)
            event = DensifyEvent(
                iteration=it, count_before=before, count_after=len(gset),
                n_selected=len(result.selected), n_removed=len(result.removed),
                max_nn_dist=float(dist.max()),
                min_opacity=float(gset.opacities.min()),
                rmse=float(np.sqrt(np.mean(dist ** 2))),
            )
            tlog.events.append(event)
            if on_densify is not None:
                on_densify(it, gset, result)

        val_psnr = None
        if val_views and cfg.val_interval and it % cfg.val_interval == 0:
            val_psnr = evaluate_psnr(gset, val_views, bg)

        tlog.rows.append({
            "iteration": it,
            "l1": _fmt(comps["l1"]), "dssim": _fmt(comps["dssim"]),
            "depth": _fmt(comps["depth"]), "normal": _fmt(comps["normal"]),
            "scale": _fmt(comps["scale"]), "total": _fmt(total),
            "count": len(gset), "val_psnr": _fmt(val_psnr),
        })

        if checkpoint_dir is not None and cfg.checkpoint_interval \
                and it % cfg.checkpoint_interval == 0:
            ply = checkpoint_dir / f"iter_{it:06d}.ply"
            save_ply_gaussians(gset, ply)
            save_optimizer_state(state, checkpoint_dir / f"iter_{it:06d}.opt.npz")
            tlog.checkpoints.append((it, str(ply)))

    if checkpoint_dir is not None:
        ply = checkpoint_dir / "final.ply"
        save_ply_gaussians(gset, ply)
        save_optimizer_state(state, checkpoint_dir / "final.opt.npz")
        tlog.checkpoints.append((cfg.iterations, str(ply)))
    return gset, tlog


def evaluate_psnr(gset: GaussianSet, views: list, background=None) -> float:
    """Mean PSNR of rendered (clipped) color against the views' images."""
    vals = []
    for view in views:
        out = rasterizer.render(gset, view.camera, background=background)
        vals.append(psnr(np.clip(out.color, 0.0, 1.0),
                         getattr(view.image, "data", view.image)))
    finite = [v for v in vals if math.isfinite(v)]
    if not finite:
        return math.inf
    return float(np.mean(finite)) if len(finite) == len(vals) else math.inf
