"""Command-line entry point: synth | align | train | render | eval.

Every subcommand accepts --config FILE (JSON, keys matching the long flag
names); explicit flags override the config file, and the resolved values are
written to a manifest.json in the output directory for reproducibility.
Library imports happen inside the handlers so --threads can cap the
rasterizer worker pool before the kernels load.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _load_config(path):
    if path is None:
        return {}
    with open(path) as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return doc


def _resolve(args, config: dict, keys):
    """Flag value if given, else config value, else the parser default."""
    out = {}
    for key in keys:
        flag_val = getattr(args, key)
        if flag_val is not None:
            out[key] = flag_val
        elif key in config:
            out[key] = config[key]
        else:
            out[key] = None
    return out


def _write_manifest(out_dir: Path, command: str, resolved: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command,
               "config": {k: v for k, v in resolved.items() if v is not None}}
    (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _parse_offset(text):
    if text is None:
        return None
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise ValueError("--offset expects 'x,y,z'")
    return parts


def _apply_offset(cloud, cams, offset):
    """Shift a georeferenced dataset into a local frame: points -= offset,
    camera translations updated so projections are unchanged."""
    import numpy as np
    if offset is None:
        return cloud, cams
    o = np.asarray(offset, dtype=np.float64)
    from .scene import LidarCloud
    from . import spatial
    shifted = LidarCloud(points=cloud.points - o, normals=cloud.normals)
    shifted.index = spatial.build(shifted.points)
    new_cams = [c.replace_pose(c.rotation, c.translation + c.rotation @ o) for c in cams]
    return shifted, new_cams


# ---------------------------------------------------------------------------
# dataset IO shared by train/render/eval
# ---------------------------------------------------------------------------

def load_dataset(dataset_dir, cameras_file=None, offset=None, with_images=True):
    from .image_io import load_png, load_pfm
    from .scene import load_cameras, load_ply_points

    dataset_dir = Path(dataset_dir)
    cloud = load_ply_points(dataset_dir / "cloud.ply")
    cam_path = Path(cameras_file) if cameras_file else dataset_dir / "cameras.json"
    cams, names = load_cameras(cam_path)
    cloud, cams = _apply_offset(cloud, cams, offset)
    images = None
    if with_images:
        images = [load_png(dataset_dir / "images" / f"{n}.png") for n in names]
    gt_depth = []
    for n in names:
        p = dataset_dir / "depth_gt" / f"{n}.pfm"
        gt_depth.append(load_pfm(p) if p.exists() else None)
    return cloud, cams, names, images, gt_depth


def _build_views(cloud, cams, names, images, indices, window):
    from .lidar_maps import densify_maps, splat_sparse
    from .trainer import TrainView

    views = []
    for i in indices:
        sparse = splat_sparse(cloud, cams[i])
        maps = densify_maps(sparse, cams[i], window=window)
        views.append(TrainView(camera=cams[i], image=images[i].data,
                               maps=maps, name=names[i]))
    return views


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    from . import testbed
    from .image_io import save_png, save_pfm
    from .scene import save_cameras, save_ply_points

    config = _load_config(args.config)
    keys = ["preset", "scene_spec", "seed", "width", "height", "density", "noise", "out"]
    r = _resolve(args, config, keys)
    out = Path(r["out"])
    if r["scene_spec"]:
        spec = testbed.load_spec(r["scene_spec"])
        if r["seed"] is not None:
            spec["seed"] = int(r["seed"])
    else:
        spec = testbed.standard_spec(
            seed=int(r["seed"] if r["seed"] is not None else 42),
            width=int(r["width"] or 80), height=int(r["height"] or 80),
            density=float(r["density"] or 8.0), noise=float(r["noise"] or 0.0),
        )
    scene = testbed.make_scene(spec)
    out.mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(exist_ok=True)
    (out / "depth_gt").mkdir(exist_ok=True)
    (out / "normal_gt").mkdir(exist_ok=True)
    testbed.save_spec(spec, out / "scene_spec.json")
    save_ply_points(scene.cloud, out / "cloud.ply")
    save_cameras(scene.cameras, out / "cameras.json", names=scene.names)
    for name, img, maps in zip(scene.names, scene.images, scene.gt_maps):
        save_png(img, out / "images" / f"{name}.png")
        save_pfm(maps.depth, out / "depth_gt" / f"{name}.pfm")
        save_pfm(maps.normal, out / "normal_gt" / f"{name}.pfm")
    testbed.save_features_csv(scene.features, scene.names, out / "features.csv")
    r["resolved_seed"] = spec["seed"]
    _write_manifest(out, "synth", r)
    print(f"synth: wrote {len(scene.cameras)} views, "
          f"{len(scene.cloud)} LiDAR points to {out}")
    return 0


def cmd_align(args):
    from .align import alignment_report
    from .scene import camera_to_dict, load_cameras, load_ply_points
    from .testbed import load_features_csv

    config = _load_config(args.config)
    keys = ["dataset", "out", "report", "radius", "offset"]
    r = _resolve(args, config, keys)
    dataset = Path(r["dataset"])
    cloud = load_ply_points(dataset / "cloud.ply")
    cams, names = load_cameras(dataset / "cameras.json")
    cloud, cams = _apply_offset(cloud, cams, _parse_offset(r["offset"]))
    feats = load_features_csv(dataset / "features.csv")
    features_per_cam = [feats.get(n, (None,))[0] if n in feats else [] for n in names]
    rows = alignment_report(cloud, cams, features_per_cam,
                            radius=float(r["radius"] or 3.0))

    out_path = Path(r["out"] or dataset / "cameras_refined.json")
    entries = []
    report = []
    for name, cam, row in zip(names, cams, rows):
        refined = row.camera if row.camera is not None else cam
        d = camera_to_dict(refined)
        d["name"] = name
        entries.append(d)
        report.append({
            "name": name, "n_correspondences": row.n_correspondences,
            "rms_before": row.rms_before if row.error is None else None,
            "rms_after": row.rms_after if row.error is None else None,
            "error": row.error,
        })
    out_path.write_text(json.dumps({"cameras": entries}, indent=2) + "\n")
    report_path = Path(r["report"] or dataset / "alignment_report.json")
    report_path.write_text(json.dumps(report, indent=2) + "\n")
    _write_manifest(out_path.parent, "align", r)
    n_ok = sum(1 for row in rows if row.error is None)
    print(f"align: refined {n_ok}/{len(rows)} cameras -> {out_path}")
    return 0


_TRAIN_KEYS = [
    "dataset", "out", "cameras", "iterations", "seed", "threads", "sigma",
    "epsilon", "tau_pos", "alpha", "beta", "gamma", "lam",
    "densify_interval", "densify_start", "densify_stop", "sh_degree",
    "val_interval", "checkpoint_interval", "map_window", "offset",
    "init_max_points",
]


def cmd_train(args):
    from . import densify as densify_mod
    from .trainer import TrainConfig, split_views, train

    config = _load_config(args.config)
    r = _resolve(args, config, _TRAIN_KEYS)
    out = Path(r["out"])
    cloud, cams, names, images, _ = load_dataset(
        r["dataset"], cameras_file=r["cameras"], offset=_parse_offset(r["offset"]))

    cfg = TrainConfig()
    for key in ("iterations", "seed", "densify_interval", "densify_start",
                "densify_stop", "sh_degree", "val_interval",
                "checkpoint_interval", "map_window", "init_max_points"):
        if r[key] is not None:
            setattr(cfg, key, int(r[key]))
    for key in ("sigma", "epsilon", "tau_pos", "alpha", "beta", "gamma", "lam"):
        if r[key] is not None:
            setattr(cfg, key, float(r[key]))

    train_idx, val_idx, test_idx = split_views(len(cams), cfg.seed)
    views = _build_views(cloud, cams, names, images, train_idx, cfg.map_window)
    val_views = _build_views(cloud, cams, names, images, val_idx, cfg.map_window)

    gset = densify_mod.init_from_cloud(
        cloud, sh_degree=cfg.sh_degree, opacity=cfg.init_opacity,
        max_points=cfg.init_max_points, seed=cfg.seed)

    gset, tlog = train(gset, cloud, views, cfg, val_views=val_views,
                       checkpoint_dir=out / "checkpoints")
    out.mkdir(parents=True, exist_ok=True)
    tlog.write_csv(out / "log.csv")
    split_doc = {"train": [names[i] for i in train_idx],
                 "val": [names[i] for i in val_idx],
                 "test": [names[i] for i in test_idx]}
    (out / "split.json").write_text(json.dumps(split_doc, indent=2) + "\n")
    _write_manifest(out, "train", r)
    print(f"train: {cfg.iterations} iterations, final count {len(gset)}, "
          f"checkpoints in {out / 'checkpoints'}")
    return 0


def cmd_render(args):
    from . import rasterizer
    from .image_io import save_png, save_pfm
    from .scene import load_ply_gaussians
    import numpy as np

    config = _load_config(args.config)
    keys = ["checkpoint", "dataset", "out", "views", "cameras", "offset", "threads"]
    r = _resolve(args, config, keys)
    out = Path(r["out"])
    cloud, cams, names, _, _ = load_dataset(
        r["dataset"], cameras_file=r["cameras"], offset=_parse_offset(r["offset"]),
        with_images=False)
    gset = load_ply_gaussians(r["checkpoint"])
    if r["views"] in (None, "all"):
        indices = range(len(cams))
    else:
        indices = [int(v) for v in str(r["views"]).split(",")]
    out.mkdir(parents=True, exist_ok=True)
    for i in indices:
        o = rasterizer.render(gset, cams[i])
        save_png(np.clip(o.color, 0.0, 1.0), out / f"{names[i]}.png")
        save_pfm(o.depth, out / f"{names[i]}.depth.pfm")
        save_pfm(o.normal, out / f"{names[i]}.normal.pfm")
    _write_manifest(out, "render", r)
    print(f"render: wrote {len(list(indices))} views to {out}")
    return 0


def cmd_eval(args):
    from . import rasterizer
    from .metrics import lidar_rmse, psnr, ssim
    from .scene import load_ply_gaussians
    from .trainer import split_views
    import numpy as np

    config = _load_config(args.config)
    keys = ["checkpoint", "dataset", "out", "split", "seed", "offset", "threads"]
    r = _resolve(args, config, keys)
    cloud, cams, names, images, gt_depth = load_dataset(
        r["dataset"], offset=_parse_offset(r["offset"]))
    gset = load_ply_gaussians(r["checkpoint"])
    split = r["split"] or "test"
    seed = int(r["seed"] if r["seed"] is not None else 0)
    train_idx, val_idx, test_idx = split_views(len(cams), seed)
    indices = {"train": train_idx, "val": val_idx, "test": test_idx,
               "all": np.arange(len(cams))}[split]

    rows = []
    for i in indices:
        o = rasterizer.render(gset, cams[i])
        col = np.clip(o.color, 0.0, 1.0)
        row = {"name": names[i],
               "psnr": _json_float(psnr(col, images[i].data)),
               "ssim": _json_float(ssim(col, images[i].data))}
        if gt_depth[i] is not None:
            mask = o.valid_mask & (gt_depth[i] > 0)
            row["depth_mae"] = (float(np.abs(o.depth - gt_depth[i])[mask].mean())
                                if mask.any() else None)
        rows.append(row)
    finite = [row["psnr"] for row in rows if isinstance(row["psnr"], float)]
    report = {
        "split": split,
        "views": rows,
        "mean_psnr": float(np.mean(finite)) if finite else "inf",
        "lidar_rmse": lidar_rmse(gset, cloud),
    }
    out = Path(r["out"] or "metrics.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2) + "\n")
    _write_manifest(out.parent, "eval", r)
    print(f"eval[{split}]: mean PSNR {report['mean_psnr']}, "
          f"lidar RMSE {report['lidar_rmse']:.4f} -> {out}")
    return 0


def _json_float(x):
    import math
    return "inf" if math.isinf(x) else float(x)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lidarsplat",
        description="LiDAR-constrained Gaussian splatting: synthesize test "
                    "scenes, align cameras, train, render, and evaluate.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    sp.add_argument("--out", required=True, help="output dataset directory")
    sp.add_argument("--preset", default=None, help="scene preset (standard)")
    sp.add_argument("--scene-spec", dest="scene_spec", default=None,
                    help="scene spec JSON overriding the preset")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--width", type=int, default=None)
    sp.add_argument("--height", type=int, default=None)
    sp.add_argument("--density", type=float, default=None, help="LiDAR pts/m^2")
    sp.add_argument("--noise", type=float, default=None, help="LiDAR range noise sigma (m)")
    sp.add_argument("--config", default=None)
    sp.set_defaults(func=cmd_synth)

    ap = sub.add_parser("align", help="refine camera poses against the LiDAR cloud")
    ap.add_argument("--dataset", required=True)
    ap.add_argument("--out", default=None, help="refined cameras JSON")
    ap.add_argument("--report", default=None, help="RMS report JSON")
    ap.add_argument("--radius", type=float, default=None,
                    help="correspondence search radius, px")
    ap.add_argument("--offset", default=None, help="x,y,z constant frame offset")
    ap.add_argument("--config", default=None)
    ap.set_defaults(func=cmd_align)

    tp = sub.add_parser("train", help="optimize a Gaussian set on a dataset")
    tp.add_argument("--dataset", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--cameras", default=None, help="camera JSON overriding the dataset's")
    tp.add_argument("--iterations", type=int, default=None)
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--threads", type=int, default=None)
    tp.add_argument("--sigma", type=float, default=None, help="prune distance threshold, m")
    tp.add_argument("--epsilon", type=float, default=None, help="prune opacity threshold")
    tp.add_argument("--tau-pos", dest="tau_pos", type=float, default=None)
    tp.add_argument("--alpha", type=float, default=None, help="depth loss weight")
    tp.add_argument("--beta", type=float, default=None, help="normal loss weight")
    tp.add_argument("--gamma", type=float, default=None, help="scale loss weight")
    tp.add_argument("--lam", type=float, default=None, help="D-SSIM share")
    tp.add_argument("--densify-interval", dest="densify_interval", type=int, default=None)
    tp.add_argument("--densify-start", dest="densify_start", type=int, default=None)
    tp.add_argument("--densify-stop", dest="densify_stop", type=int, default=None)
    tp.add_argument("--sh-degree", dest="sh_degree", type=int, default=None)
    tp.add_argument("--val-interval", dest="val_interval", type=int, default=None)
    tp.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int, default=None)
    tp.add_argument("--map-window", dest="map_window", type=int, default=None)
    tp.add_argument("--init-max-points", dest="init_max_points", type=int, default=None)
    tp.add_argument("--offset", default=None)
    tp.add_argument("--config", default=None)
    tp.set_defaults(func=cmd_train)

    rp = sub.add_parser("render", help="render views from a checkpoint")
    rp.add_argument("--checkpoint", required=True)
    rp.add_argument("--dataset", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--views", default=None, help="comma-separated indices or 'all'")
    rp.add_argument("--cameras", default=None)
    rp.add_argument("--threads", type=int, default=None)
    rp.add_argument("--offset", default=None)
    rp.add_argument("--config", default=None)
    rp.set_defaults(func=cmd_render)

    ep = sub.add_parser("eval", help="PSNR/SSIM/LiDAR-RMSE metrics report")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--dataset", required=True)
    ep.add_argument("--out", default=None, help="metrics JSON path")
    ep.add_argument("--split", default=None, choices=["train", "val", "test", "all"])
    ep.add_argument("--seed", type=int, default=None,
                    help="split seed (must match the training run)")
    ep.add_argument("--threads", type=int, default=None)
    ep.add_argument("--offset", default=None)
    ep.add_argument("--config", default=None)
    ep.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = getattr(args, "threads", None)
    if threads is not None:
        if threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 1
        os.environ.setdefault("NUMBA_NUM_THREADS", str(threads))
        import numba
        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
    try:
        return args.func(args)
    except Exception as exc:  # surface one actionable line, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
