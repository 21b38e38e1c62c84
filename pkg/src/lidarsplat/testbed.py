"""Synthetic scenes with analytic ground truth.

Scenes are textured parallelogram patches (boxes decompose into faces).
Ground-truth images come from exact ray casting against the patches, never
from the splatting renderer, so they serve as an independent oracle; LiDAR
clouds are sampled uniformly by area with optional range noise along the
surface normal.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import camera as cam_mod
from . import spatial
from .scene import DepthNormalMaps, DistortedCamera, Image, LidarCloud


@dataclass
class Patch:
    origin: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    texture: dict

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.e1 = np.asarray(self.e1, dtype=np.float64).reshape(3)
        self.e2 = np.asarray(self.e2, dtype=np.float64).reshape(3)

    @property
    def normal_raw(self) -> np.ndarray:
        return np.cross(self.e1, self.e2)

    @property
    def area(self) -> float:
        return float(np.linalg.norm(self.normal_raw))

    @property
    def unit_normal(self) -> np.ndarray:
        n = self.normal_raw
        return n / np.linalg.norm(n)


def texture_color(tex: dict, a, b):
    """Color of texture coordinates (a, b) in [0,1]^2; returns (..., 3)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    kind = tex.get("kind", "flat")
    if kind == "flat":
        col = np.broadcast_to(np.asarray(tex["color"], dtype=np.float64),
                              a.shape + (3,)).copy()
    elif kind == "checkergrad":
        ca = np.asarray(tex["color_a"], dtype=np.float64)
        cb = np.asarray(tex["color_b"], dtype=np.float64)
        tu, tv = tex.get("tiles", (8, 8))
        soft = tex.get("soft", 0.25)
        s = np.sin(2 * np.pi * a * tu) * np.sin(2 * np.pi * b * tv)
        c = 0.5 + 0.5 * np.clip(s / soft, -1.0, 1.0)
        col = ca + (cb - ca) * c[..., None]
        gs = tex.get("grad", 0.0)
        if gs:
            col = col * (1.0 - gs * (1.0 - a))[..., None]
    else:
        raise ValueError(f"unknown texture kind '{kind}'")
    return np.clip(col, 0.0, 1.0)


def cast_rays(patches, origins: np.ndarray, dirs: np.ndarray):
    """First intersection of each ray with the patch set.

    Returns (t, patch_id, a, b); misses have t = inf and patch_id = -1.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    n = len(dirs)
    t_best = np.full(n, np.inf)
    pid = np.full(n, -1, dtype=np.int64)
    a_best = np.zeros(n)
    b_best = np.zeros(n)
    for k, p in enumerate(patches):
        nrm = p.normal_raw
        denom = dirs @ nrm
        safe = np.where(np.abs(denom) > 1e-15, denom, 1.0)
        t = ((p.origin - origins) @ nrm) / safe
        hit_pt = origins + t[:, None] * dirs
        w = hit_pt - p.origin
        g11, g12, g22 = p.e1 @ p.e1, p.e1 @ p.e2, p.e2 @ p.e2
        det = g11 * g22 - g12 * g12
        w1, w2 = w @ p.e1, w @ p.e2
        a = (g22 * w1 - g12 * w2) / det
        b = (g11 * w2 - g12 * w1) / det
        ok = (np.abs(denom) > 1e-15) & (t > 1e-9) & \
             (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1) & (t < t_best)
        t_best = np.where(ok, t, t_best)
        pid = np.where(ok, k, pid)
        a_best = np.where(ok, a, a_best)
        b_best = np.where(ok, b, b_best)
    return t_best, pid, a_best, b_best


def _camera_rays(cam: DistortedCamera, us, vs):
    """World-space rays through the given pixel coordinates.

    Directions have camera-frame z = 1, so the hit parameter t equals the
    camera-frame depth of the hit point.
    """
    uu, vv = cam_mod.undistort_grid(cam, us, vs)
    mx = (uu - cam.cx) / cam.fx
    my = (vv - cam.cy) / cam.fy
    dir_cam = np.stack([mx, my, np.ones_like(mx)], axis=-1)
    return dir_cam.reshape(-1, 3) @ cam.rotation, dir_cam  # world dirs, cam dirs


def render_ground_truth(patches, cam: DistortedCamera, supersample: int = 2,
                        background=(0.0, 0.0, 0.0)) -> Image:
    """Exact ray-cast color image, area-averaged over supersample^2 subrays."""
    H, W = cam.height, cam.width
    bg = np.asarray(background, dtype=np.float64)
    acc = np.zeros((H * W, 3))
    center = cam.center
    ys, xs = np.mgrid[0:H, 0:W]
    for i in range(supersample):
        for j in range(supersample):
            us = xs + (j + 0.5) / supersample
            vs = ys + (i + 0.5) / supersample
            dirs_w, _ = _camera_rays(cam, us, vs)
            t, pid, a, b = cast_rays(patches, center[None, :], dirs_w)
            col = np.tile(bg, (H * W, 1))
            for k, p in enumerate(patches):
                sel = pid == k
                if np.any(sel):
                    col[sel] = texture_color(p.texture, a[sel], b[sel])
            acc += col
    return Image(data=(acc / supersample ** 2).reshape(H, W, 3))


def ground_truth_maps(patches, cam: DistortedCamera) -> DepthNormalMaps:
    """Exact per-pixel depth (camera z) and camera-frame surface normal."""
    H, W = cam.height, cam.width
    ys, xs = np.mgrid[0:H, 0:W]
    dirs_w, dir_cam = _camera_rays(cam, xs + 0.5, ys + 0.5)
    t, pid, _, _ = cast_rays(patches, cam.center[None, :], dirs_w)
    hit = pid >= 0
    depth = np.where(hit, t, 0.0).reshape(H, W)
    normal = np.zeros((H * W, 3))
    dir_cam = dir_cam.reshape(-1, 3)
    for k, p in enumerate(patches):
        sel = pid == k
        if np.any(sel):
            n_cam = cam.rotation @ p.unit_normal
            flip = np.where(dir_cam[sel] @ n_cam > 0, -1.0, 1.0)
            normal[sel] = flip[:, None] * n_cam
    return DepthNormalMaps(
        depth=depth, normal=normal.reshape(H, W, 3), valid_mask=hit.reshape(H, W),
    )


def sample_lidar(patches, density: float, noise: float, rng) -> LidarCloud:
    """Uniform-by-area sampling: per patch, Poisson(area*density) points with
    exact oriented normals; optional Gaussian range noise along the normal."""
    pts, nrms = [], []
    for p in patches:
        n = int(rng.poisson(p.area * density))
        if n == 0:
            continue
        ab = rng.random((n, 2))
        x = p.origin + ab[:, 0:1] * p.e1 + ab[:, 1:2] * p.e2
        un = p.unit_normal
        if noise > 0:
            x = x + rng.normal(0.0, noise, size=n)[:, None] * un
        pts.append(x)
        nrms.append(np.tile(un, (n, 1)))
    if not pts:
        raise ValueError("scene produced no LiDAR points")
    points = np.concatenate(pts)
    normals = spatial._orient(np.concatenate(nrms), (0.0, 0.0, 1.0))
    cloud = LidarCloud(points=points, normals=normals)
    cloud.index = spatial.build(points)
    return cloud


def downsample_cloud(cloud: LidarCloud, fraction: float, seed: int = 0,
                     normal_k: int = 16) -> LidarCloud:
    """Seeded uniform subsample of ceil(fraction*n) points, normals
    re-estimated on the subsample."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must be in (0, 1]")
    n = len(cloud)
    k = int(np.ceil(fraction * n))
    if k == n:
        sub = cloud.points.copy()
    else:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(n, size=k, replace=False))
        sub = cloud.points[pick]
    kk = min(normal_k, len(sub))
    normals = (spatial.estimate_normals(sub, k=kk) if kk >= 3
               else np.tile([0.0, 0.0, 1.0], (len(sub), 1)))
    out = LidarCloud(points=sub, normals=normals)
    out.index = spatial.build(sub)
    return out


def _look_at(pos, target, up=(0.0, 0.0, 1.0)):
    pos = np.asarray(pos, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - pos
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return R, -R @ pos


def make_cameras(spec: dict):
    img = spec["image"]
    W, H = int(img["width"]), int(img["height"])
    fx = fy = float(img.get("focal", 0.9 * W))
    cams = []
    for ring in spec["rings"]:
        count = int(ring["count"])
        for i in range(count):
            theta = 2 * np.pi * (i + ring.get("phase", 0.0)) / count
            pos = np.array([
                ring["radius"] * np.cos(theta),
                ring["radius"] * np.sin(theta),
                ring["height"],
            ])
            R, t = _look_at(pos, ring.get("target", (0.0, 0.0, 1.0)))
            cams.append(DistortedCamera(
                fx=fx, fy=fy, cx=W / 2.0, cy=H / 2.0,
                k1=float(img.get("k1", 0.0)), k2=float(img.get("k2", 0.0)),
                rotation=R, translation=t, width=W, height=H,
                normalized_r=bool(img.get("normalized_r", True)),
            ))
    return cams


def sample_features(patches, cloud: LidarCloud, cam: DistortedCamera,
                    n_features: int, rng, margin: float = 4.0):
    """Visible-cloud-point features: exact projections of unoccluded LiDAR
    points with their known 3D positions. Returns (uv (F,2), xyz (F,3))."""
    idx, pix, depth = cam_mod.project_cloud(cam, cloud)
    inside = (pix[:, 0] >= margin) & (pix[:, 0] < cam.width - margin) & \
             (pix[:, 1] >= margin) & (pix[:, 1] < cam.height - margin)
    idx, pix, depth = idx[inside], pix[inside], depth[inside]
    if len(idx) == 0:
        return np.zeros((0, 2)), np.zeros((0, 3))
    center = cam.center
    dirs = cloud.points[idx] - center
    t, pid, _, _ = cast_rays(patches, center[None, :], dirs)
    visible = (pid >= 0) & (np.abs(t - 1.0) * np.linalg.norm(dirs, axis=1) < 0.05)
    idx, pix = idx[visible], pix[visible]
    if len(idx) > n_features:
        pick = np.sort(rng.choice(len(idx), size=n_features, replace=False))
        idx, pix = idx[pick], pix[pick]
    return pix, cloud.points[idx].copy()


@dataclass
class SceneData:
    spec: dict
    patches: list
    cloud: LidarCloud
    cameras: list
    names: list
    images: list  # ground-truth Image per camera
    gt_maps: list  # ground-truth DepthNormalMaps per camera
    features: list = field(default=None)  # (uv, xyz) per camera


def make_scene(spec: dict, with_features: bool = True) -> SceneData:
    """Build the full synthetic dataset a spec describes, deterministically
    under its seed."""
    if not spec.get("patches"):
        raise ValueError("scene spec lists no surface patches")
    rng = np.random.default_rng(int(spec.get("seed", 0)))
    patches = [Patch(origin=p["origin"], e1=p["e1"], e2=p["e2"], texture=p["texture"])
               for p in spec["patches"]]
    cloud = sample_lidar(patches, float(spec["lidar"]["density"]),
                         float(spec["lidar"].get("noise", 0.0)), rng)
    cams = make_cameras(spec)
    names = [f"view_{i:03d}" for i in range(len(cams))]
    ss = int(spec["image"].get("supersample", 2))
    images = [render_ground_truth(patches, c, supersample=ss) for c in cams]
    gt_maps = [ground_truth_maps(patches, c) for c in cams]
    features = None
    if with_features:
        nf = int(spec.get("n_features", 150))
        features = [sample_features(patches, cloud, c, nf, rng) for c in cams]
    return SceneData(spec=spec, patches=patches, cloud=cloud, cameras=cams,
                     names=names, images=images, gt_maps=gt_maps, features=features)


def _box_patches(x0, y0, x1, y1, z1, tex_top: dict, tex_side: dict):
    """Axis-aligned box on the ground plane as 5 patches (no bottom face)."""
    return [
        {"origin": [x0, y0, z1], "e1": [x1 - x0, 0, 0], "e2": [0, y1 - y0, 0], "texture": tex_top},
        {"origin": [x0, y0, 0], "e1": [x1 - x0, 0, 0], "e2": [0, 0, z1], "texture": tex_side},
        {"origin": [x0, y1, 0], "e1": [x1 - x0, 0, 0], "e2": [0, 0, z1], "texture": tex_side},
        {"origin": [x0, y0, 0], "e1": [0, y1 - y0, 0], "e2": [0, 0, z1], "texture": tex_side},
        {"origin": [x1, y0, 0], "e1": [0, y1 - y0, 0], "e2": [0, 0, z1], "texture": tex_side},
    ]


def standard_spec(seed: int = 42, width: int = 80, height: int = 80,
                  density: float = 8.0, noise: float = 0.0) -> dict:
    """The standard testbed: a 20x20 m ground plane, a 5x5x8 m box, and a
    ramp, watched by two oblique camera rings with radial distortion."""
    ground_tex = {"kind": "checkergrad", "color_a": [0.82, 0.78, 0.70],
                  "color_b": [0.28, 0.33, 0.40], "tiles": [10, 10],
                  "soft": 0.35, "grad": 0.25}
    box_top = {"kind": "checkergrad", "color_a": [0.75, 0.35, 0.30],
               "color_b": [0.90, 0.80, 0.55], "tiles": [4, 4],
               "soft": 0.35, "grad": 0.15}
    box_side = {"kind": "checkergrad", "color_a": [0.60, 0.55, 0.50],
                "color_b": [0.30, 0.22, 0.20], "tiles": [4, 6],
                "soft": 0.35, "grad": 0.2}
    ramp_tex = {"kind": "checkergrad", "color_a": [0.35, 0.60, 0.35],
                "color_b": [0.75, 0.85, 0.60], "tiles": [5, 4],
                "soft": 0.35, "grad": 0.2}
    patches = [
        {"origin": [-10, -10, 0], "e1": [20, 0, 0], "e2": [0, 20, 0], "texture": ground_tex},
    ]
    patches += _box_patches(-5.5, -0.5, -0.5, 4.5, 8.0, box_top, box_side)
    patches += [
        {"origin": [2, -8, 0], "e1": [5, 0, 0], "e2": [0, 4, 3], "texture": ramp_tex},
    ]
    return {
        "patches": patches,
        "lidar": {"density": density, "noise": noise},
        "rings": [
            {"count": 12, "height": 15.0, "radius": 14.0, "target": [0.0, 0.0, 1.0]},
            {"count": 12, "height": 25.0, "radius": 10.0, "target": [0.0, 0.0, 1.0],
             "phase": 0.5},
        ],
        "image": {"width": width, "height": height, "focal": 0.9 * width,
                  "k1": 0.05, "k2": 0.005, "normalized_r": True, "supersample": 2},
        "n_features": 150,
        "seed": int(seed),
    }


def save_spec(spec: dict, path):
    Path(path).write_text(json.dumps(spec, indent=2) + "\n")


def load_spec(path) -> dict:
    return json.loads(Path(path).read_text())


def save_features_csv(features, names, path):
    """CSV rows image_id,u,v,x,y,z (one per feature, 3D known)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "u", "v", "x", "y", "z"])
        for name, (uv, xyz) in zip(names, features):
            for (u, v), (x, y, z) in zip(uv, xyz):
                w.writerow([name, repr(float(u)), repr(float(v)),
                            repr(float(x)), repr(float(y)), repr(float(z))])


def load_features_csv(path):
    """Features grouped by image_id: {name: (uv (F,2), xyz (F,3) or None)}."""
    groups: dict = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        has_xyz = len(header) >= 6
        for row in reader:
            name = row[0]
            uv = [float(row[1]), float(row[2])]
            xyz = [float(row[3]), float(row[4]), float(row[5])] if has_xyz and len(row) >= 6 else None
            groups.setdefault(name, []).append((uv, xyz))
    out = {}
    for name, rows in groups.items():
        uv = np.array([r[0] for r in rows])
        xyz = np.array([r[1] for r in rows]) if rows[0][1] is not None else None
        out[name] = (uv, xyz)
    return out
