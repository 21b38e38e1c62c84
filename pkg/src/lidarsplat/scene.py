"""Core scene types shared by every stage: Gaussians, LiDAR clouds, cameras,
images, depth/normal maps, plus their validation and on-disk formats.

Conventions used throughout the package:
  * world and camera coordinates are metric (meters), cameras look along +z,
  * rotations are unit quaternions stored (w, x, y, z),
  * per-axis scales are stored as logs, opacity as a logit,
  * spherical-harmonic color coefficients are stored (channel, basis).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MIN_SCALE = 1e-8  # meters; smaller axes are clamped, never rejected

_SH_BASIS_COUNTS = (1, 4, 9, 16)  # degrees 0..3


class PlyParseError(ValueError):
    """Raised for malformed PLY input; message carries the byte offset."""


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from quaternions (w, x, y, z); accepts (..., 4)."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass
class Gaussian:
    """One splat: position (m, world), unit quaternion, log scales (m),
    logit opacity, and SH color coefficients of shape (3, basis)."""

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    logit_opacity: float
    sh_coeffs: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.log_scale = np.maximum(self.log_scale, np.log(MIN_SCALE))
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float64)
        if self.sh_coeffs.ndim != 2 or self.sh_coeffs.shape[0] != 3:
            raise ValueError("sh_coeffs must have shape (3, basis)")
        if self.sh_coeffs.shape[1] not in _SH_BASIS_COUNTS:
            raise ValueError(
                f"sh basis count {self.sh_coeffs.shape[1]} not in {_SH_BASIS_COUNTS}"
            )

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.logit_opacity))

    def validate(self):
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-9:
            raise ValueError("quaternion not unit norm")
        if not np.all(np.isfinite(self.position)):
            raise ValueError("non-finite position")
        s = self.scale
        if not (np.all(np.isfinite(s)) and np.all(s > 0)):
            raise ValueError("scales must be positive and finite")
        if not (0.0 < self.opacity < 1.0):
            raise ValueError("opacity out of (0,1)")


def covariance(g: Gaussian) -> np.ndarray:
    """World covariance R * diag(scale^2) * R^T of a single Gaussian."""
    R = quat_to_rotmat(g.rotation)
    S2 = np.diag(np.exp(2.0 * g.log_scale))
    return R @ S2 @ R.T


def covariance_batch(rotations: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """(N,3,3) world covariances from (N,4) quaternions and (N,3) log scales."""
    R = quat_to_rotmat(rotations)
    s2 = np.exp(2.0 * log_scales)
    return np.einsum("nij,nj,nkj->nik", R, s2, R)


@dataclass
class GaussianSet:
    """The optimizable scene, stored struct-of-arrays.

    grad_accum / weight_accum are the densification statistics: running sums
    of (coverage-weighted NDC gradient norm) and coverage per Gaussian.
    """

    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) quaternions (w, x, y, z)
    log_scales: np.ndarray  # (N, 3)
    logit_opacities: np.ndarray  # (N,)
    sh: np.ndarray  # (N, 3, basis)
    grad_accum: np.ndarray = None  # (N,)
    weight_accum: np.ndarray = None  # (N,)

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        self.rotations = np.atleast_2d(np.asarray(self.rotations, dtype=np.float64))
        self.log_scales = np.atleast_2d(np.asarray(self.log_scales, dtype=np.float64))
        self.log_scales = np.maximum(self.log_scales, np.log(MIN_SCALE))
        self.logit_opacities = np.asarray(self.logit_opacities, dtype=np.float64).reshape(-1)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        n = len(self.positions)
        if self.sh.ndim != 3 or self.sh.shape[:2] != (n, 3):
            raise ValueError("sh must have shape (N, 3, basis)")
        if n and self.sh.shape[2] not in _SH_BASIS_COUNTS:
            raise ValueError(f"sh basis count {self.sh.shape[2]} not in {_SH_BASIS_COUNTS}")
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
        if self.weight_accum is None:
            self.weight_accum = np.zeros(n)
        self.grad_accum = np.asarray(self.grad_accum, dtype=np.float64).reshape(-1)
        self.weight_accum = np.asarray(self.weight_accum, dtype=np.float64).reshape(-1)
        for name in ("rotations", "logit_opacities", "grad_accum", "weight_accum"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length {len(getattr(self, name))} != {n}")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def sh_degree(self) -> int:
        return {1: 0, 4: 1, 9: 2, 16: 3}[self.sh.shape[2]]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.logit_opacities)

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            position=self.positions[i],
            rotation=self.rotations[i],
            log_scale=self.log_scales[i],
            logit_opacity=float(self.logit_opacities[i]),
            sh_coeffs=self.sh[i],
        )

    def take(self, indices) -> "GaussianSet":
        """New set restricted to `indices`; accumulators compacted consistently."""
        idx = np.asarray(indices, dtype=np.int64)
        return GaussianSet(
            positions=self.positions[idx].copy(),
            rotations=self.rotations[idx].copy(),
            log_scales=self.log_scales[idx].copy(),
            logit_opacities=self.logit_opacities[idx].copy(),
            sh=self.sh[idx].copy(),
            grad_accum=self.grad_accum[idx].copy(),
            weight_accum=self.weight_accum[idx].copy(),
        )

    def copy(self) -> "GaussianSet":
        return self.take(np.arange(len(self)))

    def reset_accumulators(self):
        self.grad_accum[:] = 0.0
        self.weight_accum[:] = 0.0

    def renormalize_rotations(self):
        self.rotations = quat_normalize(self.rotations)

    @staticmethod
    def from_gaussians(gaussians) -> "GaussianSet":
        gs = list(gaussians)
        if not gs:
            return empty_set()
        return GaussianSet(
            positions=np.stack([g.position for g in gs]),
            rotations=np.stack([g.rotation for g in gs]),
            log_scales=np.stack([g.log_scale for g in gs]),
            logit_opacities=np.array([g.logit_opacity for g in gs]),
            sh=np.stack([g.sh_coeffs for g in gs]),
        )


def empty_set(sh_basis: int = 1) -> GaussianSet:
    return GaussianSet(
        positions=np.zeros((0, 3)),
        rotations=np.zeros((0, 4)),
        log_scales=np.zeros((0, 3)),
        logit_opacities=np.zeros(0),
        sh=np.zeros((0, 3, sh_basis)),
    )


@dataclass
class LidarCloud:
    """Fixed benchmark points (m, world) with unit normals and a lazily built
    nearest-neighbor index (see spatial.build)."""

    points: np.ndarray  # (N, 3)
    normals: np.ndarray = None  # (N, 3) unit
    index: object = field(default=None, repr=False)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if self.normals is not None:
            self.normals = np.atleast_2d(np.asarray(self.normals, dtype=np.float64))
            if self.normals.shape != self.points.shape:
                raise ValueError("normals shape must match points")

    def __len__(self) -> int:
        return len(self.points)

    def validate(self):
        if not np.all(np.isfinite(self.points)):
            raise ValueError("non-finite LiDAR point")
        if self.normals is not None:
            norms = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-9):
                raise ValueError("LiDAR normals must be unit norm")


@dataclass
class DistortedCamera:
    """Pinhole intrinsics + even-order radial distortion (k1 r^2 + k2 r^4)
    + pose R, t mapping world to camera (p_cam = R p + t).

    normalized_r selects whether the distortion radius is measured in pixel
    units of the ideal image point (default) or in normalized image-plane
    units (X/Z, Y/Z).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    k1: float
    k2: float
    rotation: np.ndarray  # (3, 3) orthonormal, det +1
    translation: np.ndarray  # (3,)
    width: int
    height: int
    normalized_r: bool = False

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)

    def validate(self):
        R = self.rotation
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise ValueError("camera rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("camera rotation determinant != 1")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates (-R^T t)."""
        return -self.rotation.T @ self.translation

    def replace_pose(self, rotation: np.ndarray, translation: np.ndarray) -> "DistortedCamera":
        return DistortedCamera(
            fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
            k1=self.k1, k2=self.k2,
            rotation=np.asarray(rotation, dtype=np.float64).copy(),
            translation=np.asarray(translation, dtype=np.float64).copy(),
            width=self.width, height=self.height,
            normalized_r=self.normalized_r,
        )


@dataclass
class Image:
    """Row-major float image in [0,1]; data has shape (height, width, channels)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3 or self.data.shape[2] not in (1, 3):
            raise ValueError("image data must be (H, W, 1|3)")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def validate(self):
        if not np.all(np.isfinite(self.data)):
            raise ValueError("non-finite pixel value")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("pixel values outside [0,1]")


@dataclass
class DepthNormalMaps:
    """Per-pixel depth (m) and unit camera-frame normal with a validity mask.

    Invalid pixels carry sentinel values and are excluded from every loss sum.
    """

    depth: np.ndarray  # (H, W)
    normal: np.ndarray  # (H, W, 3)
    valid_mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.normal = np.asarray(self.normal, dtype=np.float64)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)

    def validate(self):
        v = self.valid_mask
        if np.any(self.depth[v] <= 0):
            raise ValueError("valid pixels must have positive depth")
        norms = np.linalg.norm(self.normal[v], axis=-1)
        if norms.size and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError("valid pixels must have unit normals")

    @staticmethod
    def all_invalid(height: int, width: int) -> "DepthNormalMaps":
        return DepthNormalMaps(
            depth=np.zeros((height, width)),
            normal=np.zeros((height, width, 3)),
            valid_mask=np.zeros((height, width), dtype=bool),
        )


# ---------------------------------------------------------------------------
# PLY interchange (binary little-endian float32)
# ---------------------------------------------------------------------------

def _ply_header(properties, count: int) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {count}"]
    lines += [f"property float {name}" for name in properties]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def _gaussian_property_names(sh_basis: int):
    names = ["x", "y", "z"]
    names += [f"rot_{i}" for i in range(4)]
    names += [f"log_scale_{i}" for i in range(3)]
    names += ["logit_opacity"]
    names += [f"sh_{i}" for i in range(3 * sh_basis)]  # index = channel*basis + b
    return names


def save_ply_gaussians(gset: GaussianSet, path):
    """Write a Gaussian set as binary little-endian float32 PLY."""
    n = len(gset)
    basis = gset.sh.shape[2]
    cols = np.hstack([
        gset.positions,
        gset.rotations,
        gset.log_scales,
        gset.logit_opacities[:, None],
        gset.sh.reshape(n, 3 * basis),
    ]).astype("<f4")
    with open(path, "wb") as f:
        f.write(_ply_header(_gaussian_property_names(basis), n))
        f.write(cols.tobytes())


def _parse_ply_header(raw: bytes, path):
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise PlyParseError(f"{path}: missing PLY header/end_header (offset 0)")
    header = raw[: end + len(b"end_header\n")]
    body_offset = len(header)
    count = None
    properties = []
    for line in header.decode("ascii", errors="replace").splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            if parts[1] != "binary_little_endian":
                raise PlyParseError(f"{path}: unsupported format '{parts[1]}' (offset 4)")
        elif parts[0] == "element":
            if parts[1] != "vertex":
                raise PlyParseError(f"{path}: unsupported element '{parts[1]}'")
            count = int(parts[2])
        elif parts[0] == "property":
            if parts[1] != "float":
                raise PlyParseError(f"{path}: unsupported property type '{parts[1]}'")
            properties.append(parts[2])
    if count is None:
        raise PlyParseError(f"{path}: header lacks an 'element vertex' line")
    return count, properties, body_offset


def _read_ply_columns(path):
    raw = Path(path).read_bytes()
    count, properties, offset = _parse_ply_header(raw, path)
    need = count * len(properties) * 4
    body = raw[offset:]
    if len(body) < need:
        raise PlyParseError(
            f"{path}: truncated vertex data at offset {offset + len(body)}: "
            f"expected {need} bytes, found {len(body)}"
        )
    data = np.frombuffer(body[:need], dtype="<f4").reshape(count, len(properties))
    if not np.all(np.isfinite(data)):
        bad = int(np.argwhere(~np.isfinite(data))[0, 0])
        raise PlyParseError(f"{path}: non-finite value in vertex {bad} (offset {offset + bad * len(properties) * 4})")
    return {name: data[:, i].astype(np.float64) for i, name in enumerate(properties)}, count


def load_ply_gaussians(path) -> GaussianSet:
    cols, n = _read_ply_columns(path)
    for name in _gaussian_property_names(1)[:11]:
        if name not in cols:
            raise PlyParseError(f"{path}: missing property '{name}'")
    n_sh = sum(1 for name in cols if name.startswith("sh_"))
    if n_sh % 3 != 0 or (n_sh // 3) not in _SH_BASIS_COUNTS:
        raise PlyParseError(f"{path}: sh property count {n_sh} is not 3x a degree 0-3 basis")
    basis = n_sh // 3
    sh = np.stack([cols[f"sh_{i}"] for i in range(n_sh)], axis=1).reshape(n, 3, basis)
    return GaussianSet(
        positions=np.stack([cols["x"], cols["y"], cols["z"]], axis=1),
        rotations=np.stack([cols[f"rot_{i}"] for i in range(4)], axis=1),
        log_scales=np.stack([cols[f"log_scale_{i}"] for i in range(3)], axis=1),
        logit_opacities=cols["logit_opacity"],
        sh=sh,
    )


def save_ply_points(cloud: LidarCloud, path):
    names = ["x", "y", "z"]
    cols = [cloud.points]
    if cloud.normals is not None:
        names += ["nx", "ny", "nz"]
        cols.append(cloud.normals)
    data = np.hstack(cols).astype("<f4")
    with open(path, "wb") as f:
        f.write(_ply_header(names, len(cloud)))
        f.write(data.tobytes())


def load_ply_points(path, normal_k: int = 16) -> LidarCloud:
    """Load a point PLY; PCA-estimate normals when the file has none."""
    cols, n = _read_ply_columns(path)
    for name in ("x", "y", "z"):
        if name not in cols:
            raise PlyParseError(f"{path}: missing property '{name}'")
    points = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    normals = None
    if all(k in cols for k in ("nx", "ny", "nz")):
        normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = np.where(norms > 0, normals / np.maximum(norms, 1e-300), normals)
    cloud = LidarCloud(points=points, normals=normals)
    if cloud.normals is None and n > 0:
        from . import spatial

        k = min(normal_k, n)
        if k >= 3:
            cloud.normals = spatial.estimate_normals(points, k=k)
        else:
            cloud.normals = np.tile([0.0, 0.0, 1.0], (n, 1))
    if n > 0:
        from . import spatial

        cloud.index = spatial.build(points)
    return cloud


# ---------------------------------------------------------------------------
# Camera JSON
# ---------------------------------------------------------------------------

def camera_to_dict(cam: DistortedCamera) -> dict:
    d = {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "k1": cam.k1, "k2": cam.k2,
        "width": cam.width, "height": cam.height,
        "rotation": [float(v) for v in cam.rotation.reshape(-1)],
        "translation": [float(v) for v in cam.translation],
    }
    if cam.normalized_r:
        d["normalized_r"] = True
    return d


def camera_from_dict(d: dict) -> DistortedCamera:
    return DistortedCamera(
        fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
        k1=float(d["k1"]), k2=float(d["k2"]),
        rotation=np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
        translation=np.array(d["translation"], dtype=np.float64),
        width=int(d["width"]), height=int(d["height"]),
        normalized_r=bool(d.get("normalized_r", False)),
    )


def save_camera(cam: DistortedCamera, path):
    Path(path).write_text(json.dumps(camera_to_dict(cam), indent=2) + "\n")


def load_camera(path) -> DistortedCamera:
    return camera_from_dict(json.loads(Path(path).read_text()))


def save_cameras(cams, path, names=None):
    entries = []
    for i, cam in enumerate(cams):
        d = camera_to_dict(cam)
        d["name"] = names[i] if names is not None else f"view_{i:03d}"
        entries.append(d)
    Path(path).write_text(json.dumps({"cameras": entries}, indent=2) + "\n")


def load_cameras(path):
    doc = json.loads(Path(path).read_text())
    cams = [camera_from_dict(d) for d in doc["cameras"]]
    names = [d.get("name", f"view_{i:03d}") for i, d in enumerate(doc["cameras"])]
    return cams, names
