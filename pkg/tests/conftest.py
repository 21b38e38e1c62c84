import numpy as np
import pytest

from lidarsplat import lidar_maps, testbed
from lidarsplat.scene import DistortedCamera, GaussianSet, logit
from lidarsplat.trainer import TrainView, split_views


def make_camera(width=32, height=32, k1=0.03, k2=0.002, normalized_r=True,
                pos=(2.0, -1.5, 4.0), target=(0.0, 0.0, 0.0), focal=None):
    """Oblique camera looking at `target` from `pos`."""
    pos = np.asarray(pos, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - pos
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return DistortedCamera(
        fx=focal or 0.9 * width, fy=focal or 0.9 * width,
        cx=width / 2.0, cy=height / 2.0, k1=k1, k2=k2,
        rotation=R, translation=-R @ pos, width=width, height=height,
        normalized_r=normalized_r,
    )


def make_random_set(n, seed=0, basis=9, opacity_range=(0.25, 0.7),
                    scale_range=(0.1, 0.35), extent=0.8):
    """Random Gaussians near the origin with distinct per-axis scales
    (keeps argmin/argmax selections away from ties for gradient checks)."""
    r = np.random.default_rng(seed)
    q = r.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    ls= np.log(np.sort(r.uniform(*scale_range, (n, 3)), axis=1) * [[1.0, 1.3, 1.7]])
    sh = 0.05 * r.standard_normal((n, 3, basis))
    sh[:, :, 0] = r.uniform(-0.3, 0.3, (n, 3))
    return GaussianSet(
        positions=r.uniform(-extent, extent, (n, 3)),
        rotations=q,
        log_scales=ls,
        logit_opacities=logit(r.uniform(*opacity_range, n)),
        sh=sh,
    )


@pytest.fixture(scope="session")
def standard_scene():
    """The standard testbed scene at acceptance resolution."""
    return testbed.make_scene(testbed.standard_spec(seed=42, width=64, height=64))


@pytest.fixture(scope="session")
def small_scene():
    """A light scene for faster unit tests (single plane + small box)."""
    spec = testbed.standard_spec(seed=7, width=48, height=48, density=6.0)
    return testbed.make_scene(spec, with_features=False)


def build_train_views(scene, indices, window=21):
    views = []
    for i in indices:
        sparse = lidar_maps.splat_sparse(scene.cloud, scene.cameras[i])
        maps = lidar_maps.densify_maps(sparse, scene.cameras[i], window=window)
        views.append(TrainView(camera=scene.cameras[i], image=scene.images[i].data,
                               maps=maps, name=scene.names[i]))
    return views


def build_plain_views(scene, indices):
    return [TrainView(camera=scene.cameras[i], image=scene.images[i].data,
                      maps=None, name=scene.names[i]) for i in indices]


@pytest.fixture(scope="session")
def standard_split(standard_scene):
    train_idx, val_idx, test_idx = split_views(len(standard_scene.cameras), 0)
    return train_idx, val_idx, test_idx
