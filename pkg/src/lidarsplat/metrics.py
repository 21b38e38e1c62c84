"""Quantitative quality metrics: PSNR, SSIM, and the scene-level RMS
distance between Gaussian centers and the LiDAR benchmark."""

from __future__ import annotations

import math

import numpy as np

from . import spatial
from .losses import ssim_value_and_grad, _as_array
from .scene import GaussianSet, LidarCloud


def psnr(a, b) -> float:
    """10*log10(1/MSE) on [0,1] images; identical inputs give inf."""
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def ssim(a, b) -> float:
    """Mean structural similarity; same kernel as the D-SSIM training loss."""
    value, _ = ssim_value_and_grad(a, b)
    return value


def lidar_rmse(gset: GaussianSet, cloud: LidarCloud,
               direction: str = "gaussian_to_lidar") -> float:
    """RMS nearest-neighbor distance between Gaussian centers and the cloud.

    Default direction measures how far the reconstruction strays from the
    LiDAR benchmark (each Gaussian to its nearest point); the reverse
    direction measures coverage of the cloud by the reconstruction.
    """
    if len(gset) == 0 or len(cloud) == 0:
        raise ValueError("lidar_rmse needs a non-empty set and cloud")
    if direction == "gaussian_to_lidar":
        if cloud.index is None:
            cloud.index = spatial.build(cloud.points)
        _, dist = cloud.index.nearest_many(gset.positions)
    elif direction == "lidar_to_gaussian":
        index = spatial.build(gset.positions)
        _, dist = index.nearest_many(cloud.points)
    else:
        raise ValueError(f"unknown direction '{direction}'")
    return float(np.sqrt(np.mean(dist ** 2)))
