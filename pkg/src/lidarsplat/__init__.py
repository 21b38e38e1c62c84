"""lidarsplat: CPU differentiable Gaussian splatting with LiDAR-constrained
densification, a fourth-order radial-distortion camera model, and a combined
photometric + geometric training objective."""

__version__ = "0.1.0"

from .scene import (
    DepthNormalMaps,
    DistortedCamera,
    Gaussian,
    GaussianSet,
    Image,
    LidarCloud,
    covariance,
)

__all__ = [
    "DepthNormalMaps",
    "DistortedCamera",
    "Gaussian",
    "GaussianSet",
    "Image",
    "LidarCloud",
    "covariance",
    "__version__",
]
