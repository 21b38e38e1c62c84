"""Spatial queries over LiDAR points: exact nearest neighbors, PCA normal
estimation over k-NN neighborhoods, and tangent-plane projection."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

_TIE_K = 16  # neighbors examined when resolving exact distance ties


class SpatialIndex:
    """Exact nearest-neighbor index; ties resolved to the lowest point index."""

    def __init__(self, points: np.ndarray):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if len(points) == 0:
            raise ValueError("cannot build a spatial index over zero points")
        if not np.all(np.isfinite(points)):
            raise ValueError("non-finite point passed to index build")
        self.points = points
        self._tree = cKDTree(points)

    def __len__(self) -> int:
        return len(self.points)

    def nearest(self, q) -> tuple[int, float]:
        """(point index, Euclidean distance) of the closest point to q."""
        q = np.asarray(q, dtype=np.float64).reshape(3)
        k = min(_TIE_K, len(self.points))
        dist, idx = self._tree.query(q, k=k)
        dist, idx = np.atleast_1d(dist), np.atleast_1d(idx)
        ties = idx[dist == dist[0]]
        return int(ties.min()), float(dist[0])

    def nearest_many(self, qs: np.ndarray):
        """Vectorized nearest query; ties may resolve to any tied index."""
        qs = np.atleast_2d(np.asarray(qs, dtype=np.float64))
        dist, idx = self._tree.query(qs, k=1)
        return np.atleast_1d(idx).astype(np.int64), np.atleast_1d(dist)

    def k_nearest(self, q, k: int):
        q = np.asarray(q, dtype=np.float64)
        if k > len(self.points):
            raise ValueError(f"k={k} exceeds point count {len(self.points)}")
        dist, idx = self._tree.query(q, k=k)
        if k == 1:
            dist, idx = np.atleast_1d(dist), np.atleast_1d(idx)
        return idx, dist


def build(points: np.ndarray) -> SpatialIndex:
    return SpatialIndex(points)


def nearest(index: SpatialIndex, q) -> tuple[int, float]:
    return index.nearest(q)


def _orient(normals: np.ndarray, reference) -> np.ndarray:
    """Flip normals to a non-negative dot with `reference`; exact-zero dot
    falls back to making the first nonzero component positive."""
    ref = np.asarray(reference, dtype=np.float64)
    dots = normals @ ref
    flip = dots < 0
    zero = dots == 0
    if np.any(zero):
        n = normals[zero]
        lead = np.where(n[:, 0] != 0, n[:, 0], np.where(n[:, 1] != 0, n[:, 1], n[:, 2]))
        flip[zero] = lead < 0
    out = normals.copy()
    out[flip] *= -1.0
    return out


def estimate_normals(points: np.ndarray, k: int = 16, reference=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Per-point unit normals from PCA over each point's k nearest neighbors.

    The normal is the eigenvector of the smallest covariance eigenvalue,
    oriented to a non-negative dot with `reference` (+z by default, suiting
    roughly-nadir aerial scans). Collinear neighborhoods fall back to the
    coordinate axis most orthogonal to the line.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(points)
    if k > n:
        raise ValueError(f"k={k} exceeds point count {n}")
    if k < 3:
        raise ValueError("normal estimation needs k >= 3")
    tree = cKDTree(points)
    _, idx = tree.query(points, k=k)
    nbrs = points[idx]  # (n, k, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    w, v = np.linalg.eigh(cov)  # ascending eigenvalues
    normals = v[:, :, 0]
    # collinear neighborhoods: smallest two eigenvalues ~ 0 relative to largest
    degenerate = w[:, 1] <= 1e-12 * np.maximum(w[:, 2], 1e-300)
    if np.any(degenerate):
        line = v[degenerate][:, :, 2]  # direction of the line
        axes = np.eye(3)
        # axis with the smallest |dot| is most orthogonal; ties -> lowest index
        dots = np.abs(line @ axes.T)
        pick = np.argmin(dots, axis=1)
        cand = axes[pick]
        ortho = cand - (np.sum(cand * line, axis=1, keepdims=True)) * line
        ortho /= np.linalg.norm(ortho, axis=1, keepdims=True)
        normals[degenerate] = ortho
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return _orient(normals, reference)


def project_to_tangent(n, N) -> np.ndarray:
    """Project n onto the plane orthogonal to N: n - (n.N / N.N) N.

    Returns the zero vector when n is parallel to N; callers decide the
    degenerate fallback.
    """
    n = np.asarray(n, dtype=np.float64)
    N = np.asarray(N, dtype=np.float64)
    return n - (np.dot(n, N) / np.dot(N, N)) * N
