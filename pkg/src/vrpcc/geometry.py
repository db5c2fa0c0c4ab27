"""Spatial primitives: nearest neighbours, farthest point sampling, grouping, normals."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .pointset import as_points

# brute force below this many (query, point) pairs
_BRUTE_LIMIT = 1 << 21


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared distances, ``(len(a), len(b))``.

    Computed as an explicit sum of squared coordinate differences so that every
    code path in the package produces bit-identical values for the same pair.
    """
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(axis=-1)


class KdIndex:
    """Immutable nearest-neighbour index over a point cloud.

    Results equal a brute-force scan: ordered by squared distance, ties broken
    by the lower point index.
    """

    def __init__(self, points):
        pts = as_points(points).copy()
        pts.setflags(write=False)
        self.points = pts
        self._tree = cKDTree(pts) if len(pts) > 64 else None

    def __len__(self):
        return len(self.points)

    def query(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(indices, squared_distances)``, each ``(m, k)``."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        n = len(self.points)
        if not 1 <= k <= n:
            raise ValueError(f"knn: k={k} must be in [1, {n}]")
        if self._tree is None or len(q) * n <= _BRUTE_LIMIT:
            return _knn_brute(self.points, q, k)
        dk, _ = self._tree.query(q, k)
        radius = (dk if k == 1 else dk[:, -1]) * (1 + 1e-9) + 1e-12
        cands = self._tree.query_ball_point(q, radius)
        idx = np.empty((len(q), k), dtype=np.int64)
        sq = np.empty((len(q), k))
        for i, c in enumerate(cands):
            c = np.asarray(c, dtype=np.int64)
            diff = self.points[c] - q[i]
            d = (diff * diff).sum(axis=-1)
            order = np.lexsort((c, d))[:k]
            idx[i], sq[i] = c[order], d[order]
        return idx, sq

    def nearest(self, queries) -> tuple[np.ndarray, np.ndarray]:
        idx, sq = self.query(queries, 1)
        return idx[:, 0], sq[:, 0]


def _knn_brute(points: np.ndarray, queries: np.ndarray, k: int):
    idx = np.empty((len(queries), k), dtype=np.int64)
    sq = np.empty((len(queries), k))
    step = max(1, _BRUTE_LIMIT // len(points))
    for s in range(0, len(queries), step):
        d = squared_distances(queries[s:s + step], points)
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        idx[s:s + step] = order
        sq[s:s + step] = np.take_along_axis(d, order, axis=1)
    return idx, sq


def knn(index: KdIndex, query, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest points to a single query, ascending distance."""
    return index.query(np.asarray(query, dtype=np.float64).reshape(1, 3), k)[0][0]


def farthest_point_sample(points, m: int, seed: int = 0) -> np.ndarray:
    """Iterative farthest point sampling.

    ``seed == 0`` starts from the lowest-index point farthest from the centroid;
    any other seed starts from index ``seed % n``. Each later pick maximises the
    distance to the chosen set, ties to the lowest index.
    """
    pts = as_points(points)
    n = len(pts)
    if not 1 <= m <= n:
        raise ValueError(f"farthest_point_sample: m={m} must be in [1, {n}]")
    if seed == 0:
        c = pts - pts.mean(axis=0)
        first = int(np.argmax((c * c).sum(axis=1)))
    else:
        first = seed % n
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = first
    diff = pts - pts[first]
    mind = (diff * diff).sum(axis=1)
    mind[first] = -1.0
    for j in range(1, m):
        nxt = int(np.argmax(mind))
        chosen[j] = nxt
        diff = pts - pts[nxt]
        np.minimum(mind, (diff * diff).sum(axis=1), out=mind)
        mind[chosen[:j + 1]] = -1.0
    return chosen


@dataclass(frozen=True)
class GroupedFeatures:
    centers: np.ndarray          # (m, 3)
    neighbor_idx: np.ndarray     # (m, k)
    relative_coords: np.ndarray  # (m, k, 3)


def group(points, centers, k: int, index: KdIndex | None = None) -> GroupedFeatures:
    pts = as_points(points)
    centers = np.asarray(centers, dtype=np.int64)
    if centers.size and (centers.min() < 0 or centers.max() >= len(pts)):
        raise ValueError("group: center index out of range")
    index = index or KdIndex(pts)
    ctr = pts[centers]
    nbr, _ = index.query(ctr, k)
    rel = pts[nbr] - ctr[:, None, :]
    return GroupedFeatures(ctr, nbr, rel)


def estimate_normals(points, k: int = 16) -> np.ndarray:
    """Local PCA normals, oriented away from the neighbourhood centroid."""
    pts = as_points(points)
    if k < 3 or len(pts) < k:
        raise ValueError(f"estimate_normals: need 3 <= k <= n, got k={k}, n={len(pts)}")
    nbr, _ = KdIndex(pts).query(pts, k)
    local = pts[nbr]
    centroid = local.mean(axis=1)
    dev = local - centroid[:, None, :]
    cov = np.einsum("mki,mkj->mij", dev, dev) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = np.ascontiguousarray(evecs[:, :, 0])
    flip = ((pts - centroid) * normals).sum(axis=1) < 0
    normals[flip] *= -1.0
    degenerate = evals[:, -1] <= 1e-24
    normals[degenerate] = (0.0, 0.0, 1.0)
    return normals
