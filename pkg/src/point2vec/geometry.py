"""Point-cloud kernels: FPS, k-NN grouping, patch normalization, feature propagation.

All distance computations are squared Euclidean distances accumulated as
``dx*dx + dy*dy + dz*dz`` in float64, and every selection breaks ties
toward the lower index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, matmul
from .numerics.errors import ParameterError, ShapeError


@dataclass
class PointCloud:
    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ShapeError(f"point cloud must be (N, 3), got {self.points.shape}")
        if len(self.points) < 1:
            raise ParameterError("point cloud needs at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ParameterError("point cloud has non-finite coordinates")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.points),):
                raise ShapeError(f"labels shape {self.labels.shape} does not match {len(self.points)} points")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class PatchSet:
    center_indices: np.ndarray  # (..., n)
    centers: np.ndarray  # (..., n, 3)
    group_indices: np.ndarray  # (..., n, k)
    patches: np.ndarray  # (..., n, k, 3)


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared distances between (..., M, 3) and (..., N, 3) -> (..., M, N)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = None
    for c in range(3):
        diff = a[..., :, None, c] - b[..., None, :, c]
        diff *= diff
        out = diff if out is None else out.__iadd__(diff)
    return out


def farthest_point_sampling(points: np.ndarray, n: int, rng: np.random.Generator | None = None,
                            start: int | np.ndarray | None = None) -> np.ndarray:
    """Greedy max-min subset selection.

    ``points`` is (N, 3) or batched (B, N, 3). The first index is ``start``
    when given, otherwise drawn uniformly from ``rng``. Returns (n,) or (B, n)
    int64 indices in selection order.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 2
    if single:
        pts = pts[None]
    batch, count = pts.shape[:2]
    if not 1 <= n <= count:
        raise ParameterError(f"FPS needs 1 <= n <= N, got n={n}, N={count}")
    if start is None:
        if rng is None:
            raise ParameterError("FPS needs either a start index or an rng")
        start = rng.integers(0, count, size=batch)
    first = np.broadcast_to(np.asarray(start, dtype=np.int64), (batch,))
    # coordinate-major layout keeps the inner update contiguous
    xs, ys, zs = (np.ascontiguousarray(pts[..., c]) for c in range(3))
    rows = np.arange(batch)
    chosen = np.empty((batch, n), dtype=np.int64)
    mind = np.full((batch, count), np.inf)
    cur = first.copy()
    d = np.empty((batch, count))
    tmp = np.empty((batch, count))
    for i in range(n):
        chosen[:, i] = cur
        # same evaluation order as dx*dx + dy*dy + dz*dz, without temporaries
        np.subtract(xs, xs[rows, cur][:, None], out=d)
        np.multiply(d, d, out=d)
        np.subtract(ys, ys[rows, cur][:, None], out=tmp)
        np.multiply(tmp, tmp, out=tmp)
        d += tmp
        np.subtract(zs, zs[rows, cur][:, None], out=tmp)
        np.multiply(tmp, tmp, out=tmp)
        d += tmp
        np.minimum(mind, d, out=mind)
        mind[rows, cur] = -1.0
        cur = np.argmax(mind, axis=1)
    return chosen[0] if single else chosen


def knn_group(points: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest points to each center, nearest first.

    (N, 3), (n, 3) -> (n, k); batched inputs add a leading axis.
    """
    count = np.asarray(points).shape[-2]
    if not 1 <= k <= count:
        raise ParameterError(f"k-NN needs 1 <= k <= N, got k={k}, N={count}")
    return smallest_k(squared_distances(centers, points), k)


def smallest_k(d: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest entries per row, ordered by (value, index).

    Equivalent to ``argsort(d, kind="stable")[..., :k]`` but linear time in
    the row length: everything strictly below the k-th value is taken, and
    entries equal to it are taken in index order until k are selected.
    """
    count = d.shape[-1]
    if k == count:
        return np.argsort(d, axis=-1, kind="stable")
    kth = np.partition(d, k - 1, axis=-1)[..., k - 1:k]
    less = d < kth
    need = k - less.sum(axis=-1, keepdims=True)
    equal = d == kth
    take = less | (equal & (np.cumsum(equal, axis=-1) <= need))
    lead = d.shape[:-1]
    idx = np.nonzero(take.reshape(-1, count))[1].reshape(*lead, k)
    vals = np.take_along_axis(d, idx, axis=-1)
    return np.take_along_axis(idx, np.argsort(vals, axis=-1, kind="stable"), axis=-1)


def normalize_patches(points: np.ndarray, centers: np.ndarray, group_indices: np.ndarray) -> np.ndarray:
    """Patch points relative to their center: (…, n, k, 3), float64.

    For float32 clouds the float64 difference is exact, so adding the
    center back reproduces the original point bit for bit.
    """
    points = np.asarray(points)
    if points.ndim == 2:
        grouped = points[group_indices]
    else:
        bidx = np.arange(points.shape[0])[:, None, None]
        grouped = points[bidx, group_indices]
    return grouped.astype(np.float64) - np.asarray(centers, dtype=np.float64)[..., :, None, :]


def tokenize(points: np.ndarray, num_centers: int, group_size: int, rng: np.random.Generator | None = None,
             start=None) -> PatchSet:
    """FPS centers, k-NN groups and normalized patches for one or a batch of clouds."""
    points = np.asarray(points)
    idx = farthest_point_sampling(points, num_centers, rng=rng, start=start)
    if points.ndim == 2:
        centers = points[idx]
    else:
        centers = points[np.arange(points.shape[0])[:, None], idx]
    groups = knn_group(points, centers, group_size)
    patches = normalize_patches(points, centers, groups)
    return PatchSet(idx, centers, groups, patches)


def interpolation_weights(query: np.ndarray, source: np.ndarray, k_interp: int = 3, power: float = 2.0,
                          eps: float = 1e-8) -> np.ndarray:
    """Dense inverse-distance weight matrix (…, M, n); each row sums to 1.

    Only the ``k_interp`` nearest sources of a query get nonzero weight
    ``1 / (d**power + eps)`` before normalization.
    """
    n = np.asarray(source).shape[-2]
    if n < 1 or not 1 <= k_interp <= n:
        raise ParameterError(f"feature propagation needs 1 <= k_interp <= n, got k_interp={k_interp}, n={n}")
    d2 = squared_distances(query, source)
    nearest = smallest_k(d2, k_interp)
    dist = np.sqrt(np.take_along_axis(d2, nearest, axis=-1))
    w = 1.0 / (dist**power + eps)
    w = w / w.sum(axis=-1, keepdims=True)
    dense = np.zeros(d2.shape, dtype=np.float64)
    np.put_along_axis(dense, nearest, w, axis=-1)
    return dense


def feature_propagation(query: np.ndarray, source: np.ndarray, features: Tensor, k_interp: int = 3,
                        power: float = 2.0, eps: float = 1e-8) -> Tensor:
    """Interpolate source features (…, n, E) onto query points -> (…, M, E)."""
    w = interpolation_weights(query, source, k_interp, power, eps)
    return matmul(Tensor(w.astype(features.dtype)), features)


def fps_resample(cloud: PointCloud, target_count: int, rng: np.random.Generator | None = None,
                 start: int | None = None) -> PointCloud:
    """Sub-cloud of ``target_count`` FPS-selected points, labels carried along."""
    idx = farthest_point_sampling(cloud.points, target_count, rng=rng, start=start)
    labels = cloud.labels[idx] if cloud.labels is not None else None
    return PointCloud(cloud.points[idx], labels)
