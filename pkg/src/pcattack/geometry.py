"""Point-set geometry: normalization, nearest neighbors, Hausdorff distance
and the projection that keeps added points inside an epsilon ball around
the original surface.

Clouds are ``(N, 3)`` float64 arrays throughout. Nearest-neighbor search is
an exhaustive scan; at a few hundred points it is fast and its tie-breaking
(lowest index wins) is unambiguous.
"""

from dataclasses import dataclass, field

import numpy as np


class DegenerateCloudError(ValueError):
    """Raised when a cloud has no spatial extent (all points identical)."""


@dataclass
class PointCloud:
    """An ordered set of 3D points with an optional class label."""

    points: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.points = as_cloud(self.points)

    def __len__(self):
        return len(self.points)


@dataclass
class DeltaSet:
    """Added points plus, for each, the index of its nearest original point
    as of the last projection."""

    points: np.ndarray
    nn_index: np.ndarray = field(default=None)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.nn_index is None:
            self.nn_index = np.zeros(len(self.points), dtype=np.int64)
        self.nn_index = np.asarray(self.nn_index, dtype=np.int64)

    def __len__(self):
        return len(self.points)


def as_cloud(points):
    """Validate and coerce ``points`` to a non-empty finite ``(N, 3)`` array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.shape[0] == 3:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) array, got shape {arr.shape}")
    if len(arr) == 0:
        raise ValueError("point cloud is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point cloud contains non-finite coordinates")
    return arr


def normalize_unit_sphere(cloud):
    """Translate the centroid to the origin and scale the max norm to 1.

    Raises :class:`DegenerateCloudError` when every point coincides.
    """
    pts = as_cloud(cloud.points if isinstance(cloud, PointCloud) else cloud)
    centered = pts - pts.mean(axis=0)
    # the float mean leaves a residual of a few ulp; one more pass removes it
    centered = centered - centered.mean(axis=0)
    scale = np.sqrt((centered * centered).sum(axis=1)).max()
    if scale == 0.0:
        raise DegenerateCloudError("cannot normalize a cloud whose points all coincide")
    out = centered / scale
    if isinstance(cloud, PointCloud):
        return PointCloud(out, cloud.label)
    return out


# points this close beyond eps count as inside: a projected position lands
# within rounding of eps, and re-projecting it must not move it again
PROJECTION_TOL = 1e-12


def _norm3(diff):
    """Row norms over a trailing axis of length 3, summed as (x² + y²) + z²."""
    x, y, z = diff[..., 0], diff[..., 1], diff[..., 2]
    return np.sqrt(x * x + y * y + z * z)


def pairwise_distances(a, b):
    """Euclidean distance matrix between the rows of ``a`` and ``b``."""
    return _norm3(a[:, None, :] - b[None, :, :])


def nearest_neighbors(queries, cloud):
    """Vectorized nearest-neighbor scan.

    Returns ``(index, distance)`` arrays, one entry per query row. Ties go to
    the lowest index, which is what ``argmin`` does.
    """
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    cloud = as_cloud(cloud)
    d = pairwise_distances(queries, cloud)
    idx = d.argmin(axis=1)
    return idx, d[np.arange(len(queries)), idx]


def nearest_neighbor(q, cloud):
    """Index and distance of the point of ``cloud`` closest to ``q``."""
    idx, dist = nearest_neighbors(np.asarray(q, dtype=np.float64)[None, :], cloud)
    return int(idx[0]), float(dist[0])


def one_sided_distance(q, cloud):
    """Distance from ``q`` to its nearest point in ``cloud``."""
    return nearest_neighbor(q, cloud)[1]


def directed_hausdorff(a, b):
    """max over ``a`` of the distance to the nearest point of ``b``."""
    return float(pairwise_distances(as_cloud(a), as_cloud(b)).min(axis=1).max())


def hausdorff_distance(a, b):
    """Symmetric Hausdorff distance between two point sets."""
    a = as_cloud(a.points if isinstance(a, PointCloud) else a)
    b = as_cloud(b.points if isinstance(b, PointCloud) else b)
    d = pairwise_distances(a, b)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def project_points(points, cloud, eps):
    """Project every row of ``points`` into the ``eps`` ball of its nearest
    point of ``cloud``.

    Points within ``eps + PROJECTION_TOL`` are returned untouched. Others
    are moved along the ray from their nearest neighbor to distance ``eps``. Returns ``(projected, nn_index)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cloud = as_cloud(cloud)
    idx, dist = nearest_neighbors(points, cloud)
    out = points.copy()
    bad = dist > eps + PROJECTION_TOL
    if np.any(bad):
        anchor = cloud[idx[bad]]
        offset = points[bad] - anchor
        out[bad] = anchor + eps * (offset / dist[bad][:, None])
    return out, idx


def project_to_boundary(p, cloud, eps):
    """Single-point form of :func:`project_points`."""
    out, _ = project_points(np.asarray(p, dtype=np.float64)[None, :], as_cloud(cloud), eps)
    return out[0]
