"""Maximum-likelihood intrinsic-dimension estimation of point clouds.

The local estimate at a point with ordered neighbor distances
T_1 <= ... <= T_K is m = [ (1/(K-1)) sum_{j<K} ln(T_K/T_j) ]^(-1).
Points are shuffled by seed, split into batches, each batch averages its
local estimates, and the final value averages the batches. Distances are
always exact (no approximate neighbor search: the estimate is sensitive
to distance ratios).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .errors import (
    DuplicatePointError,
    InputError,
    InsufficientDataError,
    ParameterError,
)

__all__ = [
    "PointCloud",
    "IdEstimate",
    "knn_distance_profile",
    "mle_local_dim",
    "estimate_id",
    "sample_synthetic_manifold",
    "load_cloud_csv",
    "save_cloud_csv",
]

DUPLICATE_TOL = 1e-12


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    label: str = ""

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=float))
        if pts.ndim != 2 or pts.shape[0] < 2:
            raise InputError("a point cloud needs an (n >= 2) x D matrix")
        if not np.all(np.isfinite(pts)):
            raise InputError("point cloud contains non-finite entries")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class IdEstimate:
    value: float
    per_batch: tuple[float, ...]
    K: int
    batch_size: int
    seed: int
    n_used: int
    n_deduped: int
    aggregate: str = "mean"

    def to_json(self) -> dict:
        return {
            "value": self.value,
            "per_batch": list(self.per_batch),
            "K": self.K,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "n_used": self.n_used,
            "n_deduped": self.n_deduped,
            "aggregate": self.aggregate,
        }


def knn_distance_profile(cloud: PointCloud, query: int, K: int) -> np.ndarray:
    """Exact K smallest distances from point ``query`` to the rest, sorted
    ascending with ties broken by point index. The query point itself is
    excluded by index; a neighbor closer than 1e-12 is a duplicate."""
    pts = cloud.points
    n = pts.shape[0]
    if not (0 <= query < n):
        raise ParameterError(f"query index must lie in 0..{n - 1}")
    if not (1 <= K < n):
        raise ParameterError("need 1 <= K < n")
    d = np.sqrt(np.sum((pts - pts[query]) ** 2, axis=1))
    idx = np.arange(n)
    keep = idx != query
    d, idx = d[keep], idx[keep]
    order = np.lexsort((idx, d))
    profile = d[order][:K]
    if profile[0] < DUPLICATE_TOL:
        raise DuplicatePointError(
            f"point {int(idx[order][0])} duplicates query {query} within {DUPLICATE_TOL}"
        )
    return profile


def mle_local_dim(profile: np.ndarray) -> float:
    """Inverse mean log-ratio estimate from one ordered distance profile."""
    T = np.asarray(profile, dtype=float)
    if T.ndim != 1 or T.shape[0] < 2:
        raise ParameterError("profile needs at least two distances")
    if np.any(T <= 0) or np.any(np.diff(T) < 0):
        raise ParameterError("profile must be positive and nondecreasing")
    K = T.shape[0]
    denom = np.mean(np.log(T[-1] / T[:-1]))
    if denom == 0.0:
        raise ParameterError("all profile distances equal: zero denominator")
    return float(1.0 / denom)


def _dedup(pts: np.ndarray) -> tuple[np.ndarray, int]:
    """Drop points within DUPLICATE_TOL of an earlier point."""
    tree = cKDTree(pts)
    pairs = tree.query_pairs(DUPLICATE_TOL, output_type="ndarray")
    if len(pairs) == 0:
        return pts, 0
    drop = np.zeros(len(pts), dtype=bool)
    for i, j in pairs:
        drop[max(i, j)] = True
    removed = int(drop.sum())
    warnings.warn(f"removed {removed} duplicate points within {DUPLICATE_TOL}")
    return pts[~drop], removed


def _batch_local_dims(batch: np.ndarray, K: int) -> np.ndarray:
    """Local estimates for every point of one batch (exact neighbors)."""
    n = batch.shape[0]
    if n <= 2048:
        dist = cdist(batch, batch)
        dist[np.arange(n), np.arange(n)] = np.inf
        part = np.partition(dist, K - 1, axis=1)[:, :K]
        part.sort(axis=1)
    else:
        tree = cKDTree(batch)
        dist, _ = tree.query(batch, k=K + 1)
        part = dist[:, 1:]
    logs = np.log(part[:, -1][:, None] / part[:, :-1])
    denom = np.mean(logs, axis=1)
    if np.any(denom <= 0):
        raise InsufficientDataError("degenerate neighborhood: zero log-ratio mean")
    return 1.0 / denom


def estimate_id(
    cloud: PointCloud,
    K: int = 20,
    batch_size: int = 4096,
    seed: int = 0,
    aggregate: str = "mean",
) -> IdEstimate:
    """Batched maximum-likelihood intrinsic dimension.

    Rows are shuffled with ``seed`` and split into batches of
    ``batch_size``; a trailing partial batch is kept only if it still has
    at least K+1 points. Within a batch, ``aggregate='mean'`` averages the
    local estimates (the classical form); ``'harmonic'`` inverts the mean
    of their inverses. The final value is the mean over batches.
    """
    if aggregate not in ("mean", "harmonic"):
        raise ParameterError("aggregate must be 'mean' or 'harmonic'")
    if K < 2:
        raise ParameterError("need K >= 2")
    pts, removed = _dedup(cloud.points)
    n = pts.shape[0]
    if n < K + 1:
        raise InsufficientDataError(f"{n} points after dedup; need at least {K + 1}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    shuffled = pts[perm]
    per_batch = []
    for start in range(0, n, batch_size):
        batch = shuffled[start : start + batch_size]
        if batch.shape[0] < K + 1:
            break
        local = _batch_local_dims(batch, K)
        if aggregate == "mean":
            per_batch.append(float(np.mean(local)))
        else:
            per_batch.append(float(1.0 / np.mean(1.0 / local)))
    if not per_batch:
        raise InsufficientDataError("no batch had enough points")
    return IdEstimate(
        value=float(np.mean(per_batch)),
        per_batch=tuple(per_batch),
        K=K,
        batch_size=batch_size,
        seed=seed,
        n_used=n,
        n_deduped=removed,
        aggregate=aggregate,
    )


# ---------------------------------------------------------------------------
# synthetic samplers
# ---------------------------------------------------------------------------


def _raw_samples(kind: str, d: int | None, n: int, rng: np.random.Generator):
    if kind == "cube":
        if d is None or d < 1:
            raise ParameterError("cube needs an intrinsic dimension")
        return rng.uniform(0.0, 1.0, size=(n, d)), d
    if kind == "sphere":
        if d is None or d < 1:
            raise ParameterError("sphere needs an intrinsic dimension")
        g = rng.standard_normal((n, d + 1))
        return g / np.linalg.norm(g, axis=1, keepdims=True), d + 1
    if kind == "swiss_roll":
        t = 1.5 * np.pi * (1.0 + 2.0 * rng.uniform(size=n))
        y = 21.0 * rng.uniform(size=n)
        return np.stack([t * np.cos(t), y, t * np.sin(t)], axis=1), 3
    if kind == "torus":
        u = 2.0 * np.pi * rng.uniform(size=n)
        v = 2.0 * np.pi * rng.uniform(size=n)
        R, r = 2.0, 0.7
        return (
            np.stack(
                [(R + r * np.cos(u)) * np.cos(v), (R + r * np.cos(u)) * np.sin(v), r * np.sin(u)],
                axis=1,
            ),
            3,
        )
    raise ParameterError(f"unknown manifold kind {kind!r}")


def sample_synthetic_manifold(
    kind: str,
    n: int,
    ambient_dim: int,
    seed: int,
    d: int | None = None,
) -> PointCloud:
    """Sample a synthetic manifold and embed it by a seeded orthonormal map.

    Kinds: cube(d), sphere(d), swiss_roll, torus. The embedding is the
    first columns of a random orthogonal matrix, so all distances (and
    norms) are preserved exactly up to roundoff.
    """
    if n < 2:
        raise ParameterError("need at least two samples")
    rng = np.random.default_rng(seed)
    raw, k = _raw_samples(kind, d, n, rng)
    if ambient_dim < k:
        raise ParameterError(f"{kind} needs ambient dimension >= {k}")
    gauss = rng.standard_normal((ambient_dim, ambient_dim))
    q, _ = np.linalg.qr(gauss)
    embedded = raw @ q[:, :k].T
    label = f"{kind}({d})" if d is not None else kind
    return PointCloud(points=embedded, label=label)


# ---------------------------------------------------------------------------
# file contract: headerless CSV, one point per row
# ---------------------------------------------------------------------------


def load_cloud_csv(path, label: str = "") -> PointCloud:
    pts = np.loadtxt(path, delimiter=",", ndmin=2)
    return PointCloud(points=pts, label=label or str(path))


def save_cloud_csv(cloud: PointCloud, path) -> None:
    np.savetxt(path, cloud.points, delimiter=",", fmt="%.17g")
