"""Outlier-aware kNN graphs with RBF edge weights."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from .pointcloud import PointCloud

DistanceMode = Literal["squared", "literal"]


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class GraphConfig:
    k: int = 10
    delta: float = 0.1
    gamma: float = 0.6
    # "squared": exp(-|xi-xj|^2 / 2 delta^2)
    # "literal": exp(-|xi-xj|^4 / 2 delta^2), reading d as an already squared distance
    distance_mode: DistanceMode = "squared"

    def __post_init__(self):
        if self.k < 3:
            raise ValueError(f"k must be >= 3, got {self.k}")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")
        if self.distance_mode not in ("squared", "literal"):
            raise ValueError(f"unknown distance_mode {self.distance_mode!r}")

    def check(self, n: int) -> None:
        if not self.k < n:
            raise GraphError(f"k={self.k} requires more than {self.k} points, got {n}")


@dataclass(frozen=True, eq=False)
class OutlierAwareGraph:
    adjacency: sp.csr_matrix
    degrees: np.ndarray
    outlier_mask: np.ndarray
    tau: float

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @classmethod
    def from_adjacency(cls, adjacency) -> "OutlierAwareGraph":
        """Wrap a given symmetric weight matrix with no outlier masking."""
        a = sp.csr_matrix(adjacency, dtype=np.float64)
        a.setdiag(0.0)
        a.eliminate_zeros()
        deg = np.asarray(a.sum(axis=1)).ravel()
        return cls(a, deg, np.zeros(a.shape[0], dtype=bool), 0.0)

    def dense(self) -> np.ndarray:
        return self.adjacency.toarray()

    def write_triplets(self, path) -> None:
        """Dump the upper and lower triangle as (i, j, w) rows."""
        coo = self.adjacency.tocoo()
        order = np.lexsort((coo.col, coo.row))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["i", "j", "w"])
            for t in order:
                w.writerow([int(coo.row[t]), int(coo.col[t]), repr(float(coo.data[t]))])


def _kernel(d2: np.ndarray, delta: float, mode: DistanceMode) -> np.ndarray:
    d = d2 * d2 if mode == "literal" else d2
    return np.exp(-d / (2.0 * delta * delta))


def rbf_weight(xi, xj, delta: float, distance_mode: DistanceMode = "squared") -> float:
    if not delta > 0:
        raise ValueError("delta must be positive")
    diff = np.asarray(xi, dtype=np.float64) - np.asarray(xj, dtype=np.float64)
    return float(_kernel(np.dot(diff, diff), delta, distance_mode))


def pairwise_sq_dists(points: np.ndarray) -> np.ndarray:
    return cdist(points, points, "sqeuclidean")


def knn_indices(points: np.ndarray, k: int) -> np.ndarray:
    """Exact k nearest neighbours per row (self excluded), ties to the lower index.

    Returns an N x k index array ordered by ascending (distance, index).
    """
    n = points.shape[0]
    if not k < n:
        raise GraphError(f"k={k} requires more than {k} points, got {n}")
    d2 = pairwise_sq_dists(points)
    dup = (d2 == 0.0).sum(axis=1) - 1
    if dup.max() > k:
        i = int(dup.argmax())
        raise GraphError(f"point {i} has {int(dup[i])} exact duplicates, more than k={k}")
    np.fill_diagonal(d2, np.inf)
    kth = np.partition(d2, k - 1, axis=1)[:, k - 1 : k]
    less = d2 < kth
    # fill the remaining slots with the lowest-index points at exactly the k-th distance
    room = k - less.sum(axis=1, keepdims=True)
    tied = (d2 == kth) & (np.cumsum(d2 == kth, axis=1) <= room)
    cols = np.nonzero(less | tied)[1].reshape(n, k)
    order = np.argsort(np.take_along_axis(d2, cols, axis=1), axis=1, kind="stable")
    return np.take_along_axis(cols, order, axis=1)


def build_knn_adjacency(cloud: PointCloud, cfg: GraphConfig) -> sp.csr_matrix:
    pts = cloud.points
    n = pts.shape[0]
    cfg.check(n)
    nbr = knn_indices(pts, cfg.k)
    rows = np.repeat(np.arange(n), cfg.k)
    cols = nbr.ravel()
    diff = pts[rows] - pts[cols]
    w = _kernel(np.einsum("ij,ij->i", diff, diff), cfg.delta, cfg.distance_mode)
    a = sp.csr_matrix((w, (rows, cols)), shape=(n, n))
    # max keeps every one-sided edge at its kernel weight
    a = a.maximum(a.T).tocsr()
    a.sort_indices()
    return a


def build_outlier_aware_graph(cloud: PointCloud, cfg: GraphConfig) -> OutlierAwareGraph:
    a = build_knn_adjacency(cloud, cfg)
    n = a.shape[0]
    degrees = np.asarray(a.sum(axis=1)).ravel()
    tau = cfg.gamma / (n * cfg.k) * float(a.sum())
    mask = degrees <= tau if cfg.gamma > 0 else np.zeros(n, dtype=bool)
    if mask.all():
        raise GraphError(f"every vertex falls at or below tau={tau:.6g}; gamma={cfg.gamma} is degenerate")
    if mask.any():
        keep = sp.diags((~mask).astype(np.float64))
        a = (keep @ a @ keep).tocsr()
        a.eliminate_zeros()
        a.sort_indices()
    return OutlierAwareGraph(a, degrees, mask, tau)
