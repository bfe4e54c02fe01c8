"""Laplacian spectra, graph Fourier transforms and spectral shape descriptors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import eigsh

from .graph import OutlierAwareGraph
from .pointcloud import PointCloud

ZERO_RTOL = 1e-8
CLUSTER_RTOL = 1e-9
DEFAULT_EIGENMAP_DIM = 32


class SpectralError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """Laplacian eigenpairs in ascending order.

    ``eigenvectors`` holds either the full N x N orthogonal matrix or, for a
    partial solve, its lowest ``n_modes`` columns.
    """

    eigenvectors: np.ndarray
    eigenvalues: np.ndarray
    n_zero: int
    lambda_max: float

    @property
    def n(self) -> int:
        return self.eigenvectors.shape[0]

    @property
    def n_modes(self) -> int:
        return self.eigenvectors.shape[1]

    @property
    def complete(self) -> bool:
        return self.n_modes == self.n


@dataclass(frozen=True, eq=False)
class SpectralAdjustment:
    delta: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.delta, dtype=np.float64)
        if d.ndim != 2 or d.shape[1] != 3:
            raise ValueError(f"adjustment must be M x 3, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("adjustment has non-finite entries")
        object.__setattr__(self, "delta", d)

    @property
    def m(self) -> int:
        return self.delta.shape[0]

    @classmethod
    def zeros(cls, m: int) -> "SpectralAdjustment":
        return cls(np.zeros((m, 3)))


def laplacian(graph: Union[OutlierAwareGraph, np.ndarray, sp.spmatrix]) -> np.ndarray:
    """Dense combinatorial Laplacian D - A."""
    a = graph.adjacency if isinstance(graph, OutlierAwareGraph) else graph
    a = a.toarray() if sp.issparse(a) else np.array(a, dtype=np.float64)
    lap = -a
    np.fill_diagonal(lap, 0.0)
    np.fill_diagonal(lap, -lap.sum(axis=1))
    return lap


def _zero_threshold(lambda_max: float) -> float:
    return ZERO_RTOL * max(lambda_max, 1.0)


def _canonical_signs(u: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry (lowest index on ties) is positive."""
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[idx, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return u * signs


def _component_indicators(lap: np.ndarray) -> np.ndarray:
    off = lap != 0
    np.fill_diagonal(off, False)
    n_comp, labels = connected_components(sp.csr_matrix(off), directed=False)
    # number components by their lowest vertex index
    first = np.full(n_comp, lap.shape[0])
    np.minimum.at(first, labels, np.arange(lap.shape[0]))
    rank = np.argsort(np.argsort(first))
    basis = np.zeros((lap.shape[0], n_comp))
    basis[np.arange(lap.shape[0]), rank[labels]] = 1.0
    return basis / np.sqrt(basis.sum(axis=0))


def _canonicalize(lap, w, u, lambda_max):
    """Clamp, order, and fix signs of eigenpairs so results are reproducible."""
    w = np.where(w < 0, 0.0, w)
    thresh = _zero_threshold(lambda_max)
    n_zero = int(np.sum(w < thresh))
    u = u.copy()
    if n_zero:
        ind = _component_indicators(lap)
        # the null space is spanned exactly by component indicators
        if ind.shape[1] == n_zero:
            u[:, :n_zero] = ind
            w[:n_zero] = 0.0
    u = _canonical_signs(u)
    # within eigenvalue clusters order columns by first index of max-|entry|
    tol = CLUSTER_RTOL * max(lambda_max, 1.0)
    lead = np.argmax(np.abs(u), axis=0)
    start = 0
    order = np.arange(len(w))
    for i in range(1, len(w) + 1):
        if i == len(w) or w[i] - w[i - 1] > tol:
            if i - start > 1:
                block = order[start:i]
                order[start:i] = block[np.argsort(lead[block], kind="stable")]
            start = i
    return w[order], u[:, order], n_zero


def eigendecompose(lap: np.ndarray, n_modes: Optional[int] = None) -> SpectralBasis:
    """Full (or lowest ``n_modes``) eigendecomposition of a symmetric Laplacian."""
    lap = np.asarray(lap, dtype=np.float64)
    n = lap.shape[0]
    if lap.shape != (n, n):
        raise ValueError(f"Laplacian must be square, got {lap.shape}")
    partial = n_modes is not None and n_modes < n
    try:
        if partial:
            w, u = scipy.linalg.eigh(lap, subset_by_index=[0, n_modes - 1], driver="evr")
            lambda_max = _largest_eigenvalue(lap)
        else:
            w, u = np.linalg.eigh(lap)
            lambda_max = float(w[-1]) if n else 0.0
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        asym = float(np.abs(lap - lap.T).max())
        raise SpectralError(
            f"eigensolver failed on {n}x{n} Laplacian "
            f"(|L|_F={np.linalg.norm(lap):.6g}, max asymmetry={asym:.3g}, "
            f"finite={bool(np.isfinite(lap).all())}): {exc}"
        ) from exc
    w, u, n_zero = _canonicalize(lap, w, u, lambda_max)
    return SpectralBasis(u, w, n_zero, max(lambda_max, 0.0))


def _largest_eigenvalue(lap: np.ndarray) -> float:
    if lap.shape[0] < 3:
        return float(np.linalg.eigvalsh(lap)[-1])
    v0 = np.ones(lap.shape[0]) / np.sqrt(lap.shape[0])
    v0[::2] *= -1
    return float(eigsh(sp.csr_matrix(lap), k=1, which="LA", v0=v0, tol=1e-12, return_eigenvectors=False)[0])


def component_count(graph: OutlierAwareGraph) -> int:
    return int(connected_components(graph.adjacency, directed=False)[0])


def graph_basis(graph: OutlierAwareGraph, n_modes: Optional[int] = None) -> SpectralBasis:
    return eigendecompose(laplacian(graph), n_modes)


def _signal(x) -> np.ndarray:
    return x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)


def gft(cloud, basis: SpectralBasis) -> np.ndarray:
    """Per-axis GFT coefficients U^T X (N x 3, or n_modes x 3 for a partial basis)."""
    x = _signal(cloud)
    if x.shape[0] != basis.n:
        raise ValueError(f"signal has {x.shape[0]} vertices, basis has {basis.n}")
    return basis.eigenvectors.T @ x


def igft(coeffs: np.ndarray, basis: SpectralBasis) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[0] != basis.n_modes:
        raise ValueError(f"{coeffs.shape[0]} coefficient rows for a basis of {basis.n_modes} modes")
    return basis.eigenvectors @ coeffs


def apply_adjustment(coeffs: np.ndarray, adj: SpectralAdjustment) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if adj.m >= coeffs.shape[0]:
        raise ValueError(f"band size M={adj.m} must be smaller than N={coeffs.shape[0]}")
    out = coeffs.copy()
    out[: adj.m] += adj.delta
    return out


def band_columns(basis: SpectralBasis, m: int, exclude_zero_modes: bool = False) -> np.ndarray:
    """The eigenvectors an M-row adjustment acts on (N x M)."""
    start = basis.n_zero if exclude_zero_modes else 0
    if m >= basis.n:
        raise ValueError(f"band size M={m} must be smaller than N={basis.n}")
    if start + m > basis.n_modes:
        raise ValueError(f"need {start + m} modes, basis holds {basis.n_modes}")
    return basis.eigenvectors[:, start : start + m]


def spectral_point_shift(
    cloud, basis: SpectralBasis, adj: SpectralAdjustment, exclude_zero_modes: bool = False
) -> np.ndarray:
    """Points after shifting the lowest M GFT coefficients by ``adj``.

    With a complete basis and the default band this runs the literal
    GFT -> adjust -> IGFT pipeline; otherwise it uses X + U_M @ delta, which is
    the same map by linearity.
    """
    x = _signal(cloud)
    if basis.complete and not exclude_zero_modes:
        return igft(apply_adjustment(gft(x, basis), adj), basis)
    return x + band_columns(basis, adj.m, exclude_zero_modes) @ adj.delta


def eigenmap_embed(basis: SpectralBasis, m: int = DEFAULT_EIGENMAP_DIM) -> np.ndarray:
    lo = basis.n_zero
    if m < 1 or lo + m > basis.n:
        raise ValueError(f"eigenmap of size {m} needs {lo + m} modes, graph has {basis.n} vertices")
    if lo + m > basis.n_modes:
        raise ValueError(f"eigenmap of size {m} needs {lo + m} modes, basis holds {basis.n_modes}")
    return basis.eigenvectors[:, lo : lo + m]


def spectral_descriptor(basis: SpectralBasis, m: int = DEFAULT_EIGENMAP_DIM) -> np.ndarray:
    """Max-pool of the eigenmap over all vertices, one value per embedding dimension."""
    return eigenmap_embed(basis, m).max(axis=0)


def energy_profile(coeffs: np.ndarray) -> np.ndarray:
    energy = np.sum(np.asarray(coeffs, dtype=np.float64) ** 2, axis=1)
    total = energy.sum()
    if not total > 0:
        raise SpectralError("zero-energy signal")
    out = np.minimum(np.cumsum(energy) / total, 1.0)
    out[-1] = 1.0
    return out


def low_pass(cloud, basis: SpectralBasis, keep: int) -> np.ndarray:
    """Reconstruct from the lowest ``keep`` GFT coefficients."""
    u = basis.eigenvectors[:, :keep]
    return u @ (u.T @ _signal(cloud))


def modes_needed(n_zero: int, m_band: int, eigenmap_dim: int, band_excludes_zero_modes: bool) -> int:
    band_end = n_zero + m_band if band_excludes_zero_modes else m_band
    return max(band_end, n_zero + eigenmap_dim)
