"""Pixel-lattice graphs and spectral filtering on them.

Nodes are numbered row-major (``row * width + col``). Two matrices are kept
apart on purpose: the Laplacian ``L = D - A`` is built from the raw adjacency,
while the propagation matrix ``D~^-1/2 (A + I) D~^-1/2`` of the GCN layer uses
self-loops.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .autodiff import Tensor, sparse_matmul
from .errors import ConfigurationError, OracleMisuseError

DEFAULT_ORACLE_CAP = 4096


@dataclass(frozen=True, eq=False)
class GridGraph:
    height: int
    width: int
    connectivity: int
    csr: sp.csr_matrix  # A + I
    deg_inv_sqrt: np.ndarray
    norm_csr: sp.csr_matrix

    @property
    def num_nodes(self) -> int:
        return self.csr.shape[0]

    @property
    def adjacency(self) -> sp.csr_matrix:
        """Raw adjacency without self-loops."""
        a = (self.csr - sp.identity(self.num_nodes, format="csr")).tocsr()
        a.eliminate_zeros()
        return a

    def edges(self) -> np.ndarray:
        """Undirected edges as an (m, 2) array with ``i < j``, sorted."""
        coo = sp.triu(self.adjacency, k=1).tocoo()
        e = np.stack([coo.row, coo.col], axis=1).astype(np.int64)
        return e[np.lexsort((e[:, 1], e[:, 0]))]

    def permuted(self, perm) -> "GridGraph":
        """Relabel nodes so that new node ``k`` is old node ``perm[k]``."""
        perm = np.asarray(perm)
        return from_adjacency(self.adjacency[perm][:, perm], self.height, self.width, self.connectivity)


def _offsets(connectivity: int):
    if connectivity == 4:
        return [(0, 1), (1, 0)]
    if connectivity == 8:
        return [(0, 1), (1, 0), (1, 1), (1, -1)]
    raise ConfigurationError(f"connectivity must be 4 or 8, got {connectivity}")


def from_adjacency(adj: sp.spmatrix, h: int, w: int, connectivity: int) -> GridGraph:
    n = adj.shape[0]
    a_tilde = (adj + sp.identity(n, format="csr")).tocsr()
    a_tilde.sort_indices()
    deg = np.asarray(a_tilde.sum(axis=1)).ravel()
    dinv = 1.0 / np.sqrt(deg)
    coo = a_tilde.tocoo()
    # dinv[i]*dinv[j] == dinv[j]*dinv[i] bit for bit, so the result is exactly symmetric
    vals = dinv[coo.row] * coo.data * dinv[coo.col]
    norm = sp.csr_matrix((vals, (coo.row, coo.col)), shape=(n, n))
    norm.sort_indices()
    return GridGraph(h, w, connectivity, a_tilde, dinv, norm)


def build_grid(h: int, w: int, connectivity: int = 4) -> GridGraph:
    """Lattice graph of an ``h`` x ``w`` image with self-loops and precomputed normalisation."""
    if h < 1 or w < 1:
        raise ConfigurationError(f"grid dimensions must be positive, got {h}x{w}")
    idx = np.arange(h * w).reshape(h, w)
    rows, cols = [], []
    for dr, dc in _offsets(connectivity):
        r0, r1 = 0, h - dr
        c0, c1 = max(0, -dc), w - max(0, dc)
        src = idx[r0:r1, c0:c1].ravel()
        dst = idx[r0 + dr:r1 + dr, c0 + dc:c1 + dc].ravel()
        rows += [src, dst]
        cols += [dst, src]
    n = h * w
    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
    else:
        r = c = np.zeros(0, dtype=np.int64)
    adj = sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
    return from_adjacency(adj, h, w, connectivity)


@dataclass(frozen=True, eq=False)
class Laplacian:
    csr: sp.csr_matrix  # D - A, no self-loops
    lambda_max: float
    scaled: sp.csr_matrix  # (2 / lambda_max) L - I
    converged: bool = True

    @property
    def num_nodes(self) -> int:
        return self.csr.shape[0]


def power_iteration(L, iters: int = 200, tol: float = 1e-9, seed: int = 0) -> tuple[float, bool]:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Returns the Rayleigh-quotient estimate and whether successive estimates
    settled within ``tol`` before ``iters`` ran out.
    """
    if iters < 1:
        raise ConfigurationError("power iteration needs at least one iteration")
    n = L.shape[0]
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = L @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0, True
        new = float(v @ w)
        v = w / nrm
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            return float(v @ (L @ v)), True
        lam = new
    return float(v @ (L @ v)), False


def laplacian(g: GridGraph, lambda_max="power", iters: int = 200, tol: float = 1e-9) -> Laplacian:
    """Unnormalised Laplacian plus its rescaling onto [-1, 1].

    ``lambda_max`` is ``"power"`` (estimate it), ``"assume2"`` (take 2, the
    usual GCN simplification) or an explicit float.
    """
    adj = g.adjacency
    n = g.num_nodes
    deg = np.asarray(adj.sum(axis=1)).ravel()
    L = (sp.diags(deg) - adj).tocsr()
    L.sort_indices()
    converged = True
    if lambda_max == "power":
        lam, converged = power_iteration(L, iters, tol)
    elif lambda_max == "assume2":
        lam = 2.0
    else:
        lam = float(lambda_max)
    if lam > 0:
        scaled = ((2.0 / lam) * L - sp.identity(n, format="csr")).tocsr()
    else:
        # edgeless graph: L = 0 and every eigenvalue maps to -1
        scaled = (-sp.identity(n, format="csr")).tocsr()
    scaled.sort_indices()
    return Laplacian(L, lam, scaled, converged)


@dataclass(frozen=True)
class ChebFilter:
    order: int
    coeffs: tuple

    def __post_init__(self):
        if self.order < 0 or len(self.coeffs) != self.order + 1:
            raise ConfigurationError(f"order {self.order} needs {self.order + 1} coefficients, got {len(self.coeffs)}")

    @classmethod
    def from_coeffs(cls, coeffs) -> "ChebFilter":
        c = tuple(float(a) for a in coeffs)
        return cls(len(c) - 1, c)


def cheb_apply(filt: ChebFilter, lap: Laplacian, f):
    """Sum of ``alpha_k T_k(L~) f`` via the three-term recurrence (sparse products only)."""
    as_array = not isinstance(f, Tensor)
    x = Tensor(f, _check=False) if as_array else f
    if x.ndim == 1:
        x = Tensor(x.data[:, None], _check=False) if as_array else x
    t_prev = x
    out = filt.coeffs[0] * t_prev
    if filt.order >= 1:
        t_cur = sparse_matmul(lap.scaled, x)
        out = out + filt.coeffs[1] * t_cur
        for k in range(2, filt.order + 1):
            t_next = 2.0 * sparse_matmul(lap.scaled, t_cur) - t_prev
            out = out + filt.coeffs[k] * t_next
            t_prev, t_cur = t_cur, t_next
    if as_array:
        return out.data.reshape(np.shape(f))
    return out


def cheb_gains(filt: ChebFilter, eigenvalues, lambda_max: float) -> np.ndarray:
    """Spectral response of a Chebyshev filter at the given Laplacian eigenvalues."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    x = (2.0 / lambda_max) * lam - 1.0 if lambda_max > 0 else -np.ones_like(lam)
    return np.polynomial.chebyshev.chebval(x, np.asarray(filt.coeffs))


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    """Dense eigendecomposition of a small Laplacian; used only as a test oracle."""

    Phi: np.ndarray
    Lambda: np.ndarray

    @classmethod
    def of(cls, lap, max_nodes: int = DEFAULT_ORACLE_CAP) -> "SpectralDecomposition":
        M = lap.csr if isinstance(lap, Laplacian) else lap
        n = M.shape[0]
        if n > max_nodes:
            raise OracleMisuseError(f"dense oracle limited to {max_nodes} nodes, graph has {n}")
        dense = M.toarray() if sp.issparse(M) else np.asarray(M, dtype=np.float64)
        lam, phi = np.linalg.eigh(dense)
        return cls(phi, lam)


def spectral_apply(decomp: SpectralDecomposition, ghat, f, max_nodes: int = DEFAULT_ORACLE_CAP) -> np.ndarray:
    """Exact spectral filtering ``Phi diag(ghat) Phi^T f``.

    ``ghat`` is either an array of per-eigenvalue gains or a callable mapping
    eigenvalues to gains.
    """
    n = decomp.Phi.shape[0]
    if n > max_nodes:
        raise OracleMisuseError(f"dense oracle limited to {max_nodes} nodes, graph has {n}")
    gains = ghat(decomp.Lambda) if callable(ghat) else np.asarray(ghat, dtype=np.float64)
    fa = f.data if isinstance(f, Tensor) else np.asarray(f, dtype=np.float64)
    col = fa.ndim == 1
    if col:
        fa = fa[:, None]
    out = decomp.Phi @ (gains[:, None] * (decomp.Phi.T @ fa))
    return out[:, 0] if col else out


def write_graph_dump(g: GridGraph, path) -> None:
    """Text dump: ``n m connectivity`` then one ``i j`` line per undirected edge."""
    e = g.edges()
    lines = [f"{g.num_nodes} {len(e)} {g.connectivity}"]
    lines += [f"{i} {j}" for i, j in e]
    Path(path).write_text("\n".join(lines) + "\n")


def read_graph_dump(path) -> tuple[int, int, np.ndarray]:
    """Inverse of :func:`write_graph_dump`: returns ``(n, connectivity, edges)``."""
    lines = Path(path).read_text().split("\n")
    n, m, conn = (int(t) for t in lines[0].split())
    edges = np.array([[int(t) for t in ln.split()] for ln in lines[1:1 + m]], dtype=np.int64).reshape(m, 2)
    return n, conn, edges
