"""Generalized multiscale finite element (GMsFEM) reduced bases.

Offline, each coarse neighbourhood ``omega_i`` collects eigenfunctions of the
local Neumann problem ``A(k) phi = lambda S(k) phi`` for a handful of sampled
permeability fields (the snapshot space).  Online, the snapshot space is
compressed with the same eigenproblem at the mean field, and the retained
functions are multiplied by the coarse bilinear partition of unity to form
the columns of the downscaling matrix ``R``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .grid import StructuredGrid, assemble_mass, assemble_stiffness

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CoarseNeighborhood:
    """Union of the coarse cells that touch coarse node ``index``."""

    index: int
    patch: StructuredGrid
    nodes: np.ndarray  # global fine node indices, patch-local order

    @property
    def n_local(self) -> int:
        return self.nodes.size


def _check_nested(coarse: StructuredGrid, fine: StructuredGrid) -> tuple[int, int]:
    if fine.nx % coarse.nx or fine.ny % coarse.ny:
        raise ValueError(f"coarse grid {coarse.nx}x{coarse.ny} does not nest in fine grid {fine.nx}x{fine.ny}")
    if not np.allclose([coarse.x0, coarse.y0, coarse.x1, coarse.y1],
                       [fine.x0, fine.y0, fine.x1, fine.y1]):
        raise ValueError("coarse and fine grids cover different domains")
    return fine.nx // coarse.nx, fine.ny // coarse.ny


def neighborhoods(coarse: StructuredGrid, fine: StructuredGrid) -> list[CoarseNeighborhood]:
    """One neighbourhood per coarse node, truncated at the domain boundary."""
    rx, ry = _check_nested(coarse, fine)
    out = []
    for J in range(coarse.ny + 1):
        for I in range(coarse.nx + 1):
            i0, i1 = max(I - 1, 0) * rx, min(I + 1, coarse.nx) * rx
            j0, j1 = max(J - 1, 0) * ry, min(J + 1, coarse.ny) * ry
            patch, nodes = fine.subgrid(i0, i1, j0, j1)
            out.append(CoarseNeighborhood(int(coarse.node_index(I, J)), patch, nodes))
    return out


def local_matrices(nbhd: CoarseNeighborhood, k: np.ndarray):
    """Dense Neumann stiffness and ``k``-weighted mass on a neighbourhood."""
    kl = np.asarray(k, dtype=float)[nbhd.nodes]
    A = assemble_stiffness(nbhd.patch, kl).toarray()
    S = assemble_mass(nbhd.patch, kl).toarray()
    return A, S


def _smallest_eigenpairs(A, S, m):
    m = min(m, A.shape[0])
    try:
        lam, V = sla.eigh(A, S, subset_by_index=[0, m - 1])
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise np.linalg.LinAlgError(f"local generalized eigenproblem failed: {exc}") from exc
    return lam, V


@dataclass
class SnapshotSpace:
    """Orthonormalised span of the local eigenfunctions of one neighbourhood.

    ``raw`` keeps every eigenvector (``n_local x N_theta*M_snap``); ``basis``
    is an orthonormal basis of its column space after dropping directions
    below the relative singular-value tolerance.
    """

    nbhd: CoarseNeighborhood
    raw: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray

    @property
    def rank(self) -> int:
        return self.basis.shape[1]


def build_snapshots(nbhd: CoarseNeighborhood, k_samples, M_snap: int,
                    svd_tol: float = 1e-8) -> SnapshotSpace:
    """Collect ``M_snap`` smallest local eigenfunctions for each permeability sample.

    Parameters
    ----------
    nbhd : CoarseNeighborhood
    k_samples : array_like, shape (N_theta, n_fine_nodes)
        Nodal permeability fields drawn from the prior.
    M_snap : int
        Eigenfunctions kept per sample.
    """
    ks = np.atleast_2d(np.asarray(k_samples, dtype=float))
    if M_snap < 1:
        raise ValueError("M_snap must be positive")
    if M_snap > nbhd.n_local:
        raise ValueError(f"M_snap={M_snap} exceeds the {nbhd.n_local} local dofs of neighbourhood {nbhd.index}")
    cols, lams = [], []
    for k in ks:
        if np.any(k[nbhd.nodes] <= 0):
            raise ValueError(f"non-positive permeability on neighbourhood {nbhd.index}")
        lam, V = _smallest_eigenpairs(*local_matrices(nbhd, k), M_snap)
        cols.append(V)
        lams.append(lam)
    raw = np.hstack(cols)
    U, s, _ = np.linalg.svd(raw, full_matrices=False)
    r = int(np.sum(s > svd_tol * s[0]))
    if r < min(M_snap, raw.shape[1]):
        warnings.warn(f"snapshot space of neighbourhood {nbhd.index} is rank deficient ({r} < {M_snap})")
    return SnapshotSpace(nbhd, raw, U[:, :r], np.concatenate(lams))


def reduce_snapshots(snap: SnapshotSpace, k_bar, M_i: int) -> tuple[np.ndarray, np.ndarray]:
    """Smallest ``M_i`` eigenpairs of the local problem restricted to the snapshot space.

    Returns
    -------
    lam : ndarray, shape (M_i,)
        Ascending eigenvalues.
    psi : ndarray, shape (n_local, M_i)
        Local basis functions on the neighbourhood's fine nodes.
    """
    if M_i > snap.rank:
        raise ValueError(f"M_i={M_i} exceeds snapshot dimension {snap.rank} on neighbourhood {snap.nbhd.index}")
    A, S = local_matrices(snap.nbhd, k_bar)
    V = snap.basis
    As, Ss = V.T @ A @ V, V.T @ S @ V
    try:
        lam, Y = _smallest_eigenpairs(0.5 * (As + As.T), 0.5 * (Ss + Ss.T), M_i)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"snapshot mass matrix singular on neighbourhood {snap.nbhd.index}") from exc
    return lam, V @ Y


def partition_of_unity(coarse: StructuredGrid, fine: StructuredGrid) -> sp.csr_matrix:
    """Coarse bilinear hat functions sampled at fine nodes, shape ``(n_fine, n_coarse)``."""
    rx, ry = _check_nested(coarse, fine)
    # integer node indices keep nodes shared with the coarse grid exact
    fx = (np.arange(fine.n_nodes) % (fine.nx + 1)) / rx
    fy = (np.arange(fine.n_nodes) // (fine.nx + 1)) / ry
    rows, cols, vals = [], [], []
    for J in range(coarse.ny + 1):
        for I in range(coarse.nx + 1):
            w = np.clip(1 - np.abs(fx - I), 0, None) * np.clip(1 - np.abs(fy - J), 0, None)
            nz = np.flatnonzero(w > 0)
            rows.append(nz)
            cols.append(np.full(nz.size, coarse.node_index(I, J)))
            vals.append(w[nz])
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(fine.n_nodes, coarse.n_nodes),
    ).tocsr()


@dataclass
class MultiscaleBasis:
    """Downscaling matrix ``R`` and its bookkeeping.

    Columns are ordered node-major: the ``M_i`` functions of coarse node 0,
    then node 1, and so on.  ``support[i]`` lists the fine nodes of
    ``omega_i`` and ``owner[j]`` the coarse node of column ``j``.
    """

    R: np.ndarray
    counts: np.ndarray
    support: list
    eigenvalues: list
    k_bar: np.ndarray | None = None
    rank: int | None = None

    @property
    def n_basis(self) -> int:
        return self.R.shape[1]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.counts)])

    @property
    def owner(self) -> np.ndarray:
        return np.repeat(np.arange(self.counts.size), self.counts)

    def columns_of(self, i: int) -> np.ndarray:
        o = self.offsets
        return np.arange(o[i], o[i + 1])


def assemble_basis_matrix(local_bases: Sequence[np.ndarray], pou: sp.csr_matrix,
                          nbhds: Sequence[CoarseNeighborhood], eigenvalues=None,
                          rank_tol: float = 1e-10) -> MultiscaleBasis:
    """Multiply each local basis by its partition-of-unity function and stack.

    A numerically rank-deficient ``R`` (pivoted QR, relative tolerance
    ``rank_tol``) triggers a warning; the reduced operators built from it
    would be singular.
    """
    n_fine = pou.shape[0]
    chi = pou.tocsc()
    blocks, counts = [], []
    for nb, psi in zip(nbhds, local_bases):
        c = chi[:, nb.index].toarray().ravel()[nb.nodes]
        block = np.zeros((n_fine, psi.shape[1]))
        block[nb.nodes] = c[:, None] * psi
        blocks.append(block)
        counts.append(psi.shape[1])
    R = np.hstack(blocks)
    rank = numerical_rank(R, rank_tol)
    if rank < R.shape[1]:
        warnings.warn(f"multiscale basis is rank deficient: rank {rank} < {R.shape[1]} columns")
    return MultiscaleBasis(R, np.array(counts), [nb.nodes for nb in nbhds],
                           list(eigenvalues) if eigenvalues is not None else [], rank=rank)


def numerical_rank(R: np.ndarray, tol: float = 1e-10) -> int:
    if R.shape[1] == 0:
        return 0
    _, r, _ = sla.qr(R, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    return int(np.sum(d > tol * d[0]))


def project(R, B, K, F=None):
    """Dense Galerkin projections ``R^T B R``, ``R^T K R`` and ``R^T F``."""
    R = R.R if isinstance(R, MultiscaleBasis) else np.asarray(R)
    if B.shape[0] != R.shape[0] or K.shape[0] != R.shape[0]:
        raise ValueError(f"basis has {R.shape[0]} rows, matrices have {B.shape[0]} / {K.shape[0]}")
    Bt = R.T @ (B @ R)
    Kt = R.T @ (K @ R)
    Bt = 0.5 * (Bt + Bt.T)
    Kt = 0.5 * (Kt + Kt.T)
    if F is None:
        return Bt, Kt
    return Bt, Kt, R.T @ np.asarray(F)


def downscale(R, u_H) -> np.ndarray:
    """Fine-grid field ``R u_H`` (batched over leading axes of ``u_H``)."""
    R = R.R if isinstance(R, MultiscaleBasis) else np.asarray(R)
    return np.asarray(u_H) @ R.T


class GMsFEMBuilder:
    """Offline snapshot spaces plus online reduction at an updatable mean.

    Parameters
    ----------
    fine, coarse : StructuredGrid
    k_samples : array_like, shape (N_theta, n_fine_nodes)
        Prior permeability samples used for the snapshot spaces.
    M_snap : int
        Local eigenfunctions kept per sample.
    field_map : callable, optional
        Maps a parameter vector to a nodal permeability; needed by
        :meth:`update_mean`.
    """

    def __init__(self, fine: StructuredGrid, coarse: StructuredGrid, k_samples, M_snap: int = 20,
                 field_map: Callable | None = None):
        self.fine = fine
        self.coarse = coarse
        self.field_map = field_map
        self.nbhds = neighborhoods(coarse, fine)
        self.pou = partition_of_unity(coarse, fine)
        ks = np.atleast_2d(np.asarray(k_samples, dtype=float))
        self.k_samples = ks
        self.snapshots = [build_snapshots(nb, ks, M_snap) for nb in self.nbhds]
        self._cache: dict = {}

    def basis(self, k_bar, M_i: int | Sequence[int]) -> MultiscaleBasis:
        """Reduce every snapshot space at permeability ``k_bar`` and assemble ``R``."""
        k_bar = np.asarray(k_bar, dtype=float)
        Ms = np.broadcast_to(np.asarray(M_i, dtype=int), (len(self.nbhds),))
        key = (k_bar.tobytes(), Ms.tobytes())
        if key in self._cache:
            return self._cache[key]
        psis, lams = [], []
        for snap, m in zip(self.snapshots, Ms):
            lam, psi = reduce_snapshots(snap, k_bar, int(m))
            psis.append(psi)
            lams.append(lam)
        mb = assemble_basis_matrix(psis, self.pou, self.nbhds, lams)
        mb.k_bar = k_bar.copy()
        self._cache[key] = mb
        return mb

    def update_mean(self, ensemble, M_i) -> MultiscaleBasis:
        """Rebuild ``R`` at the mean of ``ensemble`` (``n_p x M``, members in columns)."""
        if self.field_map is None:
            raise RuntimeError("update_mean needs a field_map from parameters to permeability")
        E = np.atleast_2d(np.asarray(ensemble, dtype=float))
        if E.shape[1] == 0:
            raise ValueError("empty ensemble")
        theta_bar = E.mean(axis=1)
        return self.basis(self.field_map(theta_bar), M_i)
