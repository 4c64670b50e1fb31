"""Forward maps from model inputs to sensor readings.

Two solvers share one interface:

* :class:`FullOrderSolver` assembles and factorises the fine-grid system for
  every member (used for synthetic data and validation).
* :class:`ReducedSolver` works in the span of a GMsFEM basis.  The reduced
  stiffness is affine in the nodal permeability, so it is assembled from
  per-coarse-cell tensors precomputed once per basis; the time march is then
  vectorised over ensemble members.

Observations are returned time-major: all sensors at the first requested
time, then all sensors at the next, and so on.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .caputo import FractionalConfig, march, normalize_order, step_scale, time_index, weight_matrix, weight_tables
from .gmsfem import MultiscaleBasis
from .grid import (
    BoundaryCondition,
    StructuredGrid,
    assemble_mass,
    assemble_stiffness,
    element_stiffness_parts,
    load_operator,
    observation_matrix,
)


def _constant_profile(t: float) -> np.ndarray:
    return np.ones(1)


@dataclass
class ForwardSetup:
    """Everything about the forward problem that does not depend on the parameters.

    ``profile(t)`` returns the on/off weight of each source component; the
    spatial part of each component is supplied per member through
    :class:`BatchInputs`.
    """

    grid: StructuredGrid
    bc: BoundaryCondition
    sensors: np.ndarray
    dt: float
    profile: Callable[[float], np.ndarray] = _constant_profile

    def __post_init__(self):
        self.sensors = np.atleast_2d(np.asarray(self.sensors, dtype=float))
        self.P = observation_matrix(self.grid, self.sensors)
        self.B = assemble_mass(self.grid)
        self.load_op = load_operator(self.grid)
        self.fixed, g = self.bc.dirichlet_values(self.grid)
        self.free = np.setdiff1d(np.arange(self.grid.n_nodes), self.fixed)
        self.lift = np.zeros(self.grid.n_nodes)
        self.lift[self.fixed] = g

    @property
    def n_sensors(self) -> int:
        return self.sensors.shape[0]

    @property
    def n_quad(self) -> int:
        return self.grid.n_elements * 4

    def constant_load(self, value: float) -> np.ndarray:
        """Quadrature values of a spatially constant source, shape ``(1, n_quad)``."""
        return np.full((1, self.n_quad), float(value))


@dataclass
class BatchInputs:
    """Model inputs for ``M`` members.

    ``k`` and ``loads`` may be shared (no leading member axis) or per member.
    ``loads`` holds source components at the quadrature points,
    ``(..., n_comp, n_quad)``.
    """

    k: np.ndarray
    gamma: np.ndarray
    loads: np.ndarray

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=float)
        self.gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        self.loads = np.asarray(self.loads, dtype=float)
        M = self.M
        if self.k.ndim == 2 and self.k.shape[0] not in (1, M):
            raise ValueError("k batch size does not match gamma")
        if self.loads.ndim == 3 and self.loads.shape[0] not in (1, M):
            raise ValueError("loads batch size does not match gamma")
        if np.any(self.k <= 0) or not np.all(np.isfinite(self.k)):
            raise ValueError("permeability must be finite and positive")

    @property
    def M(self) -> int:
        return max(self.gamma.size,
                   self.k.shape[0] if self.k.ndim == 2 else 1,
                   self.loads.shape[0] if self.loads.ndim == 3 else 1)

    @property
    def shared_k(self) -> bool:
        return self.k.ndim == 1 or self.k.shape[0] == 1

    def k_of(self, m: int) -> np.ndarray:
        return self.k if self.k.ndim == 1 else self.k[0 if self.k.shape[0] == 1 else m]

    def loads_of(self, m: int) -> np.ndarray:
        return self.loads if self.loads.ndim == 2 else self.loads[0 if self.loads.shape[0] == 1 else m]

    def gamma_of(self, m: int) -> float:
        return float(self.gamma[0 if self.gamma.size == 1 else m])

    def subset(self, idx) -> "BatchInputs":
        idx = np.asarray(idx)
        k = self.k if self.shared_k else self.k[idx]
        loads = self.loads if self.loads.ndim == 2 or self.loads.shape[0] == 1 else self.loads[idx]
        g = self.gamma if self.gamma.size == 1 else self.gamma[idx]
        return BatchInputs(k, np.broadcast_to(g, (idx.size,)).copy(), loads)


class FullOrderSolver:
    """Fine-grid finite element solver, one sparse factorisation per member."""

    def __init__(self, setup: ForwardSetup):
        self.setup = setup

    def trajectory(self, k, gamma: float, loads, n_steps: int) -> np.ndarray:
        """Nodal solution at every time level, shape ``(n_steps+1, n_nodes)``."""
        st = self.setup
        K = assemble_stiffness(st.grid, k)
        free = st.free
        cfg = FractionalConfig(gamma, st.dt, n_steps * st.dt)
        Kff = K[free][:, free]
        Bff = st.B[free][:, free].tocsr()
        lu = spla.splu((Bff + cfg.scale * Kff).tocsc())
        comp = (st.load_op @ np.atleast_2d(loads).T).T[:, free]  # (n_comp, n_free)
        Klift = (K @ st.lift)[free]

        def forcing(t):
            return st.profile(t) @ comp - Klift

        U = march(lu.solve, lambda u: Bff @ u, forcing, cfg, np.zeros(free.size), n_steps)
        full = np.broadcast_to(st.lift, (U.shape[0], st.grid.n_nodes)).copy()
        full[:, free] = U
        return full

    def observe(self, inputs: BatchInputs, times) -> np.ndarray:
        """Sensor readings, shape ``(M, len(times) * n_sensors)``."""
        idx = time_index(times, self.setup.dt)
        out = np.empty((inputs.M, idx.size * self.setup.n_sensors))
        for m in range(inputs.M):
            U = self.trajectory(inputs.k_of(m), inputs.gamma_of(m), inputs.loads_of(m), int(idx.max()))
            out[m] = (self.setup.P @ U[idx].T).T.ravel()
        return out


@dataclass
class _CellTensors:
    nodes: np.ndarray  # fine nodes of the coarse cell
    cols: np.ndarray  # basis columns supported on the cell
    T: np.ndarray  # (n_nodes_cell, J*J) stiffness contributions
    V: np.ndarray  # (n_nodes_cell, J) boundary-lift coupling


class ReducedOperator:
    """Precomputed pieces of the GMsFEM system for one basis.

    The Dirichlet rows of ``R`` are zeroed so the reduced space satisfies
    homogeneous conditions; the boundary data enter through the lift.
    Zeroing can make the columns dependent (rich bases on small grids).  The
    solvers then work on ``Y``, a ``B~``-orthonormal basis of the numerical
    range, and a warning is issued.
    """

    rank_tol = 1e-10

    def __init__(self, setup: ForwardSetup, basis: MultiscaleBasis, coarse: StructuredGrid):
        self.setup = setup
        self.basis = basis
        fine = setup.grid
        R = basis.R.copy()
        R[setup.fixed] = 0.0
        self.R = R
        n_H = R.shape[1]
        self.n_H = n_H
        self.Bt = R.T @ (setup.B @ R)
        self.Bt = 0.5 * (self.Bt + self.Bt.T)
        mu, Q = np.linalg.eigh(self.Bt)
        keep = mu > self.rank_tol * mu.max()
        self.Y = None
        if not np.all(keep):
            warnings.warn(f"reduced space is rank deficient after boundary elimination: "
                          f"rank {int(keep.sum())} < {n_H} basis functions")
            self.Y = Q[:, keep] / np.sqrt(mu[keep])
        self.G = (setup.load_op.T @ R).T  # (n_H, n_quad)
        self.PR = np.asarray(setup.P @ R)
        self.Plift = setup.P @ setup.lift

        rx, ry = fine.nx // coarse.nx, fine.ny // coarse.ny
        parts = element_stiffness_parts(fine)
        owner = basis.owner
        self.cells: list[_CellTensors] = []
        for cj in range(coarse.ny):
            for ci in range(coarse.nx):
                corner = coarse.elements[cj * coarse.nx + ci]
                cols = np.flatnonzero(np.isin(owner, corner))
                ii, jj = np.meshgrid(np.arange(ci * rx, (ci + 1) * rx), np.arange(cj * ry, (cj + 1) * ry))
                elems = (jj * fine.nx + ii).ravel()
                enodes = fine.elements[elems]  # (n_e, 4)
                nodes, local = np.unique(enodes, return_inverse=True)
                local = local.reshape(enodes.shape)
                Re = R[enodes][:, :, cols]  # (n_e, 4, J)
                contrib = np.einsum("eiJ,aij,ejK->eaJK", Re, parts, Re)
                J = cols.size
                T = np.zeros((nodes.size, J * J))
                np.add.at(T, local.ravel(), contrib.reshape(-1, J * J))
                le = setup.lift[enodes]
                vc = np.einsum("eiJ,aij,ej->eaJ", Re, parts, le)
                V = np.zeros((nodes.size, J))
                np.add.at(V, local.ravel(), vc.reshape(-1, J))
                self.cells.append(_CellTensors(nodes, cols, T, V))

    def stiffness(self, k) -> tuple[np.ndarray, np.ndarray]:
        """Reduced stiffness ``R^T K(k) R`` and lift coupling ``R^T K(k) g``.

        ``k`` is ``(n_nodes,)`` or ``(M, n_nodes)``; outputs gain the same
        leading axis.
        """
        k = np.asarray(k, dtype=float)
        single = k.ndim == 1
        k2 = np.atleast_2d(k)
        M = k2.shape[0]
        Kt = np.zeros((M, self.n_H, self.n_H))
        Kl = np.zeros((M, self.n_H))
        for c in self.cells:
            J = c.cols.size
            kc = k2[:, c.nodes]
            Kt[:, c.cols[:, None], c.cols[None, :]] += (kc @ c.T).reshape(M, J, J)
            Kl[:, c.cols] += kc @ c.V
        Kt = 0.5 * (Kt + np.swapaxes(Kt, 1, 2))
        return (Kt[0], Kl[0]) if single else (Kt, Kl)

    def reduced_loads(self, loads) -> np.ndarray:
        """Project quadrature-point source components, ``(..., n_comp, n_H)``."""
        return np.asarray(loads) @ self.G.T

    def observe_coefficients(self, uH) -> np.ndarray:
        return uH @ self.PR.T + self.Plift


class ReducedSolver:
    """Vectorised GMsFEM time march for an ensemble.

    Parameters
    ----------
    op : ReducedOperator
    chunk : int
        Members processed together; bounds the memory of the dense batched
        inverses and trajectories.
    """

    def __init__(self, op: ReducedOperator, chunk: int = 128):
        self.op = op
        self.chunk = int(chunk)
        self._modal_cache: dict = {}

    @property
    def setup(self) -> ForwardSetup:
        return self.op.setup

    def observe(self, inputs: BatchInputs, times) -> np.ndarray:
        idx = time_index(times, self.setup.dt)
        M = inputs.M
        out = np.empty((M, idx.size * self.setup.n_sensors))
        gam = np.array([normalize_order(inputs.gamma_of(m)) for m in range(M)])
        for regime_mask in (gam < 1, gam > 1):
            members = np.flatnonzero(regime_mask)
            for start in range(0, members.size, self.chunk):
                sel = members[start:start + self.chunk]
                out[sel] = self._observe_chunk(inputs.subset(sel), gam[sel], idx)
        return out

    def _observe_chunk(self, inp: BatchInputs, gam: np.ndarray, idx: np.ndarray) -> np.ndarray:
        op, st = self.op, self.setup
        N = int(idx.max())
        M = gam.size
        s = np.atleast_1d(step_scale(gam, st.dt))
        if np.all(gam == gam[0]):
            W = np.broadcast_to(weight_matrix(N, gam[0]), (M, N + 1, N + 1))
        else:
            W = weight_tables(N, gam)
        Fc = op.reduced_loads(inp.loads)  # (n_comp, n_H) or (M, n_comp, n_H)
        super_ = gam[0] > 1
        if inp.shared_k:
            U = self._march_modal(inp.k_of(0), s, W, Fc, N, super_)
        else:
            U = self._march_dense(inp.k, s, W, Fc, N, super_)
        obs = op.observe_coefficients(U[:, idx])  # (M, n_t, n_sensors)
        return obs.reshape(M, -1)

    def _forcing(self, Fc, Kl, t):
        prof = self.setup.profile(t)
        F = np.einsum("c,...cn->...n", prof, Fc)
        return F - Kl

    def _march_dense(self, k, s, W, Fc, N, super_):
        op = self.op
        Kt, Kl = op.stiffness(k)
        M = Kt.shape[0]
        Bt, Y = op.Bt, op.Y
        if Y is not None:
            # Galerkin on the range: Y^T Bt Y = I
            Kt = Y.T @ Kt @ Y
            Bt = np.eye(Y.shape[1])
        A = Bt[None] + s[:, None, None] * Kt
        Ainv = np.linalg.inv(A)
        U = np.zeros((M, N + 1, Bt.shape[0]))
        start = 2 if super_ else 1
        for m in range(start, N + 1):
            hist = np.einsum("mk,mkn->mn", W[:, m, :m], U[:, :m])
            F = self._forcing(Fc, Kl, m * self.setup.dt)
            rhs = hist @ Bt + s[:, None] * (F if Y is None else F @ Y)
            U[:, m] = np.einsum("mij,mj->mi", Ainv, rhs)
        return U if Y is None else U @ Y.T

    def _modal(self, k):
        key = np.asarray(k).tobytes()
        if key not in self._modal_cache:
            Kt, Kl = self.op.stiffness(k)
            Y = self.op.Y
            if Y is None:
                lam, X = sla.eigh(Kt, self.op.Bt)  # X^T Bt X = I, X^T Kt X = diag(lam)
            else:
                lam, Z = np.linalg.eigh(Y.T @ Kt @ Y)
                X = Y @ Z
            self._modal_cache = {key: (lam, X, Kl)}
        return self._modal_cache[key]

    def _march_modal(self, k, s, W, Fc, N, super_):
        # with X^T Bt X = I the system decouples: (1 + s lam) v = sum c v + s X^T F
        lam, X, Kl = self._modal(k)
        M = s.size
        F_modal = np.asarray(Fc) @ X  # (..., n_comp, n_H)
        Kl_modal = Kl @ X
        denom = 1.0 + s[:, None] * lam[None, :]
        V = np.zeros((M, N + 1, lam.size))
        start = 2 if super_ else 1
        for m in range(start, N + 1):
            prof = self.setup.profile(m * self.setup.dt)
            F = np.einsum("c,...cn->...n", prof, F_modal) - Kl_modal
            hist = np.einsum("mk,mkn->mn", W[:, m, :m], V[:, :m])
            V[:, m] = (hist + s[:, None] * F) / denom
        return V @ X.T


def solve_forward(theta, model: "ForwardModel", times) -> np.ndarray:
    """Stacked sensor readings for one parameter vector."""
    return model.observe(np.asarray(theta, dtype=float)[:, None], times)[:, 0]


class ForwardModel:
    """Parameters to observations: a parameter map feeding a solver.

    ``param_map`` takes a ``(M, n_p)`` array and returns :class:`BatchInputs`.
    Ensembles enter and leave with members in columns.
    """

    def __init__(self, param_map: Callable[[np.ndarray], BatchInputs], solver):
        self.param_map = param_map
        self.solver = solver

    def observe(self, theta, times) -> np.ndarray:
        """Observations ``(n_d, M)`` for an ensemble ``(n_p, M)``."""
        th = np.atleast_2d(np.asarray(theta, dtype=float))
        inputs = self.param_map(th.T)
        return self.solver.observe(inputs, times).T

    def at(self, times) -> Callable[[np.ndarray], np.ndarray]:
        """Observation map restricted to fixed times, for the filters."""
        times = np.asarray(times, dtype=float)
        return lambda theta: self.observe(theta, times)
