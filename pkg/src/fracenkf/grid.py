"""Structured rectangular meshes and bilinear (Q1) finite elements.

Node ``(i, j)`` sits at ``(x0 + i*hx, y0 + j*hy)`` and has global index
``j*(nx+1) + i``.  Elements list their nodes counter-clockwise starting at the
lower-left corner.  All integrals use the 2x2 Gauss rule; nodal coefficient
fields are interpolated bilinearly to the quadrature points.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Union

import numpy as np
import scipy.sparse as sp

LEFT, RIGHT, BOTTOM, TOP = 1, 2, 4, 8
SIDES = {"left": LEFT, "right": RIGHT, "bottom": BOTTOM, "top": TOP}

_GAUSS = 0.5 + np.array([-0.5, 0.5]) / np.sqrt(3.0)
# quadrature points on the reference square, ordered (xi, eta)
_QXI = np.array([_GAUSS[0], _GAUSS[1], _GAUSS[1], _GAUSS[0]])
_QETA = np.array([_GAUSS[0], _GAUSS[0], _GAUSS[1], _GAUSS[1]])
_QW = np.full(4, 0.25)


def _shape(xi, eta):
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    return np.stack(
        [(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta], axis=-1
    )


def _shape_grad(xi, eta):
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    dxi = np.stack([-(1 - eta), 1 - eta, eta, -eta], axis=-1)
    deta = np.stack([-(1 - xi), -xi, xi, 1 - xi], axis=-1)
    return dxi, deta


_N = _shape(_QXI, _QETA)  # (q, a)
_DXI, _DETA = _shape_grad(_QXI, _QETA)


@dataclass(frozen=True)
class StructuredGrid:
    """Uniform tensor-product mesh of ``nx`` by ``ny`` bilinear elements."""

    nx: int
    ny: int
    x0: float = 0.0
    y0: float = 0.0
    x1: float = 1.0
    y1: float = 1.0
    nodes: np.ndarray = field(init=False, repr=False, compare=False)
    elements: np.ndarray = field(init=False, repr=False, compare=False)
    boundary_tags: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"grid needs at least one element per axis, got {self.nx}x{self.ny}")
        xs = np.linspace(self.x0, self.x1, self.nx + 1)
        ys = np.linspace(self.y0, self.y1, self.ny + 1)
        X, Y = np.meshgrid(xs, ys)
        nodes = np.column_stack([X.ravel(), Y.ravel()])

        ii, jj = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        ll = (jj * (self.nx + 1) + ii).ravel()
        elements = np.column_stack([ll, ll + 1, ll + self.nx + 2, ll + self.nx + 1])

        ix = np.tile(np.arange(self.nx + 1), self.ny + 1)
        iy = np.repeat(np.arange(self.ny + 1), self.nx + 1)
        tags = (
            LEFT * (ix == 0)
            + RIGHT * (ix == self.nx)
            + BOTTOM * (iy == 0)
            + TOP * (iy == self.ny)
        ).astype(np.int8)

        for name, value in (("nodes", nodes), ("elements", elements), ("boundary_tags", tags)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def hx(self) -> float:
        return (self.x1 - self.x0) / self.nx

    @property
    def hy(self) -> float:
        return (self.y1 - self.y0) / self.ny

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_elements(self) -> int:
        return self.nx * self.ny

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.x0, self.x1, self.nx + 1)

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(self.y0, self.y1, self.ny + 1)

    def node_index(self, i, j):
        return np.asarray(j) * (self.nx + 1) + np.asarray(i)

    def boundary_nodes(self, side: str) -> np.ndarray:
        return np.flatnonzero(self.boundary_tags & SIDES[side])

    def quadrature_points(self) -> np.ndarray:
        """Physical Gauss points, shape ``(n_elements, 4, 2)``."""
        ll = self.nodes[self.elements[:, 0]]
        qx = ll[:, None, 0] + _QXI[None, :] * self.hx
        qy = ll[:, None, 1] + _QETA[None, :] * self.hy
        return np.stack([qx, qy], axis=-1)

    def subgrid(self, i0: int, i1: int, j0: int, j1: int) -> tuple["StructuredGrid", np.ndarray]:
        """Patch of elements ``[i0, i1) x [j0, j1)`` and its node indices in this grid."""
        patch = StructuredGrid(
            i1 - i0,
            j1 - j0,
            self.x0 + i0 * self.hx,
            self.y0 + j0 * self.hy,
            self.x0 + i1 * self.hx,
            self.y0 + j1 * self.hy,
        )
        ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1))
        return patch, self.node_index(ii.ravel(), jj.ravel())


def build_grid(nx: int, ny: int) -> StructuredGrid:
    """Uniform grid over the unit square."""
    return StructuredGrid(int(nx), int(ny))


# element matrices as linear functions of the four nodal coefficient values:
# K_e = sum_a coef[a] * STIFF_PARTS[a] (before scaling by the element geometry)
def _element_parts(hx: float, hy: float):
    area = hx * hy
    dx = _DXI / hx
    dy = _DETA / hy
    grad_outer = dx[:, :, None] * dx[:, None, :] + dy[:, :, None] * dy[:, None, :]
    mass_outer = _N[:, :, None] * _N[:, None, :]
    wq = _QW * area
    # weight of nodal coefficient a at quadrature point q is _N[q, a]
    stiff = np.einsum("q,qa,qij->aij", wq, _N, grad_outer)
    mass = np.einsum("q,qa,qij->aij", wq, _N, mass_outer)
    return stiff, mass


def element_stiffness_parts(grid: StructuredGrid) -> np.ndarray:
    """``(4, 4, 4)`` array ``G[a]`` with ``K_e = sum_a k_a G[a]`` for a single element."""
    return _element_parts(grid.hx, grid.hy)[0]


def element_mass_parts(grid: StructuredGrid) -> np.ndarray:
    return _element_parts(grid.hx, grid.hy)[1]


def _assemble(grid: StructuredGrid, coef: np.ndarray, parts: np.ndarray) -> sp.csr_matrix:
    ke = np.einsum("ea,aij->eij", coef[grid.elements], parts)
    rows = np.repeat(grid.elements, 4, axis=1).ravel()
    cols = np.tile(grid.elements, (1, 4)).ravel()
    n = grid.n_nodes
    return sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def _nodal(grid: StructuredGrid, values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = np.full(grid.n_nodes, float(arr))
    if arr.shape != (grid.n_nodes,):
        raise ValueError(f"{name} must have one value per node ({grid.n_nodes}), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def assemble_stiffness(grid: StructuredGrid, k) -> sp.csr_matrix:
    """Stiffness matrix of ``int k grad(u) . grad(v)`` with nodal permeability ``k``."""
    k = _nodal(grid, k, "permeability")
    if np.any(k <= 0):
        raise ValueError("permeability must be strictly positive on every node")
    return _assemble(grid, k, element_stiffness_parts(grid))


def assemble_mass(grid: StructuredGrid, q=1.0) -> sp.csr_matrix:
    """Weighted mass matrix of ``int q u v``; ``q`` must be non-negative."""
    q = _nodal(grid, q, "mass weight")
    if np.any(q < 0):
        raise ValueError("mass weight must be non-negative")
    return _assemble(grid, q, element_mass_parts(grid))


def load_operator(grid: StructuredGrid) -> sp.csr_matrix:
    """Sparse map from quadrature values ``(n_elements*4,)`` to the load vector."""
    area = grid.hx * grid.hy
    vals = (_QW[:, None] * _N * area)  # (q, a)
    n_el = grid.n_elements
    rows = np.repeat(grid.elements[:, None, :], 4, axis=1)  # (e, q, a)
    cols = np.broadcast_to(np.arange(n_el * 4).reshape(n_el, 4)[:, :, None], rows.shape)
    data = np.broadcast_to(vals[None], rows.shape)
    return sp.coo_matrix(
        (data.ravel(), (rows.ravel(), cols.ravel())), shape=(grid.n_nodes, n_el * 4)
    ).tocsr()


SpatialFunction = Union[float, Callable[[np.ndarray, np.ndarray], np.ndarray]]


def assemble_load(grid: StructuredGrid, f: SpatialFunction) -> np.ndarray:
    """Load vector ``(f, v_i)`` for a source given as a constant or ``f(x, y)``."""
    qp = grid.quadrature_points()
    if callable(f):
        fq = np.broadcast_to(np.asarray(f(qp[..., 0], qp[..., 1]), dtype=float), qp.shape[:2])
    else:
        fq = np.full(qp.shape[:2], float(f))
    return load_operator(grid) @ fq.ravel()


@dataclass(frozen=True)
class Dirichlet:
    value: SpatialFunction = 0.0


@dataclass(frozen=True)
class Neumann:
    """Zero-flux condition; contributes nothing to the discrete system."""


@dataclass(frozen=True)
class BoundaryCondition:
    """Condition per side: keys ``left``, ``right``, ``bottom``, ``top``."""

    sides: Mapping[str, Union[Dirichlet, Neumann]]

    def __post_init__(self):
        unknown = set(self.sides) - set(SIDES)
        missing = set(SIDES) - set(self.sides)
        if unknown or missing:
            raise ValueError(
                f"boundary condition must name each side exactly once "
                f"(missing={sorted(missing)}, unknown={sorted(unknown)})"
            )

    @classmethod
    def homogeneous_dirichlet(cls) -> "BoundaryCondition":
        return cls({s: Dirichlet(0.0) for s in SIDES})

    @classmethod
    def channel_flow(cls, left: float = 1.0, right: float = 0.0) -> "BoundaryCondition":
        """Pressure drop from ``x=0`` to ``x=1`` with no-flow top and bottom."""
        return cls({"left": Dirichlet(left), "right": Dirichlet(right),
                    "bottom": Neumann(), "top": Neumann()})

    def dirichlet_values(self, grid: StructuredGrid) -> tuple[np.ndarray, np.ndarray]:
        """Indices and values of constrained nodes; corners shared by two
        Dirichlet sides must agree."""
        values = np.full(grid.n_nodes, np.nan)
        for name, cond in self.sides.items():
            if not isinstance(cond, Dirichlet):
                continue
            idx = grid.boundary_nodes(name)
            pts = grid.nodes[idx]
            if callable(cond.value):
                v = np.broadcast_to(np.asarray(cond.value(pts[:, 0], pts[:, 1]), float), idx.shape)
            else:
                v = np.full(idx.shape, float(cond.value))
            prev = values[idx]
            clash = ~np.isnan(prev) & ~np.isclose(prev, v, rtol=0, atol=1e-12)
            if np.any(clash):
                raise ValueError(f"conflicting Dirichlet values at nodes {idx[clash].tolist()}")
            values[idx] = v
        fixed = np.flatnonzero(~np.isnan(values))
        return fixed, values[fixed]


@dataclass(frozen=True)
class ConstrainedSystem:
    """Result of Dirichlet elimination.

    ``lift`` is zero on free nodes and carries the boundary data on fixed
    nodes, so a full solution is ``lift + expand(u_free)``.
    """

    free: np.ndarray
    fixed: np.ndarray
    lift: np.ndarray
    K: sp.csr_matrix
    B: sp.csr_matrix
    F: np.ndarray
    singular: bool

    def expand(self, u_free: np.ndarray) -> np.ndarray:
        u_free = np.asarray(u_free)
        out = np.broadcast_to(self.lift, u_free.shape[:-1] + self.lift.shape).copy()
        out[..., self.free] += u_free
        return out

    def solve_steady(self) -> np.ndarray:
        if self.singular:
            raise np.linalg.LinAlgError("pure Neumann problem: stiffness has a constant null space")
        from scipy.sparse.linalg import spsolve

        return self.expand(spsolve(self.K.tocsc(), self.F))


def apply_boundary(grid: StructuredGrid, K, B, F, bc: BoundaryCondition) -> ConstrainedSystem:
    """Eliminate Dirichlet rows/columns; the right-hand side is lifted by ``-K_fd g``.

    The mass coupling to the boundary data is not lifted here: in the Caputo
    iterations it cancels because the history weights sum to one and the
    boundary data are constant in time.
    """
    fixed, g = bc.dirichlet_values(grid)
    free = np.setdiff1d(np.arange(grid.n_nodes), fixed)
    lift = np.zeros(grid.n_nodes)
    lift[fixed] = g
    K = sp.csr_matrix(K)
    B = sp.csr_matrix(B)
    F_free = np.asarray(F, dtype=float)[free] - (K @ lift)[free]
    return ConstrainedSystem(
        free=free,
        fixed=fixed,
        lift=lift,
        K=K[free][:, free].tocsr(),
        B=B[free][:, free].tocsr(),
        F=F_free,
        singular=fixed.size == 0,
    )


def observation_matrix(grid: StructuredGrid, sensors) -> sp.csr_matrix:
    """Sparse ``(n_sensors, n_nodes)`` bilinear interpolation operator."""
    pts = np.atleast_2d(np.asarray(sensors, dtype=float))
    tol = 1e-12
    outside = (
        (pts[:, 0] < grid.x0 - tol) | (pts[:, 0] > grid.x1 + tol)
        | (pts[:, 1] < grid.y0 - tol) | (pts[:, 1] > grid.y1 + tol)
    )
    if np.any(outside):
        raise ValueError(f"sensors outside the domain: {pts[outside].tolist()}")
    fx = (pts[:, 0] - grid.x0) / grid.hx
    fy = (pts[:, 1] - grid.y0) / grid.hy
    i = np.clip(np.floor(fx).astype(int), 0, grid.nx - 1)
    j = np.clip(np.floor(fy).astype(int), 0, grid.ny - 1)
    w = _shape(np.clip(fx - i, 0, 1), np.clip(fy - j, 0, 1))
    elem = grid.elements[j * grid.nx + i]
    rows = np.repeat(np.arange(len(pts)), 4)
    return sp.coo_matrix(
        (w.ravel(), (rows, elem.ravel())), shape=(len(pts), grid.n_nodes)
    ).tocsr()


def point_observation(grid: StructuredGrid, u, sensors) -> np.ndarray:
    """Bilinear interpolation of the nodal field ``u`` at each sensor."""
    u = _nodal(grid, u, "field")
    return observation_matrix(grid, sensors) @ u


def sensor_grid(nx: int, ny: int, xlim=(0.1, 0.9), ylim=(0.1, 0.9)) -> np.ndarray:
    """Uniform ``nx`` by ``ny`` sensor layout, x varying fastest."""
    X, Y = np.meshgrid(np.linspace(*xlim, nx), np.linspace(*ylim, ny))
    return np.column_stack([X.ravel(), Y.ravel()])
