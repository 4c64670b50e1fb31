"""Sparse generalized polynomial chaos surrogates.

Total-degree index sets, orthonormal Hermite / Legendre tensor bases and an
l1-regularised least-squares fit solved by the lagged diffusivity fixed
point iteration.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from math import comb, factorial

import numpy as np
import scipy.linalg as sla

log = logging.getLogger(__name__)

HERMITE = "hermite"
LEGENDRE = "legendre"


@dataclass(frozen=True)
class MultiIndexSet:
    """All multi-indices with total degree at most ``N0``.

    Rows are graded by total degree; within a degree they are in
    lexicographic order with the first coordinate varying slowest and the
    largest exponents first.
    """

    n_z: int
    N0: int
    indices: np.ndarray = field(repr=False, compare=False)

    @property
    def P(self) -> int:
        return self.indices.shape[0]


def _compositions(total: int, parts: int):
    # exponent tuples summing to ``total``, lexicographically descending
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def total_degree_indices(n_z: int, N0: int) -> MultiIndexSet:
    """Total-degree set with ``P = (N0 + n_z)! / (N0! n_z!)`` entries.

    >>> total_degree_indices(13, 3).P
    560
    """
    if n_z < 1 or N0 < 0:
        raise ValueError(f"need n_z >= 1 and N0 >= 0, got n_z={n_z}, N0={N0}")
    rows = [idx for d in range(N0 + 1) for idx in _compositions(d, n_z)]
    ind = np.array(rows, dtype=np.int64).reshape(-1, n_z)
    assert ind.shape[0] == comb(N0 + n_z, n_z)
    ind.setflags(write=False)
    return MultiIndexSet(n_z, N0, ind)


def univariate_table(family: str, z: np.ndarray, N0: int) -> np.ndarray:
    """Orthonormal polynomials of degree ``0..N0`` at ``z``; shape ``z.shape + (N0+1,)``."""
    z = np.asarray(z, dtype=float)
    T = np.empty(z.shape + (N0 + 1,))
    T[..., 0] = 1.0
    if N0 >= 1:
        T[..., 1] = z
    if family == HERMITE:
        for n in range(1, N0):
            T[..., n + 1] = z * T[..., n] - n * T[..., n - 1]
        norms = np.sqrt([float(factorial(n)) for n in range(N0 + 1)])
    elif family == LEGENDRE:
        for n in range(1, N0):
            T[..., n + 1] = ((2 * n + 1) * z * T[..., n] - n * T[..., n - 1]) / (n + 1)
        norms = 1.0 / np.sqrt(2 * np.arange(N0 + 1) + 1.0)
    else:
        raise ValueError(f"unknown polynomial family {family!r}")
    return T / norms


def evaluate_basis(iset: MultiIndexSet, family: str, z) -> np.ndarray:
    """Tensor-product basis values; ``z`` is ``(n_z,)`` or ``(Q, n_z)``."""
    z = np.asarray(z, dtype=float)
    Z = np.atleast_2d(z)
    if Z.shape[1] != iset.n_z:
        raise ValueError(f"expected {iset.n_z} inputs, got {Z.shape[1]}")
    T = univariate_table(family, Z, iset.N0)  # (Q, n_z, N0+1)
    out = np.ones((Z.shape[0], iset.P))
    for d in range(iset.n_z):
        out *= T[:, d, iset.indices[:, d]]
    return out[0] if z.ndim == 1 else out


def build_design_matrix(samples, iset: MultiIndexSet, family: str) -> np.ndarray:
    """``A[i, j] = Phi_j(theta^i)`` for standardised samples."""
    return evaluate_basis(iset, family, np.atleast_2d(samples))


@dataclass
class LaggedDiffusivityInfo:
    iterations: np.ndarray
    grad_norm: np.ndarray
    converged: np.ndarray
    objective: list  # per-iteration objective values, each (n_rhs,)


def l1_objective(A, b, c, alpha, beta):
    """``0.5 ||Ac - b||^2 + alpha sum 2 sqrt(c^2 + beta^2)``; columns are separate problems."""
    r = A @ c - b
    return 0.5 * np.sum(r * r, axis=0) + 2.0 * alpha * np.sum(np.sqrt(c * c + beta * beta), axis=0)


def lagged_diffusivity_solve(A, b, alpha: float, beta: float = 1e-6, tol: float = 1e-8,
                             maxit: int = 100, c0=None, return_info: bool = False):
    """Smoothed l1-regularised least squares by lagged diffusivity.

    The penalty ``psi(c^2) = 2 sqrt(c^2 + beta^2)`` has gradient ``L c`` with
    ``L = diag(2 psi'(c^2)) = diag(2 / sqrt(c^2 + beta^2))``.  Each iteration
    freezes ``L`` and takes the Newton-like step
    ``c <- c - (A^T A + alpha L)^{-1} g`` with
    ``g = A^T (A c - b) + alpha L c``.  The step exactly minimises a quadratic
    majorant of :func:`l1_objective`, so the objective never increases.
    Iteration stops when ``||g|| <= tol * max(1, ||A^T b||)`` or after
    ``maxit`` steps.

    ``b`` may be a matrix; its columns are solved independently but in one
    vectorised sweep.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    vec = b.ndim == 1
    B = b[:, None] if vec else b
    P, n = A.shape[1], B.shape[1]
    AtA = A.T @ A
    Atb = A.T @ B
    scale = np.maximum(1.0, np.linalg.norm(Atb, axis=0))
    C = np.zeros((P, n)) if c0 is None else np.array(np.broadcast_to(
        np.asarray(c0, float).reshape(P, -1), (P, n)))
    active = np.ones(n, dtype=bool)
    iters = np.zeros(n, dtype=int)
    gnorm = np.full(n, np.inf)
    history = [l1_objective(A, B, C, alpha, beta)] if return_info else []
    for it in range(maxit + 1):
        Ca = C[:, active]
        w = 2.0 / np.sqrt(Ca * Ca + beta * beta)
        g = AtA @ Ca - Atb[:, active] + alpha * w * Ca
        gn = np.linalg.norm(g, axis=0)
        gnorm[active] = gn
        done = gn <= tol * scale[active]
        if it == maxit:
            break
        still = ~done
        idx = np.flatnonzero(active)
        active[idx[done]] = False
        if not np.any(still):
            break
        H = AtA[None] + alpha * np.einsum("ij,kj->kij", np.eye(P), w[:, still].T)
        try:
            step = np.linalg.solve(H, g[:, still].T[..., None])[..., 0].T
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("lagged diffusivity system is singular") from exc
        C[:, idx[still]] = Ca[:, still] - step
        iters[idx[still]] += 1
        if return_info:
            history.append(l1_objective(A, B, C, alpha, beta))
    converged = gnorm <= tol * scale
    if not np.all(converged):
        bad = np.flatnonzero(~converged)
        log.warning("lagged diffusivity hit maxit=%d for %d column(s); worst gradient norm %.3e",
                    maxit, bad.size, gnorm[bad].max())
    out = C[:, 0] if vec else C
    if return_info:
        return out, LaggedDiffusivityInfo(iters, gnorm, converged, history)
    return out


@dataclass
class InputNormalization:
    """Affine standardisation ``z = W (theta - shift)``.

    For Hermite inputs ``W`` whitens with the reference covariance (or its
    diagonal); for Legendre inputs it maps each box interval onto [-1, 1].
    """

    shift: np.ndarray
    W: np.ndarray

    def __call__(self, theta) -> np.ndarray:
        return (np.atleast_2d(theta) - self.shift) @ self.W.T

    @classmethod
    def gaussian(cls, mean, cov=None, std=None, whiten: bool = False) -> "InputNormalization":
        mean = np.asarray(mean, dtype=float)
        if whiten:
            cov = np.atleast_2d(np.asarray(cov, dtype=float))
            lam, V = np.linalg.eigh(0.5 * (cov + cov.T))
            lam = np.maximum(lam, 1e-12 * lam.max())
            return cls(mean, (V / np.sqrt(lam)).T)
        if std is None:
            std = np.sqrt(np.diag(np.atleast_2d(cov)))
        std = np.where(np.asarray(std) > 0, std, 1.0)
        return cls(mean, np.diag(1.0 / std))

    @classmethod
    def box(cls, lower, upper) -> "InputNormalization":
        lo, hi = np.asarray(lower, float), np.asarray(upper, float)
        return cls(0.5 * (lo + hi), np.diag(2.0 / (hi - lo)))


@dataclass
class SurrogateModel:
    family: str
    iset: MultiIndexSet
    coefficients: np.ndarray  # (P, n_d)
    normalization: InputNormalization
    info: LaggedDiffusivityInfo | None = None

    def __call__(self, theta) -> np.ndarray:
        return eval_surrogate(self, theta)


def fit_surrogate(samples, responses, iset: MultiIndexSet, family: str, alpha: float,
                  normalization: InputNormalization, **solver_kw) -> SurrogateModel:
    """Fit one sparse expansion per response column.

    Parameters
    ----------
    samples : array_like, shape (Q, n_z)
        Training parameters in physical units.
    responses : array_like, shape (Q, n_d)
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    Y = np.asarray(responses, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"{X.shape[0]} samples but {Y.shape[0]} responses")
    A = build_design_matrix(normalization(X), iset, family)
    C, info = lagged_diffusivity_solve(A, Y, alpha, return_info=True, **solver_kw)
    if not np.all(np.isfinite(C)):
        bad = np.flatnonzero(~np.all(np.isfinite(C), axis=0))
        raise FloatingPointError(f"non-finite surrogate coefficients for components {bad.tolist()}")
    return SurrogateModel(family, iset, C, normalization, info)


def eval_surrogate(model: SurrogateModel, theta) -> np.ndarray:
    """Surrogate responses ``(M, n_d)`` for parameters ``(M, n_z)`` (or one vector)."""
    th = np.asarray(theta, dtype=float)
    Phi = evaluate_basis(model.iset, model.family, model.normalization(th))
    out = Phi @ model.coefficients
    return out[0] if th.ndim == 1 else out
