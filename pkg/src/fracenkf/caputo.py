"""Implicit L1-type time stepping for Caputo fractional derivatives.

For ``0 < gamma < 1`` the Caputo derivative at ``t_m`` is discretised with
piecewise-linear interpolation of ``u``; for ``1 < gamma < 2`` the second
derivative is replaced by second differences.  Either way one step reads

    (B + s K) u^m = B sum_i c_i u^i + s F(t_m),     i = 0..m-1,

with history weights ``c`` summing to one.  In the super-diffusive regime the
initial velocity is zero, so ``u^1 = u^0``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.special import gamma as gamma_fn

# orders this close to 1 or 2 are nudged inside the open interval; the
# weights contain 0**(1-gamma) which flips from 0 to 1 at the integer order
_INTEGER_NUDGE = 1e-12


def normalize_order(gamma: float) -> float:
    """Return a usable fractional order; integer orders 1 and 2 are nudged down."""
    g = float(gamma)
    if not np.isfinite(g) or g <= 0 or g > 2:
        raise ValueError(f"fractional order must lie in (0, 2], got {gamma!r}")
    if abs(g - 1.0) < _INTEGER_NUDGE:
        return 1.0 - _INTEGER_NUDGE
    if abs(g - 2.0) < _INTEGER_NUDGE:
        return 2.0 - _INTEGER_NUDGE
    return g


def regime(gamma: float) -> str:
    """``"sub"`` for orders below one, ``"super"`` above."""
    return "sub" if normalize_order(gamma) < 1 else "super"


def step_scale(gamma, dt: float):
    """Scaling ``s`` multiplying the stiffness and load; works elementwise."""
    g = np.asarray(gamma, dtype=float)
    s = np.where(g < 1, dt**g * gamma_fn(2 - g), dt**g * gamma_fn(3 - g))
    return float(s) if s.ndim == 0 else s


def _sub_coefficients(n: int, g: float) -> tuple[np.ndarray, np.ndarray]:
    j = np.arange(n, 0, -1, dtype=float)  # n - k for k = 0..n-1
    b = j ** (1 - g) - (j - 1) ** (1 - g)
    return b, np.diff(b, prepend=0.0)


def _super_coefficients(n: int, g: float) -> tuple[np.ndarray, np.ndarray]:
    j = np.arange(n, 0, -1, dtype=float)
    bt = j ** (2 - g) - (j - 1) ** (2 - g)
    # telescope sum_k bt_k (u^{k+2} - 2u^{k+1} + u^k): coefficients of u^0..u^{n+1}
    a = np.convolve(bt, [1.0, -2.0, 1.0])
    return bt, -a[: n + 1]


@dataclass(frozen=True)
class CaputoWeights:
    """History weights for one time level.

    Attributes
    ----------
    n : int
        Time level index of the kernel (``u^n`` for sub-diffusion,
        ``u^{n+1}`` for super-diffusion).
    b : ndarray
        Kernel values ``b_k`` (or ``b~_k``), ``k = 0..n-1``.
    c : ndarray
        Marching weights applied to ``u^0, u^1, ...``.
    s : float
        Scaling of the stiffness and load terms.
    """

    n: int
    b: np.ndarray
    c: np.ndarray
    s: float


def sub_weights(gamma: float, n: int, dt: float = 1.0) -> CaputoWeights:
    """Weights producing ``u^n`` from ``u^0..u^{n-1}`` for ``0 < gamma < 1``.

    Examples
    --------
    >>> w = sub_weights(0.5, 3)
    >>> np.round(w.c, 4)
    array([0.3178, 0.0964, 0.5858])
    """
    if n < 1:
        raise ValueError("need n >= 1")
    g = normalize_order(gamma)
    if g >= 1:
        raise ValueError(f"sub-diffusive weights need gamma < 1, got {gamma}")
    b, c = _sub_coefficients(int(n), g)
    return CaputoWeights(int(n), b, c, step_scale(g, dt))


def super_weights(gamma: float, n: int, dt: float = 1.0) -> CaputoWeights:
    """Weights producing ``u^{n+1}`` from ``u^0..u^n`` for ``1 < gamma < 2``."""
    if n < 1:
        raise ValueError("need n >= 1")
    g = normalize_order(gamma)
    if g <= 1:
        raise ValueError(f"super-diffusive weights need gamma > 1, got {gamma}")
    bt, c = _super_coefficients(int(n), g)
    return CaputoWeights(int(n), bt, c, step_scale(g, dt))


def history_weights(m: int, gamma: float) -> np.ndarray:
    """Weights on ``u^0..u^{m-1}`` for the step that produces ``u^m``."""
    g = normalize_order(gamma)
    if g < 1:
        return _sub_coefficients(m, g)[1]
    if m == 1:
        return np.ones(1)
    return _super_coefficients(m - 1, g)[1]


@lru_cache(maxsize=64)
def _weight_matrix(n_steps: int, gamma: float) -> np.ndarray:
    W = np.zeros((n_steps + 1, n_steps + 1))
    for m in range(1, n_steps + 1):
        W[m, :m] = history_weights(m, gamma)
    W.setflags(write=False)
    return W


def weight_matrix(n_steps: int, gamma: float) -> np.ndarray:
    """Lower-triangular ``(n_steps+1, n_steps+1)`` table; row ``m`` holds the
    weights for ``u^m``.  Row 0 is empty."""
    return _weight_matrix(int(n_steps), normalize_order(gamma))


def weight_tables(n_steps: int, gammas) -> np.ndarray:
    """Vectorised :func:`weight_matrix` for one order per ensemble member.

    Returns an array of shape ``(M, n_steps+1, n_steps+1)``.  The weights only
    depend on the lag ``m - k``: with ``beta_j = j^p - (j-1)^p`` the
    sub-diffusive kernel is ``b_k = beta_{m-k}``.
    """
    gs = np.array([normalize_order(g) for g in np.atleast_1d(gammas)])
    M, N = gs.size, int(n_steps)
    out = np.zeros((M, N + 1, N + 1))
    lag = np.arange(N + 1, dtype=float)
    sub = gs < 1
    p = np.where(sub, 1 - gs, 2 - gs)[:, None]
    beta = np.zeros((M, N + 1))
    beta[:, 1:] = lag[1:][None, :] ** p - (lag[1:] - 1)[None, :] ** p
    for m in range(1, N + 1):
        if np.any(sub):
            # b_k = beta_{m-k}, k=0..m-1, c = diff(b, prepend=0)
            b = beta[sub][:, m:0:-1]
            out[sub, m, :m] = np.diff(b, axis=1, prepend=0.0)
        if np.any(~sub):
            if m == 1:
                out[~sub, 1, 0] = 1.0
                continue
            n = m - 1
            bt = beta[~sub][:, n:0:-1]  # length n
            a = np.zeros((bt.shape[0], n + 2))
            a[:, :n] += bt
            a[:, 1:n + 1] -= 2 * bt
            a[:, 2:] += bt
            out[~sub, m, :m] = -a[:, : n + 1]
    return out


@dataclass(frozen=True)
class FractionalConfig:
    """Order, step size and horizon of a Caputo time march."""

    gamma: float
    dt: float
    T: float

    def __post_init__(self):
        object.__setattr__(self, "gamma", normalize_order(self.gamma))
        if self.dt <= 0 or self.T <= 0:
            raise ValueError("dt and T must be positive")
        n = self.T / self.dt
        if abs(n - round(n)) > 1e-8 * max(1.0, n):
            warnings.warn(f"T={self.T} is not a multiple of dt={self.dt}; rounding to {round(n)} steps")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def regime(self) -> str:
        return regime(self.gamma)

    @property
    def scale(self) -> float:
        return step_scale(self.gamma, self.dt)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)


def time_index(times, dt: float) -> np.ndarray:
    """Indices of ``times`` on the uniform grid ``m*dt``; rejects off-grid times."""
    t = np.atleast_1d(np.asarray(times, dtype=float))
    idx = np.rint(t / dt).astype(int)
    if np.any(np.abs(idx * dt - t) > 1e-9 * max(1.0, dt)):
        raise ValueError(f"observation times {t[np.abs(idx * dt - t) > 1e-9]} are not multiples of dt={dt}")
    return idx


def march(
    solve: Callable[[np.ndarray], np.ndarray],
    mass: Callable[[np.ndarray], np.ndarray],
    forcing: Callable[[float], np.ndarray],
    cfg: FractionalConfig,
    u0: np.ndarray,
    n_steps: int | None = None,
) -> np.ndarray:
    """Run the implicit Caputo scheme and return every state.

    Parameters
    ----------
    solve : callable
        Applies ``(B + s K)^{-1}`` to a vector.
    mass : callable
        Applies ``B``.
    forcing : callable
        Load vector ``F(t)`` (already lifted for boundary data).
    cfg : FractionalConfig
    u0 : ndarray
        Initial state in the unknowns being solved for.
    n_steps : int, optional
        Overrides ``cfg.n_steps``.

    Returns
    -------
    ndarray, shape (n_steps+1, n)
    """
    N = cfg.n_steps if n_steps is None else int(n_steps)
    W = weight_matrix(N, cfg.gamma)
    s = cfg.scale
    U = np.empty((N + 1, np.size(u0)))
    U[0] = u0
    start = 1
    if cfg.regime == "super" and N >= 1:
        U[1] = u0
        start = 2
    for m in range(start, N + 1):
        hist = W[m, :m] @ U[:m]
        U[m] = solve(mass(hist) + s * forcing(m * cfg.dt))
    return U


def step_full(B, K, F, history, w: CaputoWeights, solver=None) -> np.ndarray:
    """One implicit step ``(B + sK) u = B sum_i c_i u^i + s F`` with sparse matrices.

    ``history`` holds the states the weights act on, oldest first.  Pass a
    factorised ``solver`` (callable on vectors) to reuse it across levels.
    """
    H = np.asarray(history, dtype=float)
    if H.shape[0] != w.c.size:
        raise ValueError(f"history has {H.shape[0]} levels, weights expect {w.c.size}")
    rhs = B @ (w.c @ H) + w.s * np.asarray(F, dtype=float)
    if solver is None:
        from scipy.sparse.linalg import spsolve
        import scipy.sparse as sp

        return spsolve(sp.csc_matrix(B + w.s * K), rhs)
    return solver(rhs)


def step_reduced(Bt, Kt, Ft, history_H, w: CaputoWeights) -> np.ndarray:
    """Dense counterpart of :func:`step_full` for reduced coefficient vectors."""
    H = np.atleast_2d(np.asarray(history_H, dtype=float))
    if H.shape[0] != w.c.size:
        raise ValueError(f"history has {H.shape[0]} levels, weights expect {w.c.size}")
    Bt = np.atleast_2d(Bt)
    A = Bt + w.s * np.atleast_2d(Kt)
    rhs = Bt @ (w.c @ H) + w.s * np.atleast_1d(Ft)
    try:
        return np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("reduced system is singular; the multiscale basis is degenerate") from exc
