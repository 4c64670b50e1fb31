"""Maps from low-dimensional parameters to model inputs.

* Karhunen-Loeve expansions of Gaussian log-permeability fields.
* Channelised fields bounded by two random curves (three-region log-k).
* Switched Gaussian point sources.
* Componentwise probit maps between a box and R^n.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.special import ndtr, ndtri


@dataclass(frozen=True)
class SquaredExponential:
    """``C(x, y) = variance * exp(-sum_d (x_d - y_d)^2 / (2 l_d^2))``.

    ``lengths`` is a scalar (isotropic) or one length per coordinate.
    """

    variance: float = 1.0
    lengths: Union[float, tuple] = 1.0

    def __call__(self, X, Y) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        if X.shape[0] == 1 and X.shape[1] != Y.shape[1]:
            X = X.T
        if Y.shape[0] == 1 and Y.shape[1] != X.shape[1]:
            Y = Y.T
        ell = np.broadcast_to(np.asarray(self.lengths, dtype=float), (X.shape[1],))
        d2 = np.zeros((X.shape[0], Y.shape[0]))
        for d in range(X.shape[1]):
            d2 += ((X[:, d, None] - Y[None, :, d]) / ell[d]) ** 2
        return self.variance * np.exp(-0.5 * d2)


@dataclass(frozen=True)
class TruncateAtEnergy:
    fraction: float = 0.9999


@dataclass(frozen=True)
class FixedN:
    n: int


@dataclass
class KleBasis:
    """Truncated discrete Karhunen-Loeve basis.

    ``modes[:, i]`` holds ``phi_i`` at ``points``, normalised so that
    ``sum_j w_j phi_i(x_j) phi_k(x_j) = delta_ik``.
    """

    kernel: SquaredExponential
    points: np.ndarray
    weights: np.ndarray
    eigenvalues: np.ndarray
    modes: np.ndarray
    mean: np.ndarray
    total_energy: float

    @property
    def n(self) -> int:
        return self.eigenvalues.size

    @property
    def energy_ratio(self) -> float:
        return float(self.eigenvalues.sum() / self.total_energy)

    def modes_at(self, X) -> np.ndarray:
        """Nystrom extension of the eigenfunctions to arbitrary points."""
        C = self.kernel(X, self.points)
        return (C * self.weights) @ self.modes / self.eigenvalues

    def scaled_modes(self, X=None) -> np.ndarray:
        """Columns ``sqrt(lambda_i) phi_i``; at ``points`` when ``X`` is None."""
        phi = self.modes if X is None else self.modes_at(X)
        return phi * np.sqrt(self.eigenvalues)


def build_kle(kernel: SquaredExponential, points, criterion=TruncateAtEnergy(), mean=0.0,
              domain_measure: float = 1.0) -> KleBasis:
    """Nystrom discretisation of the covariance operator with uniform weights.

    Parameters
    ----------
    kernel : SquaredExponential
    points : array_like, shape (n,) or (n, d)
        Quadrature / evaluation points covering the domain.
    criterion : TruncateAtEnergy or FixedN
    mean : float or array_like
        Mean field at ``points``.
    domain_measure : float
        Length/area of the domain; the uniform weights are ``measure / n``.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    w = np.full(n, domain_measure / n)
    C = kernel(pts, pts)
    sw = np.sqrt(w)
    A = sw[:, None] * C * sw[None, :]
    A = 0.5 * (A + A.T)
    lam, V = np.linalg.eigh(A)
    lam, V = lam[::-1], V[:, ::-1]
    if lam[-1] < -1e-8 * lam[0]:
        raise np.linalg.LinAlgError(f"covariance matrix is indefinite (min eigenvalue {lam[-1]:.3e})")
    lam = np.clip(lam, 0.0, None)
    total = float(lam.sum())
    if isinstance(criterion, FixedN):
        N = int(criterion.n)
        if not 1 <= N <= n:
            raise ValueError(f"cannot keep {N} modes from {n} points")
    elif isinstance(criterion, TruncateAtEnergy):
        ratio = np.cumsum(lam) / total
        N = int(np.searchsorted(ratio, criterion.fraction, side="right") + 1)
        N = min(N, n)
    else:
        raise TypeError(f"unknown truncation criterion {criterion!r}")
    modes = V[:, :N] / sw[:, None]
    # fix signs so the largest-magnitude entry of each mode is positive
    flip = np.sign(modes[np.abs(modes).argmax(axis=0), np.arange(N)])
    modes = modes * flip
    mean_arr = np.broadcast_to(np.asarray(mean, dtype=float), (n,)).copy()
    return KleBasis(kernel, pts, w, lam[:N].copy(), modes, mean_arr, total)


def kle_field(basis: KleBasis, theta) -> np.ndarray:
    """``mean + sum_i sqrt(lambda_i) theta_i phi_i`` at the basis points.

    ``theta`` may be a single vector ``(N,)`` or a batch ``(M, N)``.
    """
    th = np.asarray(theta, dtype=float)
    if th.shape[-1] != basis.n:
        raise ValueError(f"expected {basis.n} KLE coefficients, got {th.shape[-1]}")
    return basis.mean + th @ basis.scaled_modes().T


def curve_transform(gamma_values):
    """Map real curve values into (0, 1)."""
    return 0.5 + np.arctan(gamma_values) / np.pi


@dataclass
class ChannelModel:
    """Two random interfaces splitting the unit square into three regions.

    The parameter vector is ``(c1, c2, c3, w1_1..w1_m1, w2_1..w2_m2)``; the
    curves are ``Gamma_i(x) = sum_l w_l sqrt(lambda_l) phi_l(x)`` mapped into
    (0, 1) by :func:`curve_transform`.  Region values are log-permeabilities:
    ``c1`` above both curves, ``c2`` between them, ``c3`` below both.
    """

    kle1: KleBasis
    kle2: KleBasis

    @property
    def m1(self) -> int:
        return self.kle1.n

    @property
    def m2(self) -> int:
        return self.kle2.n

    @property
    def n_params(self) -> int:
        return 3 + self.m1 + self.m2

    def split(self, theta):
        th = np.atleast_2d(np.asarray(theta, dtype=float))
        if th.shape[1] != self.n_params:
            raise ValueError(f"channel parameter has {self.n_params} entries, got {th.shape[1]}")
        return th[:, :3], th[:, 3:3 + self.m1], th[:, 3 + self.m1:]

    def curves(self, theta, x) -> tuple[np.ndarray, np.ndarray]:
        """Transformed curves at abscissae ``x``; arrays of shape ``(M, len(x))``."""
        _, w1, w2 = self.split(theta)
        x = np.asarray(x, dtype=float)
        g1 = w1 @ self.kle1.scaled_modes(x).T
        g2 = w2 @ self.kle2.scaled_modes(x).T
        return curve_transform(g1), curve_transform(g2)

    def log_permeability(self, theta, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        c, _, _ = self.split(theta)
        xs, inv = np.unique(pts[:, 0], return_inverse=True)
        t1, t2 = self.curves(theta, xs)
        return channel_log_k(c, t1[:, inv], t2[:, inv], pts[:, 1])


def channel_log_k(c, curve1, curve2, y) -> np.ndarray:
    """Three-region log-permeability from transformed curve heights at each point."""
    c = np.atleast_2d(c)
    L1 = (y > curve1).astype(float)
    L2 = (y > curve2).astype(float)
    return (c[:, 0:1] * L1 * L2 + c[:, 1:2] * (1 - L1) * L2
            + c[:, 2:3] * (1 - L1) * (1 - L2))


def build_channel_model(n_quad: int = 201, criterion=FixedN(5), variance: float = 1.0,
                        length_sq: float = 0.1) -> ChannelModel:
    """Both curves share the 1D squared-exponential KLE on [0, 1]."""
    kern = SquaredExponential(variance, float(np.sqrt(length_sq)))
    x = (np.arange(n_quad) + 0.5) / n_quad  # midpoint rule
    basis = build_kle(kern, x, criterion)
    return ChannelModel(basis, basis)


def channel_field(model: ChannelModel, theta, grid) -> np.ndarray:
    """Nodal permeability ``exp(log k)`` on ``grid``; batched over rows of ``theta``."""
    k = np.exp(model.log_permeability(theta, grid.nodes))
    return k[0] if np.ndim(theta) == 1 else k


def reference_channel_curves(x):
    """Default reference interfaces used for synthetic channel data."""
    x = np.asarray(x, dtype=float)
    return 0.7 + 0.1 * np.sin(3 * np.pi * x), 0.4 + 0.2 * np.sin(2 * np.pi * x + 0.1)


def reference_channel_log_k(points, c=(0.0, 4.0, 1.0)) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    g1, g2 = reference_channel_curves(pts[:, 0])
    return channel_log_k(np.asarray(c, float)[None], g1[None], g2[None], pts[:, 1])[0]


@dataclass(frozen=True)
class SourceModel:
    """Switched Gaussian sources.

    Source 1 is on for ``t < T_m``; source ``i >= 2`` is on for ``t >= T_{i-1}``.
    The Heaviside function is right-continuous, ``H(0) = 1``.
    """

    strengths: tuple
    widths: tuple
    switch_times: tuple

    def __post_init__(self):
        m = len(self.strengths)
        if len(self.widths) != m or len(self.switch_times) != m:
            raise ValueError("strengths, widths and switch_times must have one entry per source")
        if any(w <= 0 for w in self.widths):
            raise ValueError("source widths must be positive")
        if any(b <= a for a, b in zip(self.switch_times, self.switch_times[1:])) or self.switch_times[0] <= 0:
            raise ValueError("switch times must be positive and strictly increasing")

    @property
    def m(self) -> int:
        return len(self.strengths)

    def profile(self, t: float) -> np.ndarray:
        """On/off weight of each source at time ``t``."""
        H = lambda s: 1.0 if s >= 0 else 0.0
        out = np.empty(self.m)
        out[0] = 1.0 - H(t - self.switch_times[-1])
        for i in range(1, self.m):
            out[i] = H(t - self.switch_times[i - 1])
        return out

    def kernels(self, locations, points) -> np.ndarray:
        """Scaled Gaussian bumps ``s_i g_i(x)``.

        ``locations`` has shape ``(..., m, 2)``; returns ``(..., m, n_points)``.
        """
        loc = np.asarray(locations, dtype=float)
        pts = np.asarray(points, dtype=float)
        tau = np.asarray(self.widths, dtype=float)
        s = np.asarray(self.strengths, dtype=float)
        d2 = ((loc[..., :, None, :] - pts) ** 2).sum(-1)
        return (s / (2 * np.pi * tau**2))[:, None] * np.exp(-d2 / (2 * tau[:, None] ** 2))


def source_function(model: SourceModel, x, t: float, locations) -> np.ndarray:
    """Source value at point(s) ``x`` and time ``t``."""
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    val = model.profile(t) @ model.kernels(locations, pts)
    return val[0] if np.ndim(x) == 1 else val


@dataclass(frozen=True)
class BoundedMap:
    """Componentwise probit bijection between the box ``prod (a_i, b_i)`` and R^n.

    Unbounded components (``a = -inf`` and ``b = inf``) pass through unchanged.
    """

    lower: tuple
    upper: tuple
    clip: float = 7.5

    def __post_init__(self):
        lo = np.asarray(self.lower, float)
        hi = np.asarray(self.upper, float)
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError("bounds must satisfy lower < upper componentwise")
        half = np.isfinite(lo) != np.isfinite(hi)
        if np.any(half):
            raise ValueError("half-bounded intervals are not supported")

    @property
    def _bounded(self):
        return np.isfinite(np.asarray(self.lower, float))

    def forward(self, theta) -> np.ndarray:
        th = np.asarray(theta, dtype=float)
        lo = np.asarray(self.lower, float)
        hi = np.asarray(self.upper, float)
        bd = self._bounded
        thb = th[..., bd]
        if np.any(thb <= lo[bd]) or np.any(thb >= hi[bd]):
            raise ValueError("parameter on or outside the admissible box")
        q = th.copy()
        q[..., bd] = ndtri((thb - lo[bd]) / (hi[bd] - lo[bd]))
        return q

    def backward(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        lo = np.asarray(self.lower, float)
        hi = np.asarray(self.upper, float)
        bd = self._bounded
        th = q.copy()
        th[..., bd] = lo[bd] + (hi[bd] - lo[bd]) * ndtr(np.clip(q[..., bd], -self.clip, self.clip))
        return th

    def contains(self, theta) -> np.ndarray:
        th = np.asarray(theta, dtype=float)
        lo = np.asarray(self.lower, float)
        hi = np.asarray(self.upper, float)
        return np.all((th > lo) & (th < hi), axis=-1)


def bounded_forward(bmap: BoundedMap, theta) -> np.ndarray:
    return bmap.forward(theta)


def bounded_backward(bmap: BoundedMap, q) -> np.ndarray:
    return bmap.backward(q)
