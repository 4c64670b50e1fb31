"""Ensemble Kalman analysis kernels.

Ensembles are ``(n_p, M)`` arrays with members in columns.  Observation maps
take such an array and return ``(n_d, M)`` predictions.  All randomness comes
from the ``numpy.random.Generator`` passed in, so a fixed seed reproduces a
run exactly.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import ndtri

log = logging.getLogger(__name__)

ObsMap = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class KnownNoise:
    """Observation noise with known variance ``sigma2``."""

    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("noise variance must be positive")


@dataclass(frozen=True)
class HyperNoise:
    """Unknown noise variance with an inverse-gamma hyperprior.

    ``alpha = n_s / 2`` and, per member, ``beta = sigma_s^2 * n_s`` with
    ``sigma_s^2 = ||d - H(theta)||^2 / (n_d - n_p)``.
    """

    n_s: float

    def __post_init__(self):
        if not self.n_s > 0:
            raise ValueError("n_s must be positive")

    @property
    def alpha(self) -> float:
        return 0.5 * self.n_s


NoiseModel = Union[KnownNoise, HyperNoise]


def sample_noise_variance(noise: HyperNoise, residual_sq, n_d: int, n_p: int, rng) -> np.ndarray:
    """Inverse-gamma draws ``IG(alpha + n_d/2, beta + r/2)``, one per residual.

    The draws use the reciprocal of a unit-scale gamma variate.
    """
    if not isinstance(noise, HyperNoise):
        raise TypeError("noise variance is only sampled for the hierarchical noise model")
    if n_d <= n_p:
        raise ValueError(f"hierarchical noise needs n_d > n_p (got n_d={n_d}, n_p={n_p})")
    r = np.atleast_1d(np.asarray(residual_sq, dtype=float))
    if np.any(r < 0):
        raise ValueError("squared residuals must be non-negative")
    sigma_s2 = r / (n_d - n_p)
    beta = sigma_s2 * noise.n_s
    shape = noise.alpha + 0.5 * n_d
    scale = beta + 0.5 * r
    g = rng.gamma(shape, 1.0, size=r.shape)
    return scale / g


def _ridge(C: np.ndarray) -> float:
    tr = np.trace(C)
    return max(1e-10 * tr / C.shape[0], np.finfo(float).tiny)


def kalman_gain(forecast, Z, noise_var: float = 0.0) -> np.ndarray:
    """``Cov(Theta, Z) (Cov(Z, Z) + noise_var I)^{-1}`` from sample covariances.

    Covariances use divisor ``M-1``.  A ridge of ``1e-10 * trace / n_d`` keeps
    the inversion well posed.
    """
    X = np.atleast_2d(np.asarray(forecast, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    M = X.shape[1]
    if M < 2 or Z.shape[1] != M:
        raise ValueError("need at least two members and matching ensemble sizes")
    Xa = X - X.mean(axis=1, keepdims=True)
    Za = Z - Z.mean(axis=1, keepdims=True)
    Cxz = Xa @ Za.T / (M - 1)
    Czz = Za @ Za.T / (M - 1)
    Czz[np.diag_indices_from(Czz)] += noise_var
    Czz[np.diag_indices_from(Czz)] += _ridge(Czz)
    try:
        # K = Cxz Czz^{-1}  <=>  Czz K^T = Cxz^T
        return np.linalg.solve(Czz, Cxz.T).T
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("simulated-observation covariance is singular") from exc


@dataclass
class Analysis:
    """Result of one analysis step.

    Attributes
    ----------
    theta : ndarray (n_p, M)
        Analysis ensemble.
    predictions : ndarray (n_d, M)
        Forecast predictions ``H(theta^f)`` (unperturbed).
    sigma2 : float
        Noise variance used for the perturbations.
    sigma2_draws : ndarray or None
        Per-member inverse-gamma draws in the hierarchical model.
    """

    theta: np.ndarray
    predictions: np.ndarray
    sigma2: float
    sigma2_draws: Optional[np.ndarray] = None


def _noise_variance(noise: NoiseModel, d, Z, n_p, rng):
    if isinstance(noise, KnownNoise):
        return noise.sigma2, None
    r = np.sum((d[:, None] - Z) ** 2, axis=0)
    S = sample_noise_variance(noise, r, d.size, n_p, rng)
    return float(S.mean()), S


def _update(X, Z, d, sigma2, rng):
    # the gain uses the exact perturbation covariance sigma2 * I, so members
    # whose predictions do not vary receive no update
    n_d, M = Z.shape
    E = rng.standard_normal((n_d, M)) * np.sqrt(sigma2)
    K = kalman_gain(X, Z, sigma2)
    return X + K @ (d[:, None] - (Z + E))


def _predict(obs_map: ObsMap, theta, n_d: int | None = None) -> np.ndarray:
    Z = np.asarray(obs_map(theta), dtype=float)
    if Z.ndim != 2 or Z.shape[1] != theta.shape[1]:
        raise ValueError(f"observation map returned shape {Z.shape} for {theta.shape[1]} members")
    if n_d is not None and Z.shape[0] != n_d:
        raise ValueError(f"observation map returned {Z.shape[0]} values, data has {n_d}")
    if not np.all(np.isfinite(Z)):
        raise FloatingPointError("observation map produced non-finite values")
    return Z


def enkf_step(prev, d, obs_map: ObsMap, noise: NoiseModel, rng, Z=None) -> Analysis:
    """Stochastic EnKF analysis with perturbed observations.

    Parameters are static, so the forecast is the previous analysis.  With a
    :class:`HyperNoise` model every member draws a noise variance from its
    inverse-gamma posterior and the ensemble average is used.  ``Z`` may be
    passed to reuse predictions that were already computed.
    """
    X = np.atleast_2d(np.asarray(prev, dtype=float))
    d = np.asarray(d, dtype=float).ravel()
    Z = _predict(obs_map, X, d.size) if Z is None else np.asarray(Z, dtype=float)
    sigma2, draws = _noise_variance(noise, d, Z, X.shape[0], rng)
    return Analysis(_update(X, Z, d, sigma2, rng), Z, sigma2, draws)


def ensemble_smoother(ens, stacked_data, obs_map_all: ObsMap, noise: NoiseModel, rng) -> Analysis:
    """One global analysis against all observations stacked into a single vector."""
    return enkf_step(ens, stacked_data, obs_map_all, noise, rng)


@dataclass
class NormalScoreMap:
    """Per-component monotone table between physical values and normal scores.

    Components with a single distinct value are passed through unchanged.
    """

    values: list  # sorted distinct reference values per component
    scores: list  # matching standard-normal quantiles

    def forward(self, theta) -> np.ndarray:
        X = np.atleast_2d(np.asarray(theta, dtype=float))
        return np.vstack([_interp_linear_tails(x, v, s) for x, v, s in zip(X, self.values, self.scores)])

    def backward(self, q) -> np.ndarray:
        Q = np.atleast_2d(np.asarray(q, dtype=float))
        return np.vstack([_interp_linear_tails(x, s, v) for x, v, s in zip(Q, self.values, self.scores)])


def _interp_linear_tails(x, xp, fp):
    if xp.size < 2:
        return np.array(x, dtype=float, copy=True)
    y = np.interp(x, xp, fp)
    lo, hi = x < xp[0], x > xp[-1]
    if np.any(lo):
        y[lo] = fp[0] + (x[lo] - xp[0]) * (fp[1] - fp[0]) / (xp[1] - xp[0])
    if np.any(hi):
        y[hi] = fp[-1] + (x[hi] - xp[-1]) * (fp[-1] - fp[-2]) / (xp[-1] - xp[-2])
    return y


def normal_score_forward(ens):
    """Rank-based transform of each component to standard-normal scores.

    Member ``j`` of rank ``r`` receives ``Phi^{-1}((r - 0.5) / M)``; tied
    values share the average score of their ranks.

    Returns
    -------
    scores : ndarray, shape (n_p, M)
    nsmap : NormalScoreMap
    """
    X = np.atleast_2d(np.asarray(ens, dtype=float))
    n_p, M = X.shape
    q_pos = ndtri((np.arange(1, M + 1) - 0.5) / M)
    out = np.empty_like(X)
    values, scores = [], []
    for j in range(n_p):
        uniq, inv, counts = np.unique(X[j], return_inverse=True, return_counts=True)
        if uniq.size < 2:
            warnings.warn(f"component {j} is constant; normal-score transform skipped")
            out[j] = X[j]
            values.append(uniq)
            scores.append(uniq.copy())
            continue
        ends = np.cumsum(counts)
        sums = np.add.reduceat(q_pos, ends - counts)
        su = sums / counts
        out[j] = su[inv]
        values.append(uniq)
        scores.append(su)
    return out, NormalScoreMap(values, scores)


def normal_score_backward(nsmap: NormalScoreMap, Q) -> np.ndarray:
    return nsmap.backward(Q)


def ns_enkf_step(prev, d, obs_map: ObsMap, noise: NoiseModel, rng, bounds=None, Z=None) -> Analysis:
    """EnKF analysis carried out in normal-score space.

    The forecast is evaluated in physical space; gain and update act on the
    scores; the analysis is mapped back through the stored table.  With a
    ``bounds`` map (e.g. :class:`~fracenkf.parameterization.BoundedMap`) the
    scores are computed from the unbounded image, so the result stays in the
    admissible box.
    """
    X = np.atleast_2d(np.asarray(prev, dtype=float))
    d = np.asarray(d, dtype=float).ravel()
    Z = _predict(obs_map, X, d.size) if Z is None else np.asarray(Z, dtype=float)
    sigma2, draws = _noise_variance(noise, d, Z, X.shape[0], rng)
    U = bounds.forward(X.T).T if bounds is not None else X
    Xi, nsmap = normal_score_forward(U)
    Xi_a = _update(Xi, Z, d, sigma2, rng)
    Ua = nsmap.backward(Xi_a)
    theta_a = bounds.backward(Ua.T).T if bounds is not None else Ua
    return Analysis(theta_a, Z, sigma2, draws)


def discrepancy(d, predictions) -> float:
    """Ensemble mean of ``||d - H(theta_m)||^2``."""
    d = np.asarray(d, dtype=float).ravel()
    return float(np.mean(np.sum((d[:, None] - predictions) ** 2, axis=0)))
