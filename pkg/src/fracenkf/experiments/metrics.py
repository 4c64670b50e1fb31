"""Posterior summaries: error tables, discrepancy curves, intervals, densities."""
from __future__ import annotations

import warnings

import numpy as np
from scipy.stats import gaussian_kde, norm

MIN_MEMBERS = 40


def discrepancy_curve(report, sigma2_ref: float | None = None) -> dict:
    """Per-record ensemble discrepancy plus the reference line ``n_d sigma^2``."""
    vals = [float(v) for v in report.series("discrepancy")]
    out = {"steps": report.steps, "discrepancy": vals}
    if sigma2_ref is not None:
        out["reference"] = [r.n_d * sigma2_ref for r in report.records]
    return out


def interval_table(responses, sigma2: float, model_var=0.0, level: float = 0.95) -> dict:
    """Credible and predictive bands of model responses.

    Parameters
    ----------
    responses : ndarray, shape (M, n_q)
        Model responses of the posterior members.
    sigma2 : float
        Measurement noise variance.
    model_var : float or ndarray (n_q,)
        Additional coarse-model error variance.

    The credible band holds the empirical percentiles.  The predictive band
    widens each half-width ``h`` around the median to
    ``sqrt(h^2 + z^2 (sigma2 + model_var))``, so it always contains the
    credible band.
    """
    R = np.atleast_2d(np.asarray(responses, dtype=float))
    if R.shape[0] < MIN_MEMBERS:
        warnings.warn(f"only {R.shape[0]} members; percentile bands are unreliable")
    a = 100 * (1 - level) / 2
    lo, med, hi = np.percentile(R, [a, 50, 100 - a], axis=0)
    z = float(norm.ppf(1 - (1 - level) / 2))
    extra = z * z * (sigma2 + np.asarray(model_var, dtype=float))
    plo = med - np.sqrt((med - lo) ** 2 + extra)
    phi = med + np.sqrt((hi - med) ** 2 + extra)
    return {"median": med, "cred_lo": lo, "cred_hi": hi, "pred_lo": plo, "pred_hi": phi,
            "reliable": R.shape[0] >= MIN_MEMBERS}


def model_error_variance(full_map, reduced_map, prior_draws) -> np.ndarray:
    """Sample variance of ``full - reduced`` responses over prior draws (members in columns)."""
    diff = full_map(prior_draws) - reduced_map(prior_draws)
    return np.var(diff, axis=1, ddof=1)


def marginal_density(samples, n_grid: int = 200):
    """Gaussian KDE (Silverman bandwidth) on ``mean +/- 4 std``.

    Returns ``(x, density)``; raises for a degenerate component.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2 or np.std(x) == 0:
        raise ValueError("cannot estimate the density of a degenerate component")
    if x.size < MIN_MEMBERS:
        warnings.warn(f"density from only {x.size} samples")
    m, s = x.mean(), x.std()
    grid = np.linspace(m - 4 * s, m + 4 * s, n_grid)
    kde = gaussian_kde(x, bw_method="silverman")
    return grid, kde(grid)


def interquartile_width(samples) -> np.ndarray:
    q1, q3 = np.percentile(np.atleast_2d(samples), [25, 75], axis=1)
    return q3 - q1
