import numpy as np
import pytest
from scipy.special import ndtri

from fracenkf.filters import (
    HyperNoise,
    KnownNoise,
    discrepancy,
    enkf_step,
    ensemble_smoother,
    kalman_gain,
    normal_score_backward,
    normal_score_forward,
    ns_enkf_step,
    sample_noise_variance,
)
from fracenkf.parameterization import BoundedMap


def _linear(H):
    H = np.atleast_2d(H)
    return lambda th: H @ th


def test_noise_models():
    assert HyperNoise(0.05).alpha == pytest.approx(0.025)
    with pytest.raises(ValueError):
        KnownNoise(0.0)
    with pytest.raises(ValueError):
        sample_noise_variance(HyperNoise(0.05), [1.0], n_d=5, n_p=5, rng=np.random.default_rng(0))


def test_inverse_gamma_mean():
    rng = np.random.default_rng(0)
    noise, n_d, n_p, r = HyperNoise(0.05), 100, 13, 2.0
    S = sample_noise_variance(noise, np.full(100_000, r), n_d, n_p, rng)
    a = noise.alpha + n_d / 2
    b = r / (n_d - n_p) * noise.n_s + r / 2
    assert S.mean() == pytest.approx(b / (a - 1), rel=0.02)
    zero = sample_noise_variance(noise, np.zeros(1000), n_d, n_p, rng)
    assert np.all(zero == 0)  # beta is proportional to the residual


def test_gain_trivia():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(3, 20))
    assert kalman_gain(X, np.ones((4, 20))).shape == (3, 4)
    assert np.all(kalman_gain(X, np.ones((4, 20))) == 0)
    with pytest.raises(ValueError):
        kalman_gain(X[:, :1], np.ones((4, 1)))


def test_scalar_gain_limit():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((1, 100_000))
    Z = X + 0.5 * rng.standard_normal((1, 100_000))
    assert kalman_gain(X, Z)[0, 0] == pytest.approx(0.8, rel=0.02)


def test_zero_gain_is_identity():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(2, 50))
    const = lambda th: np.ones((3, th.shape[1]))
    out = enkf_step(X, np.zeros(3), const, KnownNoise(1.0), rng)
    np.testing.assert_array_equal(out.theta, X)
    ns = ns_enkf_step(X, np.zeros(3), const, KnownNoise(1.0), np.random.default_rng(0))
    assert np.max(np.abs(ns.theta - X)) < 1e-12


def test_scalar_linear_gaussian_posterior():
    rng = np.random.default_rng(4)
    m0, v0, s2, d = 1.0, 2.0, 0.5, 3.0
    X = m0 + np.sqrt(v0) * rng.standard_normal((1, 100_000))
    a = enkf_step(X, [d], _linear([[1.0]]), KnownNoise(s2), rng)
    vp = 1 / (1 / v0 + 1 / s2)
    mp = vp * (m0 / v0 + d / s2)
    assert a.theta.mean() == pytest.approx(mp, rel=0.05)
    assert a.theta.var() == pytest.approx(vp, rel=0.05)
    assert m0 < a.theta.mean() < d


def test_2d_linear_gaussian_posterior():
    rng = np.random.default_rng(5)
    C0 = np.array([[1.0, 0.3], [0.3, 0.5]])
    m0 = np.array([0.0, 1.0])
    H = np.array([[1.0, 1.0], [1.0, -1.0], [0.0, 2.0]])
    R = 0.2 * np.eye(3)
    d = np.array([1.5, -0.5, 2.0])
    X = rng.multivariate_normal(m0, C0, 100_000).T
    a = enkf_step(X, d, _linear(H), KnownNoise(0.2), rng)
    Cp = np.linalg.inv(np.linalg.inv(C0) + H.T @ np.linalg.inv(R) @ H)
    mp = Cp @ (np.linalg.solve(C0, m0) + H.T @ np.linalg.solve(R, d))
    np.testing.assert_allclose(a.theta.mean(axis=1), mp, rtol=0.05)
    np.testing.assert_allclose(np.cov(a.theta), Cp, rtol=0.05, atol=0.05 * np.abs(Cp).max())


def test_determinism():
    X = np.random.default_rng(6).normal(size=(2, 30))
    H = _linear(np.ones((20, 2)))
    runs = [enkf_step(X, np.ones(20), H, HyperNoise(0.05), np.random.default_rng(9)) for _ in range(2)]
    np.testing.assert_array_equal(runs[0].theta, runs[1].theta)
    assert runs[0].sigma2 == runs[1].sigma2 and runs[0].sigma2_draws.shape == (30,)


def test_normal_score_roundtrip_and_quantiles():
    rng = np.random.default_rng(7)
    X = np.vstack([rng.exponential(size=200), rng.uniform(size=200) ** 3])
    Q, m = normal_score_forward(X)
    assert np.max(np.abs(normal_score_backward(m, Q) - X)) < 1e-12
    np.testing.assert_allclose(m.forward(X), Q)
    q2, _ = normal_score_forward(np.array([[3.0, -1.0]]))
    np.testing.assert_allclose(q2[0], [0.6745, -0.6745], atol=1e-4)
    # monotone per component
    order = np.argsort(X[0])
    assert np.all(np.diff(Q[0, order]) > 0)


def test_normal_score_ties_and_constants():
    Q, m = normal_score_forward(np.array([[1.0, 2.0, 2.0, 5.0]]))
    qs = ndtri((np.arange(1, 5) - 0.5) / 4)
    np.testing.assert_allclose(Q[0], [qs[0], (qs[1] + qs[2]) / 2, (qs[1] + qs[2]) / 2, qs[3]])
    with pytest.warns(UserWarning, match="constant"):
        Qc, mc = normal_score_forward(np.array([[2.0, 2.0, 2.0]]))
    np.testing.assert_array_equal(Qc, [[2.0, 2.0, 2.0]])
    np.testing.assert_array_equal(mc.backward([[0.3]]), [[0.3]])


def test_normal_score_tails_extrapolate_linearly():
    _, m = normal_score_forward(np.array([[0.0, 1.0, 2.0]]))
    s = m.scores[0]
    far = s[-1] + 2 * (s[-1] - s[-2])
    assert m.backward([[far]])[0, 0] == pytest.approx(4.0)


def test_standard_normal_scores_statistics():
    X = np.random.default_rng(8).standard_normal((1, 10_000))
    Q, _ = normal_score_forward(X)
    assert abs(Q.mean()) < 3 / np.sqrt(1e4)
    assert abs(Q.std() - 1) < 3 / np.sqrt(2e4)


def test_ns_matches_enkf_for_gaussian_ensemble():
    rng = np.random.default_rng(10)
    X = 1 + rng.standard_normal((1, 10_000))
    H = _linear([[1.0], [2.0]])
    d = np.array([2.0, 3.5])
    a = enkf_step(X, d, H, KnownNoise(0.3), np.random.default_rng(1)).theta
    b = ns_enkf_step(X, d, H, KnownNoise(0.3), np.random.default_rng(1)).theta
    assert abs(a.mean() - b.mean()) < 3 * a.std() / np.sqrt(1e4)
    assert b.std() == pytest.approx(a.std(), rel=0.05)


def test_ns_with_bounds_stays_in_box():
    lo, hi = np.array([0, 0, 0, 0, 0.0]), np.array([2, 1, 1, 1, 1.0])
    bm = BoundedMap(lo, hi)
    rng = np.random.default_rng(11)
    X = (lo + (hi - lo) * rng.random((500, 5))).T
    H = _linear(np.vstack([np.eye(5), np.eye(5)]) * 3)
    d = 3 * np.array([1.99, 0.999, 0.001, 0.5, 0.98] * 2)
    a = ns_enkf_step(X, d, H, KnownNoise(1e-4), rng, bounds=bm)
    assert np.all((a.theta > lo[:, None]) & (a.theta < hi[:, None]))
    plain = enkf_step(X, d, H, KnownNoise(1e-4), np.random.default_rng(11))
    assert plain.theta.shape == X.shape


def test_smoother_two_observations_linear_gaussian():
    rng = np.random.default_rng(12)
    X = rng.standard_normal((1, 100_000))
    H = _linear([[1.0], [1.0]])
    a = ensemble_smoother(X, np.array([0.4, 0.8]), H, KnownNoise(0.5), rng)
    vp = 1 / (1 + 2 / 0.5)
    assert a.theta.mean() == pytest.approx(vp * (1.2 / 0.5), rel=0.05)
    assert a.theta.var() == pytest.approx(vp, rel=0.05)
    r1 = ensemble_smoother(X[:, :100], [0.4], _linear([[1.0]]), KnownNoise(0.5), np.random.default_rng(3))
    r2 = enkf_step(X[:, :100], [0.4], _linear([[1.0]]), KnownNoise(0.5), np.random.default_rng(3))
    np.testing.assert_array_equal(r1.theta, r2.theta)


def test_sequential_discrepancy_approaches_noise_level():
    # well-specified linear problem, hierarchical noise, 8 sequential steps
    rng = np.random.default_rng(13)
    n_p, n_d, s2 = 3, 40, 0.01
    H = rng.normal(size=(n_d, n_p))
    truth = np.array([0.5, -1.0, 2.0])
    X = rng.standard_normal((n_p, 400)) * 2
    for k in range(8):
        d = H @ truth + np.sqrt(s2) * rng.standard_normal(n_d)
        a = enkf_step(X, d, _linear(H), HyperNoise(0.05), rng)
        X = a.theta
    disc = discrepancy(d, H @ X)
    assert 0.5 * n_d * s2 < disc < 2 * n_d * s2
