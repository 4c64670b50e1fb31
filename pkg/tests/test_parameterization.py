import numpy as np
import pytest

from fracenkf.grid import build_grid
from fracenkf.parameterization import (
    BoundedMap,
    FixedN,
    SourceModel,
    SquaredExponential,
    TruncateAtEnergy,
    build_channel_model,
    build_kle,
    channel_field,
    curve_transform,
    kle_field,
    reference_channel_log_k,
    source_function,
)


def test_kle_orthonormal_and_descending():
    x = np.linspace(0, 1, 201)
    b = build_kle(SquaredExponential(1.0, np.sqrt(0.1)), x, TruncateAtEnergy(0.9999))
    gram = (b.modes * b.weights[:, None]).T @ b.modes
    assert np.max(np.abs(gram - np.eye(b.n))) < 1e-8
    assert np.all(np.diff(b.eigenvalues) <= 0) and np.all(b.eigenvalues >= 0)
    assert b.energy_ratio >= 0.9999


def test_kle_energy_rule_on_unit_interval():
    # with xi = 1 and l^2 = 0.1 five modes hold 99.96% of the energy; the
    # 99.99% rule needs a sixth
    x = (np.arange(400) + 0.5) / 400
    b = build_kle(SquaredExponential(1.0, np.sqrt(0.1)), x, TruncateAtEnergy(0.9999))
    assert b.n == 6
    five = build_kle(SquaredExponential(1.0, np.sqrt(0.1)), x, FixedN(5))
    assert 0.999 < five.energy_ratio < 0.9999


@pytest.mark.xfail(strict=True, reason="energy rule at 99.99% keeps six modes, not five")
def test_kle_energy_rule_keeps_five_modes():
    x = (np.arange(400) + 0.5) / 400
    b = build_kle(SquaredExponential(1.0, np.sqrt(0.1)), x, TruncateAtEnergy(0.9999))
    assert b.n == 5


def test_kle_eigenvalues_converge_with_resolution():
    k = SquaredExponential(1.0, 0.3)
    mid = lambda n: (np.arange(n) + 0.5) / n
    a = build_kle(k, mid(100), FixedN(4)).eigenvalues
    c = build_kle(k, mid(800), FixedN(4)).eigenvalues
    np.testing.assert_allclose(a, c, rtol=1e-3)


def test_nystrom_extension_reproduces_nodes():
    x = np.linspace(0, 1, 151)
    b = build_kle(SquaredExponential(1.0, 0.3), x, FixedN(5))
    np.testing.assert_allclose(b.modes_at(x), b.modes, atol=1e-8)


def test_anisotropic_fixed_twenty_and_variance():
    g = build_grid(20, 20)
    b = build_kle(SquaredExponential(1.0, (0.2, 0.3)), g.nodes, FixedN(20))
    assert b.n == 20
    rng = np.random.default_rng(1)
    th = rng.standard_normal((10_000, 20))
    fields = kle_field(b, th)
    pred = (b.scaled_modes() ** 2).sum(axis=1)
    np.testing.assert_allclose(fields.var(axis=0), pred, rtol=0.05)


def test_kle_field_mean_and_linearity():
    x = np.linspace(0, 1, 50)
    b = build_kle(SquaredExponential(2.0, 0.2), x, FixedN(3), mean=1.5)
    np.testing.assert_allclose(kle_field(b, np.zeros(3)), 1.5)
    t1, t2 = np.array([1.0, -0.5, 2.0]), np.array([0.3, 0.1, -1.0])
    np.testing.assert_allclose(kle_field(b, t1 + t2) - 1.5,
                               (kle_field(b, t1) - 1.5) + (kle_field(b, t2) - 1.5), atol=1e-12)
    with pytest.raises(ValueError):
        kle_field(b, np.zeros(4))


def test_white_noise_limit_flat_spectrum():
    x = np.linspace(0, 1, 40)
    b = build_kle(SquaredExponential(1.0, 1e-4), x, FixedN(40))
    assert b.eigenvalues.max() / b.eigenvalues.min() < 1.01


def test_curve_transform_range():
    v = curve_transform(np.array([-1e9, -1.0, 0.0, 3.0, 1e9]))
    assert np.all((v >= 0) & (v <= 1))
    assert v[2] == 0.5


def test_channel_field_three_values():
    model = build_channel_model()
    g = build_grid(16, 16)
    assert model.n_params == 13
    np.testing.assert_allclose(channel_field(model, np.zeros(13), g), 1.0)
    rng = np.random.default_rng(3)
    th = np.concatenate([[0.0, 4.0, 1.0], rng.standard_normal(10)])
    k = channel_field(model, th, g)
    assert set(np.unique(np.round(np.log(k), 12))) <= {0.0, 4.0, 1.0}
    # zero curve weights put both interfaces at y = 0.5
    th0 = np.array([0.0, 4.0, 1.0] + [0.0] * 10)
    logk = np.log(channel_field(model, th0, g))
    y = g.nodes[:, 1]
    np.testing.assert_allclose(logk[y > 0.5], 0.0)
    np.testing.assert_allclose(logk[y <= 0.5], 1.0)
    batch = channel_field(model, np.vstack([th, th0]), g)
    assert batch.shape == (2, g.n_nodes)


def test_reference_channel_field_regions():
    pts = np.array([[0.5, 0.95], [0.5, 0.6], [0.5, 0.1], [1 / 6, 0.75]])
    # at x=0.5: upper curve 0.7 - 0.1 = 0.6, lower 0.4 + 0.2 sin(pi + 0.1)
    np.testing.assert_allclose(reference_channel_log_k(pts), [0.0, 4.0, 1.0, 4.0])


def test_source_values_and_switching():
    sm = SourceModel((3.0, 1.0), (0.1, 0.1), (0.05, 0.1))
    locs = np.array([[0.2, 0.6], [0.5, 0.3]])
    assert source_function(sm, [0.2, 0.6], 0.01, locs) == pytest.approx(3 / (2 * np.pi * 0.01), rel=1e-12)
    assert source_function(sm, [0.2, 0.6], 0.01, locs) == pytest.approx(47.746, abs=1e-3)
    np.testing.assert_array_equal(sm.profile(0.0), [1, 0])
    np.testing.assert_array_equal(sm.profile(0.05), [1, 1])
    np.testing.assert_array_equal(sm.profile(0.1), [0, 1])
    pts = np.random.default_rng(0).random((50, 2))
    assert np.all(source_function(sm, pts, 0.07, locs) >= 0)
    with pytest.raises(ValueError):
        SourceModel((1.0,), (0.0,), (0.1,))


def test_bounded_map_roundtrip_and_values():
    bm = BoundedMap((0, 0, 0, 0, 0), (2, 1, 1, 1, 1))
    q = bm.forward([0.5, 0.5, 0.5, 0.5, 0.5])
    assert q[0] == pytest.approx(-0.6744897501960817, abs=1e-12)
    np.testing.assert_allclose(q[1:], 0.0, atol=1e-15)
    rng = np.random.default_rng(0)
    th = rng.uniform(1e-3, 1 - 1e-3, (1000, 5)) * [2, 1, 1, 1, 1]
    assert np.max(np.abs(bm.backward(bm.forward(th)) - th)) < 1e-12
    assert np.all(bm.contains(bm.backward(rng.normal(scale=50, size=(1000, 5)))))
    with pytest.raises(ValueError):
        bm.forward([2.0, 0.5, 0.5, 0.5, 0.5])
