import dataclasses
import json
import time
import warnings

import numpy as np
import pytest
from scipy.stats import norm

from fracenkf.experiments import io
from fracenkf.experiments.cli import main
from fracenkf.experiments.config import ConfigError, ExperimentConfig, format_config, parse_config
from fracenkf.experiments.metrics import interval_table, marginal_density, model_error_variance
from fracenkf.experiments.setups import build_experiment, observation_times, preset, relative_error, stage_config
from fracenkf.gpc import HERMITE, InputNormalization, eval_surrogate, fit_surrogate, total_degree_indices
from fracenkf.twostage import stage_one
from fracenkf.twostage import ObservationSeries

TINY = """
[experiment]
name = channel
seed = 3
[grid]
fine = 8
coarse = 2
m_snap = 4
snapshot_samples = 2
[stages]
n1 = 20
n2 = 40
M1 = 1
M2 = 2
I1 = 1
I2 = 2
N0 = 1
[acceptance]
max_error = 10.0
"""


@pytest.fixture(scope="module")
def tiny_cfg():
    return parse_config(TINY)


def test_presets_are_valid_and_distinct():
    for name in ("channel", "source", "hierarchical"):
        for scale in ("desk", "full"):
            cfg = preset(name, scale)
            assert cfg.name == name and cfg.validate() == []
    assert preset("channel", "full").fine > preset("channel").fine
    with pytest.raises(ValueError):
        preset("channel", "huge")
    with pytest.raises(ValueError):
        preset("nonsense")


def test_config_rejects_unknown_and_lists_every_error():
    text = "[experiment]\nname = channel\nfoo = 1\n[bar]\nx = 1\n[stages]\nn1 = abc\n"
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    errs = exc.value.errors
    assert len(errs) == 3
    assert any("foo" in e for e in errs) and any("[bar]" in e for e in errs) and any("n1" in e for e in errs)


def test_config_semantic_validation():
    with pytest.raises(ConfigError) as exc:
        parse_config("[experiment]\nname = channel\n[grid]\nfine = 30\ncoarse = 4\n[stages]\nn1 = 10\nn2 = 5\n")
    assert len(exc.value.errors) == 2
    with pytest.raises(ConfigError):
        parse_config("[experiment]\nname = nope\n")
    with pytest.raises(ConfigError):
        parse_config("[model]\ngamma = 1.0\n")
    with pytest.raises(ConfigError):
        parse_config("[stages]\nflavor = fancy\n")


def test_config_roundtrip_and_overrides(tiny_cfg):
    assert tiny_cfg.fine == 8 and tiny_cfg.seed == 3 and tiny_cfg.max_error == 10.0
    # untouched keys come from the channel preset
    assert tiny_cfg.sigma == preset("channel").sigma
    for cfg in (tiny_cfg, preset("source"), preset("hierarchical", "full")):
        assert parse_config(format_config(cfg)) == cfg
    base = dataclasses.replace(ExperimentConfig(), name="source")
    assert parse_config("[experiment]\nseed = 7\n", base=base).name == "source"


def test_observation_times_arithmetic():
    cfg = preset("channel")
    times = observation_times(cfg)
    assert len(times) == cfg.I2
    np.testing.assert_allclose(times[0], [0.022, 0.024, 0.026, 0.028])
    np.testing.assert_allclose(times[-1], [0.102, 0.104, 0.106, 0.108])
    assert times[0].size * cfg.sensors_x * cfg.sensors_y == 100


def test_relative_error():
    t = np.array([1.0, -2.0, 3.0])
    assert relative_error(t, t) == 0
    assert relative_error(2 * t, t) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        relative_error(t, np.zeros(3))


def test_data_generation(tiny_cfg):
    ex = build_experiment(tiny_cfg)
    clean = ex.generate_data(sigma=0.0)
    again = ex.generate_data(sigma=0.0, rng=np.random.default_rng(99))
    for a, b in zip(clean.data, again.data):
        np.testing.assert_array_equal(a, b)
    n1, n2 = ex.generate_data(), ex.generate_data()
    for a, b, c in zip(n1.data, n2.data, clean.data):
        np.testing.assert_array_equal(a, b)
        assert 0 < np.std(a - c) < 5 * tiny_cfg.sigma
    assert n1.n_steps == tiny_cfg.I2 and n1.n_d == 100


def test_interval_table_degenerate_and_nesting():
    R = np.ones((50, 3))
    tab = interval_table(R, 0.0)
    for k in ("median", "cred_lo", "cred_hi", "pred_lo", "pred_hi"):
        np.testing.assert_allclose(tab[k], 1.0)
    tab = interval_table(R, 0.04)
    np.testing.assert_allclose(tab["pred_hi"] - 1.0, norm.ppf(0.975) * 0.2)
    rng = np.random.default_rng(0)
    tab = interval_table(rng.gamma(2.0, size=(500, 4)), 0.1, model_var=np.full(4, 0.05))
    assert np.all(tab["pred_lo"] <= tab["cred_lo"]) and np.all(tab["cred_hi"] <= tab["pred_hi"])
    assert np.all(tab["cred_lo"] <= tab["median"]) and tab["reliable"]
    with pytest.warns(UserWarning):
        assert not interval_table(R[:5], 0.1)["reliable"]


def test_predictive_interval_coverage():
    # Gaussian responses plus Gaussian noise: the predictive band should hold a
    # fresh noisy observation about 95% of the time
    rng = np.random.default_rng(1)
    hits, trials = 0, 200
    for _ in range(trials):
        post = 1.0 + 0.1 * rng.standard_normal((2000, 1))
        tab = interval_table(post, 0.04)
        y = 1.0 + 0.1 * rng.standard_normal() + 0.2 * rng.standard_normal()
        hits += tab["pred_lo"][0] <= y <= tab["pred_hi"][0]
    assert abs(hits / trials - 0.95) <= 0.05


def test_model_error_variance():
    draws = np.random.default_rng(2).normal(size=(2, 1000))
    v = model_error_variance(lambda p: np.vstack([p[0], p[1]]), lambda p: np.vstack([p[0], 0 * p[1]]), draws)
    assert v[0] == 0 and v[1] == pytest.approx(1.0, rel=0.1)


def test_marginal_density():
    x = np.random.default_rng(3).standard_normal(5000)
    g, d = marginal_density(x)
    assert g.size == d.size == 200 and np.all(d >= 0)
    assert abs(g[np.argmax(d)]) < 0.2
    assert np.trapezoid(d, g) == pytest.approx(1.0, abs=0.01)
    with pytest.raises(ValueError):
        marginal_density(np.ones(10))


def test_io_roundtrips(tmp_path):
    rng = np.random.default_rng(4)
    th = rng.normal(size=(3, 7)) * 1e-7
    io.save_ensemble(tmp_path / "e.csv", th)
    np.testing.assert_array_equal(io.load_ensemble(tmp_path / "e.csv"), th)
    sensors = rng.random((4, 2))
    series = ObservationSeries((rng.normal(size=8), rng.normal(size=8)),
                               (np.array([0.1, 0.2]), np.array([0.3, 0.4])), sensors)
    io.save_data(tmp_path / "d.csv", series)
    back = io.load_data(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.sensors, sensors)
    for a, b in zip(series.data + series.times, back.data + back.times):
        np.testing.assert_array_equal(a, b)
    io.write_json(tmp_path / "m.json", {"b": np.float64(np.nan), "a": np.arange(2), "c": np.bool_(True)})
    assert io.read_json(tmp_path / "m.json") == {"a": [0, 1], "b": None, "c": True}


def test_cli_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["run", "bogus", "channel"])
    assert exc.value.code == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("[grid]\nfine = 7\ncoarse = 2\n")
    assert main(["run", "standard", str(bad), "--out-dir", str(tmp_path / "x")]) == 2
    assert "coarse grid" in capsys.readouterr().err


def test_cli_run_and_report_are_reproducible(tmp_path, tiny_cfg):
    cfg_file = tmp_path / "tiny.cfg"
    cfg_file.write_text(TINY)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert main(["run", "two-stage", str(cfg_file), "--out-dir", str(tmp_path / "a")]) == 0
        assert main(["run", "two-stage", str(cfg_file), "--out-dir", str(tmp_path / "b")]) == 0
        first = {f: (tmp_path / "a" / f).read_bytes() for f in ("metrics.json", "intervals.csv", "densities.csv")}
        assert main(["report", str(tmp_path / "a")]) == 0
    for f, content in first.items():
        assert (tmp_path / "a" / f).read_bytes() == content
    assert first["metrics.json"] == (tmp_path / "b" / "metrics.json").read_bytes()
    m = json.loads(first["metrics.json"])
    assert m["method"] == "two-stage" and m["passed"]
    assert [r["phase"] for r in m["records"]] == ["stage_one", "stage_two"]
    for j in range(3):
        assert (tmp_path / "a" / f"ensemble_step_{j}.csv").exists()
    assert (tmp_path / "a" / "timings.json").exists() and (tmp_path / "a" / "ensemble_newprior.csv").exists()
    # a failing threshold flips the exit status
    strict = tmp_path / "strict.cfg"
    strict.write_text(TINY.replace("max_error = 10.0", "max_error = 0.0"))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert main(["run", "standard", str(strict), "--out-dir", str(tmp_path / "c")]) == 1


@pytest.fixture(scope="module")
def channel_surrogate():
    """Stage-two surrogate of the channel desk config, fitted as the driver does."""
    cfg = preset("channel")
    ex = build_experiment(cfg)
    data = ex.generate_data()
    pb = ex.problem()
    new_prior = stage_one(pb, stage_config(cfg), data, cfg.seed)
    pb.recenter(new_prior.mean)
    fine = pb.fine_map(data.step(cfg.I2)[1])
    iset = total_degree_indices(pb.n_params, cfg.N0)
    rng = np.random.default_rng(5)
    train = new_prior.sample(pb, rng, iset.P)
    model = fit_surrogate(train.T, fine(train).T, iset, HERMITE, cfg.alpha,
                          InputNormalization.gaussian(new_prior.mean, new_prior.cov))
    fresh = new_prior.sample(pb, rng, 100)
    return model, fine, fresh


@pytest.mark.slow
def test_surrogate_held_out_accuracy(channel_surrogate):
    model, fine, fresh = channel_surrogate
    ref = fine(fresh)
    rel = np.linalg.norm(eval_surrogate(model, fresh.T).T - ref) / np.linalg.norm(ref)
    assert rel < 0.05, f"held-out relative RMS {rel:.3f}"


@pytest.mark.slow
def test_surrogate_evaluation_is_cheap(channel_surrogate):
    model, fine, fresh = channel_surrogate
    t0 = time.perf_counter()
    fine(fresh)
    t_model = time.perf_counter() - t0
    t0 = time.perf_counter()
    eval_surrogate(model, fresh.T)
    t_sur = time.perf_counter() - t0
    assert t_model >= 50 * t_sur


@pytest.mark.parametrize("name", ["channel", "source", "hierarchical"])
def test_shipped_configs_match_presets(name):
    from pathlib import Path

    from fracenkf.experiments.config import load_config
    path = Path(__file__).resolve().parents[1] / "configs" / f"{name}_desk.cfg"
    assert load_config(path) == preset(name)
