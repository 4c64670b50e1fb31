"""The three synthetic experiments: presets, truth, priors and model pieces."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ..filters import HyperNoise, KnownNoise
from ..forward import BatchInputs, ForwardModel, ForwardSetup, FullOrderSolver, ReducedOperator, ReducedSolver
from ..gmsfem import GMsFEMBuilder
from ..grid import BoundaryCondition, build_grid, sensor_grid
from ..parameterization import (
    BoundedMap,
    FixedN,
    SourceModel,
    SquaredExponential,
    build_channel_model,
    build_kle,
    channel_field,
    kle_field,
    reference_channel_curves,
    reference_channel_log_k,
)
from ..twostage import InverseProblem, ObservationSeries, StageConfig
from .config import ExperimentConfig

# extra random streams, after the driver's own.  Seed lists are zero-padded by
# numpy, so every stream carries a distinct non-zero kind.
DATA, SNAPSHOTS, MODEL_ERROR, TRUTH = 10, 11, 12, 13
HIERARCHICAL_TRUTH_SEED = 20
CURVE_GRID = np.linspace(0.0, 1.0, 200)

SOURCE_STRENGTHS = (3.0, 1.0)
SOURCE_WIDTHS = (0.1, 0.1)
SOURCE_TRUTH = np.array([0.5, 0.2, 0.6, 0.5, 0.3])  # (gamma, chi_1, chi_2)
SOURCE_BOX = (np.zeros(5), np.array([2.0, 1.0, 1.0, 1.0, 1.0]))


def preset(name: str, scale: str = "desk") -> ExperimentConfig:
    """Default configuration of an experiment at ``desk`` or ``full`` scale."""
    if scale not in ("desk", "full"):
        raise ValueError(f"unknown scale {scale!r}")
    base = ExperimentConfig()
    if name == "channel":
        cfg = dataclasses.replace(base, name="channel", max_error=0.2)
        if scale == "full":
            cfg = dataclasses.replace(cfg, fine=80, coarse=5, n1=5000, n2=10000, N0=3)
    elif name == "source":
        cfg = dataclasses.replace(
            base, name="source", T=0.1, t_stride=0.006, sensors_x=5, sensors_y=4, sensor_y0=0.0,
            sensor_y1=1.0, I1=1, I2=8, M1=6, M2=6, m_snap=10, snapshot_samples=1, n1=1000, n2=1000,
            N0=4, flavor="normal-score", stage_two_start="from-first-step", max_error=0.15,
            min_subdiffusion=0.8)
        if scale == "full":
            cfg = dataclasses.replace(cfg, fine=100, coarse=5, n1=3000, n2=3000, M1=9, M2=9, N0=7)
    elif name == "hierarchical":
        cfg = dataclasses.replace(
            base, name="hierarchical", gamma=1.5, source=20.0, boundary="dirichlet", noise="hyper",
            M1=3, M2=5, I1=2, I2=9, N0=2, discrepancy_factor=2.0)
        if scale == "full":
            cfg = dataclasses.replace(cfg, fine=100, coarse=5, n1=3000, n2=10000, N0=3)
    else:
        raise ValueError(f"unknown experiment {name!r}")
    return cfg.checked()


def observation_times(cfg: ExperimentConfig) -> list[np.ndarray]:
    n = int(round((cfg.t_last - cfg.t_first) / cfg.t_stride)) + 1
    return [np.round(cfg.t_first + cfg.t_shift * I + cfg.t_stride * np.arange(n), 12)
            for I in range(1, cfg.I2 + 1)]


def stage_config(cfg: ExperimentConfig, **overrides) -> StageConfig:
    kw = dict(n1=cfg.n1, n2=cfg.n2, M1=cfg.M1, M2=cfg.M2, I1=cfg.I1, I2=cfg.I2, N0=cfg.N0,
              flavor=cfg.flavor, new_prior_builder=cfg.builder, stage_two_start=cfg.stage_two_start,
              refresh_basis_each_step=cfg.refresh_basis, alpha=cfg.alpha)
    kw.update(overrides)
    return StageConfig(**kw)


def relative_error(estimate, truth) -> float:
    t = np.asarray(truth, dtype=float)
    nt = np.linalg.norm(t)
    if nt == 0:
        raise ValueError("relative error against a zero-norm truth")
    return float(np.linalg.norm(np.asarray(estimate, dtype=float) - t) / nt)


@dataclass
class Experiment:
    """Concrete experiment assembled from a config.

    Attributes
    ----------
    param_map : callable
        ``(M, n_p)`` parameters to :class:`BatchInputs` on the fine grid.
    truth_inputs : BatchInputs
        Inputs of the data-generating solve.
    field_map : callable or None
        Parameters to nodal permeability, for basis recentring.
    """

    cfg: ExperimentConfig
    fine: object
    coarse: object
    setup: ForwardSetup
    n_params: int
    param_map: Callable
    truth_inputs: BatchInputs
    sample_prior: Callable
    bounds: Optional[BoundedMap]
    builder: GMsFEMBuilder
    k_bar: np.ndarray
    field_map: Optional[Callable]
    truth_theta: Optional[np.ndarray] = None
    extras: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        self._models: dict = {}

    # -- models -------------------------------------------------------
    def reduced_model(self, M_i: int, k_bar=None, setup: ForwardSetup | None = None) -> ForwardModel:
        st = setup or self.setup
        kb = self.k_bar if k_bar is None else k_bar
        key = (M_i, np.asarray(kb).tobytes(), id(st))
        if key not in self._models:
            op = ReducedOperator(st, self.builder.basis(kb, M_i), self.coarse)
            self._models[key] = ForwardModel(self.param_map, ReducedSolver(op))
        return self._models[key]

    def full_model(self, setup: ForwardSetup | None = None) -> ForwardModel:
        return ForwardModel(self.param_map, FullOrderSolver(setup or self.setup))

    def with_sensors(self, sensors) -> ForwardSetup:
        st = self.setup
        return ForwardSetup(st.grid, st.bc, sensors, st.dt, st.profile)

    @property
    def noise(self):
        if self.cfg.noise == "hyper":
            return HyperNoise(self.cfg.n_s)
        return KnownNoise(self.cfg.sigma ** 2)

    def problem(self) -> InverseProblem:
        coarse = self.reduced_model(self.cfg.M1)
        fine = self.reduced_model(self.cfg.M2)
        recenter = None
        if self.field_map is not None:
            def recenter(theta_bar):
                k = self.field_map(theta_bar)
                fine.solver = self.reduced_model(self.cfg.M2, k_bar=k).solver

        return InverseProblem(self.n_params, self.sample_prior, coarse.at, fine.at, self.noise,
                              self.bounds, recenter)

    # -- data ---------------------------------------------------------
    def generate_data(self, rng=None, sigma: float | None = None) -> ObservationSeries:
        """Full-order solve at the truth with ``dt_truth`` plus i.i.d. Gaussian noise."""
        cfg = self.cfg
        sigma = cfg.sigma if sigma is None else sigma
        rng = rng or np.random.default_rng([cfg.seed, DATA])
        st = ForwardSetup(self.fine, self.setup.bc, self.setup.sensors, cfg.dt_truth, self.setup.profile)
        times = observation_times(cfg)
        clean = FullOrderSolver(st).observe(self.truth_inputs, np.concatenate(times))[0]
        noisy = clean + sigma * rng.standard_normal(clean.size) if sigma > 0 else clean.copy()
        n = times[0].size * st.n_sensors
        data = tuple(noisy[i * n:(i + 1) * n] for i in range(len(times)))
        return ObservationSeries(data, tuple(times), self.setup.sensors)

    # -- metrics ------------------------------------------------------
    def errors(self, theta, sigma2: float | None = None) -> dict:
        """Relative errors of an ensemble (members in columns) against the truth."""
        th = np.atleast_2d(theta)
        name = self.cfg.name
        if name == "channel":
            model = self.extras["channel_model"]
            g1, g2 = model.curves(th.T, CURVE_GRID)
            r1, r2 = reference_channel_curves(CURVE_GRID)
            return {"eps_gamma1": relative_error(g1.mean(axis=0), r1),
                    "eps_gamma2": relative_error(g2.mean(axis=0), r2)}
        if name == "source":
            return {"eps": relative_error(th.mean(axis=1), SOURCE_TRUTH),
                    "subdiffusion_fraction": float(np.mean(th[0] < 1.0))}
        mean = th.mean(axis=1)
        out = {"eps_k": relative_error(self.field_map(mean), self.field_map(self.truth_theta)),
               "eps_theta": relative_error(mean, self.truth_theta)}
        if sigma2 is not None and np.isfinite(sigma2):
            out["eps_sigma2"] = relative_error([sigma2], [self.cfg.sigma ** 2])
        return out


def _grids(cfg):
    fine, coarse = build_grid(cfg.fine, cfg.fine), build_grid(cfg.coarse, cfg.coarse)
    bc = BoundaryCondition.channel_flow() if cfg.boundary == "channel" else BoundaryCondition.homogeneous_dirichlet()
    sensors = sensor_grid(cfg.sensors_x, cfg.sensors_y, ylim=(cfg.sensor_y0, cfg.sensor_y1))
    return fine, coarse, bc, sensors


def _gammas(gamma, M):
    return np.full(M, float(gamma))


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    cfg = cfg.checked()
    return {"channel": _channel, "source": _source, "hierarchical": _hierarchical}[cfg.name](cfg)


def _channel(cfg: ExperimentConfig) -> Experiment:
    fine, coarse, bc, sensors = _grids(cfg)
    st = ForwardSetup(fine, bc, sensors, cfg.dt)
    model = build_channel_model()
    loads = st.constant_load(cfg.source)

    def param_map(th):
        th = np.atleast_2d(th)
        return BatchInputs(channel_field(model, th, fine), _gammas(cfg.gamma, th.shape[0]), loads)

    def sample_prior(rng, M):
        c = 2.0 + 2.0 * rng.standard_normal((3, M))
        w = rng.standard_normal((model.m1 + model.m2, M))
        return np.vstack([c, w])

    snaps = sample_prior(np.random.default_rng([cfg.seed, SNAPSHOTS]), cfg.snapshot_samples)
    ks = channel_field(model, snaps.T, fine)
    k_true = np.exp(reference_channel_log_k(fine.nodes))
    field_map = lambda th: channel_field(model, np.asarray(th), fine)
    return Experiment(cfg, fine, coarse, st, model.n_params, param_map,
                      BatchInputs(k_true, [cfg.gamma], loads), sample_prior, None,
                      GMsFEMBuilder(fine, coarse, ks, cfg.m_snap, field_map),
                      np.exp(np.log(ks).mean(axis=0)), field_map, extras={"channel_model": model})


def _source(cfg: ExperimentConfig) -> Experiment:
    fine, coarse, bc, sensors = _grids(cfg)
    sm = SourceModel(SOURCE_STRENGTHS, SOURCE_WIDTHS, (0.05, cfg.T))
    st = ForwardSetup(fine, bc, sensors, cfg.dt, profile=sm.profile)
    qp = fine.quadrature_points().reshape(-1, 2)
    k = np.exp(reference_channel_log_k(fine.nodes))
    lo, hi = SOURCE_BOX

    def param_map(th):
        th = np.atleast_2d(th)
        loads = sm.kernels(th[:, 1:].reshape(-1, 2, 2), qp)
        return BatchInputs(k, th[:, 0], loads)

    def sample_prior(rng, M):
        return (lo + (hi - lo) * rng.random((M, lo.size))).T

    truth = param_map(SOURCE_TRUTH[None])
    return Experiment(cfg, fine, coarse, st, 5, param_map,
                      BatchInputs(k, [cfg.gamma], truth.loads[0]), sample_prior, BoundedMap(lo, hi),
                      GMsFEMBuilder(fine, coarse, k[None], cfg.m_snap), k, None, SOURCE_TRUTH.copy(),
                      extras={"source_model": sm})


def _hierarchical(cfg: ExperimentConfig) -> Experiment:
    fine, coarse, bc, sensors = _grids(cfg)
    st = ForwardSetup(fine, bc, sensors, cfg.dt)
    mean = reference_channel_log_k(fine.nodes)
    kle = build_kle(SquaredExponential(1.0, (0.2, 0.3)), fine.nodes, FixedN(20), mean=mean)
    loads = st.constant_load(cfg.source)

    def field_map(th):
        return np.exp(kle_field(kle, th))

    def param_map(th):
        th = np.atleast_2d(th)
        return BatchInputs(field_map(th), _gammas(cfg.gamma, th.shape[0]), loads)

    def sample_prior(rng, M):
        return rng.standard_normal((kle.n, M))

    truth = np.random.default_rng([HIERARCHICAL_TRUTH_SEED, TRUTH]).standard_normal(kle.n)
    snaps = sample_prior(np.random.default_rng([cfg.seed, SNAPSHOTS]), cfg.snapshot_samples)
    ks = field_map(snaps.T)
    return Experiment(cfg, fine, coarse, st, kle.n, param_map,
                      BatchInputs(field_map(truth), [cfg.gamma], loads), sample_prior, None,
                      GMsFEMBuilder(fine, coarse, ks, cfg.m_snap, field_map),
                      np.exp(mean), field_map, truth, extras={"kle": kle})
