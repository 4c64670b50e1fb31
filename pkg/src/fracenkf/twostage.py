"""Standard and two-stage ensemble Kalman drivers.

The two-stage scheme first assimilates a few data steps with a cheap
multiscale model on a small ensemble, summarises the result as a Gaussian
"new prior", and then filters the remaining steps with a large ensemble whose
forecasts come from a polynomial chaos surrogate refitted at every step.

Random streams are keyed by ``(seed, stream, step)`` so that each phase draws
from its own generator and runs are reproducible.
"""
from __future__ import annotations

import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .filters import (
    Analysis,
    discrepancy,
    enkf_step,
    ensemble_smoother,
    normal_score_forward,
    ns_enkf_step,
)
from .gpc import HERMITE, InputNormalization, fit_surrogate, total_degree_indices

log = logging.getLogger(__name__)

# random stream identifiers
PRIOR, FILTER, NEWPRIOR, NODES, DIAG, STAGE1 = range(6)

PLAIN = "plain"
NORMAL_SCORE = "normal-score"
AFTER_STAGE_ONE = "after-stage-one"
FROM_FIRST_STEP = "from-first-step"


def stream(seed: int, kind: int, step: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(kind), int(step)])


@dataclass(frozen=True)
class ObservationSeries:
    """Per-step data vectors and the observation times they belong to."""

    data: tuple  # of 1D arrays
    times: tuple  # of 1D arrays
    sensors: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.data) != len(self.times):
            raise ValueError("one time vector per data step is required")
        sizes = {np.asarray(d).size for d in self.data}
        if len(sizes) > 1:
            raise ValueError(f"inconsistent data sizes across steps: {sorted(sizes)}")

    @property
    def n_steps(self) -> int:
        return len(self.data)

    @property
    def n_d(self) -> int:
        return np.asarray(self.data[0]).size if self.data else 0

    def step(self, k: int):
        """Data and times of step ``k`` (1-based)."""
        return np.asarray(self.data[k - 1], float), np.asarray(self.times[k - 1], float)

    def stacked(self, steps: Sequence[int]):
        d = np.concatenate([np.asarray(self.data[k - 1], float) for k in steps])
        t = np.concatenate([np.asarray(self.times[k - 1], float) for k in steps])
        return d, t


@dataclass
class InverseProblem:
    """Problem pieces consumed by the drivers.

    Parameters
    ----------
    n_params : int
    sample_prior : callable ``(rng, M) -> (n_p, M)``
    coarse_map, fine_map : callable ``times -> obs_map``
        Observation maps built on the coarse (stage one) and refined (stage
        two and standard) multiscale models.
    noise : KnownNoise or HyperNoise
    bounds : BoundedMap, optional
        Admissible box.  Surrogates and Gaussian new priors then live in the
        unbounded probit coordinates.
    recenter : callable, optional
        ``recenter(mean_theta)`` rebuilds the refined model's basis at a new
        mean; used when ``refresh_basis_each_step`` is on.
    """

    n_params: int
    sample_prior: Callable
    coarse_map: Callable
    fine_map: Callable
    noise: object
    bounds: object = None
    recenter: Optional[Callable] = None

    def to_work(self, theta):
        return theta if self.bounds is None else self.bounds.forward(theta.T).T

    def from_work(self, w):
        return w if self.bounds is None else self.bounds.backward(w.T).T


@dataclass(frozen=True)
class StageConfig:
    """Two-stage settings.

    ``n1 <= n2``, ``M1 <= M2`` and ``I1 <= I2`` are required.  Equal values
    are accepted so the two phases can be compared like for like.
    """

    n1: int
    n2: int
    M1: int
    M2: int
    I1: int
    I2: int
    N0: int = 3
    flavor: str = PLAIN
    new_prior_builder: str = "enkf"  # or "es"
    stage_two_start: str = AFTER_STAGE_ONE
    refresh_basis_each_step: bool = False
    exact_map: bool = False  # debug: skip the surrogate and use the refined model
    alpha: float = 0.01
    family: str = HERMITE
    diagnostics: bool = True

    def __post_init__(self):
        errs = []
        if not 2 <= self.n1 <= self.n2:
            errs.append(f"need 2 <= n1 <= n2 (n1={self.n1}, n2={self.n2})")
        if not 1 <= self.M1 <= self.M2:
            errs.append(f"need 1 <= M1 <= M2 (M1={self.M1}, M2={self.M2})")
        if not 0 <= self.I1 <= self.I2:
            errs.append(f"need 0 <= I1 <= I2 (I1={self.I1}, I2={self.I2})")
        if self.N0 < 0:
            errs.append("N0 must be non-negative")
        if self.flavor not in (PLAIN, NORMAL_SCORE):
            errs.append(f"unknown filter flavor {self.flavor!r}")
        if self.new_prior_builder not in ("enkf", "es"):
            errs.append(f"unknown new-prior builder {self.new_prior_builder!r}")
        if self.stage_two_start not in (AFTER_STAGE_ONE, FROM_FIRST_STEP):
            errs.append(f"unknown stage_two_start {self.stage_two_start!r}")
        if errs:
            raise ValueError("; ".join(errs))

    def stage_two_steps(self) -> range:
        first = self.I1 + 1 if self.stage_two_start == AFTER_STAGE_ONE else 1
        return range(first, self.I2 + 1)


@dataclass
class NewPrior:
    """Gaussian summary of the stage-one analysis.

    For the plain flavor ``mean``/``cov`` describe the working coordinates
    (parameters, or their probit image when bounded).  For the normal-score
    flavor they describe the scores and ``score_map`` maps samples back.
    """

    mean: np.ndarray
    cov: np.ndarray
    flavor: str = PLAIN
    score_map: object = None

    def __post_init__(self):
        C = 0.5 * (self.cov + self.cov.T)
        lam, V = np.linalg.eigh(C)
        floor = 1e-12 * max(lam.max(), 0.0)
        lam = np.maximum(lam, floor)
        self.cov = (V * lam) @ V.T
        self._factor = V * np.sqrt(lam)

    def sample_work(self, rng, M: int) -> np.ndarray:
        z = rng.standard_normal((self.mean.size, M))
        w = self.mean[:, None] + self._factor @ z
        if self.flavor == NORMAL_SCORE:
            w = self.score_map.backward(w)
        return w

    def sample(self, problem: InverseProblem, rng, M: int) -> np.ndarray:
        return problem.from_work(self.sample_work(rng, M))


def moments(X) -> tuple[np.ndarray, np.ndarray]:
    X = np.atleast_2d(X)
    return X.mean(axis=1), np.atleast_2d(np.cov(X))


@dataclass
class StepRecord:
    step: int
    phase: str
    theta: np.ndarray
    sigma2: float
    discrepancy: float
    n_d: int


@dataclass
class RunReport:
    """Per-step ensembles, noise estimates, discrepancies and phase timings."""

    method: str
    seed: int
    initial: np.ndarray
    records: list = field(default_factory=list)
    timings: dict = field(default_factory=lambda: defaultdict(float))
    new_prior: Optional[NewPrior] = None
    stage_one_final: Optional[np.ndarray] = None
    stage_two_initial: Optional[np.ndarray] = None

    @property
    def final(self) -> np.ndarray:
        return self.records[-1].theta if self.records else self.initial

    @property
    def steps(self) -> list:
        return [r.step for r in self.records]

    def series(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def ensembles(self) -> list:
        return [r.theta for r in self.records]

    @property
    def total_time(self) -> float:
        return float(sum(v for k, v in self.timings.items() if k != "diagnostics"))


class _Timer:
    def __init__(self, bucket: dict, name: str):
        self.bucket, self.name = bucket, name

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.bucket[self.name] += time.perf_counter() - self.t0


def _analysis(problem: InverseProblem, flavor: str, theta, d, obs_map, rng, Z=None) -> Analysis:
    if flavor == NORMAL_SCORE:
        return ns_enkf_step(theta, d, obs_map, problem.noise, rng, bounds=problem.bounds, Z=Z)
    if problem.bounds is None:
        return enkf_step(theta, d, obs_map, problem.noise, rng, Z=Z)
    # plain update in probit coordinates keeps members in the box
    Z = obs_map(theta) if Z is None else Z
    a = enkf_step(problem.to_work(theta), d, None, problem.noise, rng, Z=Z)
    a.theta = problem.from_work(a.theta)
    return a


def _record(report, step, phase, a: Analysis, d, obs_map, diagnostics: bool):
    disc = float("nan")
    if diagnostics:
        with _Timer(report.timings, "diagnostics"):
            disc = discrepancy(d, obs_map(a.theta))
    report.records.append(StepRecord(step, phase, a.theta, a.sigma2, disc, d.size))


def run_filter(problem: InverseProblem, data: ObservationSeries, theta0, steps, map_for_step,
               flavor: str, seed: int, report: RunReport, phase: str, stream_kind: int = FILTER,
               diagnostics: bool = True, before_step: Optional[Callable] = None) -> np.ndarray:
    """Sequential analyses over ``steps``; returns the last analysis ensemble.

    ``map_for_step(k, theta, times)`` supplies the observation map for step
    ``k`` given the current ensemble (surrogates are built there).
    """
    theta = np.asarray(theta0, dtype=float)
    for k in steps:
        d, times = data.step(k)
        if before_step is not None:
            before_step(k, theta)
        obs_map = map_for_step(k, theta, times)
        with _Timer(report.timings, phase):
            try:
                a = _analysis(problem, flavor, theta, d, obs_map, stream(seed, stream_kind, k))
            except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
                raise RuntimeError(f"{phase} analysis failed at step {k}: {exc}") from exc
        _record(report, k, phase, a, d, obs_map, diagnostics)
        theta = a.theta
        log.info("%s step %d: sigma2=%.3e disc=%.3e", phase, k, a.sigma2, report.records[-1].discrepancy)
    return theta


def run_standard(problem: InverseProblem, data: ObservationSeries, M: int, I2: int, seed: int,
                 flavor: str = PLAIN, theta0=None, diagnostics: bool = True) -> RunReport:
    """EnKF with the refined multiscale model at every step."""
    if I2 > data.n_steps:
        raise ValueError(f"I2={I2} exceeds the {data.n_steps} available data steps")
    if theta0 is None:
        theta0 = problem.sample_prior(stream(seed, PRIOR), M)
    rep = RunReport("standard", seed, np.asarray(theta0))
    run_filter(problem, data, theta0, range(1, I2 + 1), lambda k, th, t: problem.fine_map(t),
               flavor, seed, rep, "standard", diagnostics=diagnostics)
    return rep


def stage_one(problem: InverseProblem, cfg: StageConfig, data: ObservationSeries, seed: int,
              report: Optional[RunReport] = None) -> NewPrior:
    """Assimilate the first ``I1`` steps with the coarse model on ``n1`` members."""
    if data.n_steps < cfg.I1:
        raise ValueError(f"stage one needs {cfg.I1} data steps, got {data.n_steps}")
    theta0 = problem.sample_prior(stream(seed, STAGE1, 0), cfg.n1)
    if report is None:
        report = RunReport("stage-one", seed, theta0)
    report.initial = theta0
    theta = theta0
    if cfg.I1 > 0:
        if cfg.new_prior_builder == "es":
            d, t = data.stacked(range(1, cfg.I1 + 1))
            obs_map = problem.coarse_map(t)
            with _Timer(report.timings, "stage_one"):
                a = _analysis(problem, cfg.flavor, theta, d, obs_map, stream(seed, STAGE1, 1))
            _record(report, cfg.I1, "stage_one", a, d, obs_map, cfg.diagnostics)
            theta = a.theta
        else:
            theta = run_filter(problem, data, theta, range(1, cfg.I1 + 1),
                               lambda k, th, t: problem.coarse_map(t), cfg.flavor, seed, report,
                               "stage_one", stream_kind=STAGE1, diagnostics=cfg.diagnostics)
    report.stage_one_final = theta
    W = problem.to_work(theta)
    if cfg.flavor == NORMAL_SCORE:
        Xi, nsmap = normal_score_forward(W)
        mean, cov = moments(Xi)
        return NewPrior(mean, cov, NORMAL_SCORE, nsmap)
    mean, cov = moments(W)
    return NewPrior(mean, cov, PLAIN)


class SurrogateFactory:
    """Fits a gPC surrogate of the refined model around the current ensemble.

    Training nodes (``Q = P``) are drawn from the Gaussian with the ensemble's
    mean and covariance in working coordinates; inputs are standardised per
    component before entering the Hermite basis.  With the normal-score
    flavor the working coordinates are the ensemble's own scores, which keeps
    heavy-tailed members inside the region the surrogate was trained on.
    """

    def __init__(self, problem: InverseProblem, cfg: StageConfig, seed: int, timings: dict):
        self.problem, self.cfg, self.seed, self.timings = problem, cfg, seed, timings
        self.iset = total_degree_indices(problem.n_params, cfg.N0)
        self.last = None

    def __call__(self, k: int, theta, times):
        pb = self.problem
        with _Timer(self.timings, "surrogate"):
            W = pb.to_work(theta)
            if self.cfg.flavor == NORMAL_SCORE:
                W, nsmap = normal_score_forward(W)
                to_input = lambda th: nsmap.forward(pb.to_work(th))
                to_param = lambda w: pb.from_work(nsmap.backward(w))
            else:
                to_input, to_param = pb.to_work, pb.from_work
            mean, cov = moments(W)
            nodes = NewPrior(mean, cov).sample_work(stream(self.seed, NODES, k), self.iset.P)
            Y = pb.fine_map(times)(to_param(nodes)).T  # (Q, n_d)
            norm = InputNormalization.gaussian(mean, cov)
            try:
                sur = fit_surrogate(nodes.T, Y, self.iset, self.cfg.family, self.cfg.alpha, norm)
            except (np.linalg.LinAlgError, FloatingPointError) as exc:
                raise RuntimeError(f"surrogate fit failed at step {k}: {exc}") from exc
        self.last = sur
        return lambda th: sur(to_input(np.atleast_2d(th)).T).T


def stage_two(problem: InverseProblem, cfg: StageConfig, data: ObservationSeries, new_prior: NewPrior,
              seed: int, report: RunReport, theta0=None) -> np.ndarray:
    """Surrogate-accelerated filtering of the remaining steps on ``n2`` members."""
    if cfg.I2 > data.n_steps:
        raise ValueError(f"I2={cfg.I2} exceeds the {data.n_steps} available data steps")
    if theta0 is None:
        with _Timer(report.timings, "stage_two"):
            theta0 = new_prior.sample(problem, stream(seed, NEWPRIOR), cfg.n2)
    report.stage_two_initial = np.asarray(theta0)
    if cfg.exact_map:
        map_for_step = lambda k, th, t: problem.fine_map(t)
    else:
        map_for_step = SurrogateFactory(problem, cfg, seed, report.timings)

    before = None
    if cfg.refresh_basis_each_step and problem.recenter is not None:
        def before(k, th):
            with _Timer(report.timings, "surrogate"):
                problem.recenter(th.mean(axis=1))

    return run_filter(problem, data, theta0, cfg.stage_two_steps(), map_for_step, cfg.flavor, seed,
                      report, "stage_two", diagnostics=cfg.diagnostics, before_step=before)


def run_two_stage(problem: InverseProblem, cfg: StageConfig, data: ObservationSeries, seed: int,
                  theta0=None) -> RunReport:
    """Stage one followed by stage two with the flavor set in ``cfg``."""
    rep = RunReport("two-stage" if cfg.flavor == PLAIN else "ns-two-stage", seed,
                    np.empty((problem.n_params, 0)))
    np_ = stage_one(problem, cfg, data, seed, rep)
    rep.new_prior = np_
    stage_two(problem, cfg, data, np_, seed, rep, theta0=theta0)
    return rep


def run_two_stage_ns(problem: InverseProblem, cfg: StageConfig, data: ObservationSeries,
                     seed: int) -> RunReport:
    return run_two_stage(problem, replace(cfg, flavor=NORMAL_SCORE), data, seed)


def run_smoother(problem: InverseProblem, data: ObservationSeries, M: int, I2: int, seed: int,
                 diagnostics: bool = True) -> RunReport:
    """Single global update against the stacked data of steps ``1..I2``."""
    theta0 = problem.sample_prior(stream(seed, PRIOR), M)
    rep = RunReport("smoother", seed, theta0)
    d, t = data.stacked(range(1, I2 + 1))
    obs_map = problem.fine_map(t)
    with _Timer(rep.timings, "smoother"):
        a = ensemble_smoother(theta0, d, obs_map, problem.noise, stream(seed, FILTER, 1))
    _record(rep, I2, "smoother", a, d, obs_map, diagnostics)
    return rep
