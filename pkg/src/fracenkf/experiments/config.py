"""Experiment configuration: a sectioned key-value file with a fixed schema.

Example::

    [experiment]
    name = channel
    seed = 0

    [stages]
    n1 = 500
    n2 = 2000

Unknown sections or keys are rejected, and every problem found is reported
at once.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

EXPERIMENTS = ("channel", "source", "hierarchical")


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _field(section: str, default, help: str = "", choices=None):
    return dataclasses.field(default=default, metadata={"section": section, "help": help,
                                                        "choices": choices})


@dataclass(frozen=True)
class ExperimentConfig:
    # [experiment]
    name: str = _field("experiment", "channel", "experiment id", EXPERIMENTS)
    seed: int = _field("experiment", 0, "master seed")
    # [grid]
    fine: int = _field("grid", 32, "fine cells per direction")
    coarse: int = _field("grid", 4, "coarse cells per direction")
    m_snap: int = _field("grid", 20, "local snapshot eigenfunctions per sample")
    snapshot_samples: int = _field("grid", 10, "prior permeability samples for the snapshots")
    # [time]
    dt_truth: float = _field("time", 0.001, "time step of the data-generating solve")
    dt: float = _field("time", 0.002, "time step of the inversion models")
    T: float = _field("time", 0.11, "end time")
    # [model]
    gamma: float = _field("model", 0.5, "true fractional order")
    source: float = _field("model", 10.0, "constant source (channel / hierarchical)")
    boundary: str = _field("model", "channel", "boundary condition", ("channel", "dirichlet"))
    # [observation]
    sensors_x: int = _field("observation", 5, "sensors along x")
    sensors_y: int = _field("observation", 5, "sensors along y")
    sensor_y0: float = _field("observation", 0.1, "lower y of the sensor box")
    sensor_y1: float = _field("observation", 0.9, "upper y of the sensor box")
    t_first: float = _field("observation", 0.012, "first time of step I is t_first + shift * I")
    t_last: float = _field("observation", 0.018, "last time of step I is t_last + shift * I")
    t_stride: float = _field("observation", 0.002, "spacing of times within a step")
    t_shift: float = _field("observation", 0.01, "offset between consecutive steps")
    sigma: float = _field("observation", 0.01, "standard deviation of the data noise")
    # [stages]
    n1: int = _field("stages", 500, "stage-one ensemble size")
    n2: int = _field("stages", 2000, "stage-two and standard ensemble size")
    M1: int = _field("stages", 7, "basis functions per node, coarse model")
    M2: int = _field("stages", 8, "basis functions per node, refined model")
    I1: int = _field("stages", 3, "stage-one data steps")
    I2: int = _field("stages", 9, "total data steps")
    N0: int = _field("stages", 2, "surrogate total degree")
    alpha: float = _field("stages", 0.01, "l1 weight of the surrogate fit")
    flavor: str = _field("stages", "plain", "filter flavor", ("plain", "normal-score"))
    builder: str = _field("stages", "enkf", "new-prior builder", ("enkf", "es"))
    stage_two_start: str = _field("stages", "after-stage-one", "first stage-two step",
                                  ("after-stage-one", "from-first-step"))
    refresh_basis: bool = _field("stages", False, "rebuild the refined basis at each step")
    # [noise]
    noise: str = _field("noise", "known", "noise model of the filter", ("known", "hyper"))
    n_s: float = _field("noise", 0.05, "inverse-gamma prior weight")
    # [acceptance]
    max_error: float = _field("acceptance", -1.0, "largest admissible final relative error (<0: off)")
    min_subdiffusion: float = _field("acceptance", -1.0,
                                     "smallest fraction of stage-one members with gamma < 1 (<0: off)")
    discrepancy_factor: float = _field("acceptance", -1.0,
                                       "final discrepancy within this factor of n_d sigma^2 (<0: off)")

    def validate(self) -> list[str]:
        errs = []
        for f in fields(self):
            ch = f.metadata.get("choices")
            if ch and getattr(self, f.name) not in ch:
                errs.append(f"{f.name} = {getattr(self, f.name)!r} not in {list(ch)}")
        if self.fine < 2 or self.coarse < 1:
            errs.append("grid sizes must be positive")
        elif self.fine % self.coarse:
            errs.append(f"coarse grid ({self.coarse}) must divide the fine grid ({self.fine})")
        for name in ("dt_truth", "dt", "T", "sigma", "t_stride", "n_s", "alpha"):
            if not getattr(self, name) > 0 and not (name == "sigma" and self.sigma == 0):
                errs.append(f"{name} must be positive")
        if self.dt > 0 and self.dt_truth > 0:
            r = self.dt / self.dt_truth
            if abs(r - round(r)) > 1e-9:
                errs.append("dt must be a multiple of dt_truth")
        if not 0 < self.gamma < 2 or self.gamma == 1:
            errs.append("gamma must lie in (0, 1) or (1, 2)")
        if not 2 <= self.n1 <= self.n2:
            errs.append("need 2 <= n1 <= n2")
        if not 1 <= self.M1 <= self.M2:
            errs.append("need 1 <= M1 <= M2")
        if not 0 <= self.I1 <= self.I2:
            errs.append("need 0 <= I1 <= I2")
        if self.I2 >= 1 and self.t_last + self.t_shift * self.I2 > self.T + 1e-12:
            errs.append(f"last observation time {self.t_last + self.t_shift * self.I2:g} exceeds T={self.T:g}")
        if self.t_last < self.t_first:
            errs.append("t_last must not precede t_first")
        if not (0 <= self.sensor_y0 < self.sensor_y1 <= 1):
            errs.append("sensor box must lie inside the unit square")
        if self.sensors_x < 1 or self.sensors_y < 1:
            errs.append("need at least one sensor per direction")
        return errs

    def checked(self) -> "ExperimentConfig":
        errs = self.validate()
        if errs:
            raise ConfigError(errs)
        return self


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


def _schema():
    return {f.name: f for f in fields(ExperimentConfig)}


def _sections():
    out: dict = {}
    for f in fields(ExperimentConfig):
        out.setdefault(f.metadata["section"], []).append(f.name)
    return out


def _parse_value(f, raw: str):
    t = type(f.default)
    if t is bool:
        return _bool(raw)
    return t(raw.strip())


def parse_config(text: str, base: ExperimentConfig | None = None, scale: str = "desk") -> ExperimentConfig:
    """Parse config text on top of ``base``.

    Without ``base`` the values override the ``scale`` preset of the named
    experiment.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from exc
    schema, sections = _schema(), _sections()
    errs, values = [], {}
    for sec in cp.sections():
        if sec not in sections:
            errs.append(f"unknown section [{sec}]")
            continue
        for key, raw in cp.items(sec):
            if key not in sections[sec]:
                errs.append(f"unknown key {key!r} in [{sec}]")
                continue
            try:
                values[key] = _parse_value(schema[key], raw)
            except ValueError:
                errs.append(f"[{sec}] {key} = {raw!r}: expected {type(schema[key].default).__name__}")
    if errs:
        raise ConfigError(errs)
    if base is None:
        from .setups import preset
        name = values.get("name", ExperimentConfig.name)
        if name not in EXPERIMENTS:
            raise ConfigError([f"name = {name!r} not in {list(EXPERIMENTS)}"])
        base = preset(name, scale)
    return dataclasses.replace(base, **values).checked()


def load_config(path, base: ExperimentConfig | None = None, scale: str = "desk") -> ExperimentConfig:
    return parse_config(Path(path).read_text(), base, scale)


def format_config(cfg: ExperimentConfig) -> str:
    """Full config text; parsing it back gives ``cfg``."""
    lines = []
    for sec, names in _sections().items():
        lines.append(f"[{sec}]")
        for n in names:
            v = getattr(cfg, n)
            lines.append(f"{n} = {str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else v}")
        lines.append("")
    return "\n".join(lines)
