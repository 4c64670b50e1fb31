"""Run an experiment into a directory and summarise a finished run."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from ..filters import discrepancy
from ..twostage import (
    NORMAL_SCORE,
    PLAIN,
    RunReport,
    run_smoother,
    run_standard,
    run_two_stage,
    stream,
)
from . import io
from .config import ExperimentConfig, format_config, load_config
from .metrics import interval_table, marginal_density, model_error_variance
from .setups import MODEL_ERROR, build_experiment, stage_config

log = logging.getLogger(__name__)

METHODS = ("standard", "two-stage", "ns-two-stage", "smoother")
INTERVAL_MEMBERS = 400
N_MODEL_ERROR = 20


def run_method(ex, method: str, data, seed: int | None = None) -> RunReport:
    cfg = ex.cfg
    seed = cfg.seed if seed is None else seed
    pb = ex.problem()
    if method == "standard":
        return run_standard(pb, data, cfg.n2, cfg.I2, seed, flavor=cfg.flavor)
    if method == "two-stage":
        return run_two_stage(pb, stage_config(cfg, flavor=PLAIN), data, seed)
    if method == "ns-two-stage":
        return run_two_stage(pb, stage_config(cfg, flavor=NORMAL_SCORE), data, seed)
    if method == "smoother":
        return run_smoother(pb, data, cfg.n2, cfg.I2, seed)
    raise ValueError(f"unknown method {method!r}; choose from {list(METHODS)}")


def generate(cfg: ExperimentConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ex = build_experiment(cfg)
    (out / "config.echo").write_text(format_config(cfg))
    io.save_data(out / "data.csv", ex.generate_data())
    return out


def execute(cfg: ExperimentConfig, method: str, out_dir) -> dict:
    """Generate data, run ``method``, write every artefact and return the metrics."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {list(METHODS)}")
    out = generate(cfg, out_dir)
    ex = build_experiment(cfg)
    data = io.load_data(out / "data.csv")
    rep = run_method(ex, method, data)
    for old in out.glob("ensemble_*.csv"):
        old.unlink()
    io.save_ensemble(out / "ensemble_step_0.csv", rep.initial)
    for j, r in enumerate(rep.records, start=1):
        io.save_ensemble(out / f"ensemble_step_{j}.csv", r.theta)
    if rep.stage_two_initial is not None:
        io.save_ensemble(out / "ensemble_newprior.csv", rep.stage_two_initial)
    io.write_json(out / "timings.json", {**rep.timings, "total": rep.total_time})
    io.write_json(out / "metrics.json", {
        "experiment": cfg.name, "method": method, "seed": cfg.seed,
        "records": [{"index": j, "step": r.step, "phase": r.phase, "members": r.theta.shape[1],
                     "n_d": r.n_d, "sigma2": r.sigma2, "discrepancy": r.discrepancy}
                    for j, r in enumerate(rep.records, start=1)],
    })
    return report(out, ex=ex)


def _slices(name: str):
    s = np.linspace(0.0, 1.0, 21)
    if name == "source":
        return {"x_at_y0": np.column_stack([s, np.zeros_like(s)]),
                "y_at_x0.9": np.column_stack([np.full_like(s, 0.9), s])}
    return {"x_at_y0.5": np.column_stack([s, np.full_like(s, 0.5)]),
            "y_at_x0.5": np.column_stack([np.full_like(s, 0.5), s])}


def _intervals(ex, data, theta, sigma2):
    cfg = ex.cfg
    t_end = np.asarray(data.times[-1])[-1:]
    th = theta[:, :INTERVAL_MEMBERS]
    prior = ex.sample_prior(stream(cfg.seed, MODEL_ERROR), N_MODEL_ERROR)
    truth_in = ex.truth_inputs
    rows = []
    for si, (name, pts) in enumerate(sorted(_slices(cfg.name).items())):
        st = ex.with_sensors(pts)
        red = ex.reduced_model(cfg.M2, setup=st)
        full = ex.full_model(st)
        mvar = model_error_variance(lambda p: full.observe(p, t_end), lambda p: red.observe(p, t_end), prior)
        tab = interval_table(red.observe(th, t_end).T, sigma2, mvar)
        truth = full.solver.observe(truth_in, t_end)[0]
        coord = pts[:, 0] if name.startswith("x") else pts[:, 1]
        for q in range(pts.shape[0]):
            rows.append((si, coord[q], t_end[0], tab["median"][q], tab["cred_lo"][q], tab["cred_hi"][q],
                         tab["pred_lo"][q], tab["pred_hi"][q], truth[q]))
    return ["slice", "coord", "time", "median", "cred_lo", "cred_hi", "pred_lo", "pred_hi", "truth"], rows


def _densities(ensembles):
    rows = []
    for j, th in enumerate(ensembles):
        for c in range(th.shape[0]):
            if th.shape[1] < 2 or np.std(th[c]) == 0:
                continue
            x, dens = marginal_density(th[c])
            rows.extend((j, c, xi, di) for xi, di in zip(x, dens))
    return ["index", "component", "x", "density"], rows


def _acceptance(cfg: ExperimentConfig, final_err: dict, stage_one_err: dict | None, final_disc: float,
                reference: float) -> dict:
    checks = {}
    if cfg.max_error >= 0:
        keys = {"channel": ("eps_gamma1", "eps_gamma2"), "source": ("eps",),
                "hierarchical": ("eps_k",)}[cfg.name]
        v = max(final_err[k] for k in keys)
        checks["max_error"] = {"value": v, "threshold": cfg.max_error, "pass": v <= cfg.max_error}
    if cfg.min_subdiffusion >= 0:
        src = stage_one_err if stage_one_err is not None else final_err
        v = src.get("subdiffusion_fraction", float("nan"))
        checks["min_subdiffusion"] = {"value": v, "threshold": cfg.min_subdiffusion,
                                      "pass": bool(v >= cfg.min_subdiffusion)}
    if cfg.discrepancy_factor >= 0:
        f = cfg.discrepancy_factor
        ok = reference / f <= final_disc <= reference * f
        checks["discrepancy_factor"] = {"value": final_disc / reference, "threshold": f, "pass": bool(ok)}
    return checks


def report(run_dir, ex=None) -> dict:
    """(Re)compute metrics, intervals and densities from the files of a run.

    Reads ``config.echo``, ``data.csv``, the ensemble files and the record
    table of ``metrics.json``; rewrites ``metrics.json``, ``intervals.csv``
    and ``densities.csv``.  Running it twice gives identical files.
    """
    out = Path(run_dir)
    cfg = load_config(out / "config.echo")
    ex = ex or build_experiment(cfg)
    data = io.load_data(out / "data.csv")
    old = io.read_json(out / "metrics.json")
    recs = old["records"]
    ensembles = [io.load_ensemble(out / f"ensemble_step_{j}.csv") for j in range(len(recs) + 1)]
    ref_s2 = cfg.sigma ** 2
    records = []
    for rec, th in zip(recs, ensembles[1:]):
        r = {k: rec[k] for k in ("index", "step", "phase", "members", "n_d", "sigma2", "discrepancy")}
        r["errors"] = ex.errors(th, rec["sigma2"] if rec["sigma2"] is not None else float("nan"))
        r["reference"] = rec["n_d"] * ref_s2
        records.append(r)
    final = ensembles[-1]
    final_sigma2 = recs[-1]["sigma2"] if recs else ref_s2
    d, t = data.step(recs[-1]["step"]) if recs else data.step(1)
    exact = ex.reduced_model(cfg.M2).at(t)
    final_disc = discrepancy(d, exact(final))
    s1 = [r for r in records if r["phase"] == "stage_one"]
    stage_one_err = s1[-1]["errors"] if s1 else None
    metrics = {
        "experiment": cfg.name,
        "method": old["method"],
        "seed": cfg.seed,
        "records": records,
        "initial_errors": ex.errors(ensembles[0]),
        "final": {"errors": ex.errors(final, final_sigma2 if final_sigma2 is not None else float("nan")),
                  "sigma2": final_sigma2,
                  "discrepancy_refined_model": final_disc,
                  "reference": d.size * ref_s2},
        "discrepancy_series": [r["discrepancy"] for r in records],
        "sigma2_series": [r["sigma2"] for r in records],
        "timings_file": "timings.json",
    }
    metrics["acceptance"] = _acceptance(cfg, metrics["final"]["errors"], stage_one_err, final_disc,
                                        d.size * ref_s2)
    metrics["passed"] = all(c["pass"] for c in metrics["acceptance"].values())
    hdr, rows = _intervals(ex, data, final, final_sigma2 if final_sigma2 is not None else ref_s2)
    io.write_csv(out / "intervals.csv", hdr, rows)
    hdr, rows = _densities(ensembles)
    io.write_csv(out / "densities.csv", hdr, rows)
    io.write_json(out / "metrics.json", metrics)
    return metrics
