import warnings

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from fracenkf.caputo import FractionalConfig, march
from fracenkf.forward import (
    BatchInputs,
    ForwardModel,
    ForwardSetup,
    FullOrderSolver,
    ReducedOperator,
    ReducedSolver,
    solve_forward,
)
from fracenkf.gmsfem import GMsFEMBuilder
from fracenkf.grid import (
    BoundaryCondition,
    apply_boundary,
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    build_grid,
    observation_matrix,
    sensor_grid,
)
from fracenkf.parameterization import SourceModel, reference_channel_log_k

TIMES = np.array([0.01, 0.02, 0.03])


@pytest.fixture(scope="module")
def small():
    fine, coarse = build_grid(12, 12), build_grid(3, 3)
    st = ForwardSetup(fine, BoundaryCondition.channel_flow(), sensor_grid(3, 3), 0.002)
    rng = np.random.default_rng(4)
    ks = np.exp(rng.normal(size=(4, fine.n_nodes)))
    b = GMsFEMBuilder(fine, coarse, ks, M_snap=8)
    mb = b.basis(ks.mean(axis=0), 4)
    return fine, coarse, st, ks, ReducedOperator(st, mb, coarse)


def _dense_galerkin(st, op, k, gamma, loads, times):
    # oracle: explicit R^T K R with the generic march
    R = op.R
    K = assemble_stiffness(st.grid, k)
    Bt = R.T @ (st.B @ R)
    Kt = R.T @ (K @ R)
    F = R.T @ (st.load_op @ loads[0]) - R.T @ (K @ st.lift)
    idx = np.rint(np.asarray(times) / st.dt).astype(int)
    cfg = FractionalConfig(gamma, st.dt, idx.max() * st.dt)
    A = Bt + cfg.scale * Kt
    U = march(lambda r: np.linalg.solve(A, r), lambda u: Bt @ u, lambda t: F, cfg, np.zeros(R.shape[1]))
    full = U[idx] @ R.T + st.lift
    return (st.P @ full.T).T.ravel()


def test_reduced_stiffness_matches_explicit_projection(small):
    fine, coarse, st, ks, op = small
    Kt, Kl = op.stiffness(ks)
    for m in range(ks.shape[0]):
        K = assemble_stiffness(fine, ks[m])
        np.testing.assert_allclose(Kt[m], op.R.T @ (K @ op.R), atol=1e-10)
        np.testing.assert_allclose(Kl[m], op.R.T @ (K @ st.lift), atol=1e-10)


@pytest.mark.parametrize("gamma", [0.5, 1.5])
def test_reduced_solver_matches_dense_galerkin(small, gamma):
    fine, coarse, st, ks, op = small
    loads = st.constant_load(10.0)
    inp = BatchInputs(ks, np.full(4, gamma), loads)
    got = ReducedSolver(op, chunk=3).observe(inp, TIMES)
    for m in range(4):
        ref = _dense_galerkin(st, op, ks[m], gamma, loads, TIMES)
        np.testing.assert_allclose(got[m], ref, rtol=1e-9, atol=1e-12)


def test_modal_path_matches_dense_path_with_mixed_orders(small):
    fine, coarse, st, ks, op = small
    loads = st.constant_load(5.0)
    gam = np.array([0.3, 1.4, 0.8, 1.9, 0.5])
    shared = BatchInputs(ks[0], gam, loads)
    per = BatchInputs(np.repeat(ks[:1], 5, axis=0), gam, loads)
    a = ReducedSolver(op).observe(shared, TIMES)
    b = ReducedSolver(op).observe(per, TIMES)
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_full_solver_matches_manual_assembly():
    g = build_grid(10, 10)
    st = ForwardSetup(g, BoundaryCondition.channel_flow(), sensor_grid(2, 2), 0.005)
    k = 1 + g.nodes[:, 0]
    sysm = apply_boundary(g, assemble_stiffness(g, k), assemble_mass(g), assemble_load(g, 3.0),
                          BoundaryCondition.channel_flow())
    cfg = FractionalConfig(0.7, 0.005, 0.05)
    lu = spla.splu((sysm.B + cfg.scale * sysm.K).tocsc())
    U = march(lu.solve, lambda u: sysm.B @ u, lambda t: sysm.F, cfg, np.zeros(sysm.free.size))
    ref = observation_matrix(g, st.sensors) @ sysm.expand(U[-1])
    got = FullOrderSolver(st).observe(BatchInputs(k, [0.7], st.constant_load(3.0)), [0.05])[0]
    np.testing.assert_allclose(got, ref, rtol=1e-12)


def test_zero_source_zero_data():
    g = build_grid(6, 6)
    st = ForwardSetup(g, BoundaryCondition.homogeneous_dirichlet(), sensor_grid(2, 2), 0.01)
    out = FullOrderSolver(st).observe(BatchInputs(np.ones(g.n_nodes), [0.5], st.constant_load(0.0)), [0.05])
    assert np.all(out == 0)


def test_time_switched_sources():
    g = build_grid(10, 10)
    sm = SourceModel((3.0, 1.0), (0.1, 0.1), (0.02, 0.04))
    st = ForwardSetup(g, BoundaryCondition.homogeneous_dirichlet(), sensor_grid(3, 3), 0.002,
                      profile=sm.profile)
    qp = g.quadrature_points().reshape(-1, 2)
    locs = np.array([[0.2, 0.6], [0.5, 0.3]])
    loads = sm.kernels(locs, qp)
    sol = FullOrderSolver(st)
    # before the switch only source one matters
    only1 = sol.observe(BatchInputs(np.ones(g.n_nodes), [0.5], loads * [[1], [0]]), [0.016])
    both = sol.observe(BatchInputs(np.ones(g.n_nodes), [0.5], loads), [0.016])
    np.testing.assert_allclose(only1, both)
    later = sol.observe(BatchInputs(np.ones(g.n_nodes), [0.5], loads), [0.03])
    later1 = sol.observe(BatchInputs(np.ones(g.n_nodes), [0.5], loads * [[1], [0]]), [0.03])
    assert np.max(np.abs(later - later1)) > 1e-4


def test_forward_model_determinism_and_shapes(small):
    fine, coarse, st, ks, op = small

    def pmap(th):
        return BatchInputs(np.exp(th[:, :1] * np.ones(fine.n_nodes)), np.full(th.shape[0], 0.5),
                           st.constant_load(10.0))

    fm = ForwardModel(pmap, ReducedSolver(op))
    th = np.array([[0.1, -0.2, 0.3]])
    a = fm.observe(th, TIMES)
    assert a.shape == (3 * st.n_sensors, 3)
    np.testing.assert_array_equal(a, fm.observe(th, TIMES))
    np.testing.assert_allclose(solve_forward([0.1], fm, TIMES), a[:, 0], rtol=1e-12)


def test_time_refinement_self_convergence():
    # channel field at a coarse desk resolution, dt vs dt/4 reference
    g = build_grid(20, 20)
    k = np.exp(reference_channel_log_k(g.nodes))
    times = [0.02, 0.06, 0.1]
    out = []
    for dt in (0.002, 0.0005):
        st = ForwardSetup(g, BoundaryCondition.channel_flow(), sensor_grid(5, 5), dt)
        out.append(FullOrderSolver(st).observe(BatchInputs(k, [0.5], st.constant_load(10.0)), times)[0])
    assert np.linalg.norm(out[0] - out[1]) / np.linalg.norm(out[1]) < 0.02


def test_reduced_vs_full_with_rich_basis():
    fine, coarse = build_grid(16, 16), build_grid(4, 4)
    st = ForwardSetup(fine, BoundaryCondition.channel_flow(), sensor_grid(5, 5), 0.002)
    k = np.exp(reference_channel_log_k(fine.nodes))
    b = GMsFEMBuilder(fine, coarse, k[None], M_snap=12)
    full = FullOrderSolver(st).observe(BatchInputs(k, [0.5], st.constant_load(10.0)), TIMES)[0]
    errs = []
    for Mi in (2, 8):
        op = ReducedOperator(st, b.basis(k, Mi), coarse)
        red = ReducedSolver(op).observe(BatchInputs(k, [0.5], st.constant_load(10.0)), TIMES)[0]
        errs.append(np.linalg.norm(red - full) / np.linalg.norm(full))
    assert errs[1] < errs[0] and errs[1] < 0.05


def test_reduced_error_monotone_in_basis_size():
    fine, coarse = build_grid(16, 16), build_grid(4, 4)
    st = ForwardSetup(fine, BoundaryCondition.channel_flow(), sensor_grid(5, 5), 0.002)
    k = np.exp(reference_channel_log_k(fine.nodes))
    inp = BatchInputs(k, [0.5], st.constant_load(10.0))
    full = FullOrderSolver(st).observe(inp, TIMES)[0]
    b = GMsFEMBuilder(fine, coarse, k[None], M_snap=12)
    errs = []
    for Mi in (2, 4, 6, 8, 10):
        mb = b.basis(k, Mi)
        if Mi == 10:
            # 250 columns against 255 free dofs: dependent after boundary elimination
            with pytest.warns(UserWarning, match="rank deficient"):
                op = ReducedOperator(st, mb, coarse)
        else:
            op = ReducedOperator(st, mb, coarse)
        red = ReducedSolver(op).observe(inp, TIMES)[0]
        errs.append(np.linalg.norm(red - full) / np.linalg.norm(full))
    assert all(e1 <= 1.1 * e0 for e0, e1 in zip(errs, errs[1:])), errs


def test_downscaled_solution_approaches_full_with_complete_local_spaces():
    fine, coarse = build_grid(12, 12), build_grid(4, 4)
    st = ForwardSetup(fine, BoundaryCondition.channel_flow(), sensor_grid(3, 3), 0.002)
    k = np.exp(reference_channel_log_k(fine.nodes))
    inp = BatchInputs(k, [0.5], st.constant_load(10.0))
    full = FullOrderSolver(st).observe(inp, TIMES)[0]
    # corner neighbourhoods hold 4x4 fine nodes; keep all of their modes
    b = GMsFEMBuilder(fine, coarse, k[None], M_snap=16)
    errs = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for Mi in (1, 2, 4, 16):
            red = ReducedSolver(ReducedOperator(st, b.basis(k, Mi), coarse)).observe(inp, TIMES)[0]
            errs.append(np.linalg.norm(red - full) / np.linalg.norm(full))
    assert errs[1] < errs[0] and errs[2] < errs[1] and errs[-1] < 1e-10, errs
