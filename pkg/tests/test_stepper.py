import warnings

import numpy as np
import pytest

from bsfem import fem
from bsfem.diagnostics import DiagnosticsTracker, regime_preset
from bsfem.geometry import LevelSetGeometry, VelocityMode
from bsfem.mesh import build_initial_mesh
from bsfem.stepper import (FieldState, ParameterSet, SimulationError, Stepper,
                           imex_step, reaction_g, reaction_rate_bound,
                           reaction_rate_factor, run_simulation, time_grid)


def _quiet_run(*args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        return run_simulation(*args, **kw)


@pytest.mark.parametrize("kind, u, w, g", [
    ("quadratic", 2.0, 3.0, 6.0),
    ("quadratic", 0.0, 5.0, 0.0),
    ("hill", 1.0, 4.0, 2.0),
    ("hill", 0.0, 4.0, 0.0),
    ("hill", 3.0, 0.0, 0.0),
])
def test_reaction_examples(kind, u, w, g):
    p = ParameterSet(g_kind=kind, hill_n=2.0)
    assert reaction_g(p, u, w) == pytest.approx(g)
    assert reaction_g(p.with_(reaction_enabled=False), u, w) == 0.0


@pytest.mark.parametrize("kind", ["quadratic", "hill"])
def test_rate_factor_splits_binding(kind):
    p = ParameterSet(g_kind=kind, hill_n=3.0)
    u = np.linspace(0.0, 3.0, 13)
    w = np.linspace(2.0, 0.5, 13)
    np.testing.assert_allclose(u * reaction_rate_factor(p, u, w), reaction_g(p, u, w),
                               rtol=1e-14)


@pytest.mark.parametrize("kw", [
    dict(delta_k=0.0), dict(delta_omega=-1.0), dict(delta_kp=float("nan")),
    dict(g_kind="linear"), dict(g_kind="hill", hill_n=1.0), dict(outer_bc="robin"),
    dict(tau=2.0, T=1.0), dict(tau=0.0), dict(reaction="implicit"),
    dict(velocity_mode="swirl"),
])
def test_parameter_validation(kw):
    with pytest.raises(ValueError):
        ParameterSet(**kw)


@pytest.mark.parametrize("tau, T, steps", [
    (1e-3, 1.0, [1e-3] * 1000),
    (0.3, 1.0, [0.3, 0.3, 0.3, 0.1]),
    (0.5, 0.5, [0.5]),
])
def test_time_grid(tau, T, steps):
    np.testing.assert_allclose(time_grid(tau, T), steps)


def test_guard_rate_includes_bulk_coupling():
    p = ParameterSet(delta_omega=0.01, delta_k=0.01, delta_kp=100.0, tau=1e-3)
    surface_only = reaction_rate_bound(p.with_(reaction="linearized"), [1.0], [1.0], 0.05, 1e-3)
    assert surface_only == pytest.approx(100.0)
    # layer width max(sqrt(0.1), 0.05 / 3)
    assert reaction_rate_bound(p, [1.0], [1.0], 0.05, 1e-3) == pytest.approx(
        1.0 / (1e-4 * np.sqrt(0.1)))


@pytest.fixture(scope="module")
def sphere_stepper_inputs():
    g = LevelSetGeometry(dim=2, kind="sphere")
    return g, build_initial_mesh(g, resolution=300)


def _one_step(p, g, m, u0, w0, z0, tau=None):
    st = Stepper(p, g, m)
    s0 = st.initial_state(u0, w0, z0)
    return st, s0, st.step(s0, tau)


def test_constant_receptors_stay_constant(sphere_stepper_inputs):
    g, m = sphere_stepper_inputs
    p = ParameterSet(reaction_enabled=False, tau=0.01, T=0.1)
    _, _, s1 = _one_step(p, g, m, 0.0, 0.7, 0.0)
    np.testing.assert_allclose(s1.W, 0.7, rtol=1e-10)
    np.testing.assert_allclose(s1.U, 0.0, atol=1e-14)


@pytest.mark.parametrize("dgp", [1e-8, 1.0])
def test_complex_release_decay(sphere_stepper_inputs, dgp):
    g, m = sphere_stepper_inputs
    p = ParameterSet(reaction_enabled=False, delta_kp=4.0, delta_gamma_p=dgp,
                     tau=0.01, T=0.1)
    _, _, s1 = _one_step(p, g, m, 0.0, 1.0, 0.5)
    np.testing.assert_allclose(s1.Z, 0.5 * (1 - 0.01 / 4.0), rtol=1e-10)


@pytest.mark.parametrize("reaction", ["explicit", "linearized"])
def test_surface_mass_exact_on_moving_surface(coarse_mesh, tanh_geometry, reaction):
    p = ParameterSet(delta_omega=0.5, delta_k=0.5, delta_kp=2.0, delta_gamma=0.3,
                     delta_gamma_p=0.2, tau=2e-3, T=0.04, reaction=reaction)
    _, recs, _ = _quiet_run(p, tanh_geometry, coarse_mesh, 1.0, lambda x: 1 + x[:, 1], 0.0)
    wz = np.array([r.mass_wz for r in recs])
    assert np.abs(wz - wz[0]).max() <= 1e-12 * wz[0]
    assert recs[-1].mass_z > 0


def test_linearized_and_explicit_agree_for_small_steps(sphere_stepper_inputs):
    g, m = sphere_stepper_inputs
    p = ParameterSet(tau=1e-4, T=1e-3)
    a, *_ = run_simulation(p, g, m, 1.0, 1.0, 0.0)
    b, *_ = run_simulation(p.with_(reaction="linearized"), g, m, 1.0, 1.0, 0.0)
    assert np.abs(a.W - b.W).max() < 1e-5


def test_lagrangian_neumann_conserves_combined_mass(coarse_mesh, tanh_geometry):
    p = ParameterSet(delta_omega=0.5, delta_k=0.5, delta_kp=2.0, tau=2e-3, T=0.02,
                     velocity_mode=VelocityMode("harmonic_extension"),
                     reaction="linearized", solver_tol=1e-13)
    _, recs, _ = _quiet_run(p, tanh_geometry, coarse_mesh, 1.0, 1.0, 0.0)
    # exact up to the bulk solver tolerance
    c = np.array([r.combined_mass for r in recs])
    assert np.abs(c - c[0]).max() <= 1e-11 * c[0]


def test_full_limit_preset_short_run(coarse_mesh):
    pr = regime_preset("full_limit_dirichlet")
    p = pr.params.with_(reaction="linearized", T=0.02)
    state, recs, st = _quiet_run(p, pr.geometry, coarse_mesh, pr.u0, pr.w0, pr.z0)
    assert len(recs) == 21 and recs[-1].time == pytest.approx(0.02)
    outer = st.bulk_space.dirichlet_mask
    np.testing.assert_array_equal(state.U[outer], 1.0)
    assert state.U.min() > -1e-8 and state.U.max() < 1 + 1e-8
    assert recs[-1].mass_w < recs[0].mass_w
    assert recs[-1].g_residual_cum > 0


def test_single_step_run(sphere_stepper_inputs):
    g, m = sphere_stepper_inputs
    p = ParameterSet(tau=0.05, T=0.05)
    state, recs, _ = run_simulation(p, g, m, 1.0, 1.0, 0.0)
    assert [r.step for r in recs] == [0, 1] and state.time == pytest.approx(0.05)


def test_windshield_pair_early_behaviour():
    on, off = regime_preset("windshield_on"), regime_preset("windshield_off")
    m = build_initial_mesh(on.geometry, resolution=150)
    res = {}
    for pr in (on, off):
        p = pr.params.with_(tau=2e-5, T=3e-3)
        _, recs, _ = _quiet_run(p, pr.geometry, m, pr.u0, pr.w0, pr.z0)
        res[pr.name] = recs[-1].max_u_trace
    # the receding membrane sweeps ligand onto the surface only when the bulk is at rest
    assert res["windshield_on"] > res["windshield_off"] + 5e-3
    assert res["windshield_off"] <= 1.0 + 1e-2


@pytest.mark.filterwarnings("ignore:negative concentration")
def test_stability_guard_warns(sphere_stepper_inputs):
    g, m = sphere_stepper_inputs
    p = ParameterSet(delta_k=1e-3, tau=0.01, T=0.01)
    with pytest.warns(RuntimeWarning, match="tau\\*rate"):
        try:
            run_simulation(p, g, m, 1.0, 1.0, 0.0)
        except SimulationError:
            pass


def test_negative_concentration_warns(sphere_stepper_inputs):
    g, m = sphere_stepper_inputs
    p = ParameterSet(tau=0.01, T=0.01)
    with pytest.warns(RuntimeWarning, match="negative concentration"):
        run_simulation(p, g, m, 1.0, -0.5, 0.0)


def test_failure_reports_step(sphere_stepper_inputs):
    g, m = sphere_stepper_inputs
    p = ParameterSet(tau=0.01, T=0.05)
    with pytest.raises(SimulationError) as err:
        run_simulation(p, g, m, lambda x: np.full(len(x), np.nan), 1.0, 0.0)
    assert err.value.step == 1


def test_on_step_callback_sees_every_level(sphere_stepper_inputs):
    g, m = sphere_stepper_inputs
    seen = []
    p = ParameterSet(tau=0.02, T=0.06)
    run_simulation(p, g, m, 1.0, 1.0, 0.0, on_step=lambda st, s: seen.append(s.level))
    assert seen == [0, 1, 2, 3]


def test_custom_tracker_is_used(sphere_stepper_inputs):
    g, m = sphere_stepper_inputs
    p = ParameterSet(tau=0.02, T=0.04)
    tracker = DiagnosticsTracker(p, threshold=0.5)
    _, recs, _ = run_simulation(p, g, m, 1.0, 1.0, 0.0, diagnostics=tracker)
    assert recs is tracker.records and len(recs) == 3


def test_imex_step_with_static_operators(sphere_stepper_inputs):
    g, m = sphere_stepper_inputs
    p = ParameterSet(reaction_enabled=False, tau=0.1, T=0.1)
    asm = fem.Assembler(m)
    ops = fem.assemble_bulk(m, None, 1.0, 0.1, asm)
    s0 = FieldState(np.ones(m.n_vertices), np.ones(len(asm.trace_map)),
                    np.zeros(len(asm.trace_map)))
    s1 = imex_step(p, ops, ops, s0, 0.1, fem.P1Space.bulk(m))
    np.testing.assert_allclose(s1.U, 1.0, rtol=1e-9)
    assert s1.level == 1 and s1.time == pytest.approx(0.1)


def test_three_dimensional_shell(shell_mesh):
    g = LevelSetGeometry(dim=3, kind="sphere")
    p = ParameterSet(delta_k=0.5, tau=0.01, T=0.03, reaction="linearized")
    state, recs, _ = _quiet_run(p, g, shell_mesh, 1.0, 1.0, 0.0)
    wz = np.array([r.mass_wz for r in recs])
    assert wz[0] == pytest.approx(24.0)
    assert np.abs(wz - wz[0]).max() <= 1e-12 * wz[0]
    assert recs[-1].mass_z > 0 and np.all(state.U > 0)
