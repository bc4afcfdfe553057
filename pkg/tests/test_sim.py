import math

import numpy as np
import pytest

from safecascade.cascade import CascadeController, CascadeGains, build_cascade_controller
from safecascade.certificates import CertificateSpec, Segment, exp_alpha_bar_for_level
from safecascade.errors import ThrustSingularityError
from safecascade.qcqp_safety import PlantBounds, RateSpec
from safecascade.reshaping import make_positive_basis
from safecascade.sim import (
    IntegratorChain,
    VelocityLoop,
    VtolNonlinear,
    exact_cascade_step_matrices,
    flat_state_from_vtol,
    run_closed_loop,
    step_integrator_chain,
    step_velocity_loop,
    step_vtol_nonlinear,
    trajectory_metrics,
    vtol_state_from_flat,
)

UNIT_BOUNDS = PlantBounds(g_lower=1.0, g_upper=1.0, delta_upper=0.0)
WALLS = [
    CertificateSpec(Segment([-2.5, 1.5], [1.5, 2.0]), safe_distance=0.35),
    CertificateSpec(Segment([-2.5, 0.5], [2.5, 0.5]), safe_distance=0.35),
]


def wall_controller(slopes):
    _, abar_inv = exp_alpha_bar_for_level(1.0)
    rate = RateSpec(base_slope=1.0, alpha_bar_inverse=abar_inv)
    basis = make_positive_basis(2, 11)
    gains = CascadeGains(tracking_slopes=slopes, k1=3.49)
    return build_cascade_controller(WALLS, lambda x: np.array([0.6, 1.0]), basis, gains,
                                    bounds=UNIT_BOUNDS, rates=rate, k_phi=2.0)


def free_controller(slopes, nominal=(0.6, 1.0)):
    gains = CascadeGains(tracking_slopes=slopes, k1=1.0)
    return build_cascade_controller([], lambda x: np.asarray(nominal, dtype=float),
                                    None, gains, bounds=UNIT_BOUNDS)


# ---------------------------------------------------------------- steppers

def test_double_integrator_at_rest_stays_put():
    plant = IntegratorChain(m=2, block_dim=2)
    state = np.zeros(4)
    for _ in range(100):
        state = step_integrator_chain(plant, state, np.zeros(2), 1e-2)
    np.testing.assert_allclose(state, np.zeros(4), atol=1e-15)


def test_chain_matches_polynomial_flow():
    # Constant input on the 4-chain: x1(t) = u t^4 / 24 exactly (the chain
    # is nilpotent, so one RK4 step reproduces the exact flow).
    plant = IntegratorChain(m=4, block_dim=2)
    u = np.array([0.3, -1.1])
    dt, steps = 1e-3, 1000
    state = np.zeros(8)
    for _ in range(steps):
        state = step_integrator_chain(plant, state, u, dt)
    t = dt * steps
    np.testing.assert_allclose(state[:2], u * t**4 / 24.0, atol=1e-10)
    np.testing.assert_allclose(state[2:4], u * t**3 / 6.0, atol=1e-10)
    np.testing.assert_allclose(state[6:8], u * t, atol=1e-10)


def test_vtol_hover_is_equilibrium():
    plant = VtolNonlinear(gravity=9.81)
    hover = np.array([0.5, 1.0, 0.0, 0.0, 0.0, 0.0, 9.81, 0.0])
    state = hover.copy()
    for _ in range(200):
        state = step_vtol_nonlinear(plant, state, np.zeros(2), 1e-3)
    np.testing.assert_allclose(state, hover, atol=1e-12)


def test_vtol_fourth_derivative_tracks_command():
    # The linearizing feedback makes the position's fourth time derivative
    # equal the commanded input; recover it by finite differences.
    plant = VtolNonlinear(gravity=9.81)
    u = np.array([0.7, -0.4])
    dt = 1e-4
    state = np.array([0.0, 0.0, 0.1, -0.05, 0.02, 0.01, 9.5, 0.1])
    sample_every = 100                      # 0.01 s
    positions = [state[:2].copy()]
    for step in range(1, 4 * sample_every + 1):
        state = step_vtol_nonlinear(plant, state, u, dt)
        if step % sample_every == 0:
            positions.append(state[:2].copy())
    h = dt * sample_every
    p = np.asarray(positions)
    fourth = (p[4] - 4 * p[3] + 6 * p[2] - 4 * p[1] + p[0]) / h**4
    np.testing.assert_allclose(fourth, u, rtol=2e-3, atol=2e-3)


def test_vtol_thrust_singularity_guard():
    plant = VtolNonlinear(gravity=9.81)
    state = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1e-6, 0.0])
    with pytest.raises(ThrustSingularityError):
        step_vtol_nonlinear(plant, state, np.zeros(2), 1e-3)


def test_velocity_loop_stage_equilibrium():
    # With the reference matched and the internal stages at zero, the
    # velocity states sit still while the position integrates.
    plant = VelocityLoop()
    ref = np.array([0.4, -0.2])
    state = np.concatenate([[0.0, 0.0], ref, np.zeros(4)])
    for _ in range(500):
        state = step_velocity_loop(plant, state, ref, 1e-3)
    np.testing.assert_allclose(state[2:4], ref, atol=1e-12)
    np.testing.assert_allclose(state[4:], np.zeros(4), atol=1e-12)
    np.testing.assert_allclose(state[:2], ref * 0.5, atol=1e-9)


def test_velocity_loop_unit_dc_gain():
    plant = VelocityLoop()
    ref = np.array([1.0, 1.0])
    state = np.zeros(8)
    for _ in range(60_000):
        state = step_velocity_loop(plant, state, ref, 1e-3)
    np.testing.assert_allclose(state[2:4], ref, atol=1e-4)


def test_velocity_loop_poles_are_stable():
    plant = VelocityLoop()
    for axis in range(2):
        t2, t3, t4 = plant.t2[axis], plant.t3[axis], plant.t4[axis]
        companion = np.array([
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [-t4 * t3 * t2, -t4 * t3, -t4],
        ])
        assert np.all(np.linalg.eigvals(companion).real < 0)


def test_rk4_convergence_order_on_vtol():
    # Richardson slope between dt and dt/2 runs against a dt/8 reference;
    # the VTOL flow is smooth and genuinely nonlinear so the classical
    # fourth order shows.
    plant = VtolNonlinear(gravity=9.81)
    x0 = np.array([0.0, 0.0, 0.2, -0.1, 0.05, 0.02, 9.0, 0.3])
    u = np.array([1.3, -0.8])

    def endpoint(dt):
        state = x0.copy()
        for _ in range(int(round(0.5 / dt))):
            state = step_vtol_nonlinear(plant, state, u, dt)
        return state

    ref = endpoint(0.02 / 8)
    e1 = np.linalg.norm(endpoint(0.02) - ref)
    e2 = np.linalg.norm(endpoint(0.01) - ref)
    order = math.log2(e1 / e2)
    assert 3.5 <= order <= 4.5


def test_flat_map_roundtrip():
    plant = VtolNonlinear(gravity=9.81)
    state = np.array([0.3, 1.2, -0.4, 0.6, 0.12, -0.2, 8.7, 0.5])
    flat = flat_state_from_vtol(plant, state)
    back = vtol_state_from_flat(plant, flat)
    np.testing.assert_allclose(back, state, atol=1e-12)


def test_feedback_linearization_consistency_with_chain():
    # Drive the nonlinear VTOL (through the linearizing feedback) and the
    # flat 4-chain with the same piecewise-constant input from the same flat
    # state; the positions agree to integration accuracy.
    plant = VtolNonlinear(gravity=9.81)
    chain = IntegratorChain(m=4, block_dim=2)
    dt, steps = 1e-3, 1000
    vtol_state = np.array([0.0, 0.0, 0.3, 0.2, 0.05, -0.1, 9.81, 0.2])
    chain_state = flat_state_from_vtol(plant, vtol_state)
    worst = 0.0
    for k in range(steps):
        u = np.array([math.sin(0.7 * k * dt), 0.5 * math.cos(1.3 * k * dt)])
        vtol_state = step_vtol_nonlinear(plant, vtol_state, u, dt)
        chain_state = step_integrator_chain(chain, chain_state, u, dt)
        worst = max(worst, float(np.linalg.norm(vtol_state[:2] - chain_state[:2])))
    assert worst <= 1e-8


def test_exact_cascade_step_matches_analytic_stiff_solution():
    # Two-level cascade, scalar per axis: dx1 = x2, dx2 = -K (x2 - ref).
    # Analytic flow: x2(t) = ref + (x2_0 - ref) e^{-Kt},
    # x1(t) = x1_0 + ref t + (x2_0 - ref)(1 - e^{-Kt})/K. At K = 4e5 and
    # dt = 1e-3 the decaying mode underflows to zero; the exact step must
    # reproduce that, which no explicit stepper can.
    big_k = 4.0e5
    dt = 1e-3
    e_mat, f_vec = exact_cascade_step_matrices((big_k,), dt)
    x1_0, x2_0, ref = 0.7, -0.3, 1.1
    decay = math.exp(-big_k * dt)
    expect_x2 = ref + (x2_0 - ref) * decay
    expect_x1 = x1_0 + ref * dt + (x2_0 - ref) * (1.0 - decay) / big_k
    got = e_mat @ np.array([x1_0, x2_0]) + f_vec * ref
    assert got[0] == pytest.approx(expect_x1, rel=1e-12)
    assert got[1] == pytest.approx(expect_x2, rel=1e-12, abs=1e-15)
    # Mild-gain cross-check against brute-force RK4 substepping of the same
    # frozen-reference system.
    e_mat, f_vec = exact_cascade_step_matrices((3.0, 7.0), 0.05)
    state = np.array([1.0, -2.0, 0.5])
    ref = 0.8
    sub = state.copy()
    n_sub, h = 500, 0.05 / 500

    def deriv(s):
        u = -7.0 * (s[2] - (-3.0 * (s[1] - ref)))
        return np.array([s[1], s[2], u])

    for _ in range(n_sub):
        k1 = deriv(sub)
        k2 = deriv(sub + 0.5 * h * k1)
        k3 = deriv(sub + 0.5 * h * k2)
        k4 = deriv(sub + h * k3)
        sub = sub + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    got = e_mat @ state + f_vec * ref
    np.testing.assert_allclose(got, sub, atol=1e-10)


def test_exact_cascade_step_matches_rk4_when_stable():
    # For mild gains both integration routes resolve the same closed loop.
    slopes = (2.0, 3.0)
    e_mat, f_vec = exact_cascade_step_matrices(slopes, 1e-3)
    gains = CascadeGains(tracking_slopes=slopes, k1=1.0)
    controller = free_controller(slopes, nominal=(0.3, -0.5))
    plant = IntegratorChain(m=3, block_dim=2)
    state = np.zeros(6)
    state[:2] = [1.0, -1.0]
    state_rk = state.copy()
    for _ in range(2000):
        ev = controller.evaluate([state[0:2], state[2:4], state[4:6]])
        fresh = state.copy()
        for axis in range(2):
            idx = np.arange(axis, 6, 2)
            fresh[idx] = e_mat @ state[idx] + f_vec * ev.x_stars[0][axis]
        state = fresh
        ev_rk = controller.evaluate([state_rk[0:2], state_rk[2:4], state_rk[4:6]])
        state_rk = step_integrator_chain(plant, state_rk, ev_rk.u, 1e-3)
    np.testing.assert_allclose(state, state_rk, atol=5e-4)


# ------------------------------------------------------------- closed loop

def test_zero_obstacles_drift_along_nominal():
    controller = free_controller((8.0, 320.0, 4.0e5))
    plant = IntegratorChain(m=4, block_dim=2)
    traj = run_closed_loop(plant, controller, np.zeros(8), horizon=3.0, dt=1e-3)
    displacement = traj.states[-1][:2]
    direction = displacement / np.linalg.norm(displacement)
    nominal_dir = np.array([0.6, 1.0]) / np.linalg.norm([0.6, 1.0])
    assert float(direction @ nominal_dir) > 0.995
    assert traj.termination == "completed"


def test_workspace_exit_terminates_early():
    controller = free_controller((8.0, 320.0, 4.0e5))
    plant = IntegratorChain(m=4, block_dim=2)
    traj = run_closed_loop(plant, controller, np.zeros(8), horizon=10.0, dt=1e-3,
                           workspace=((-1.0, 1.0), (-1.0, 1.0)))
    assert traj.termination == "left_workspace"
    assert traj.times[-1] < 10.0


def test_wall_scenario_safe_and_unsafe_dichotomy_short():
    plant = IntegratorChain(m=4, block_dim=2)
    x0 = np.zeros(8)
    x0[:2] = [-2.0, 1.0]
    safe = run_closed_loop(plant, wall_controller((8.0, 320.0, 4.0e5)), x0,
                           horizon=2.0, dt=1e-3, certs=WALLS,
                           workspace=((-3.0, 6.0), (-0.5, 12.0)))
    mets = trajectory_metrics(safe, WALLS)
    assert mets.min_clearance >= 0.0
    assert mets.termination == "completed"


def test_metrics_empty_certificates_use_null_sentinel():
    controller = free_controller((8.0,))
    plant = IntegratorChain(m=2, block_dim=2)
    traj = run_closed_loop(plant, controller, np.zeros(4), horizon=0.5, dt=1e-3)
    mets = trajectory_metrics(traj, [])
    assert mets.min_clearance is None
    assert mets.min_clearance_per_certificate == ()
    assert mets.first_crossing_time is None


def test_trajectory_grid_is_uniform_and_finite():
    controller = wall_controller((8.0, 320.0, 4.0e5))
    plant = IntegratorChain(m=4, block_dim=2)
    x0 = np.zeros(8)
    x0[:2] = [-2.0, 1.0]
    traj = run_closed_loop(plant, controller, x0, horizon=0.25, dt=1e-3, certs=WALLS)
    assert traj.times.shape[0] == 251
    np.testing.assert_allclose(np.diff(traj.times), 1e-3, atol=1e-15)
    assert np.all(np.isfinite(traj.states))
    assert np.all(np.isfinite(traj.inputs))
    assert traj.margins_h.shape == (251, 2)


def test_single_integrator_decay_outside_threshold():
    # Relative-degree-one run from inside the inflated band: with zero
    # disturbances the certificate value must fall until it re-enters the
    # threshold sublevel set.
    _, abar_inv = exp_alpha_bar_for_level(1.0)
    rate = RateSpec(base_slope=1.0, alpha_bar_inverse=abar_inv)
    basis = make_positive_basis(2, 11)
    gains = None
    from safecascade.cascade import safety_virtual_law
    law = safety_virtual_law(WALLS, lambda x: np.array([0.6, 1.0]), basis,
                             UNIT_BOUNDS, rate, k_phi=2.0)
    controller = CascadeController(rho1=law, tracking_laws=(), gains=gains)
    plant = IntegratorChain(m=1, block_dim=2)
    x0 = np.array([0.0, 0.51])            # 0.01 m above the low wall spine
    threshold = 1.4
    traj = run_closed_loop(plant, controller, x0, horizon=2.0, dt=1e-3, certs=WALLS)
    v_low = traj.margins_v[:, 1]
    assert v_low[0] > threshold
    below = np.flatnonzero(v_low < threshold)
    assert below.size > 0
    first_below = below[0]
    increases = np.diff(v_low[: first_below + 1])
    assert np.max(increases, initial=0.0) <= 10.0 * (1e-3) ** 2
