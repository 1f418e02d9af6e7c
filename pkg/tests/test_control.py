import itertools
import math

import numpy as np
import pytest

from racegp.control import (LapTimeoutError, MpcConfig, MpcController, PurePursuitController,
                            PurePursuitGains, Reference, TrackingMpc, generate_reference, make_plant,
                            project_inputs, pure_pursuit, run_closed_loop, solve_mpc)
from racegp.control.mpc import brute_force_cost
from racegp.control.pure_pursuit import lookahead_curvature
from racegp.models import DELTA, OMEGA, PSI, VX, VY, X, Y, Limits, ModelKind, NominalModel
from racegp.track import RacingLine, SpeedLimits, Track, compute_racing_line, stadium_track

TS = 0.02


def _const_line(track, v):
    c = track.centerline
    return RacingLine(track, track.theta.copy(), c[:, 0].copy(), c[:, 1].copy(), np.full(len(c), v))


def _state(x=0.0, y=0.0, psi=0.0, vx=0.0, vy=0.0, omega=0.0, delta=0.0):
    return np.array([x, y, psi, vx, vy, omega, delta])


@pytest.fixture(scope="module")
def straight():
    return stadium_track(straight=40.0, radius=5.0, width=2.0, spacing=0.05)


# -- pure pursuit -------------------------------------------------------------

def test_pure_pursuit_on_straight(vehicle, straight):
    line = _const_line(straight, 1.0)
    s = _state(1.0, -5.0, vx=1.0)
    u = pure_pursuit(line, s, PurePursuitGains(0.5, 1.0), vehicle, TS)
    assert abs(u[1]) <= 1e-9
    assert abs(u[0]) <= 1e-9


def test_small_angle_curvature():
    L = 2.0
    for y_off in (1e-3, -2e-3, 5e-3):
        kappa = lookahead_curvature((math.sqrt(L**2 - y_off**2), y_off), L)
        assert kappa == pytest.approx(2 * y_off / L**2, rel=1e-9)


def test_mirror_symmetry(vehicle, straight):
    mirrored = Track(straight.centerline * [1.0, -1.0], straight.width)
    gains = PurePursuitGains(0.4, 1.0)
    s = _state(1.0, -4.9, psi=0.05, vx=1.2, vy=0.01, omega=0.1, delta=0.02)
    sm = s * [1, -1, -1, 1, -1, -1, -1]
    u = pure_pursuit(_const_line(straight, 1.5), s, gains, vehicle, TS)
    um = pure_pursuit(_const_line(mirrored, 1.5), sm, gains, vehicle, TS)
    assert um[1] == pytest.approx(-u[1], abs=1e-9)
    assert um[0] == pytest.approx(u[0], abs=1e-12)


def test_pure_pursuit_respects_limits(vehicle, straight):
    line = _const_line(straight, 5.0)
    lim = vehicle.limits
    rng = np.random.default_rng(0)
    for _ in range(200):
        s = _state(rng.uniform(-5, 5), rng.uniform(-6, 6), rng.uniform(-3, 3), rng.uniform(0, 4),
                   delta=rng.uniform(lim.delta_min, lim.delta_max))
        u = pure_pursuit(line, s, PurePursuitGains(0.3, 3.0), vehicle, TS)
        assert lim.d_min <= u[0] <= lim.d_max
        assert lim.ddelta_min <= u[1] <= lim.ddelta_max
        assert lim.delta_min - 1e-12 <= s[DELTA] + TS * u[1] <= lim.delta_max + 1e-12


def test_gain_validation():
    with pytest.raises(ValueError):
        PurePursuitGains(0.0, 1.0)
    with pytest.raises(ValueError):
        PurePursuitGains(1.0, -1.0)


# -- reference ----------------------------------------------------------------

def test_reference_constant_speed(straight):
    line = _const_line(straight, 2.0)
    ref = generate_reference(line, _state(), 10, TS, theta0=3.0)
    np.testing.assert_allclose(ref.theta, 3.0 + TS * 2.0 * np.arange(1, 11), rtol=0, atol=1e-12)


def test_reference_wraps(straight):
    line = _const_line(straight, 2.0)
    ref = generate_reference(line, _state(), 5, TS, theta0=line.length - 0.05)
    assert np.all((ref.theta >= 0) & (ref.theta < line.length))
    assert ref.theta[-1] == pytest.approx(0.15, abs=1e-9)


def test_reference_projection_identity(scale_cfg):
    track = stadium_track(3.0, 1.0, 0.4, 0.02)
    line = compute_racing_line(track, scale_cfg.speed_limits)
    th = 2.345
    p = line.position(th)
    ref = generate_reference(line, _state(*p), 4, TS)
    assert ref.theta0 == pytest.approx(th, abs=1e-9)
    np.testing.assert_allclose(ref.points[0], line.position(th + TS * line.speed(th)), atol=1e-9)


# -- MPC ------------------------------------------------------------------------

def _cfg(vehicle, **kw):
    base = dict(limits=vehicle.limits, N=20, Ts=TS, Q=np.eye(2), R=np.diag([0.01, 0.01]), S=100.0)
    base.update(kw)
    return MpcConfig(**base)


def test_config_validation(vehicle):
    with pytest.raises(ValueError):
        _cfg(vehicle, N=1)
    with pytest.raises(ValueError):
        _cfg(vehicle, Q=np.diag([1.0, -1.0]))
    with pytest.raises(ValueError):
        _cfg(vehicle, S=0.0)
    model = NominalModel(ModelKind.EXTENDED_KINEMATIC, vehicle, 0.01)
    with pytest.raises(ValueError, match="Ts"):
        TrackingMpc(model, _cfg(vehicle))


def test_near_fixed_point(vehicle, straight):
    model = NominalModel(ModelKind.EXTENDED_KINEMATIC, vehicle, TS)
    line = _const_line(straight, 1.0)
    x0 = _state(1.0, -5.0, vx=1.0)
    ref = generate_reference(line, x0, 20, TS)
    sol = solve_mpc(model, _cfg(vehicle), x0, ref, straight, d_prev=0.0)
    assert np.abs(sol.inputs[:, 1]).max() <= 1e-3
    assert sol.cost / 20 <= 1e-3
    assert np.all(sol.slacks == 0)
    assert sol.solve_status == "converged"


def _toy_instance(vehicle, offset, y0=0.0, psi0=0.0):
    """Two-step problem on a straight whose reference sits ``offset`` to the left."""
    track = stadium_track(40.0, 5.0, 0.4, 0.05)
    x0 = _state(1.0, -5.0 + y0, psi0, vx=2.0)
    pts = np.array([[1.04, -5.0 + offset], [1.08, -5.0 + offset]])
    return track, x0, Reference(track.project(x0[[X, Y]]), np.array([1.04, 1.08]), pts)


def _grid(lim, n_d, n_s):
    ds = np.linspace(lim.d_min, lim.d_max, n_d)
    ss = np.linspace(lim.ddelta_min, lim.ddelta_max, n_s)
    per_step = list(itertools.product(ds, ss))
    return [np.array(pair) for pair in itertools.product(per_step, repeat=2)]


def test_toy_problem_matches_brute_force(vehicle):
    lim = Limits(-1.0, 1.0, -0.35, 0.35, -10.0, 10.0)
    model = NominalModel(ModelKind.KINEMATIC, vehicle, TS)
    cfg = _cfg(vehicle, limits=lim, N=2, max_iter=50, tol=1e-8)
    track, x0, ref = _toy_instance(vehicle, 0.01)
    sol = solve_mpc(model, cfg, x0, ref, track)
    best, _ = brute_force_cost(model, cfg, x0, ref, track, 0.0, _grid(lim, 11, 11))
    assert sol.cost <= 1.02 * best
    assert best <= 1.02 * sol.cost


def test_reference_outside_slab(vehicle):
    lim = Limits(-1.0, 1.0, -0.35, 0.35, -10.0, 10.0)
    model = NominalModel(ModelKind.KINEMATIC, vehicle, TS)
    cfg = _cfg(vehicle, limits=lim, N=2, max_iter=50, tol=1e-8, S=1.0)
    # starts close to the left edge heading outwards, so the boundary cannot be met exactly
    track, x0, ref = _toy_instance(vehicle, 0.5, y0=0.19, psi0=0.6)
    sol = solve_mpc(model, cfg, x0, ref, track)
    assert sol.slacks.max() > 0
    assert sol.solve_status == "infeasible-relaxed"
    # the last position is pushed past the left boundary line, towards the reference
    assert sol.predicted_states[-1, Y] > -5.0
    best, _ = brute_force_cost(model, cfg, x0, ref, track, 0.0, _grid(lim, 11, 11))
    assert sol.cost <= 1.02 * best


def test_project_inputs(vehicle):
    lim = vehicle.limits
    U = np.array([[5.0, 100.0], [-5.0, 100.0], [0.2, -100.0]])
    P = project_inputs(U.copy(), lim.delta_max - 0.01, lim, TS)
    assert P[0, 0] == lim.d_max and P[1, 0] == lim.d_min
    delta = lim.delta_max - 0.01 + TS * np.cumsum(P[:, 1])
    assert np.all(delta <= lim.delta_max + 1e-12) and np.all(delta >= lim.delta_min - 1e-12)


def test_warm_start_reduces_iterations(vehicle, scale_cfg):
    track = stadium_track(3.0, 1.0, 0.4, 0.02)
    line = compute_racing_line(track, scale_cfg.speed_limits)
    model = NominalModel(ModelKind.DYNAMIC, vehicle, TS)
    solver = TrackingMpc(model, scale_cfg.mpc)
    x0 = _state(*track.point(0.0), vx=1.0)
    ref = generate_reference(line, x0, scale_cfg.mpc.N, TS)
    cold = solver.solve(x0, ref, track, warm=False)
    x1 = model.step(x0, cold.inputs[0])
    ref1 = generate_reference(line, x1, scale_cfg.mpc.N, TS)
    warm = solver.solve(x1, ref1, track, float(cold.inputs[0, 0]))
    solver.reset()
    cold1 = solver.solve(x1, ref1, track, float(cold.inputs[0, 0]))
    assert warm.iterations <= cold1.iterations
    assert warm.cost <= cold1.cost * 1.05 + 1e-9


def _short_run(vehicle, scale_cfg, plant_kind, model_kind, seconds=3.0):
    track = stadium_track(3.0, 1.0, 0.4, 0.02)
    line = compute_racing_line(track, scale_cfg.speed_limits)
    plant = make_plant(vehicle, TS, plant_kind)
    ctrl = MpcController(NominalModel(model_kind, vehicle, TS), scale_cfg.mpc, line, track)
    try:
        return run_closed_loop(plant, ctrl, track, line, 1, v0=0.5, max_lap_time=seconds, keep_solutions=True)
    except LapTimeoutError as exc:
        return exc.result


def test_self_consistent_plant(vehicle, scale_cfg):
    res = _short_run(vehicle, scale_cfg, ModelKind.EXTENDED_KINEMATIC, ModelKind.EXTENDED_KINEMATIC)
    pred = np.stack([sol.predicted_states[1] for sol in res.solutions])
    assert np.abs(pred - res.states[1:len(pred) + 1]).max() <= 1e-4


def test_inputs_within_bounds_in_closed_loop(vehicle, scale_cfg):
    res = _short_run(vehicle, scale_cfg, ModelKind.DYNAMIC, ModelKind.EXTENDED_KINEMATIC)
    lim = vehicle.limits
    assert np.all(res.inputs >= lim.u_min) and np.all(res.inputs <= lim.u_max)
    assert np.all(res.states[:, DELTA] >= lim.delta_min - 1e-12)
    assert np.all(res.states[:, DELTA] <= lim.delta_max + 1e-12)
    assert len(res.states) == len(res.inputs) + 1


def test_pure_pursuit_lap_row_count(vehicle, scale_cfg):
    track = stadium_track(3.0, 1.0, 0.4, 0.02)
    line = compute_racing_line(track, scale_cfg.speed_limits)
    ctrl = PurePursuitController(line, PurePursuitGains(0.3, 1.0, 0.8), vehicle, TS)
    res = run_closed_loop(make_plant(vehicle, TS), ctrl, track, line, 2, v0=0.5)
    assert len(res.lap_times) == 2
    assert abs(len(res.inputs) - sum(res.lap_times) / TS) <= 2
    again = run_closed_loop(make_plant(vehicle, TS), ctrl, track, line, 2, v0=0.5)
    np.testing.assert_array_equal(res.states, again.states)
