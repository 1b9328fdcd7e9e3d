import dataclasses
import math

import numpy as np
import pytest

from rotctl import rod
from rotctl import scenario as scen
from rotctl.actuation import ActuatorBank
from rotctl.rod import RodParams, RodState
from rotctl.sim import (CONVERGED, TIMEOUT, ClosedLoop, NumericalFailure, SimConfig, SimError, SimResult,
                        convergence_metrics, log_linear_fit, open_loop_equilibrium, plant_loads,
                        run_closed_loop, step)


def _result(t, e, stop_tol=0.15, sustain=0.0):
    t = np.asarray(t, float)
    z = np.zeros_like(t)
    return SimResult(t=t, err_norm=np.asarray(e, float), pressures=np.zeros((len(t), 2)), residual=z,
                     energy=z, tracking=z, convergence_time=None, final_state=None, status=TIMEOUT,
                     stop_tol=stop_tol, sustain=sustain)


def _scenario(name, *overrides, seed=None):
    config = scen.load_any(name)
    for o in overrides:
        config = scen.set_override(config, o)
    return scen.build(config, seed=seed, name=name)


# -- integrator ---------------------------------------------------------------


def test_equilibrium_is_preserved_exactly():
    p = RodParams(base_angle=0.2)
    state = RodState.at_rest(p)
    zero = np.zeros(p.grid_size)
    dt = 0.5 * p.cfl_dt()
    for _ in range(100_000):
        state = step(state, p, zero, zero, dt)
    assert np.all(state.theta == 0.2) and np.all(state.omega == 0.0)
    assert state.t == pytest.approx(100_000 * dt)


def test_base_stays_clamped():
    p = RodParams()
    state = RodState.at_rest(p, 0.1 * np.sin(np.linspace(0, 3, p.grid_size)))
    load = np.full(p.grid_size, 1e-3)
    for _ in range(100):
        state = step(state, p, load, rod.gravity_torque(state, p), 0.5 * p.cfl_dt())
        assert state.theta[0] == p.base_angle and state.omega[0] == 0.0


def test_nonfinite_step_names_node():
    p = RodParams(grid_size=21)
    load = np.zeros(21)
    load[7] = np.nan
    with pytest.raises(NumericalFailure) as info:
        step(RodState.at_rest(p), p, load, np.zeros(21), 1e-5)
    assert info.value.index == 7


def test_cfl_violation_rejected():
    p = RodParams()
    SimConfig(dt=p.cfl_dt()).validate(p)
    with pytest.raises(SimError, match="CFL"):
        SimConfig(dt=1.01 * p.cfl_dt()).validate(p)
    with pytest.raises(SimError):
        SimConfig(dt=1e-5, control_period=1e-6).validate(p)
    with pytest.raises(SimError):
        SimConfig(stop_tol=0.0).validate(p)


def test_cfl_violation_rejected_from_scenario():
    with pytest.raises(scen.ConfigError, match=r"\[sim\]\.dt"):
        _scenario("free_vibration", "sim.dt=1e-3")


def test_fundamental_frequency_short_run():
    sc = _scenario("free_vibration", "rod.grid_size=101", "sim.t_end=1.0")
    res = run_closed_loop(sc)
    assert res.status == TIMEOUT
    c, L = sc.params.wave_speed, sc.params.length
    # the tip angle swings through the rest value twice per period
    tip = _tip_series(sc)
    t, y = tip
    crossings = t[:-1][np.sign(y[:-1]) != np.sign(y[1:])]
    period = 2 * np.mean(np.diff(crossings))
    assert 2 * np.pi / period == pytest.approx(np.pi * c / (2 * L), rel=0.02)


def _tip_series(sc):
    loop = ClosedLoop(sc)
    ts, ys = [], []
    for _ in range(int(round(sc.sim.t_end / loop.dt))):
        loop._advance()
        ts.append(loop.state.t)
        ys.append(loop.state.theta[-1])
    return np.array(ts), np.array(ys)


def test_energy_conserved_short_run():
    res = run_closed_loop(_scenario("free_vibration", "rod.grid_size=101", "sim.t_end=2.0"))
    drift = np.max(np.abs(res.energy - res.energy[0])) / res.energy[0]
    assert drift < 5e-3


# -- plant ----------------------------------------------------------------------


def test_equilibrium_is_static():
    p = RodParams()
    bank = ActuatorBank.antagonistic()
    theta = open_loop_equilibrium(p, bank, [10e3, 0.0])
    load = plant_loads(theta, p, bank, [10e3, 0.0])
    acc = rod.dynamics_rhs(RodState(theta, np.zeros_like(theta)), p, load, np.zeros_like(load))
    # compare with the size of the individual terms
    scale = np.max(np.abs(load)) / p.inertia
    assert np.max(np.abs(acc)) < 1e-6 * scale
    assert theta[-1] > 0.5


def test_equilibrium_bends_more_with_pressure():
    p = RodParams()
    bank = ActuatorBank.antagonistic()
    tips = [open_loop_equilibrium(p, bank, [P, 0.0])[-1] for P in (5e3, 10e3, 20e3, 30e3)]
    assert np.all(np.diff(tips) > 0)
    mirror = open_loop_equilibrium(p, bank, [0.0, 10e3])
    np.testing.assert_allclose(mirror, -open_loop_equilibrium(p, bank, [10e3, 0.0]), atol=1e-12)


# -- closed loop ------------------------------------------------------------------


def test_infinite_tolerance_runs_to_the_end():
    sc = _scenario("ideal_mode_theorem1", "sim.stop_tol=inf", "sim.t_end=0.05", "sim.record_period=0.01")
    res = run_closed_loop(sc)
    assert res.status == TIMEOUT and res.convergence_time is None
    assert res.t[-1] == pytest.approx(0.05, abs=1e-12)
    assert len(res.t) == 6
    assert np.all(np.diff(res.t) > 0)


def test_ideal_mode_tracking_decays():
    res = run_closed_loop(_scenario("ideal_mode_theorem1", "sim.t_end=0.2", "sim.stop_tol=inf"))
    assert res.tracking[-1] < 1e-8 * res.tracking.max()


def test_qp_replication_10kpa_converges():
    res = run_closed_loop(_scenario("arc_replication_10kpa"))
    assert res.status == CONVERGED
    assert res.convergence_time is not None
    assert res.err_norm[-1] <= 0.15
    assert abs(res.pressures[-1, 0] - 10e3) <= 0.15 * 10e3
    assert res.pressures[-1, 1] <= 0.15 * 10e3


def test_pressures_held_between_ticks():
    sc = _scenario("arc_replication_10kpa", "sim.t_end=3.0", "sim.record_period=0.01", "sim.stop_tol=inf")
    res = run_closed_loop(sc)
    tick_times = np.array([t for t, _, _ in res.ticks])
    dt = ClosedLoop(sc).dt
    # no drift: tick k fires within one step after k * period
    offset = tick_times - 0.5 * np.arange(len(tick_times))
    assert np.all((offset > -1e-9) & (offset < dt))
    change = np.flatnonzero(np.any(np.diff(res.pressures, axis=0) != 0, axis=1))
    assert len(change) > 0
    for i in change:
        # every change between two samples is explained by a tick in that window
        assert np.any((tick_times > res.t[i]) & (tick_times <= res.t[i + 1] + 1e-12))
    assert all(status == "optimal" for _, status, _ in res.ticks)


def test_rerun_is_bit_identical():
    a = run_closed_loop(_scenario("arc_replication_20kpa", "sim.t_end=2.0", seed=3))
    b = run_closed_loop(_scenario("arc_replication_20kpa", "sim.t_end=2.0", seed=3))
    for name in ("t", "err_norm", "pressures", "residual", "energy"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    c = run_closed_loop(_scenario("arc_replication_20kpa", "sim.t_end=2.0", seed=4))
    assert not np.array_equal(a.pressures, c.pressures)


def test_convergence_time_set_iff_converged():
    for name in ("arc_replication_5kpa", "ideal_mode_theorem1"):
        res = run_closed_loop(_scenario(name, "sim.t_end=3.0"))
        assert (res.convergence_time is not None) == (res.status == CONVERGED)


# -- metrics ----------------------------------------------------------------------


def test_metrics_on_exact_exponential():
    t = np.linspace(0, 3, 3001)
    m = convergence_metrics(_result(t, np.exp(-2 * t)))
    assert m.convergence_time == pytest.approx(math.log(1 / 0.15) / 2, abs=1e-6)
    assert m.convergence_time == pytest.approx(0.9486, abs=1e-4)
    assert m.decay_rate == pytest.approx(2.0, rel=1e-9)
    assert m.r_squared == pytest.approx(1.0, abs=1e-12)
    assert m.overshoot == 0.0


def test_metrics_constant_above_tolerance():
    t = np.linspace(0, 1, 20)
    m = convergence_metrics(_result(t, np.full(20, 0.3)))
    assert m.convergence_time is None


def test_metrics_overshoot_and_sustain():
    t = np.linspace(0, 4, 401)
    e = np.where(t < 1, 1 - 0.9 * t, 0.1)
    e[(t > 1.5) & (t < 1.7)] = 0.2  # pops back above tolerance
    m = convergence_metrics(_result(t, e, sustain=1.0))
    assert m.overshoot == pytest.approx(0.05)
    assert m.convergence_time > 1.69


def test_metrics_need_samples():
    with pytest.raises(SimError):
        convergence_metrics(_result(np.arange(5.0), np.ones(5)))


def test_log_linear_fit_recovers_rate():
    t = np.linspace(0, 1, 50)
    rate, r2 = log_linear_fit(t, 3.0 * np.exp(-7.5 * t))
    assert rate == pytest.approx(7.5, rel=1e-12) and r2 == pytest.approx(1.0)


def test_config_roundtrip_through_dataclass():
    cfg = SimConfig()
    assert dataclasses.replace(cfg, t_end=1.0).t_end == 1.0
