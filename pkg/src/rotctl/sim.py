"""Closed-loop time integration: leapfrog PDE stepping, delayed observations,
zero-order-hold actuation, stopping rule and convergence metrics."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from . import qp as qpmod
from .actuation import ActuatorBank, contraction_from_curvature
from .control import DesiredTrajectory, GainProfile, desired_input, tracking_errors, tracking_integral
from .observer import Observer, ObserverConfig, marker_arclengths
from .rod import (RodParams, RodState, _gravity_from_y, _rhs, elastic_energy, horizontal_offsets,
                  reconstruct_centerline)

IDEAL = "ideal_l_star"
QP = "qp_pressures"
OPEN_LOOP = "open_loop"
ACTUATION_MODES = (IDEAL, QP, OPEN_LOOP)

CONVERGED = "converged"
TIMEOUT = "timeout"
NUMERICAL_FAILURE = "numerical_failure"


class SimError(ValueError):
    pass


class NumericalFailure(FloatingPointError):
    def __init__(self, index: int, t: float):
        super().__init__(f"non-finite state at node {index}, t={t:.6g}")
        self.index = index
        self.t = t


@dataclass(frozen=True)
class SimConfig:
    """Integration and loop timing.

    ``dt=None`` picks half the CFL limit.  ``observation_latency=None`` takes the
    observer's latency.  ``sustain`` is how long the error norm must stay under
    ``stop_tol`` before the run counts as converged; ``stop_tol=inf`` disables
    stopping.
    """

    dt: Optional[float] = None
    t_end: float = 10.0
    control_period: float = 0.5
    observation_latency: Optional[float] = None
    stop_tol: float = 0.15
    actuation_mode: str = QP
    record_period: float = 0.01
    velocity_estimation: bool = False
    gain_mode: str = qpmod.K_OMEGA_FREE
    sustain: float = 1.0
    qp_tol: float = 1e-8
    qp_max_iter: int = 500

    def resolved_dt(self, params: RodParams) -> float:
        return 0.5 * params.cfl_dt() if self.dt is None else float(self.dt)

    def validate(self, params: RodParams) -> None:
        dt = self.resolved_dt(params)
        if not dt > 0:
            raise SimError(f"dt must be positive, got {dt!r}")
        if dt > params.cfl_dt() * (1 + 1e-12):
            raise SimError(f"dt={dt:.6g} violates the CFL bound ds/c={params.cfl_dt():.6g}")
        if self.control_period < dt * (1 - 1e-9):
            raise SimError("control_period must be >= dt")
        if not self.stop_tol > 0:
            raise SimError("stop_tol must be positive")
        if self.actuation_mode not in ACTUATION_MODES:
            raise SimError(f"unknown actuation_mode {self.actuation_mode!r}")
        if self.gain_mode not in qpmod.GAIN_MODES:
            raise SimError(f"unknown gain_mode {self.gain_mode!r}")
        if not self.t_end > 0 or not self.record_period > 0:
            raise SimError("t_end and record_period must be positive")
        if self.observation_latency is not None and self.observation_latency < 0:
            raise SimError("observation_latency must be >= 0")
        if self.sustain < 0:
            raise SimError("sustain must be >= 0")


@dataclass
class Scenario:
    params: RodParams
    bank: ActuatorBank
    desired: DesiredTrajectory
    gains: GainProfile
    observer: ObserverConfig
    sim: SimConfig
    initial: Optional[RodState] = None
    name: str = "scenario"


@dataclass
class SimResult:
    t: np.ndarray
    err_norm: np.ndarray
    pressures: np.ndarray
    residual: np.ndarray
    energy: np.ndarray
    tracking: np.ndarray
    convergence_time: Optional[float]
    final_state: RodState
    status: str
    stop_tol: float = 0.15
    sustain: float = 1.0
    failure: Optional[str] = None
    ticks: list = field(default_factory=list, repr=False)


# ---------------------------------------------------------------------------
# plant


def plant_contractions(theta, params: RodParams, bank: ActuatorBank) -> np.ndarray:
    """Whole-muscle contraction from the mean backbone curvature.

    A single chamber carries one tension along its length, so its shortening
    is ``d * (theta(L) - theta(0)) / L``.
    """
    kappa = (theta[-1] - theta[0]) / params.length
    return contraction_from_curvature(bank, kappa)


def plant_loads(theta, params: RodParams, bank: ActuatorBank, pressures) -> np.ndarray:
    """Actuator plus gravity moment field acting on the true rod.

    With whole-muscle contractions the actuator moment is uniform along s.
    """
    kappa = (theta[-1] - theta[0]) / params.length
    moment = 0.0
    for act, p in zip(bank.actuators, pressures):
        if p:
            eps = min(max(act.moment_arm * kappa, 0.0), act.eps_max)
            moment += act.section_area * p * max(act.a * (1.0 - eps) ** 2 - act.b, 0.0) * act.moment_arm
    load = np.full(params.grid_size, moment)
    if params.gravity:
        load += _gravity_from_y(horizontal_offsets(theta, params), params)
    return load


def step(state: RodState, params: RodParams, l_c, l_g, dt: float) -> RodState:
    """One kick-drift-kick leapfrog step with frozen loads.

    The elastic term is re-evaluated after the drift; the clamped base is
    restored.  Raises :class:`NumericalFailure` on a non-finite result.
    """
    load = np.asarray(l_c, float) + np.asarray(l_g, float)
    theta, omega = state.theta, state.omega
    omega_half = omega + 0.5 * dt * _rhs(theta, omega, params, load)
    theta_new = theta + dt * omega_half
    theta_new[0] = params.base_angle
    omega_new = omega_half + 0.5 * dt * _rhs(theta_new, omega_half, params, load)
    omega_new[0] = 0.0
    _check_finite(theta_new, omega_new, state.t + dt)
    return RodState(theta_new, omega_new, state.t + dt)


def _check_finite(theta, omega, t):
    # theta is checked first: after the drift it is bad only where the fault
    # started, while the second kick spreads it to neighbours through D2
    for field in (theta, omega):
        bad = ~np.isfinite(field)
        if bad.any():
            raise NumericalFailure(int(np.flatnonzero(bad)[0]), t)


def _accel_step(state: RodState, accel, dt: float, base_angle: float) -> RodState:
    """Leapfrog with a caller-supplied acceleration ``accel(theta, omega, t)``."""
    theta, omega, t = state.theta, state.omega, state.t
    a = accel(theta, omega, t)
    a[0] = 0.0
    omega_half = omega + 0.5 * dt * a
    theta_new = theta + dt * omega_half
    theta_new[0] = base_angle
    a = accel(theta_new, omega_half, t + dt)
    a[0] = 0.0
    omega_new = omega_half + 0.5 * dt * a
    omega_new[0] = 0.0
    _check_finite(theta_new, omega_new, t + dt)
    return RodState(theta_new, omega_new, t + dt)


@lru_cache(maxsize=64)
def _equilibrium_cached(params: RodParams, actuators: tuple, pressures: tuple,
                        relax_damping: float, t_max: float) -> tuple:
    bank = ActuatorBank(actuators, np.array(pressures))
    p = replace(params, damping=relax_damping)
    dt = 0.5 * p.cfl_dt()
    state = RodState.at_rest(p)
    P = np.array(pressures)
    n_steps = int(math.ceil(t_max / dt))
    for k in range(n_steps):
        mid = state.theta + 0.5 * dt * state.omega
        load = plant_loads(mid, p, bank, P)
        state = step(state, p, load, np.zeros_like(load), dt)
        if k % 200 == 0 and np.max(np.abs(state.omega)) < 1e-10:
            break
    return tuple(state.theta)


def open_loop_equilibrium(params: RodParams, bank: ActuatorBank, pressures,
                          relax_damping: float = 200.0, t_max: float = 5.0) -> np.ndarray:
    """Static shape under constant pressures, by damped relaxation from rest."""
    bank.check_pressures(pressures)
    theta = _equilibrium_cached(params, bank.actuators, tuple(float(p) for p in pressures),
                                float(relax_damping), float(t_max))
    return np.array(theta)


# ---------------------------------------------------------------------------
# closed loop


class _History:
    """Ring buffer of past angle fields for delayed observation."""

    def __init__(self, horizon: float, dt: float):
        self.buf = deque(maxlen=int(math.ceil(horizon / dt)) + 4)

    def push(self, t: float, theta: np.ndarray) -> None:
        self.buf.append((t, theta))

    def at(self, t: float) -> np.ndarray:
        best = self.buf[0][1]
        for tk, theta in self.buf:
            if tk <= t + 1e-12:
                best = theta
            else:
                break
        return best


class ClosedLoop:
    """Owns one scenario's integration state; advance with :meth:`run`."""

    def __init__(self, scenario: Scenario):
        sc = scenario
        sc.sim.validate(sc.params)
        sc.gains.validate()
        self.sc = sc
        self.params = sc.params
        self.dt = sc.sim.resolved_dt(sc.params)
        self.latency = sc.observer.latency if sc.sim.observation_latency is None else sc.sim.observation_latency
        self.observer = Observer(sc.observer, sc.params, sc.bank.actuators)
        self.state = (sc.initial.copy() if sc.initial is not None else RodState.at_rest(sc.params))
        self.state.theta[0] = sc.params.base_angle
        self.state.validate(sc.params)
        self.pressures = sc.bank.pressures.copy()
        self.l_star_hold = np.zeros(sc.params.grid_size)
        self.residual = 0.0
        self.warm: Optional[qpmod.AllocationSolution] = None
        self.prev_obs: Optional[tuple[float, np.ndarray]] = None
        self.history = _History(self.latency + 1.0 / sc.observer.frame_rate + 2 * self.dt, self.dt)
        self.history.push(self.state.t, self.state.theta.copy())
        self.continuous = (sc.sim.actuation_mode == IDEAL
                           and sc.sim.control_period <= self.dt * (1 + 1e-9) and self.latency == 0)
        self.marker_s = marker_arclengths(sc.params.length, sc.observer.n_markers)
        self.ticks = []

    # -- control ------------------------------------------------------------

    def capture_time(self, t: float) -> float:
        fps = self.sc.observer.frame_rate
        tc = max(t - self.latency, 0.0)
        return math.floor(tc * fps + 1e-9) / fps if self.latency > 0 else tc

    def control_tick(self, t: float) -> None:
        sc = self.sc
        if sc.sim.actuation_mode == OPEN_LOOP:
            return
        tc = self.capture_time(t)
        theta_c = self.history.at(tc)
        if sc.sim.actuation_mode == IDEAL:
            # full-state feedback on the delayed truth
            omega_c = self._omega_at(tc)
            errs = tracking_errors(RodState(theta_c, omega_c), sc.desired, tc)
            self.l_star_hold = desired_input(errs, sc.desired, sc.gains, tc)
            return
        obs = self.observer.observe(theta_c, tc)
        theta_hat = obs.theta_estimate.copy()
        theta_hat[0] = self.params.base_angle
        omega_hat = np.zeros_like(theta_hat)
        if sc.sim.velocity_estimation and self.prev_obs is not None and tc > self.prev_obs[0]:
            omega_hat = (theta_hat - self.prev_obs[1]) / (tc - self.prev_obs[0])
        self.prev_obs = (tc, theta_hat)
        problem = qpmod.build_problem(RodState(theta_hat, omega_hat, tc), self.params, sc.bank,
                                      obs.eps_estimates, sc.desired, sc.gains, tc,
                                      mode=sc.sim.gain_mode, use_velocity=sc.sim.velocity_estimation)
        sol = qpmod.solve(problem, self.warm, tol=sc.sim.qp_tol, max_iter=sc.sim.qp_max_iter)
        self.warm = sol
        self.pressures = sol.pressures.copy()
        self.residual = sol.residual
        self.ticks.append((t, sol.status, sol.iterations))

    def _omega_at(self, tc: float) -> np.ndarray:
        if tc >= self.state.t - 1e-12:
            return self.state.omega
        # velocity is not buffered; difference the stored angles around tc
        theta_a = self.history.at(tc - self.dt)
        theta_b = self.history.at(tc)
        return (theta_b - theta_a) / self.dt

    # -- dynamics -----------------------------------------------------------

    def _advance(self, dt: Optional[float] = None) -> None:
        sc, p = self.sc, self.params
        dt = self.dt if dt is None else dt
        if sc.sim.actuation_mode == IDEAL:
            if self.continuous:
                def accel(theta, omega, t):
                    errs = tracking_errors(RodState(theta, omega), sc.desired, t)
                    return desired_input(errs, sc.desired, sc.gains, t)
            else:
                hold = self.l_star_hold

                def accel(theta, omega, t):
                    return hold.copy()
            self.state = _accel_step(self.state, accel, dt, p.base_angle)
        else:
            mid = self.state.theta + 0.5 * dt * self.state.omega
            load = plant_loads(mid, p, sc.bank, self.pressures)
            self.state = step(self.state, p, load, np.zeros_like(load), dt)
        self.history.push(self.state.t, self.state.theta.copy())

    # -- metrics ------------------------------------------------------------

    def marker_error_norm(self, t: float) -> float:
        theta_star = self.sc.desired.theta_star(t)
        grid = self.params.grid()
        err = np.interp(self.marker_s, grid, self.state.theta) - np.interp(self.marker_s, grid, theta_star)
        return float(np.linalg.norm(err))

    def run(self) -> SimResult:
        sc, dt = self.sc, self.dt
        t_end = sc.sim.t_end
        # the last step is shortened so a timeout lands exactly on t_end
        n_steps = int(math.ceil(t_end / dt - 1e-9))
        period = sc.sim.control_period
        next_tick = 0  # ticks fire on the first step at or after k * period, so they never drift
        steps_per_record = max(1, int(round(sc.sim.record_period / dt)))
        tol = sc.sim.stop_tol
        stopping = math.isfinite(tol)

        rec = {k: [] for k in ("t", "err", "p", "res", "energy", "track")}
        below_since = None
        status, conv_time, failure = TIMEOUT, None, None

        def record():
            t = self.state.t
            err = self.marker_error_norm(t)
            e_th, e_om = tracking_errors(self.state, sc.desired, t)
            rec["t"].append(t)
            rec["err"].append(err)
            rec["p"].append(self.pressures.copy())
            rec["res"].append(self.residual)
            rec["energy"].append(elastic_energy(self.state, self.params))
            rec["track"].append(tracking_integral(e_th, e_om, self.params))
            return err

        try:
            for k in range(n_steps + 1):
                if not self.continuous and self.state.t >= next_tick * period - 1e-9 * dt:
                    self.control_tick(self.state.t)
                    next_tick = int(math.floor(self.state.t / period + 1e-9)) + 1
                if k % steps_per_record == 0 or k == n_steps:
                    err = record()
                    if stopping:
                        if err <= tol:
                            below_since = self.state.t if below_since is None else below_since
                            if self.state.t - below_since >= sc.sim.sustain - 1e-12:
                                status, conv_time = CONVERGED, below_since
                                break
                        else:
                            below_since = None
                if k == n_steps:
                    break
                if k == n_steps - 1:
                    self._advance(t_end - self.state.t)
                    self.state.t = t_end
                else:
                    self._advance()
        except NumericalFailure as exc:
            status, failure = NUMERICAL_FAILURE, str(exc)

        return SimResult(
            t=np.array(rec["t"]), err_norm=np.array(rec["err"]),
            pressures=np.array(rec["p"]).reshape(len(rec["t"]), -1), residual=np.array(rec["res"]),
            energy=np.array(rec["energy"]), tracking=np.array(rec["track"]),
            convergence_time=conv_time, final_state=self.state, status=status,
            stop_tol=tol, sustain=sc.sim.sustain, failure=failure, ticks=self.ticks)


def run_closed_loop(scenario: Scenario) -> SimResult:
    return ClosedLoop(scenario).run()


# ---------------------------------------------------------------------------
# metrics


@dataclass
class ConvergenceMetrics:
    convergence_time: Optional[float]
    overshoot: float
    decay_rate: float
    r_squared: float


def log_linear_fit(t, y) -> tuple[float, float]:
    """Least-squares fit of ``log y = a - rate t``; returns ``(rate, R^2)``."""
    t = np.asarray(t, float)
    ly = np.log(np.asarray(y, float))
    if len(t) < 2:
        return float("nan"), float("nan")
    slope, intercept = np.polyfit(t, ly, 1)
    fitted = intercept + slope * t
    ss_res = float(np.sum((ly - fitted) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return -float(slope), r2


def _first_sustained_crossing(t, e, tol, sustain) -> Optional[int]:
    below = e <= tol
    i = 0
    n = len(e)
    while i < n:
        if below[i]:
            j = i
            while j + 1 < n and below[j + 1]:
                j += 1
            if j == n - 1 or t[j] - t[i] >= sustain - 1e-12:
                return i
            i = j + 1
        else:
            i += 1
    return None


def convergence_metrics(result: SimResult, stop_tol: Optional[float] = None,
                        sustain: Optional[float] = None) -> ConvergenceMetrics:
    """Convergence time, overshoot past the first crossing, and log-linear decay rate.

    The crossing time is interpolated linearly between the bracketing samples.
    """
    t, e = np.asarray(result.t, float), np.asarray(result.err_norm, float)
    if len(t) < 10:
        raise SimError(f"need at least 10 samples, got {len(t)}")
    tol = result.stop_tol if stop_tol is None else stop_tol
    sustain = result.sustain if sustain is None else sustain
    idx = _first_sustained_crossing(t, e, tol, sustain)
    first = np.flatnonzero(e <= tol)

    if idx is None:
        conv = None
    elif idx == 0:
        conv = float(t[0])
    else:
        e0, e1 = e[idx - 1], e[idx]
        conv = float(t[idx - 1] + (e0 - tol) / (e0 - e1) * (t[idx] - t[idx - 1]))

    if first.size:
        after = e[first[0]:]
        overshoot = max(0.0, float(after.max() - tol))
        stop = first[0] + 1
    else:
        overshoot = 0.0
        stop = len(e)
    pre_t, pre_e = t[:stop], e[:stop]
    keep = pre_e > 0
    rate, r2 = log_linear_fit(pre_t[keep], pre_e[keep])
    return ConvergenceMetrics(conv, overshoot, rate, r2)
