"""Per-step allocation QP: pick pressures and gain fields so the realizable input
matches the PD law in the weighted L2 sense.

The decision vector stacks the pressures first, then one gain sample per node
for each free gain field (``k_omega``, then ``k_theta`` in the extended mode).
Every gain sample only touches its own node's residual, so the problem is a
box-constrained least squares with an ``[A | diag]`` structure that the solver
exploits.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import rod
from .actuation import ActuatorBank, moment_to_pressure_matrix
from .control import DesiredTrajectory, GainProfile, tracking_errors
from .rod import RodParams, RodState

K_OMEGA_FREE = "k_omega_free"
K_BOTH_FREE = "k_omega_and_k_theta_free"
GAIN_MODES = (K_OMEGA_FREE, K_BOTH_FREE)

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE_INPUT = "infeasible_input"

DUMP_FORMAT = "rotctl.allocation-problem/1"


class AllocationError(ValueError):
    pass


@dataclass
class AllocationProblem:
    """Discretized allocation problem in angular-acceleration units.

    ``l(P) = rhs_fixed + (B @ P) / inertia`` and
    ``l_*(k) = accel_star - k_theta * e_theta - k_omega * e_omega``; the
    objective is ``sum(weights * (l - l_*)**2)``.
    """

    B: np.ndarray
    inertia: float
    rhs_fixed: np.ndarray
    e_theta: np.ndarray
    e_omega: np.ndarray
    accel_star: np.ndarray
    k_theta: np.ndarray
    weights: np.ndarray
    p_max: np.ndarray
    k_bar: float
    k_theta_bar: float
    gain_mode: str = K_OMEGA_FREE

    def __post_init__(self):
        if self.gain_mode not in GAIN_MODES:
            raise AllocationError(f"unknown gain_mode {self.gain_mode!r}")
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        n = self.B.shape[0]
        for name in ("rhs_fixed", "e_theta", "e_omega", "accel_star", "k_theta", "weights"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise AllocationError(f"{name}: expected shape ({n},), got {arr.shape}")
            setattr(self, name, arr)
        self.p_max = np.asarray(self.p_max, dtype=float)
        if self.p_max.shape != (self.B.shape[1],):
            raise AllocationError("p_max must have one entry per actuator")
        if np.any(self.weights <= 0):
            raise AllocationError("quadrature weights must be positive")

    @property
    def n_nodes(self) -> int:
        return self.B.shape[0]

    @property
    def n_act(self) -> int:
        return self.B.shape[1]

    @property
    def pressure_matrix(self) -> np.ndarray:
        return self.B / self.inertia

    def gain_coefficients(self) -> list[np.ndarray]:
        """Per-node coefficients of each free gain block in ``l - l_*``."""
        if self.gain_mode == K_OMEGA_FREE:
            return [self.e_omega]
        return [self.e_omega, self.e_theta]

    def offset(self) -> np.ndarray:
        """Residual with pressures and all free gains at zero."""
        off = self.rhs_fixed - self.accel_star
        if self.gain_mode == K_OMEGA_FREE:
            off = off + self.k_theta * self.e_theta
        return off

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.n_nodes
        lo = [np.zeros(self.n_act), np.full(n, self.k_bar)]
        hi = [self.p_max, np.full(n, np.inf)]
        if self.gain_mode == K_BOTH_FREE:
            lo.append(np.full(n, self.k_theta_bar))
            hi.append(np.full(n, np.inf))
        return np.concatenate(lo), np.concatenate(hi)

    @property
    def size(self) -> int:
        return self.n_act + self.n_nodes * len(self.gain_coefficients())

    def is_finite(self) -> bool:
        arrays = (self.B, self.rhs_fixed, self.e_theta, self.e_omega, self.accel_star,
                  self.k_theta, self.weights, self.p_max)
        return all(np.all(np.isfinite(a)) for a in arrays) and np.isfinite(self.inertia)

    def desired_field(self, x: np.ndarray) -> np.ndarray:
        """``l_*`` evaluated at the gains contained in ``x``."""
        m, n = self.n_act, self.n_nodes
        k_omega = x[m:m + n]
        k_theta = x[m + n:m + 2 * n] if self.gain_mode == K_BOTH_FREE else self.k_theta
        return self.accel_star - k_theta * self.e_theta - k_omega * self.e_omega

    def realized_field(self, pressures: np.ndarray) -> np.ndarray:
        return self.rhs_fixed + self.pressure_matrix @ pressures


class _Operator:
    """Residual ``r(x) = A_P x_P + sum_b g_b * x_b + c`` and its weighted gradient."""

    def __init__(self, problem: AllocationProblem):
        self.m = problem.n_act
        self.n = problem.n_nodes
        self.A = problem.pressure_matrix
        self.G = np.array(problem.gain_coefficients())  # (blocks, n)
        self.c = problem.offset()
        self.w = problem.weights
        self.lo, self.hi = problem.bounds()
        hd = [np.einsum("i,ij->j", self.w, self.A**2)]
        hd.extend(self.w * g**2 for g in self.G)
        self.hess_diag = 2.0 * np.concatenate(hd)

    def residual(self, x):
        m, n = self.m, self.n
        r = self.A @ x[:m] + self.c
        for b, g in enumerate(self.G):
            r += g * x[m + b * n:m + (b + 1) * n]
        return r

    def objective(self, x) -> float:
        r = self.residual(x)
        return float(np.dot(self.w, r * r))

    def gradient(self, x, r=None):
        if r is None:
            r = self.residual(x)
        wr = 2.0 * self.w * r
        parts = [self.A.T @ wr]
        parts.extend(g * wr for g in self.G)
        return np.concatenate(parts)


@dataclass
class AllocationSolution:
    pressures: np.ndarray
    k_omega: np.ndarray
    k_theta: Optional[np.ndarray]
    residual: float
    iterations: int
    status: str
    x: np.ndarray = field(repr=False, default=None)
    history: list = field(repr=False, default_factory=list)
    polished: bool = False


def build_problem(state: RodState, params: RodParams, bank: ActuatorBank, eps_estimates,
                  desired: DesiredTrajectory, gains: GainProfile, t: float,
                  mode: str = K_OMEGA_FREE, use_velocity: bool = True,
                  l_g: Optional[np.ndarray] = None) -> AllocationProblem:
    """Assemble the allocation QP for the (observed) state at time t.

    With ``use_velocity=False`` the velocity error is treated as zero, which
    removes the ``k_omega`` term from the law (the latency-degraded mode).
    """
    if eps_estimates is None:
        raise AllocationError("contraction estimates are required")
    for name, arr in (("theta", state.theta), ("omega", state.omega), ("eps_estimates", eps_estimates)):
        if not np.all(np.isfinite(np.asarray(arr, dtype=float))):
            raise AllocationError(f"{name} contains NaN or inf")
    state.validate(params)
    gains.validate()
    e_theta, e_omega = tracking_errors(state, desired, t)
    if not use_velocity:
        e_omega = np.zeros_like(e_omega)
    if l_g is None:
        l_g = rod.gravity_torque(state, params)
    B = moment_to_pressure_matrix(bank, eps_estimates, params.grid())
    rhs_fixed = (params.wave_speed**2 * rod.second_difference(state.theta, params.ds)
                 + l_g / params.inertia)
    problem = AllocationProblem(
        B=B, inertia=params.inertia, rhs_fixed=rhs_fixed, e_theta=e_theta, e_omega=e_omega,
        accel_star=desired.accel_star(t), k_theta=gains.k_theta, weights=params.weights(),
        p_max=bank.p_max, k_bar=gains.k_bar, k_theta_bar=gains.k_theta_bar, gain_mode=mode)
    if not problem.is_finite():
        raise AllocationError("assembled problem contains NaN or inf")
    return problem


def _threshold(op: _Operator, scale, tol: float) -> float:
    """KKT stopping level: ``tol (1 + |scaled gradient at the lower bounds|)``."""
    g0 = op.gradient(op.lo)
    return tol * (1.0 + float(np.linalg.norm(g0 / np.sqrt(scale))))


def _pg_norm(op: _Operator, x, g, scale) -> float:
    step = g / scale
    pg = x - np.clip(x - step, op.lo, op.hi)
    return float(np.linalg.norm(pg * np.sqrt(scale)))


_MAX_EXACT_ACT = 6


def _box_lsq(M, rhs, lo, hi) -> np.ndarray:
    """Exact ``min |M p - rhs|^2`` over a small box by enumerating its faces.

    Every coordinate is either free or pinned to one of its bounds; the best
    feasible face solution is the global minimizer of the convex problem.
    Ties go to the smaller vector.  The faces are solved on the triangular
    factor of ``M``, which keeps its conditioning.
    """
    m = M.shape[1]
    if M.shape[0] > m:
        Q, R = np.linalg.qr(M)
        M, rhs = R, Q.T @ rhs
    p = np.linalg.lstsq(M, rhs, rcond=None)[0]
    if np.all(p >= lo) and np.all(p <= hi):
        return p
    best, best_f = None, np.inf
    for pattern in itertools.product((0, 1, 2), repeat=m):
        pat = np.array(pattern)
        p = np.where(pat == 1, lo, hi).astype(float)
        free = pat == 0
        if free.any():
            if free.all():
                continue
            b = rhs - M[:, ~free] @ p[~free]
            if free.sum() == 1:
                col = M[:, free][:, 0]
                cc = float(col @ col)
                p[free] = float(col @ b) / cc if cc > 0 else 0.0
            else:
                p[free] = np.linalg.lstsq(M[:, free], b, rcond=None)[0]
            if np.any(p < lo) or np.any(p > hi):
                continue
        res = M @ p - rhs
        f = float(res @ res)
        if f < best_f * (1 - 1e-14) or (f <= best_f * (1 + 1e-14) and p @ p < best @ best):
            best, best_f = p, f
    return best


class _Reduced:
    """The objective with every gain sample minimized out in closed form.

    At node i the free gains can add any value in the cone spanned by their
    coefficients, so the node residual is ``v_i(P) = A_i P + c_i`` (gains at their
    floors) pushed towards zero through that cone: kept when the cone is
    trivial, one-sided clipped when it is a half line, and zero when it is the
    whole line.
    """

    def __init__(self, op: _Operator):
        self.op = op
        m, n = op.m, op.n
        self.c = op.c.copy()
        for b, g_b in enumerate(op.G):
            self.c += g_b * op.lo[m + b * n:m + (b + 1) * n]
        pos = np.any(op.G > 0, axis=0) if len(op.G) else np.zeros(n, bool)
        neg = np.any(op.G < 0, axis=0) if len(op.G) else np.zeros(n, bool)
        self.kind = np.where(pos & neg, 3, np.where(pos, 1, np.where(neg, 2, 0)))

    def values(self, p):
        return self.op.A @ p + self.c

    def residual(self, p):
        v = self.values(p)
        k = self.kind
        return np.where(k == 0, v, np.where(k == 1, np.maximum(v, 0.0),
                                             np.where(k == 2, np.minimum(v, 0.0), 0.0)))

    def objective(self, p) -> float:
        r = self.residual(p)
        return float(np.dot(self.op.w, r * r))

    def active(self, p):
        v = self.values(p)
        k = self.kind
        return (k == 0) | ((k == 1) & (v > 0)) | ((k == 2) & (v < 0))

    def lift(self, p) -> np.ndarray:
        """Full decision vector: gains absorb what the cone allows, floors otherwise."""
        op = self.op
        m, n = op.m, op.n
        x = op.lo.copy()
        x[:m] = p
        t = self.residual(p) - self.values(p)  # the amount the gains must add
        left = t.copy()
        for b, g_b in enumerate(op.G):
            with np.errstate(divide="ignore", invalid="ignore"):
                step = np.where((g_b != 0) & (left * g_b > 0), left / g_b, 0.0)
            x[m + b * n:m + (b + 1) * n] += step
            left = left - g_b * step
        return x

    def solve(self, p0, max_iter: int = 50) -> Optional[np.ndarray]:
        """Semismooth Newton on the pressures with an exact box subproblem."""
        op = self.op
        m = op.m
        lo, hi = op.lo[:m], op.hi[:m]
        sw = np.sqrt(op.w)
        p = np.clip(p0, lo, hi)
        f = self.objective(p)
        for _ in range(max_iter):
            act = self.active(p)
            if act.any():
                M = op.A[act] * sw[act, None]
                p_new = _box_lsq(M, -self.c[act] * sw[act], lo, hi)
            else:
                p_new = p.copy()
            f_new = self.objective(p_new)
            if f_new > f:
                # the local model overshot a kink; exact search on the segment
                d = p_new - p
                a, b = 0.0, 1.0
                for _ in range(60):
                    m1, m2 = a + (b - a) / 3, b - (b - a) / 3
                    if self.objective(p + m1 * d) <= self.objective(p + m2 * d):
                        b = m2
                    else:
                        a = m1
                p_new = np.clip(p + 0.5 * (a + b) * d, lo, hi)
                f_new = self.objective(p_new)
                if f_new >= f:
                    # the model shares the gradient of f at p, so no descent
                    # along its step means p is optimal up to round-off
                    return p
            done = np.array_equal(self.active(p_new), act) and np.allclose(p_new, p, rtol=1e-13, atol=0)
            p, f = p_new, f_new
            if done:
                return p
        return p


def _polish(op: _Operator, x) -> Optional[np.ndarray]:
    """Exact optimum through the reduced problem; None if it did not settle.

    Face enumeration grows as 3^n_act, so large banks rely on the gradient
    iteration alone.
    """
    if op.m > _MAX_EXACT_ACT:
        return None
    red = _Reduced(op)
    p = red.solve(x[:op.m])
    return None if p is None else red.lift(p)


def _min_norm_pressures(op: _Operator, x) -> np.ndarray:
    """Among pressure vectors with the same moment field, pick the smallest in the box."""
    m = op.m
    if m < 2:
        return x
    _, sv, vt = np.linalg.svd(op.A, full_matrices=True)
    tol = max(op.A.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0) * 1e3
    rank = int(np.sum(sv > tol))
    null = vt[rank:]
    if null.shape[0] == 0:
        return x
    p = x[:m].copy()
    lo, hi = op.lo[:m], op.hi[:m]
    for _ in range(20 * null.shape[0]):
        moved = False
        for v in null:
            # minimize |p + t v|^2 over the interval of t that keeps p in the box
            t_star = -np.dot(p, v) / np.dot(v, v)
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = np.where(v != 0, (lo - p) / v, -np.inf)
                t2 = np.where(v != 0, (hi - p) / v, np.inf)
            t_lo = np.max(np.minimum(t1, t2))
            t_hi = np.min(np.maximum(t1, t2))
            t = min(max(t_star, t_lo), t_hi)
            if abs(t) * np.linalg.norm(v) > 1e-12 * (1.0 + np.linalg.norm(p)):
                p = np.clip(p + t * v, lo, hi)
                moved = True
        if not moved:
            break
    out = x.copy()
    out[:m] = p
    return out


def solve(problem: AllocationProblem, warm_start: Optional[AllocationSolution] = None,
          tol: float = 1e-8, max_iter: int = 500, polish: bool = True) -> AllocationSolution:
    """Projected Barzilai-Borwein gradient with monotone backtracking.

    Variables are Jacobi-scaled by the Hessian diagonal.  With ``polish`` the
    first iteration and every fifth one also try the exact reduced solve (gains
    eliminated per node, Newton on the pressures); it is accepted whenever it
    does not increase the objective.  Gain samples that cannot lower the
    objective stay at their lower bound.
    """
    m, n = problem.n_act, problem.n_nodes
    if not problem.is_finite():
        lo, _ = problem.bounds()
        return _pack(problem, lo, np.inf, 0, INFEASIBLE_INPUT, [])
    op = _Operator(problem)
    lo, hi = op.lo, op.hi

    if warm_start is not None and warm_start.x is not None and warm_start.x.shape == lo.shape:
        x = warm_start.x.copy()
    else:
        x = lo.copy()
    x = np.clip(x, lo, hi)
    idle = op.hess_diag == 0
    x[idle] = lo[idle]
    scale = np.where(idle, 1.0, op.hess_diag)

    stop = _threshold(op, scale, tol)

    r = op.residual(x)
    f = float(np.dot(op.w, r * r))
    g = op.gradient(x, r)
    history = [f]
    alpha = 1.0
    status = MAX_ITER
    polished = False
    it = 0
    for it in range(1, max_iter + 1):
        if _pg_norm(op, x, g, scale) <= stop:
            status = OPTIMAL
            it -= 1
            break
        if polish and (it == 1 or it % 5 == 0):
            xp = _polish(op, x)
            if xp is not None:
                fp = op.objective(xp)
                if fp <= f + 1e-12 * (1.0 + f):
                    x, f = xp, min(fp, f)
                    g = op.gradient(x)
                    history.append(f)
                    polished = True
                    if _pg_norm(op, x, g, scale) <= stop:
                        status = OPTIMAL
                        break
        d = g / scale
        step = alpha
        while True:
            x_new = np.clip(x - step * d, lo, hi)
            x_new[idle] = lo[idle]
            r_new = op.residual(x_new)
            f_new = float(np.dot(op.w, r_new * r_new))
            if f_new <= f - 1e-4 * np.dot(g, x - x_new) or step < 1e-20:
                break
            step *= 0.5
        if f_new > f:
            x_new, f_new, r_new = x, f, op.residual(x)
        s = x_new - x
        g_new = op.gradient(x_new, r_new)
        y = g_new - g
        sy = float(np.dot(s, y))
        sHs = float(np.dot(s * scale, s))
        alpha = sHs / sy if sy > 0 else 1.0
        alpha = min(max(alpha, 1e-10), 1e10)
        x, f, g = x_new, f_new, g_new
        history.append(f)
        if not np.any(s):
            status = OPTIMAL if _pg_norm(op, x, g, scale) <= stop * 10 else MAX_ITER
            break

    x = _min_norm_pressures(op, x)
    x = np.clip(x, lo, hi)
    x[idle] = lo[idle]
    f = op.objective(x)
    return _pack(problem, x, f, it, status, history, polished)


def _pack(problem, x, f, it, status, history, polished=False) -> AllocationSolution:
    m, n = problem.n_act, problem.n_nodes
    k_theta = x[m + n:m + 2 * n].copy() if problem.gain_mode == K_BOTH_FREE else None
    return AllocationSolution(pressures=x[:m].copy(), k_omega=x[m:m + n].copy(), k_theta=k_theta,
                              residual=float(f), iterations=int(it), status=status, x=x,
                              history=history, polished=polished)


def objective(problem: AllocationProblem, x) -> float:
    return _Operator(problem).objective(np.asarray(x, dtype=float))


def stack(problem: AllocationProblem, pressures, k_omega, k_theta=None) -> np.ndarray:
    parts = [np.asarray(pressures, float), np.asarray(k_omega, float)]
    if problem.gain_mode == K_BOTH_FREE:
        parts.append(np.asarray(k_theta, float))
    return np.concatenate(parts)


@dataclass
class KKTReport:
    flags: list
    gradient: np.ndarray
    projected_gradient: np.ndarray
    residual_density: np.ndarray
    residual: float
    threshold: float = 0.0

    @property
    def max_projected_gradient(self) -> float:
        return float(np.max(np.abs(self.projected_gradient))) if self.projected_gradient.size else 0.0

    @property
    def satisfied(self) -> bool:
        return float(np.linalg.norm(self.projected_gradient)) <= self.threshold


def kkt_report(problem: AllocationProblem, solution: AllocationSolution, tol: float = 1e-8) -> KKTReport:
    """Active-bound flags, gradients and the per-node residual ``w_i r_i^2``.

    ``projected_gradient`` is expressed in the Jacobi-scaled variables the
    solver works in, so its components are comparable across blocks;
    ``threshold`` is the solver's stopping level for ``tol``.
    """
    op = _Operator(problem)
    x = solution.x
    r = op.residual(x)
    g = op.gradient(x, r)
    scale = np.where(op.hess_diag == 0, 1.0, op.hess_diag)
    flags = []
    for xi, lo, hi in zip(x, op.lo, op.hi):
        if xi <= lo:
            flags.append("lower_active")
        elif xi >= hi:
            flags.append("upper_active")
        else:
            flags.append("free")
    pg = (x - np.clip(x - g / scale, op.lo, op.hi)) * np.sqrt(scale)
    density = op.w * r * r
    return KKTReport(flags, g, pg, density, float(density.sum()), _threshold(op, scale, tol))


def dump_problem(problem: AllocationProblem, path) -> None:
    """Write the problem as a self-describing JSON record."""
    record = {
        "format": DUMP_FORMAT,
        "gain_mode": problem.gain_mode,
        "inertia": problem.inertia,
        "k_bar": problem.k_bar,
        "k_theta_bar": problem.k_theta_bar,
        "p_max": problem.p_max.tolist(),
        "B": problem.B.tolist(),
    }
    for name in ("rhs_fixed", "e_theta", "e_omega", "accel_star", "k_theta", "weights"):
        record[name] = getattr(problem, name).tolist()
    Path(path).write_text(json.dumps(record, indent=1) + "\n")


def load_problem(path) -> AllocationProblem:
    record = json.loads(Path(path).read_text())
    if record.get("format") != DUMP_FORMAT:
        raise AllocationError(f"unrecognized problem format {record.get('format')!r}")
    record.pop("format")
    return AllocationProblem(**record)
