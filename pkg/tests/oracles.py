"""Solver-independent reference computations shared by the unit and acceptance tests."""

import dataclasses

import numpy as np

from rotctl import qp
from rotctl.actuation import ActuatorBank
from rotctl.control import DesiredTrajectory, GainProfile
from rotctl.rod import RodParams, RodState


def conditional_residual(u, g, k_bar):
    """Per-node residual after choosing the best gain ``k >= k_bar`` in closed form.

    The node residual is ``u + g k``; it is zeroed when the root ``-u/g`` is
    admissible and otherwise the gain sits on its floor.
    """
    u = np.asarray(u, float)
    g = np.broadcast_to(np.asarray(g, float), u.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        root_ok = (g != 0) & (-u / g >= k_bar)
    return np.where(root_ok, 0.0, u + g * k_bar)


def reduced_objective(problem, P):
    """Objective minimized over the k_omega samples, for pressures ``P`` of shape (..., n_act)."""
    assert problem.gain_mode == qp.K_OMEGA_FREE
    P = np.asarray(P, float)
    u = P @ problem.pressure_matrix.T + problem.offset()
    r = conditional_residual(u, problem.e_omega, problem.k_bar)
    return np.sum(problem.weights * r * r, axis=-1)


def grid_resolution_bound(problem, points):
    """Worst objective gap between the continuous optimum and its nearest grid point.

    The reduced objective is C1 and piecewise quadratic with curvature bounded by
    ``2 A' W A``; snapping free coordinates by at most half a cell costs at most
    ``1/2 d' H d`` and bound coordinates lie on the grid.
    """
    A = problem.pressure_matrix
    H = 2 * A.T @ (problem.weights[:, None] * A)
    half = problem.p_max / (points - 1) / 2
    return 0.5 * float(half @ np.abs(H) @ half)


def brute_force_1d(problem, points=10_000):
    grid = np.linspace(0.0, problem.p_max[0], points)[:, None]
    f = reduced_objective(problem, grid)
    i = int(np.argmin(f))
    return float(f[i]), grid[i]


def brute_force_2d(problem, points=10_000):
    """Exact minimum of the reduced objective over a ``points x points`` pressure grid.

    For each first-pressure row the objective is a convex sequence in the second
    pressure (partial minimization keeps convexity), so its grid minimum is found
    by bisecting on the sign of the forward difference.  The result equals a full
    exhaustive scan of all ``points**2`` grid nodes.
    """
    p1 = np.linspace(0.0, problem.p_max[0], points)
    p2 = np.linspace(0.0, problem.p_max[1], points)

    def f(i1, i2):
        return reduced_objective(problem, np.stack([p1[i1], p2[i2]], axis=-1))

    rows = np.arange(points)
    lo = np.zeros(points, dtype=int)
    hi = np.full(points, points - 1)
    while np.any(lo < hi):
        mid = (lo + hi) // 2
        rising = f(rows, np.minimum(mid + 1, points - 1)) >= f(rows, mid)
        active = lo < hi
        hi = np.where(active & rising, mid, hi)
        lo = np.where(active & ~rising, mid + 1, lo)
    vals = f(rows, lo)
    k = int(np.argmin(vals))
    return float(vals[k]), np.array([p1[k], p2[lo[k]]])


def brute_force_2d_scan(problem, points):
    """Plain exhaustive scan, for checking the bisection on small grids."""
    p1 = np.linspace(0.0, problem.p_max[0], points)
    p2 = np.linspace(0.0, problem.p_max[1], points)
    P = np.stack(np.meshgrid(p1, p2, indexing="ij"), axis=-1)
    f = reduced_objective(problem, P)
    i, j = np.unravel_index(np.argmin(f), f.shape)
    return float(f[i, j]), np.array([p1[i], p2[j]])


def random_small_problem(seed, n=5, n_act=2):
    """Random allocation instance whose optimum is often partly on the bounds."""
    rng = np.random.default_rng(seed)
    inertia = 1070.0 * 0.12e-8
    B = rng.uniform(-0.02, 0.02, (n, n_act))
    e_omega = rng.normal(0.0, 1.0, n)
    e_omega[rng.random(n) < 0.4] = 0.0
    P_ref = rng.uniform(-10e3, 50e3, n_act)
    accel_star = B @ P_ref / inertia + rng.normal(0, 2e4, n)
    return qp.AllocationProblem(
        B=B, inertia=inertia, rhs_fixed=rng.normal(0, 1e3, n), e_theta=rng.normal(0, 0.1, n),
        e_omega=e_omega, accel_star=accel_star, k_theta=np.full(n, 1e5),
        weights=rng.uniform(0.5, 1.5, n) * 0.3 / n, p_max=np.full(n_act, 40e3), k_bar=1.0,
        k_theta_bar=1e5)


def realizable_problem(seed, n_nodes=101):
    """Allocation problem built on a random rod state whose target is met exactly
    by known pressures ``P_true`` and known admissible gains.

    Per-node contraction fields are drawn at random so the pressure columns are
    independent.  Half the nodes carry no velocity error, which pins the pressures.
    """
    rng = np.random.default_rng(seed)
    params = RodParams(grid_size=n_nodes)
    bank = ActuatorBank.antagonistic()
    s = params.grid()
    theta = 0.5 * np.sin(rng.uniform(0.5, 3) * s / params.length + rng.uniform(0, 1)) * rng.uniform(0.2, 1)
    theta[0] = params.base_angle
    omega = rng.normal(0, 0.5, n_nodes)
    eps = rng.uniform(0.0, 0.15, (2, n_nodes))
    target = DesiredTrajectory.fixed(0.2 * s / params.length)
    gains = GainProfile.uniform(n_nodes, k_theta=1e5, k_omega=10.0)
    problem = qp.build_problem(RodState(theta, omega), params, bank, eps, target, gains, 0.0)

    quiet = rng.random(n_nodes) < 0.5
    e_omega = np.where(quiet, 0.0, problem.e_omega)
    P_true = rng.uniform(0.05, 0.95, 2) * bank.p_max
    k_true = rng.uniform(problem.k_bar, 50.0, n_nodes)
    realized = problem.realized_field(P_true)
    accel_star = realized + problem.k_theta * problem.e_theta + k_true * e_omega
    problem = dataclasses.replace(problem, e_omega=e_omega, accel_star=accel_star)
    return problem, P_true, k_true
