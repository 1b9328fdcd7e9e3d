"""Planar Kirchhoff rod: grid, semi-discrete wave dynamics, gravity loading, kinematics.

Conventions
-----------
``y`` is horizontal and ``z`` points down (the direction of gravity).  The angle
``theta`` is measured from the downward vertical, so ``theta == 0`` everywhere is
the straight hanging rod and the centerline tangent is ``(sin theta, cos theta)``.
The base node is clamped at ``base_angle`` and the tip is moment free
(``d theta / ds = 0``), enforced through a mirrored ghost node.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=32)
def _grid(length: float, n: int) -> np.ndarray:
    g = np.linspace(0.0, length, n)
    g.setflags(write=False)
    return g


@lru_cache(maxsize=32)
def _weights(length: float, n: int) -> np.ndarray:
    ds = length / (n - 1)
    w = np.full(n, ds)
    w[0] = w[-1] = 0.5 * ds
    w.setflags(write=False)
    return w


class RodError(ValueError):
    """Invalid rod parameters or mismatched field dimensions."""


def _check_field(name: str, values, n: int) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape != (n,):
        raise RodError(f"{name}: expected shape ({n},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise RodError(f"{name}: contains non-finite entries")
    return arr


@dataclass(frozen=True)
class RodParams:
    """Backbone material and geometry, plus the arc-length grid.

    Defaults are the silicone backbone of the desk-scale arm.  ``damping`` is a
    viscous rate (1/s) acting on the angular velocity; it is zero unless a
    scenario asks for it.
    """

    density: float = 1070.0
    youngs_modulus: float = 90e3
    area: float = 1.68e-4
    moment_of_area: float = 0.12e-8
    length: float = 0.3
    grid_size: int = 101
    base_angle: float = 0.0
    gravity: float = 9.81
    damping: float = 0.0

    def __post_init__(self):
        for name in ("density", "youngs_modulus", "area", "moment_of_area", "length"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise RodError(f"{name} must be positive, got {value!r}")
        if int(self.grid_size) != self.grid_size or self.grid_size < 3:
            raise RodError(f"grid_size must be an integer >= 3, got {self.grid_size!r}")
        if not (np.isfinite(self.gravity) and self.gravity >= 0):
            raise RodError(f"gravity must be >= 0, got {self.gravity!r}")
        if not (np.isfinite(self.damping) and self.damping >= 0):
            raise RodError(f"damping must be >= 0, got {self.damping!r}")
        if not np.isfinite(self.base_angle):
            raise RodError("base_angle must be finite")

    @property
    def ds(self) -> float:
        return self.length / (self.grid_size - 1)

    @property
    def wave_speed(self) -> float:
        return float(np.sqrt(self.youngs_modulus / self.density))

    @property
    def inertia(self) -> float:
        """Rotational inertia per unit length, rho * J_x."""
        return self.density * self.moment_of_area

    @property
    def bending_stiffness(self) -> float:
        return self.youngs_modulus * self.moment_of_area

    @property
    def linear_density(self) -> float:
        return self.density * self.area

    def grid(self) -> np.ndarray:
        return _grid(self.length, self.grid_size)

    def weights(self) -> np.ndarray:
        """Trapezoidal quadrature weights on the grid (sum to ``length``)."""
        return _weights(self.length, self.grid_size)

    def cfl_dt(self) -> float:
        return self.ds / self.wave_speed


@dataclass
class RodState:
    theta: np.ndarray
    omega: np.ndarray
    t: float = 0.0

    def copy(self) -> "RodState":
        return RodState(self.theta.copy(), self.omega.copy(), self.t)

    def validate(self, params: RodParams) -> None:
        _check_field("theta", self.theta, params.grid_size)
        _check_field("omega", self.omega, params.grid_size)

    @classmethod
    def at_rest(cls, params: RodParams, theta=None) -> "RodState":
        if theta is None:
            theta = np.full(params.grid_size, params.base_angle)
        theta = np.array(theta, dtype=float)
        theta[0] = params.base_angle
        return cls(theta, np.zeros(params.grid_size), 0.0)


@dataclass
class Centerline:
    positions: np.ndarray  # (N, 2) columns y, z
    tangents: np.ndarray
    normals: np.ndarray
    s: np.ndarray = field(default=None)

    @property
    def y(self) -> np.ndarray:
        return self.positions[:, 0]

    @property
    def z(self) -> np.ndarray:
        return self.positions[:, 1]


def second_difference(theta: np.ndarray, ds: float) -> np.ndarray:
    """Central second difference with clamped base and ghost-node free tip.

    Entry 0 is zero (the base value is prescribed, not evolved).
    """
    out = np.empty_like(theta)
    out[0] = 0.0
    out[1:-1] = theta[2:] - 2.0 * theta[1:-1] + theta[:-2]
    out[-1] = 2.0 * (theta[-2] - theta[-1])
    out /= ds * ds
    return out


def dynamics_rhs(state: RodState, params: RodParams, l_c, l_g) -> np.ndarray:
    """Angular acceleration field of the semi-discrete wave equation.

    Returns ``(E J D2 theta + l_c + l_g) / (rho J)`` minus viscous damping, with
    the clamped base node held at zero acceleration.
    """
    n = params.grid_size
    theta = _check_field("theta", state.theta, n)
    omega = _check_field("omega", state.omega, n)
    l_c = _check_field("l_c", l_c, n)
    l_g = _check_field("l_g", l_g, n)
    return _rhs(theta, omega, params, l_c + l_g)


def _rhs(theta, omega, params: RodParams, load) -> np.ndarray:
    acc = params.wave_speed**2 * second_difference(theta, params.ds)
    acc += load / params.inertia
    if params.damping:
        acc -= params.damping * omega
    acc[0] = 0.0
    return acc


def reconstruct_centerline(theta, params: RodParams) -> Centerline:
    """Integrate the unit tangent along arc length (trapezoidal) from the origin."""
    theta = _check_field("theta", theta, params.grid_size)
    sin, cos = np.sin(theta), np.cos(theta)
    tangents = np.column_stack([sin, cos])
    normals = np.column_stack([cos, -sin])
    half = 0.5 * params.ds
    positions = np.zeros((params.grid_size, 2))
    positions[1:, 0] = np.cumsum(half * (sin[1:] + sin[:-1]))
    positions[1:, 1] = np.cumsum(half * (cos[1:] + cos[:-1]))
    return Centerline(positions, tangents, normals, params.grid())


def gravity_torque(state: RodState, params: RodParams, centerline: Centerline | None = None) -> np.ndarray:
    """Distributed gravity moment: backbone weight plus the pin reaction at the base.

    The lever arm of a point at arc length sigma about reference s_i is
    ``y(s_i) - y(sigma)``; with that sign the moment restores the hanging
    configuration.  The pin carries the full weight ``rho A L g`` upward.
    """
    if centerline is None:
        centerline = reconstruct_centerline(state.theta, params)
    return _gravity_from_y(centerline.y, params)


def backbone_gravity_torque(y: np.ndarray, params: RodParams) -> np.ndarray:
    """Backbone part only: ``int rho A g (y(s_i) - y(sigma)) dsigma``."""
    w = params.weights()
    mg = params.linear_density * params.gravity
    return mg * (params.length * y - np.dot(w, y))


def pin_gravity_torque(y: np.ndarray, params: RodParams) -> np.ndarray:
    weight = params.linear_density * params.length * params.gravity
    return -weight * (y - y[0])


def horizontal_offsets(theta, params: RodParams) -> np.ndarray:
    """``y(s_i)`` only, the quantity gravity needs."""
    sin = np.sin(theta)
    y = np.empty_like(sin)
    y[0] = 0.0
    np.cumsum(0.5 * params.ds * (sin[1:] + sin[:-1]), out=y[1:])
    return y


def _gravity_from_y(y: np.ndarray, params: RodParams) -> np.ndarray:
    return backbone_gravity_torque(y, params) + pin_gravity_torque(y, params)


def elastic_energy(state: RodState, params: RodParams) -> float:
    """Kinetic plus bending energy, trapezoidal in s; one-sided slopes at the ends."""
    theta = _check_field("theta", state.theta, params.grid_size)
    omega = _check_field("omega", state.omega, params.grid_size)
    u = np.gradient(theta, params.ds, edge_order=1)
    density = params.inertia * omega**2 + params.bending_stiffness * u**2
    return 0.5 * float(np.dot(params.weights(), density))
