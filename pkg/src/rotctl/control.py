"""Tracking errors and the distributed PD law for the rod angle field."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .rod import RodParams, RodState

Field = np.ndarray
FieldFn = Callable[[float], Field]


class GainError(ValueError):
    pass


@dataclass(frozen=True)
class DesiredTrajectory:
    """Desired angle, angular velocity and angular acceleration fields over time.

    Each member is a callable ``t -> length-N array``.
    """

    theta_star: FieldFn
    omega_star: FieldFn
    accel_star: FieldFn
    static: bool = False

    def at(self, t: float) -> tuple[Field, Field, Field]:
        return self.theta_star(t), self.omega_star(t), self.accel_star(t)

    @classmethod
    def fixed(cls, theta) -> "DesiredTrajectory":
        theta = np.array(theta, dtype=float)
        theta.setflags(write=False)
        zero = np.zeros_like(theta)
        zero.setflags(write=False)
        return cls(lambda t: theta, lambda t: zero, lambda t: zero, static=True)

    @classmethod
    def arc(cls, params: RodParams, curvature: float) -> "DesiredTrajectory":
        """Constant-curvature arc ``theta = kappa s + theta_0``."""
        return cls.fixed(curvature * params.grid() + params.base_angle)

    @classmethod
    def homotopy(cls, start, end, duration: float) -> "DesiredTrajectory":
        """Smooth blend ``start + h(t/T) (end - start)`` with a quintic ramp h.

        The ramp has zero velocity and acceleration at both ends, so the target
        is at rest before t=0 and after t=T.
        """
        start = np.asarray(start, dtype=float)
        delta = np.asarray(end, dtype=float) - start
        if duration <= 0:
            raise ValueError("homotopy duration must be positive")

        def clip(t):
            return min(max(t / duration, 0.0), 1.0)

        def h(t):
            x = clip(t)
            return x**3 * (10 - 15 * x + 6 * x * x)

        def dh(t):
            x = clip(t)
            return 30 * x * x * (1 - x) ** 2 / duration

        def ddh(t):
            x = clip(t)
            return 60 * x * (1 - x) * (1 - 2 * x) / duration**2

        return cls(lambda t: start + h(t) * delta,
                   lambda t: dh(t) * delta,
                   lambda t: ddh(t) * delta)


@dataclass(frozen=True)
class GainProfile:
    """Feedback gain fields.

    ``k_theta`` (1/s^2) and ``k_omega`` (1/s) are per-node arrays.  ``k_bar`` is
    the floor on ``k_omega``; ``k_theta_bar`` the floor on ``k_theta`` when the
    allocation QP is allowed to move it.
    """

    k_theta: np.ndarray
    k_omega: np.ndarray
    k_bar: float = 1.0
    k_theta_bar: float = 1e5

    def __post_init__(self):
        object.__setattr__(self, "k_theta", np.asarray(self.k_theta, dtype=float))
        object.__setattr__(self, "k_omega", np.asarray(self.k_omega, dtype=float))
        self.validate()

    def validate(self) -> None:
        if not self.k_bar > 0:
            raise GainError(f"k_bar must be positive, got {self.k_bar!r}")
        if not self.k_theta_bar > 0:
            raise GainError(f"k_theta_bar must be positive, got {self.k_theta_bar!r}")
        if self.k_theta.shape != self.k_omega.shape:
            raise GainError("k_theta and k_omega must have the same shape")
        if np.any(~(self.k_theta > 0)):
            raise GainError("k_theta must be positive at every node")
        if np.any(~(self.k_omega >= self.k_bar)):
            raise GainError(f"k_omega must be >= k_bar={self.k_bar} at every node")

    @classmethod
    def uniform(cls, n: int, k_theta: float = 1e5, k_omega: float = 1.0,
                k_bar: float = 1.0, k_theta_bar: float | None = None) -> "GainProfile":
        return cls(np.full(n, float(k_theta)), np.full(n, float(k_omega)), k_bar,
                   k_theta if k_theta_bar is None else k_theta_bar)


def tracking_errors(state: RodState, desired: DesiredTrajectory, t: float) -> tuple[Field, Field]:
    """``(sin(theta - theta_*), omega - omega_*)`` at time t."""
    theta_star, omega_star, _ = desired.at(t)
    e_theta = np.sin(state.theta - theta_star)
    e_omega = state.omega - omega_star
    return e_theta, e_omega


def desired_input(errors, desired: DesiredTrajectory, gains: GainProfile, t: float) -> Field:
    """PD law ``accel_* - k_theta e_theta - k_omega e_omega`` (angular acceleration)."""
    gains.validate()
    e_theta, e_omega = errors
    accel = desired.accel_star(t)
    return accel - gains.k_theta * e_theta - gains.k_omega * e_omega


def proportional_only_input(errors, desired: DesiredTrajectory, gains: GainProfile, t: float) -> Field:
    """The PD law without its velocity term, for loops too slow to use rates."""
    gains.validate()
    e_theta, _ = errors
    return desired.accel_star(t) - gains.k_theta * e_theta


def tracking_integral(e_theta, e_omega, params: RodParams) -> float:
    """Trapezoidal ``int (e_theta^2 + e_omega^2) ds``."""
    return float(np.dot(params.weights(), e_theta**2 + e_omega**2))
