"""Fabric sPAM actuators modelled as ideal McKibben muscles."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ActuationError(ValueError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class ActuatorParams:
    """One muscle: geometry, braid angle, signed moment arm and pressure limit.

    ``a``, ``b`` and ``eps_max`` are derived from the braid angle on construction.
    """

    initial_radius: float = 0.015
    braid_angle: float = np.pi / 4
    moment_arm: float = 0.018
    p_max: float = 40e3
    a: float = field(init=False)
    b: float = field(init=False)
    eps_max: float = field(init=False)

    def __post_init__(self):
        if not 0.0 < self.braid_angle < np.pi / 2:
            raise ActuationError(f"braid_angle must lie in (0, pi/2), got {self.braid_angle!r}")
        if not self.initial_radius > 0:
            raise ActuationError(f"initial_radius must be positive, got {self.initial_radius!r}")
        if not self.p_max > 0:
            raise ActuationError(f"p_max must be positive, got {self.p_max!r}")
        if not (np.isfinite(self.moment_arm) and self.moment_arm != 0):
            raise ActuationError("moment_arm must be finite and nonzero")
        a = 3.0 / np.tan(self.braid_angle) ** 2
        b = 1.0 / np.sin(self.braid_angle) ** 2
        object.__setattr__(self, "a", float(a))
        object.__setattr__(self, "b", float(b))
        object.__setattr__(self, "eps_max", float(1.0 - np.sqrt(b / a)) if a > b else 0.0)

    @property
    def section_area(self) -> float:
        return np.pi * self.initial_radius**2


def clamp_contraction(params: ActuatorParams, eps):
    return np.clip(eps, 0.0, params.eps_max)


def ideal_force(params: ActuatorParams, pressure: float, eps):
    """Axial force ``pi r0^2 P [a (1 - eps)^2 - b]``, contraction clamped to [0, eps_max]."""
    if np.any(np.asarray(pressure) < 0):
        raise ActuationError(f"pressure must be non-negative, got {pressure!r}")
    e = clamp_contraction(params, eps)
    shape = params.a * (1.0 - e) ** 2 - params.b
    # clamping guarantees shape >= 0 up to rounding at eps_max
    return params.section_area * pressure * np.maximum(shape, 0.0)


@dataclass
class ActuatorBank:
    actuators: tuple[ActuatorParams, ...]
    pressures: np.ndarray = None

    def __post_init__(self):
        self.actuators = tuple(self.actuators)
        if not self.actuators:
            raise ActuationError("bank needs at least one actuator")
        if self.pressures is None:
            self.pressures = np.zeros(len(self.actuators))
        self.pressures = np.asarray(self.pressures, dtype=float)
        self.check_pressures(self.pressures)

    @classmethod
    def antagonistic(cls, moment_arm: float = 0.018, **kw) -> "ActuatorBank":
        """The two-muscle arm: +d and -d on either side of the backbone."""
        return cls((ActuatorParams(moment_arm=abs(moment_arm), **kw),
                    ActuatorParams(moment_arm=-abs(moment_arm), **kw)))

    @property
    def n_act(self) -> int:
        return len(self.actuators)

    @property
    def p_max(self) -> np.ndarray:
        return np.array([act.p_max for act in self.actuators])

    def check_pressures(self, pressures) -> np.ndarray:
        pressures = np.asarray(pressures, dtype=float)
        if pressures.shape != (self.n_act,):
            raise ActuationError(f"expected {self.n_act} pressures, got shape {pressures.shape}")
        for j, (p, act) in enumerate(zip(pressures, self.actuators)):
            if not (0.0 <= p <= act.p_max):
                raise ActuationError(f"actuator {j}: pressure {p!r} outside [0, {act.p_max}]", index=j)
        return pressures

    def with_pressures(self, pressures) -> "ActuatorBank":
        return ActuatorBank(self.actuators, np.array(pressures, dtype=float))


def _eps_fields(bank: ActuatorBank, eps_per_actuator, n: int) -> np.ndarray:
    """Broadcast contractions to an (n_act, N) array; scalars per actuator mean uniform."""
    eps = np.asarray(eps_per_actuator, dtype=float)
    if eps.ndim == 1:
        if eps.shape[0] != bank.n_act:
            raise ActuationError(f"expected {bank.n_act} contractions, got {eps.shape[0]}")
        eps = np.repeat(eps[:, None], n, axis=1)
    if eps.shape != (bank.n_act, n):
        raise ActuationError(f"contraction field shape {eps.shape}, expected ({bank.n_act}, {n})")
    return eps


def moment_to_pressure_matrix(bank: ActuatorBank, eps_per_actuator, grid) -> np.ndarray:
    """Matrix ``B`` (N x n_act) with ``l_c = B @ P``; column j is unit pressure on muscle j."""
    n = len(grid)
    eps = _eps_fields(bank, eps_per_actuator, n)
    B = np.empty((n, bank.n_act))
    for j, act in enumerate(bank.actuators):
        B[:, j] = ideal_force(act, 1.0, eps[j]) * act.moment_arm
    return B


def actuator_moment(bank: ActuatorBank, eps_per_actuator, grid) -> np.ndarray:
    """Distributed moment of all muscles at the bank's current pressures."""
    pressures = bank.check_pressures(bank.pressures)
    n = len(grid)
    eps = _eps_fields(bank, eps_per_actuator, n)
    l_c = np.zeros(n)
    for j, act in enumerate(bank.actuators):
        l_c += ideal_force(act, pressures[j], eps[j]) * act.moment_arm
    return l_c


def contraction_from_curvature(bank: ActuatorBank, curvature) -> np.ndarray:
    """Per-node contraction of each muscle for a bent backbone, ``eps = d kappa``.

    The muscle on the inside of the bend (moment arm with the same sign as the
    curvature) shortens; the outer one goes slack and is clamped to zero.
    """
    kappa = np.asarray(curvature, dtype=float)
    return np.stack([clamp_contraction(act, act.moment_arm * kappa) for act in bank.actuators])


def default_bank(actuators: Sequence[ActuatorParams] | None = None) -> ActuatorBank:
    return ActuatorBank(actuators) if actuators else ActuatorBank.antagonistic()
