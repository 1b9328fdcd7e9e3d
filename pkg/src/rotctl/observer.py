"""Synthetic marker observer: sparse noisy poses, angle reconstruction, and
contraction estimates from an algebraic circle fit."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .actuation import ActuatorParams
from .rod import Centerline, RodParams, reconstruct_centerline


class ObserverError(ValueError):
    pass


@dataclass(frozen=True)
class ObserverConfig:
    n_markers: int = 10
    position_noise_std: float = 0.0
    angle_noise_std: float = 0.0
    frame_rate: float = 30.0
    latency: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if int(self.n_markers) != self.n_markers or self.n_markers < 3:
            raise ObserverError(f"n_markers must be an integer >= 3, got {self.n_markers!r}")
        if self.position_noise_std < 0 or self.angle_noise_std < 0:
            raise ObserverError("position_noise_std and angle_noise_std must be >= 0")
        if not self.frame_rate > 0:
            raise ObserverError("frame_rate must be positive")
        if self.latency < 0:
            raise ObserverError("latency must be >= 0")


@dataclass
class Markers:
    s: np.ndarray
    positions: np.ndarray  # (n, 2) y, z
    angles: np.ndarray


@dataclass
class CircleFit:
    center: np.ndarray
    radius: float
    rms_residual: float
    straight: bool = False


@dataclass
class Observation:
    marker_positions: np.ndarray
    marker_angles: np.ndarray
    theta_estimate: np.ndarray
    curvature_estimate: float
    eps_estimates: np.ndarray
    capture_time: float
    fit: Optional[CircleFit] = None


def marker_arclengths(length: float, n_markers: int) -> np.ndarray:
    return np.linspace(0.0, length, n_markers)


def sample_markers(centerline: Centerline, theta, config: ObserverConfig,
                   rng: Optional[np.random.Generator] = None) -> Markers:
    """Evenly spaced markers from the true centerline, with Gaussian noise.

    Without an explicit ``rng`` a fresh generator seeded from ``config.seed`` is
    used, so repeated calls give identical output.
    """
    s_grid = centerline.s
    s = marker_arclengths(s_grid[-1], config.n_markers)
    ang = np.interp(s, s_grid, theta)
    # continue the trapezoidal tangent integral from the node below each marker,
    # so markers sit on the same curve as the grid nodes
    i = np.clip(np.searchsorted(s_grid, s, side="right") - 1, 0, len(s_grid) - 1)
    h = s - s_grid[i]
    th_i = np.asarray(theta, float)[i]
    pos = centerline.positions[i] + 0.5 * h[:, None] * np.column_stack(
        [np.sin(th_i) + np.sin(ang), np.cos(th_i) + np.cos(ang)])
    if config.position_noise_std or config.angle_noise_std:
        if rng is None:
            rng = np.random.default_rng(config.seed)
        pos = pos + rng.normal(0.0, config.position_noise_std, pos.shape)
        ang = ang + rng.normal(0.0, config.angle_noise_std, ang.shape)
    return Markers(s, pos, ang)


_PRATT_CONSTRAINT_INV = np.linalg.inv(np.array([[0.0, 0, 0, -2], [0, 1, 0, 0], [0, 0, 1, 0], [-2, 0, 0, 0]]))


def pratt_circle_fit(points, length: Optional[float] = None) -> CircleFit:
    """Algebraic circle fit with Pratt's normalization.

    Minimizes ``sum (A z + B x + C y + D)^2`` subject to ``B^2 + C^2 - 4AD = 1``
    via the generalized eigenproblem of the moment matrix, on centred and
    scaled data.  Radii above ``1e3 * length`` are flagged straight; ``length``
    defaults to the polyline length of the points.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ObserverError("points must be an (n, 2) array")
    if len(np.unique(pts, axis=0)) < 3:
        raise ObserverError("circle fit needs at least 3 distinct points")
    if length is None:
        length = float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))

    mean = pts.mean(axis=0)
    centred = pts - mean
    scale = np.sqrt(np.mean(np.sum(centred**2, axis=1)))
    u, v = (centred / scale).T
    design = np.column_stack([u * u + v * v, u, v, np.ones_like(u)])
    moments = design.T @ design / len(u)
    evals, evecs = np.linalg.eig(_PRATT_CONSTRAINT_INV @ moments)
    evals, evecs = evals.real, evecs.real
    # the minimizer is the eigenvector of the smallest non-negative eigenvalue
    candidates = np.flatnonzero(evals > -1e-10 * max(1.0, np.max(np.abs(evals))))
    k = candidates[np.argmin(evals[candidates])]
    a, b, c, d = evecs[:, k]

    if abs(a) * length / scale < 1e-12:
        return CircleFit(np.array([np.nan, np.nan]), np.inf, _line_rms(pts), straight=True)
    cu, cv = -b / (2 * a), -c / (2 * a)
    radius = np.sqrt(b * b + c * c - 4 * a * d) / (2 * abs(a)) * scale
    center = mean + scale * np.array([cu, cv])
    rms = float(np.sqrt(np.mean((np.linalg.norm(pts - center, axis=1) - radius) ** 2)))
    if radius > 1e3 * length:
        return CircleFit(center, float(radius), rms, straight=True)
    return CircleFit(center, float(radius), rms)


def _line_rms(pts) -> float:
    centred = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    return float(sv[-1] / np.sqrt(len(pts)))


def contraction_from_radius(radius: float, moment_arm: float, eps_max: float) -> float:
    """``eps = d / r`` clamped to ``[0, eps_max]``; an infinite radius gives 0."""
    if not radius > 0:
        raise ObserverError(f"radius must be positive, got {radius!r}")
    return float(np.clip(abs(moment_arm) / radius, 0.0, eps_max))


def estimate_contraction(radius: float, actuators: Sequence[ActuatorParams], bend_sign: float) -> np.ndarray:
    """Contraction of each muscle for a bend of the given radius.

    Muscles whose moment arm has the sign of the bend are on the inside and
    shorten by ``d / r``; the others are slack.
    """
    if not radius > 0:
        raise ObserverError(f"radius must be positive, got {radius!r}")
    eps = np.zeros(len(actuators))
    for j, act in enumerate(actuators):
        if bend_sign != 0 and np.sign(act.moment_arm) == np.sign(bend_sign):
            eps[j] = contraction_from_radius(radius, act.moment_arm, act.eps_max)
    return eps


def reconstruct_theta(markers: Markers, grid) -> np.ndarray:
    """Shape-preserving cubic (PCHIP) interpolation of marker angles onto the grid.

    Outside the marker span the field is held at the end values.
    """
    s, ang = np.asarray(markers.s, float), np.asarray(markers.angles, float)
    if len(s) < 2:
        raise ObserverError("need at least two markers")
    grid = np.asarray(grid, float)
    inside = np.clip(grid, s[0], s[-1])
    return PchipInterpolator(s, ang)(inside)


class Observer:
    """One seeded measurement stream per scenario."""

    def __init__(self, config: ObserverConfig, params: RodParams, actuators: Sequence[ActuatorParams]):
        self.config = config
        self.params = params
        self.actuators = tuple(actuators)
        self.rng = np.random.default_rng(config.seed)

    def observe(self, theta, capture_time: float = 0.0, centerline: Optional[Centerline] = None) -> Observation:
        if centerline is None:
            centerline = reconstruct_centerline(theta, self.params)
        markers = sample_markers(centerline, theta, self.config, self.rng)
        theta_hat = reconstruct_theta(markers, self.params.grid())
        fit = pratt_circle_fit(markers.positions, self.params.length)
        bend = np.sign(markers.angles[-1] - markers.angles[0])
        if fit.straight or bend == 0:
            kappa = 0.0
            eps = np.zeros(len(self.actuators))
        else:
            kappa = bend / fit.radius
            eps = estimate_contraction(fit.radius, self.actuators, bend)
        return Observation(markers.positions, markers.angles, theta_hat, kappa, eps, capture_time, fit)
