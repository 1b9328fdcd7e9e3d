"""Planar soft-rod shape control: Kirchhoff rod dynamics, McKibben actuation,
distributed PD tracking and per-step QP allocation of actuator pressures."""

from .actuation import (ActuatorBank, ActuatorParams, actuator_moment, ideal_force,
                        moment_to_pressure_matrix)
from .control import (DesiredTrajectory, GainProfile, desired_input, proportional_only_input,
                      tracking_errors)
from .observer import (Observation, Observer, ObserverConfig, estimate_contraction, pratt_circle_fit,
                       reconstruct_theta, sample_markers)
from .qp import AllocationProblem, AllocationSolution, build_problem, kkt_report, solve
from .rod import (Centerline, RodParams, RodState, dynamics_rhs, elastic_energy, gravity_torque,
                  reconstruct_centerline)
from .sim import Scenario, SimConfig, SimResult, convergence_metrics, run_closed_loop, step

__version__ = "0.1.0"
