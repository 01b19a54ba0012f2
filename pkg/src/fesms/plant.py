"""Flywheel physics: rotor dynamics, power split, and state-of-energy.

State-of-energy (SOE) is stored energy over capacity, phi = gamma * omega^2
with gamma = 1/omega_max^2, so phi = 1 at rated speed.  The net electrical
power drawn from the unit, p_out, is the control input; positive p_out
discharges the flywheel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = [
    "FlywheelParams",
    "soe_from_omega",
    "omega_from_soe",
    "power_decomposition",
    "soe_derivative",
    "rotor_derivative",
]


@dataclass(frozen=True)
class FlywheelParams:
    """Physical constants of one flywheel unit (strict SI).

    inertia    : rotor inertia, kg m^2
    friction   : viscous friction coefficient, N m s/rad
    omega_max  : maximum admissible angular velocity, rad/s
    """

    inertia: float
    friction: float
    omega_max: float

    def __post_init__(self):
        if self.inertia <= 0:
            raise ValueError(f"inertia must be positive, got {self.inertia}")
        if self.friction <= 0:
            raise ValueError(f"friction must be positive, got {self.friction}")
        if self.omega_max <= 0:
            raise ValueError(f"omega_max must be positive, got {self.omega_max}")

    @property
    def gamma(self) -> float:
        """Inverse squared speed limit, s^2/rad^2; maps omega^2 to SOE."""
        return 1.0 / (self.omega_max * self.omega_max)

    @property
    def energy_capacity(self) -> float:
        """Kinetic energy at rated speed, J."""
        return 0.5 * self.inertia * self.omega_max * self.omega_max


def soe_from_omega(p: FlywheelParams, omega: float) -> float:
    """SOE at a given rotor speed: gamma * omega^2."""
    return p.gamma * omega * omega


def omega_from_soe(p: FlywheelParams, phi: float) -> float:
    """Rotor speed for a given SOE (nonnegative branch; spin sign unmodeled)."""
    if phi < 0:
        raise ValueError(f"SOE must be nonnegative, got {phi}")
    return math.sqrt(phi / p.gamma)


def power_decomposition(
    p: FlywheelParams, omega: float, torque: float
) -> tuple[float, float]:
    """Split total drawn power into (p_loss, p_out).

    p_loss = friction * omega^2 is dissipation, always nonnegative;
    p_out = -torque * omega is the net power delivered to the grid side.
    """
    p_loss = p.friction * omega * omega
    p_out = -torque * omega
    return p_loss, p_out


def soe_derivative(p: FlywheelParams, phi: float, p_out: float) -> float:
    """SOE rate of change under net output power p_out (the plant equation).

    d(phi)/dt = -(2 B_v / I) phi - (2 gamma / I) p_out; negative p_out
    (absorbing power) charges the unit.
    """
    return -(2.0 * p.friction / p.inertia) * phi - (2.0 * p.gamma / p.inertia) * p_out


def rotor_derivative(p: FlywheelParams, omega: float, torque: float) -> float:
    """Angular acceleration from the rotor equation I domega/dt = -B_v omega + T.

    Kept for cross-validating the SOE-space integration; the control loop
    never touches omega directly.
    """
    return (-p.friction * omega + torque) / p.inertia
