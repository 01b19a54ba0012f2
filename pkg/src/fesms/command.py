"""Reference power generation and the shared SOE trajectory.

The reference power profile comes from an autonomous linear system
(eta0' = S0 eta0, p_ref = C0 eta0).  For a given fleet there is exactly
one SOE profile psi0 that all units can ride simultaneously while their
total output matches p_ref; its dynamics are first order with
coefficients (alpha0, beta0) determined by the fleet parameters.  The
cascade of the reference generator and the psi0 equation is the "leader"
the distributed observers reconstruct.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .plant import FlywheelParams

__all__ = [
    "CommandGeneratorSpec",
    "AugmentedCommandState",
    "common_trajectory_coeffs",
    "step_reference",
    "step_augmented",
    "ideal_dispatch",
]

#: Slack on Re(lambda) when rejecting growing reference generators; purely
#: oscillatory generators sit exactly on the imaginary axis and must pass.
DEFAULT_EIGTOL = 1e-9


@dataclass(frozen=True)
class CommandGeneratorSpec:
    """Autonomous generator of the reference power signal.

    S0 is q x q, C0 is a length-q row, eta0_init the initial internal
    state.  Generators with eigenvalues in the open right half plane are
    rejected: exponentially growing references are out of scope.
    """

    S0: np.ndarray
    C0: np.ndarray
    eta0_init: np.ndarray
    eigtol: float = DEFAULT_EIGTOL

    def __post_init__(self):
        s0 = np.atleast_2d(np.array(self.S0, dtype=float))
        c0 = np.array(self.C0, dtype=float).reshape(-1)
        eta0 = np.array(self.eta0_init, dtype=float).reshape(-1)
        if s0.shape[0] != s0.shape[1]:
            raise ValueError(f"S0 must be square, got shape {s0.shape}")
        q = s0.shape[0]
        if c0.shape != (q,):
            raise ValueError(f"C0 must have length {q}, got {c0.shape}")
        if eta0.shape != (q,):
            raise ValueError(f"eta0_init must have length {q}, got {eta0.shape}")
        max_re = float(np.max(np.linalg.eigvals(s0).real))
        if max_re > self.eigtol:
            raise ValueError(
                "reference generator is unstable: max Re(eig(S0)) = "
                f"{max_re:.3e} exceeds tolerance {self.eigtol:.1e}"
            )
        for name, arr in (("S0", s0), ("C0", c0), ("eta0_init", eta0)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def q(self) -> int:
        return self.S0.shape[0]


@dataclass
class AugmentedCommandState:
    """Leader state: generator internals plus the shared SOE trajectory.

    alpha0 (1/s) and beta0 (1/J) are constants of the fleet, carried here
    because agents connected to the leader receive them as truth.
    """

    eta0: np.ndarray
    psi0: float
    alpha0: float
    beta0: float

    def __post_init__(self):
        self.eta0 = np.array(self.eta0, dtype=float).reshape(-1)
        self.psi0 = float(self.psi0)


def common_trajectory_coeffs(fleet: Sequence[FlywheelParams]) -> tuple[float, float]:
    """Coefficients (alpha0, beta0) of the shared SOE trajectory.

    alpha0 = 2 * sum(B_vi/gamma_i) / sum(I_i/gamma_i) is the fleet-level
    friction decay rate; beta0 = 2 / sum(I_i/gamma_i) converts reference
    power into SOE rate.  Note sum(I_i/gamma_i) is twice the total energy
    capacity of the fleet.
    """
    if not fleet:
        raise ValueError("fleet must not be empty")
    sum_inertia_w = sum(p.inertia / p.gamma for p in fleet)
    sum_friction_w = sum(p.friction / p.gamma for p in fleet)
    alpha0 = 2.0 * sum_friction_w / sum_inertia_w
    beta0 = 2.0 / sum_inertia_w
    return alpha0, beta0


def step_reference(
    spec: CommandGeneratorSpec, eta0: np.ndarray
) -> tuple[np.ndarray, float]:
    """Generator derivative and output: (S0 @ eta0, C0 @ eta0)."""
    eta0 = np.asarray(eta0, dtype=float).reshape(-1)
    if eta0.shape != (spec.q,):
        raise ValueError(f"eta0 must have length {spec.q}, got {eta0.shape}")
    return spec.S0 @ eta0, float(spec.C0 @ eta0)


def step_augmented(
    state: AugmentedCommandState, spec: CommandGeneratorSpec
) -> tuple[np.ndarray, float]:
    """Derivatives (d_eta0, d_psi0) of the cascaded leader.

    The generator output drives the SOE trajectory:
    psi0' = -alpha0 psi0 - beta0 p_ref.
    """
    d_eta0, p_ref = step_reference(spec, state.eta0)
    d_psi0 = -state.alpha0 * state.psi0 - state.beta0 * p_ref
    return d_eta0, d_psi0


def ideal_dispatch(
    fleet: Sequence[FlywheelParams], psi0: float, p_ref: float
) -> np.ndarray:
    """Centralized power split keeping every unit exactly on psi0.

    Each unit's share carries its energy-capacity weight of the reference
    plus a friction-redistribution term; the shares sum to p_ref
    identically.  Used as the testing oracle for the distributed law and
    by the oracle run mode.
    """
    if not fleet:
        raise ValueError("fleet must not be empty")
    sum_inertia_w = sum(p.inertia / p.gamma for p in fleet)
    sum_friction_w = sum(p.friction / p.gamma for p in fleet)
    out = np.empty(len(fleet))
    for i, p in enumerate(fleet):
        out[i] = (p.inertia / p.gamma) * (
            p_ref / sum_inertia_w
            + (sum_friction_w / sum_inertia_w) * psi0
            - (p.friction / p.inertia) * psi0
        )
    return out
