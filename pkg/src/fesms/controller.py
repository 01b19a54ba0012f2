"""Per-agent distributed control law.

Each agent runs a two-layer adaptive observer and a local feedback.
Layer 1 recovers the reference generator (S, C, eta, and hence the
reference power); layer 2 recovers the shared SOE trajectory
(alpha, beta, psi).  Consensus sums run over j = 0..N where j = 0 is the
leader: an agent with a positive leader-edge weight receives the true
generator and trajectory state, everyone else only sees neighbors'
estimates.  The local feedback then drives the unit's SOE onto its psi
estimate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .command import AugmentedCommandState, CommandGeneratorSpec
from .plant import FlywheelParams, soe_derivative

__all__ = [
    "ObserverState",
    "ControllerGains",
    "AgentState",
    "ErrorCoordinates",
    "observer_derivatives",
    "control_output",
    "error_coordinates",
]


@dataclass
class ObserverState:
    """One agent's estimates of the leader quantities.

    S (q x q), C (length q), eta (length q) mirror the reference
    generator; alpha, beta, psi mirror the shared-trajectory layer.
    The same container is used for derivative blocks.
    """

    S: np.ndarray
    C: np.ndarray
    eta: np.ndarray
    alpha: float
    beta: float
    psi: float

    def __post_init__(self):
        self.S = np.atleast_2d(np.array(self.S, dtype=float))
        self.C = np.array(self.C, dtype=float).reshape(-1)
        self.eta = np.array(self.eta, dtype=float).reshape(-1)
        q = self.S.shape[0]
        if self.S.shape != (q, q):
            raise ValueError(f"S must be square, got {self.S.shape}")
        if self.C.shape != (q,) or self.eta.shape != (q,):
            raise ValueError("C and eta must match the generator dimension")
        self.alpha = float(self.alpha)
        self.beta = float(self.beta)
        self.psi = float(self.psi)

    @classmethod
    def zeros(cls, q: int, psi: float = 0.0) -> "ObserverState":
        return cls(np.zeros((q, q)), np.zeros(q), np.zeros(q), 0.0, 0.0, psi)

    @property
    def q(self) -> int:
        return self.S.shape[0]

    def reference_estimate(self) -> float:
        """Estimated reference power: C @ eta."""
        return float(self.C @ self.eta)


@dataclass(frozen=True)
class ControllerGains:
    """Consensus gains (one per observer block) and the local tracking gain."""

    mu_S: float
    mu_C: float
    mu_eta: float
    mu_alpha: float
    mu_beta: float
    mu_psi: float
    kappa: float

    def __post_init__(self):
        for name in ("mu_S", "mu_C", "mu_eta", "mu_alpha", "mu_beta", "mu_psi", "kappa"):
            if getattr(self, name) <= 0:
                raise ValueError(f"gain {name} must be positive")


@dataclass
class AgentState:
    """Plant SOE plus the full observer of one agent."""

    phi: float
    observer: ObserverState


def observer_derivatives(
    i: int,
    obs: ObserverState,
    leader_spec: CommandGeneratorSpec,
    leader_state: AugmentedCommandState,
    neighbors: Sequence[tuple[int, ObserverState]],
    weights_row: np.ndarray,
    gains: ControllerGains,
) -> ObserverState:
    """Time derivatives of agent i's observer blocks.

    ``weights_row`` is row i+1 of the active adjacency: index 0 holds the
    leader-edge weight a_i0, index j the weight on neighbor j.
    ``neighbors`` lists (j, observer_j) for the follower neighbors with
    positive weight; the leader's contribution is taken from
    ``leader_state``/``leader_spec`` directly when a_i0 > 0.
    """
    q = obs.q
    if leader_spec.q != q:
        raise ValueError("observer dimension does not match the generator")
    weights_row = np.asarray(weights_row, dtype=float).reshape(-1)
    if np.any(weights_row < 0):
        raise ValueError("edge weights must be nonnegative")

    d_S = np.zeros((q, q))
    d_C = np.zeros(q)
    d_eta = np.zeros(q)
    d_alpha = 0.0
    d_beta = 0.0
    d_psi = 0.0

    def accumulate(weight, other_S, other_C, other_eta, other_alpha, other_beta, other_psi):
        nonlocal d_S, d_C, d_eta, d_alpha, d_beta, d_psi
        d_S = d_S + gains.mu_S * weight * (other_S - obs.S)
        d_C = d_C + gains.mu_C * weight * (other_C - obs.C)
        d_eta = d_eta + gains.mu_eta * weight * (other_eta - obs.eta)
        d_alpha += gains.mu_alpha * weight * (other_alpha - obs.alpha)
        d_beta += gains.mu_beta * weight * (other_beta - obs.beta)
        d_psi += gains.mu_psi * weight * (other_psi - obs.psi)

    a_i0 = weights_row[0]
    if a_i0 > 0:
        accumulate(
            a_i0,
            leader_spec.S0,
            leader_spec.C0,
            leader_state.eta0,
            leader_state.alpha0,
            leader_state.beta0,
            leader_state.psi0,
        )
    for j, other in neighbors:
        if not (1 <= j < weights_row.shape[0]):
            raise ValueError(f"neighbor index {j} out of range")
        if j - 1 == i:
            raise ValueError("an agent cannot be its own neighbor")
        if other.q != q:
            raise ValueError(f"neighbor {j} observer dimension mismatch")
        w = weights_row[j]
        if w > 0:
            accumulate(w, other.S, other.C, other.eta, other.alpha, other.beta, other.psi)

    # Drift terms: eta rides the estimated generator, psi the estimated
    # trajectory equation driven by the estimated reference.
    d_eta = d_eta + obs.S @ obs.eta
    p_ref_est = obs.reference_estimate()
    d_psi += -obs.alpha * obs.psi - obs.beta * p_ref_est

    return ObserverState(d_S, d_C, d_eta, d_alpha, d_beta, d_psi)


def control_output(
    p: FlywheelParams, phi: float, obs: ObserverState, kappa: float
) -> float:
    """Net output power commanded by the local feedback law.

    Substituted into the plant equation this cancels the open-loop terms
    and leaves d(phi)/dt = -alpha psi - beta p_ref_est - kappa (phi - psi),
    i.e. the unit chases its estimated shared trajectory.
    """
    p_ref_est = obs.reference_estimate()
    inner = (
        -obs.alpha * obs.psi
        - obs.beta * p_ref_est
        - kappa * (phi - obs.psi)
        + (2.0 * p.friction / p.inertia) * phi
    )
    return -(p.inertia / (2.0 * p.gamma)) * inner


@dataclass(frozen=True)
class ErrorCoordinates:
    """Norms of one agent's deviations from the leader truth."""

    s_err: float       # ||S_i - S0||_F
    c_err: float       # ||C_i - C0||
    eta_err: float     # ||eta_i - eta0||
    alpha_err: float   # |alpha_i - alpha0|
    beta_err: float    # |beta_i - beta0|
    psi_err: float     # |psi_i - psi0|
    phi_err: float     # |phi_i - psi0|
    p_ref_err: float   # |C_i eta_i - p_ref|

    FAMILIES = ("S", "C", "eta", "alpha", "beta", "psi", "phi", "p_ref")

    def as_tuple(self) -> tuple[float, ...]:
        return (
            self.s_err,
            self.c_err,
            self.eta_err,
            self.alpha_err,
            self.beta_err,
            self.psi_err,
            self.phi_err,
            self.p_ref_err,
        )


def error_coordinates(
    agents: Sequence[AgentState],
    leader_spec: CommandGeneratorSpec,
    leader_state: AugmentedCommandState,
) -> list[ErrorCoordinates]:
    """Per-agent error-coordinate norms at one instant."""
    p_ref = float(leader_spec.C0 @ leader_state.eta0)
    records = []
    for agent in agents:
        obs = agent.observer
        records.append(
            ErrorCoordinates(
                s_err=float(np.linalg.norm(obs.S - leader_spec.S0)),
                c_err=float(np.linalg.norm(obs.C - leader_spec.C0)),
                eta_err=float(np.linalg.norm(obs.eta - leader_state.eta0)),
                alpha_err=abs(obs.alpha - leader_state.alpha0),
                beta_err=abs(obs.beta - leader_state.beta0),
                psi_err=abs(obs.psi - leader_state.psi0),
                phi_err=abs(agent.phi - leader_state.psi0),
                p_ref_err=abs(obs.reference_estimate() - p_ref),
            )
        )
    return records


def closed_loop_soe_rate(
    p: FlywheelParams, phi: float, obs: ObserverState, kappa: float
) -> float:
    """Plant SOE rate under the control law (via the actual power command)."""
    return soe_derivative(p, phi, control_output(p, phi, obs, kappa))
