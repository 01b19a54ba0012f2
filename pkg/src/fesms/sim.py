"""Fixed-step integration of the coupled leader/fleet system.

The stacked state is one flat float64 vector: leader block (eta0, psi0)
followed by one block per agent (phi, S, C, eta, alpha, beta, psi).  The
hot loop is compiled with numba; `build_reference_rhs` provides the
same derivative assembled from the plain-Python module functions, which
the test suite uses to cross-validate the kernel.

Steps are aligned with switching instants (validated up front), so the
active graph is constant within every step and a fixed-step integrator
treats the piecewise-smooth right-hand side exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numba import njit

from . import command, controller, plant
from .command import AugmentedCommandState, CommandGeneratorSpec
from .controller import AgentState, ControllerGains, ObserverState
from .graph import SwitchingSchedule, graph_at, verify_jointly_connected
from .plant import FlywheelParams

__all__ = [
    "SimConfig",
    "SimTrace",
    "SimEvents",
    "SimulationAbort",
    "StateLayout",
    "rk4_step",
    "euler_step",
    "step",
    "build_reference_rhs",
    "run",
    "run_ideal_dispatch",
]

#: Consensus faster than ~0.2/dt per step is poorly resolved by the raw
#: gain dynamics; warn (not reject) since rk4 stays stable well past this.
GAIN_STEP_GUIDANCE = 0.2

ERROR_FAMILIES = controller.ErrorCoordinates.FAMILIES


@dataclass(frozen=True)
class SimConfig:
    """Integration settings for one run."""

    dt: float = 1e-3
    t_end: float = 400.0
    record_every: int = 1
    integrator: str = "rk4"

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.t_end <= 0:
            raise ValueError("t_end must be positive")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")
        if self.integrator not in ("rk4", "euler"):
            raise ValueError(f"unknown integrator {self.integrator!r}")


class SimulationAbort(RuntimeError):
    """Raised when the state goes non-finite mid-run.

    Carries the partial trace recorded up to the failure together with
    the offending (time, field) location.
    """

    def __init__(self, message, partial_trace, t, field_label):
        super().__init__(message)
        self.partial_trace = partial_trace
        self.t = t
        self.field_label = field_label


@dataclass(frozen=True)
class StateLayout:
    """Index map of the flat stacked state vector."""

    q: int
    n_agents: int

    @property
    def agent_block(self) -> int:
        return 1 + self.q * self.q + 2 * self.q + 3

    @property
    def dim(self) -> int:
        return self.q + 1 + self.n_agents * self.agent_block

    def agent_offset(self, i: int) -> int:
        return self.q + 1 + i * self.agent_block

    # offsets within an agent block
    def _offsets(self, i: int):
        o = self.agent_offset(i)
        q = self.q
        return {
            "phi": o,
            "S": o + 1,
            "C": o + 1 + q * q,
            "eta": o + 1 + q * q + q,
            "alpha": o + 1 + q * q + 2 * q,
            "beta": o + 1 + q * q + 2 * q + 1,
            "psi": o + 1 + q * q + 2 * q + 2,
        }

    def pack(self, leader: AugmentedCommandState, agents: Sequence[AgentState]) -> np.ndarray:
        q = self.q
        y = np.empty(self.dim)
        y[:q] = leader.eta0
        y[q] = leader.psi0
        for i, agent in enumerate(agents):
            offs = self._offsets(i)
            y[offs["phi"]] = agent.phi
            y[offs["S"]:offs["S"] + q * q] = agent.observer.S.reshape(-1)
            y[offs["C"]:offs["C"] + q] = agent.observer.C
            y[offs["eta"]:offs["eta"] + q] = agent.observer.eta
            y[offs["alpha"]] = agent.observer.alpha
            y[offs["beta"]] = agent.observer.beta
            y[offs["psi"]] = agent.observer.psi
        return y

    def unpack(
        self, y: np.ndarray, alpha0: float, beta0: float
    ) -> tuple[AugmentedCommandState, list[AgentState]]:
        q = self.q
        leader = AugmentedCommandState(y[:q].copy(), float(y[q]), alpha0, beta0)
        agents = []
        for i in range(self.n_agents):
            offs = self._offsets(i)
            obs = ObserverState(
                y[offs["S"]:offs["S"] + q * q].reshape(q, q).copy(),
                y[offs["C"]:offs["C"] + q].copy(),
                y[offs["eta"]:offs["eta"] + q].copy(),
                float(y[offs["alpha"]]),
                float(y[offs["beta"]]),
                float(y[offs["psi"]]),
            )
            agents.append(AgentState(float(y[offs["phi"]]), obs))
        return leader, agents

    def field_label(self, idx: int) -> str:
        """Human-readable name of one flat-state entry (abort diagnostics)."""
        q = self.q
        if idx < q:
            return f"leader.eta0[{idx}]"
        if idx == q:
            return "leader.psi0"
        i, rem = divmod(idx - (q + 1), self.agent_block)
        agent = f"agent[{i + 1}]"
        if rem == 0:
            return f"{agent}.phi"
        rem -= 1
        if rem < q * q:
            return f"{agent}.S[{rem // q},{rem % q}]"
        rem -= q * q
        if rem < q:
            return f"{agent}.C[{rem}]"
        rem -= q
        if rem < q:
            return f"{agent}.eta[{rem}]"
        rem -= q
        return f"{agent}.{('alpha', 'beta', 'psi')[rem]}"


# ---------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def _closed_loop_rhs(y, dy, W, S0, C0, alpha0, beta0, inertia, friction, gamma,
                     mu_S, mu_C, mu_eta, mu_alpha, mu_beta, mu_psi, kappa):
    q = S0.shape[0]
    n_agents = inertia.shape[0]

    p_ref = 0.0
    for k in range(q):
        p_ref += C0[k] * y[k]
    for r in range(q):
        acc = 0.0
        for c in range(q):
            acc += S0[r, c] * y[c]
        dy[r] = acc
    psi0 = y[q]
    dy[q] = -alpha0 * psi0 - beta0 * p_ref

    blk = 1 + q * q + 2 * q + 3
    base = q + 1
    for i in range(n_agents):
        o = base + i * blk
        o_s = o + 1
        o_c = o_s + q * q
        o_e = o_c + q
        o_a = o_e + q
        o_b = o_a + 1
        o_p = o_b + 1
        phi = y[o]
        alpha_i = y[o_a]
        beta_i = y[o_b]
        psi_i = y[o_p]

        for idx in range(q * q):
            dy[o_s + idx] = 0.0
        for idx in range(q):
            dy[o_c + idx] = 0.0
            dy[o_e + idx] = 0.0
        cons_alpha = 0.0
        cons_beta = 0.0
        cons_psi = 0.0

        row = i + 1
        a0 = W[row, 0]
        if a0 > 0.0:
            # edge from the leader supplies the true generator and trajectory
            for r in range(q):
                for c in range(q):
                    dy[o_s + r * q + c] += a0 * (S0[r, c] - y[o_s + r * q + c])
                dy[o_c + r] += a0 * (C0[r] - y[o_c + r])
                dy[o_e + r] += a0 * (y[r] - y[o_e + r])
            cons_alpha += a0 * (alpha0 - alpha_i)
            cons_beta += a0 * (beta0 - beta_i)
            cons_psi += a0 * (psi0 - psi_i)
        for j in range(n_agents):
            if j == i:
                continue
            a = W[row, j + 1]
            if a > 0.0:
                oj = base + j * blk
                oj_s = oj + 1
                oj_c = oj_s + q * q
                oj_e = oj_c + q
                for idx in range(q * q):
                    dy[o_s + idx] += a * (y[oj_s + idx] - y[o_s + idx])
                for idx in range(q):
                    dy[o_c + idx] += a * (y[oj_c + idx] - y[o_c + idx])
                    dy[o_e + idx] += a * (y[oj_e + idx] - y[o_e + idx])
                cons_alpha += a * (y[oj_e + q] - alpha_i)
                cons_beta += a * (y[oj_e + q + 1] - beta_i)
                cons_psi += a * (y[oj_e + q + 2] - psi_i)

        for idx in range(q * q):
            dy[o_s + idx] *= mu_S
        for idx in range(q):
            dy[o_c + idx] *= mu_C

        p_hat = 0.0
        for r in range(q):
            p_hat += y[o_c + r] * y[o_e + r]
        for r in range(q):
            drift = 0.0
            for c in range(q):
                drift += y[o_s + r * q + c] * y[o_e + c]
            dy[o_e + r] = mu_eta * dy[o_e + r] + drift
        dy[o_a] = mu_alpha * cons_alpha
        dy[o_b] = mu_beta * cons_beta
        dy[o_p] = -alpha_i * psi_i - beta_i * p_hat + mu_psi * cons_psi

        # local feedback, then the plant equation it feeds
        inner = (-alpha_i * psi_i - beta_i * p_hat
                 - kappa * (phi - psi_i)
                 + (2.0 * friction[i] / inertia[i]) * phi)
        p_out = -(inertia[i] / (2.0 * gamma[i])) * inner
        dy[o] = (-(2.0 * friction[i] / inertia[i]) * phi
                 - (2.0 * gamma[i] / inertia[i]) * p_out)


@njit(cache=True)
def _integrate_closed_loop(y0, dt, n_steps, record_every,
                           seg_graph, seg_steps, cyclic, w_all,
                           S0, C0, alpha0, beta0, inertia, friction, gamma,
                           mu_S, mu_C, mu_eta, mu_alpha, mu_beta, mu_psi,
                           kappa, use_euler):
    dim = y0.shape[0]
    n_samples = n_steps // record_every + 1
    out = np.empty((n_samples, dim))
    y = y0.copy()
    k1 = np.empty(dim)
    k2 = np.empty(dim)
    k3 = np.empty(dim)
    k4 = np.empty(dim)
    yt = np.empty(dim)
    out[0] = y
    rec = 1
    seg = 0
    step_in_seg = 0
    nseg = seg_graph.shape[0]
    status = 0
    bad_step = -1
    bad_index = -1
    for k in range(n_steps):
        W = w_all[seg_graph[seg]]
        _closed_loop_rhs(y, k1, W, S0, C0, alpha0, beta0, inertia, friction,
                         gamma, mu_S, mu_C, mu_eta, mu_alpha, mu_beta, mu_psi,
                         kappa)
        if use_euler:
            for idx in range(dim):
                y[idx] = y[idx] + dt * k1[idx]
        else:
            for idx in range(dim):
                yt[idx] = y[idx] + 0.5 * dt * k1[idx]
            _closed_loop_rhs(yt, k2, W, S0, C0, alpha0, beta0, inertia,
                             friction, gamma, mu_S, mu_C, mu_eta, mu_alpha,
                             mu_beta, mu_psi, kappa)
            for idx in range(dim):
                yt[idx] = y[idx] + 0.5 * dt * k2[idx]
            _closed_loop_rhs(yt, k3, W, S0, C0, alpha0, beta0, inertia,
                             friction, gamma, mu_S, mu_C, mu_eta, mu_alpha,
                             mu_beta, mu_psi, kappa)
            for idx in range(dim):
                yt[idx] = y[idx] + dt * k3[idx]
            _closed_loop_rhs(yt, k4, W, S0, C0, alpha0, beta0, inertia,
                             friction, gamma, mu_S, mu_C, mu_eta, mu_alpha,
                             mu_beta, mu_psi, kappa)
            for idx in range(dim):
                y[idx] = y[idx] + (dt / 6.0) * (
                    k1[idx] + 2.0 * k2[idx] + 2.0 * k3[idx] + k4[idx])
        ok = True
        for idx in range(dim):
            if not np.isfinite(y[idx]):
                ok = False
                bad_index = idx
                break
        if not ok:
            status = 1
            bad_step = k + 1
            break
        if (k + 1) % record_every == 0:
            out[rec] = y
            rec += 1
        step_in_seg += 1
        if step_in_seg == seg_steps[seg]:
            step_in_seg = 0
            if seg + 1 < nseg:
                seg += 1
            elif cyclic:
                seg = 0
    return out, rec, status, bad_step, bad_index


@njit(cache=True)
def _oracle_rhs(y, dy, S0, C0, alpha0, beta0, inertia, friction, gamma,
                sum_iw, sum_fw):
    q = S0.shape[0]
    n_agents = inertia.shape[0]
    p_ref = 0.0
    for k in range(q):
        p_ref += C0[k] * y[k]
    for r in range(q):
        acc = 0.0
        for c in range(q):
            acc += S0[r, c] * y[c]
        dy[r] = acc
    psi0 = y[q]
    dy[q] = -alpha0 * psi0 - beta0 * p_ref
    for i in range(n_agents):
        dispatch = (inertia[i] / gamma[i]) * (
            p_ref / sum_iw
            + (sum_fw / sum_iw) * psi0
            - (friction[i] / inertia[i]) * psi0)
        phi = y[q + 1 + i]
        dy[q + 1 + i] = (-(2.0 * friction[i] / inertia[i]) * phi
                         - (2.0 * gamma[i] / inertia[i]) * dispatch)


@njit(cache=True)
def _integrate_oracle(y0, dt, n_steps, record_every, S0, C0, alpha0, beta0,
                      inertia, friction, gamma, use_euler):
    dim = y0.shape[0]
    sum_iw = 0.0
    sum_fw = 0.0
    for i in range(inertia.shape[0]):
        sum_iw += inertia[i] / gamma[i]
        sum_fw += friction[i] / gamma[i]
    n_samples = n_steps // record_every + 1
    out = np.empty((n_samples, dim))
    y = y0.copy()
    k1 = np.empty(dim)
    k2 = np.empty(dim)
    k3 = np.empty(dim)
    k4 = np.empty(dim)
    yt = np.empty(dim)
    out[0] = y
    rec = 1
    for k in range(n_steps):
        _oracle_rhs(y, k1, S0, C0, alpha0, beta0, inertia, friction, gamma,
                    sum_iw, sum_fw)
        if use_euler:
            for idx in range(dim):
                y[idx] = y[idx] + dt * k1[idx]
        else:
            for idx in range(dim):
                yt[idx] = y[idx] + 0.5 * dt * k1[idx]
            _oracle_rhs(yt, k2, S0, C0, alpha0, beta0, inertia, friction,
                        gamma, sum_iw, sum_fw)
            for idx in range(dim):
                yt[idx] = y[idx] + 0.5 * dt * k2[idx]
            _oracle_rhs(yt, k3, S0, C0, alpha0, beta0, inertia, friction,
                        gamma, sum_iw, sum_fw)
            for idx in range(dim):
                yt[idx] = y[idx] + dt * k3[idx]
            _oracle_rhs(yt, k4, S0, C0, alpha0, beta0, inertia, friction,
                        gamma, sum_iw, sum_fw)
            for idx in range(dim):
                y[idx] = y[idx] + (dt / 6.0) * (
                    k1[idx] + 2.0 * k2[idx] + 2.0 * k3[idx] + k4[idx])
        if (k + 1) % record_every == 0:
            out[rec] = y
            rec += 1
    return out, rec


# ---------------------------------------------------------------------------
# reference (uncompiled) derivative path


def rk4_step(f: Callable, t: float, y, dt: float):
    """One classical Runge-Kutta step of y' = f(t, y)."""
    k1 = f(t, y)
    k2 = f(t + 0.5 * dt, y + 0.5 * dt * k1)
    k3 = f(t + 0.5 * dt, y + 0.5 * dt * k2)
    k4 = f(t + dt, y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def euler_step(f: Callable, t: float, y, dt: float):
    return y + dt * f(t, y)


def build_reference_rhs(scenario, graph) -> Callable[[np.ndarray], np.ndarray]:
    """Stacked derivative assembled from the plain module functions.

    Semantically identical to the compiled kernel (cross-checked in the
    test suite); used by `step` and kept as the readable definition of
    the closed loop.
    """
    spec = scenario.generator
    gains = scenario.gains
    fleet = scenario.fleet
    layout = StateLayout(spec.q, len(fleet))
    alpha0, beta0 = scenario.trajectory_coeffs()
    weights = graph.weights

    def rhs(y: np.ndarray) -> np.ndarray:
        leader, agents = layout.unpack(y, alpha0, beta0)
        d_eta0, d_psi0 = command.step_augmented(leader, spec)
        dy = np.empty(layout.dim)
        dy[:layout.q] = d_eta0
        dy[layout.q] = d_psi0
        d_agents = []
        for i, agent in enumerate(agents):
            row = weights[i + 1]
            neighbors = [(j + 1, agents[j].observer)
                         for j in range(len(agents))
                         if j != i and row[j + 1] > 0]
            d_obs = controller.observer_derivatives(
                i, agent.observer, spec, leader, neighbors, row, gains)
            p_out = controller.control_output(fleet[i], agent.phi,
                                              agent.observer, gains.kappa)
            d_phi = plant.soe_derivative(fleet[i], agent.phi, p_out)
            d_agents.append(AgentState(d_phi, d_obs))
        rest = layout.pack(
            AugmentedCommandState(d_eta0, d_psi0, 0.0, 0.0), d_agents)
        dy[layout.q + 1:] = rest[layout.q + 1:]
        return dy

    return rhs


def step(y: np.ndarray, t: float, dt: float, scenario) -> np.ndarray:
    """One integrator step of the stacked system at time t.

    The active graph is frozen at the step start (steps are aligned with
    switching instants, so this is exact).
    """
    graph = graph_at(scenario.schedule, t)
    rhs = build_reference_rhs(scenario, graph)
    f = lambda _t, state: rhs(state)
    if scenario.sim.integrator == "euler":
        return euler_step(f, t, y, dt)
    return rk4_step(f, t, y, dt)


# ---------------------------------------------------------------------------
# trace assembly


@dataclass
class SimEvents:
    switching_instants: list[float] = field(default_factory=list)
    soe_violations: list[tuple[float, int, float]] = field(default_factory=list)


@dataclass
class SimTrace:
    """Complete recorded run: leader, per-agent states, derived series."""

    kind: str
    times: np.ndarray
    eta0: np.ndarray
    psi0: np.ndarray
    p_ref: np.ndarray
    phi: np.ndarray
    p_out: np.ndarray
    p_fesms: np.ndarray
    phi_dot: np.ndarray
    S: np.ndarray | None
    C: np.ndarray | None
    eta: np.ndarray | None
    alpha: np.ndarray | None
    beta: np.ndarray | None
    psi: np.ndarray | None
    error_norms: dict[str, np.ndarray] | None
    events: SimEvents
    meta: dict

    @property
    def n_agents(self) -> int:
        return self.phi.shape[1]

    @property
    def n_samples(self) -> int:
        return self.times.shape[0]

    def error_norm_series(self, family: str) -> np.ndarray:
        """Max over agents of one error family, per sample."""
        if self.error_norms is None:
            raise ValueError("this trace carries no observer error data")
        return self.error_norms[family].max(axis=1)


def _steps_for(duration: float, dt: float, what: str, tol_factor: float = 1e-9) -> int:
    n = int(round(duration / dt))
    if n < 1 or abs(n * dt - duration) > tol_factor * dt:
        raise ValueError(
            f"dt={dt} does not divide {what} ({duration} s) within tolerance")
    return n


def _validate_grid(scenario) -> tuple[int, np.ndarray, np.ndarray]:
    """Check step/switch alignment; return (n_steps, seg_graph, seg_steps)."""
    cfg = scenario.sim
    sched = scenario.schedule
    n_steps = int(round(cfg.t_end / cfg.dt))
    if n_steps < 1 or abs(n_steps * cfg.dt - cfg.t_end) > 1e-6 * cfg.dt:
        raise ValueError(
            f"dt={cfg.dt} does not divide t_end={cfg.t_end} within tolerance")
    if n_steps % cfg.record_every != 0:
        raise ValueError(
            f"record_every={cfg.record_every} must divide the step count {n_steps}")
    seg_graph = np.array([gi for gi, _ in sched.segments], dtype=np.int64)
    seg_steps = np.array(
        [_steps_for(dur, cfg.dt, f"segment {k} duration")
         for k, (_, dur) in enumerate(sched.segments)],
        dtype=np.int64)
    if not sched.cyclic and n_steps > seg_steps.sum():
        raise ValueError(
            f"t_end={cfg.t_end} runs past the end of a non-cyclic schedule "
            f"({sched.period} s)")
    max_gain = max(scenario.gains.mu_S, scenario.gains.mu_C,
                   scenario.gains.mu_eta, scenario.gains.mu_alpha,
                   scenario.gains.mu_beta, scenario.gains.mu_psi,
                   scenario.gains.kappa)
    if max_gain * cfg.dt > GAIN_STEP_GUIDANCE:
        warnings.warn(
            f"max gain * dt = {max_gain * cfg.dt:.3g} exceeds the "
            f"{GAIN_STEP_GUIDANCE} guidance; fast consensus transients may be "
            "under-resolved", RuntimeWarning, stacklevel=3)
    return n_steps, seg_graph, seg_steps


def _collect_violations(times: np.ndarray, phi: np.ndarray) -> list[tuple[float, int, float]]:
    bad = np.nonzero((phi < 0.0) | (phi > 1.0))
    return [(float(times[m]), int(i + 1), float(phi[m, i]))
            for m, i in zip(*bad)]


def run(scenario, enforce_connectivity: bool = False,
        epsilon: float | None = None) -> SimTrace:
    """Integrate the distributed closed loop and return the full trace."""
    cfg = scenario.sim
    spec = scenario.generator
    fleet = scenario.fleet
    q = spec.q
    n_agents = len(fleet)
    layout = StateLayout(q, n_agents)
    alpha0, beta0 = scenario.trajectory_coeffs()

    if enforce_connectivity:
        eps = epsilon if epsilon is not None else 2.0 * scenario.schedule.period
        verdict = verify_jointly_connected(scenario.schedule, eps)
        if not verdict.holds:
            bad = verdict.failure
            missing = sorted(bad.missing(n_agents)) if bad else []
            raise ValueError(
                "schedule is not jointly connected (epsilon="
                f"{eps} s): window [{bad.t_start}, {bad.t_end}) reaches "
                f"{sorted(bad.reached)} but not {missing}")

    n_steps, seg_graph, seg_steps = _validate_grid(scenario)
    w_all = np.ascontiguousarray(
        np.stack([g.weights for g in scenario.schedule.graphs]))

    y0 = layout.pack(scenario.initial_leader_state(), scenario.initial_agent_states())
    g = scenario.gains
    out, rec, status, bad_step, bad_index = _integrate_closed_loop(
        y0, cfg.dt, n_steps, cfg.record_every, seg_graph, seg_steps,
        scenario.schedule.cyclic, w_all,
        np.ascontiguousarray(spec.S0), np.ascontiguousarray(spec.C0),
        alpha0, beta0,
        scenario.inertia_array(), scenario.friction_array(),
        scenario.gamma_array(),
        g.mu_S, g.mu_C, g.mu_eta, g.mu_alpha, g.mu_beta, g.mu_psi, g.kappa,
        cfg.integrator == "euler")

    trace = _assemble_closed_loop_trace(
        scenario, layout, out[:rec], alpha0, beta0, n_steps, partial=status != 0)
    if status != 0:
        t_bad = bad_step * cfg.dt
        label = layout.field_label(bad_index)
        raise SimulationAbort(
            f"non-finite state at t={t_bad:.6g} s in {label}",
            trace, t_bad, label)
    return trace


def _assemble_closed_loop_trace(scenario, layout, out, alpha0, beta0,
                                n_steps, partial=False) -> SimTrace:
    cfg = scenario.sim
    spec = scenario.generator
    q = layout.q
    n_agents = layout.n_agents
    n_rec = out.shape[0]
    times = np.arange(n_rec) * (cfg.dt * cfg.record_every)

    eta0 = out[:, :q]
    psi0 = out[:, q]
    p_ref = eta0 @ spec.C0

    def col(name, i):
        offs = layout._offsets(i)
        return offs[name]

    phi = np.stack([out[:, col("phi", i)] for i in range(n_agents)], axis=1)
    S = np.stack([out[:, col("S", i):col("S", i) + q * q].reshape(n_rec, q, q)
                  for i in range(n_agents)], axis=1)
    C = np.stack([out[:, col("C", i):col("C", i) + q]
                  for i in range(n_agents)], axis=1)
    eta = np.stack([out[:, col("eta", i):col("eta", i) + q]
                    for i in range(n_agents)], axis=1)
    alpha = np.stack([out[:, col("alpha", i)] for i in range(n_agents)], axis=1)
    beta = np.stack([out[:, col("beta", i)] for i in range(n_agents)], axis=1)
    psi = np.stack([out[:, col("psi", i)] for i in range(n_agents)], axis=1)

    inertia = scenario.inertia_array()
    friction = scenario.friction_array()
    gamma = scenario.gamma_array()
    kappa = scenario.gains.kappa

    p_hat = np.einsum("mik,mik->mi", C, eta)
    closed_rate = -alpha * psi - beta * p_hat - kappa * (phi - psi)
    p_out = -(inertia / (2.0 * gamma)) * (
        closed_rate + (2.0 * friction / inertia) * phi)
    p_fesms = p_out.sum(axis=1)
    phi_dot = closed_rate

    err = {
        "S": np.linalg.norm(S - spec.S0, axis=(2, 3)),
        "C": np.linalg.norm(C - spec.C0, axis=2),
        "eta": np.linalg.norm(eta - eta0[:, None, :], axis=2),
        "alpha": np.abs(alpha - alpha0),
        "beta": np.abs(beta - beta0),
        "psi": np.abs(psi - psi0[:, None]),
        "phi": np.abs(phi - psi0[:, None]),
        "p_ref": np.abs(p_hat - p_ref[:, None]),
    }

    events = SimEvents(
        switching_instants=scenario.schedule.switching_instants(times[-1] if n_rec else 0.0),
        soe_violations=_collect_violations(times, phi),
    )
    meta = dict(scenario.run_meta())
    meta.update({
        "kind": "closed-loop",
        "alpha0": alpha0,
        "beta0": beta0,
        "n_steps": n_steps,
        "partial": partial,
    })
    return SimTrace(
        kind="closed-loop", times=times, eta0=eta0, psi0=psi0, p_ref=p_ref,
        phi=phi, p_out=p_out, p_fesms=p_fesms, phi_dot=phi_dot,
        S=S, C=C, eta=eta, alpha=alpha, beta=beta, psi=psi,
        error_norms=err, events=events, meta=meta)


def run_ideal_dispatch(scenario) -> SimTrace:
    """Integrate the leader plus open-loop centralized dispatch.

    All units start exactly on the shared trajectory (phi_i(0) = psi0(0))
    and receive the closed-form power split; the result is the reference
    against which distributed runs are diffed.
    """
    cfg = scenario.sim
    spec = scenario.generator
    fleet = scenario.fleet
    q = spec.q
    n_agents = len(fleet)
    alpha0, beta0 = scenario.trajectory_coeffs()

    n_steps = int(round(cfg.t_end / cfg.dt))
    if n_steps < 1 or abs(n_steps * cfg.dt - cfg.t_end) > 1e-6 * cfg.dt:
        raise ValueError(
            f"dt={cfg.dt} does not divide t_end={cfg.t_end} within tolerance")
    if n_steps % cfg.record_every != 0:
        raise ValueError(
            f"record_every={cfg.record_every} must divide the step count {n_steps}")

    leader = scenario.initial_leader_state()
    y0 = np.empty(q + 1 + n_agents)
    y0[:q] = leader.eta0
    y0[q] = leader.psi0
    y0[q + 1:] = leader.psi0

    out, rec = _integrate_oracle(
        y0, cfg.dt, n_steps, cfg.record_every,
        np.ascontiguousarray(spec.S0), np.ascontiguousarray(spec.C0),
        alpha0, beta0,
        scenario.inertia_array(), scenario.friction_array(),
        scenario.gamma_array(),
        cfg.integrator == "euler")
    out = out[:rec]

    times = np.arange(rec) * (cfg.dt * cfg.record_every)
    eta0 = out[:, :q]
    psi0 = out[:, q]
    p_ref = eta0 @ spec.C0
    phi = out[:, q + 1:]

    p_out = np.stack(
        [command.ideal_dispatch(fleet, float(psi0[m]), float(p_ref[m]))
         for m in range(rec)])
    p_fesms = p_out.sum(axis=1)
    inertia = scenario.inertia_array()
    friction = scenario.friction_array()
    gamma = scenario.gamma_array()
    phi_dot = -(2.0 * friction / inertia) * phi - (2.0 * gamma / inertia) * p_out

    events = SimEvents(
        switching_instants=[],
        soe_violations=_collect_violations(times, phi),
    )
    meta = dict(scenario.run_meta())
    meta.update({
        "kind": "ideal-dispatch",
        "alpha0": alpha0,
        "beta0": beta0,
        "n_steps": n_steps,
    })
    return SimTrace(
        kind="ideal-dispatch", times=times, eta0=eta0, psi0=psi0, p_ref=p_ref,
        phi=phi, p_out=p_out, p_fesms=p_fesms, phi_dot=phi_dot,
        S=None, C=None, eta=None, alpha=None, beta=None, psi=None,
        error_norms=None, events=events, meta=meta)
