"""Weighted switching digraphs for the fleet communication network.

Node 0 is the command generator (leader); nodes 1..N are the flywheel
agents.  The weight convention follows the receiver's point of view:
``weights[i][j] = a_ij`` is the weight of edge j -> i, i.e. how strongly
node i listens to node j.  Row 0 is always zero because the leader never
receives anything.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "WeightedDigraph",
    "SwitchingSchedule",
    "ConnectivityWindow",
    "ConnectivityVerdict",
    "laplacian",
    "h_matrix",
    "union",
    "reachable_from_zero",
    "verify_jointly_connected",
    "graph_at",
]


@dataclass(frozen=True)
class WeightedDigraph:
    """Weighted adjacency over the leader-plus-followers node set.

    ``weights`` is an (n_nodes, n_nodes) nonnegative matrix with zero
    diagonal and a zero first row (node 0 has no incoming edges).
    """

    n_nodes: int
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"weights must be square, got shape {w.shape}")
        if w.shape[0] != self.n_nodes:
            raise ValueError(
                f"weights shape {w.shape} does not match n_nodes={self.n_nodes}"
            )
        if self.n_nodes < 1:
            raise ValueError("need at least the leader node")
        if np.any(w < 0):
            raise ValueError("edge weights must be nonnegative")
        if np.any(np.diag(w) != 0):
            raise ValueError("self-loops are not allowed (diagonal must be zero)")
        if np.any(w[0, :] != 0):
            raise ValueError("row 0 must be zero: the leader receives from no one")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_edges(
        cls, n_nodes: int, edges: Iterable[tuple[int, int, float]]
    ) -> "WeightedDigraph":
        """Build from (src, dst, weight) triples; dst receives from src."""
        w = np.zeros((n_nodes, n_nodes))
        for src, dst, weight in edges:
            if not (0 <= src < n_nodes and 0 <= dst < n_nodes):
                raise ValueError(f"edge ({src}, {dst}) out of range for {n_nodes} nodes")
            w[dst, src] += weight
        return cls(n_nodes, w)

    @classmethod
    def edgeless(cls, n_nodes: int) -> "WeightedDigraph":
        return cls(n_nodes, np.zeros((n_nodes, n_nodes)))

    @property
    def n_followers(self) -> int:
        return self.n_nodes - 1

    def edge_set(self) -> set[tuple[int, int]]:
        """Set of (src, dst) pairs with positive weight."""
        dst, src = np.nonzero(self.weights)
        return set(zip(src.tolist(), dst.tolist()))

    def successors(self, node: int) -> list[int]:
        """Nodes that receive directly from ``node``."""
        return np.nonzero(self.weights[:, node])[0].tolist()


def laplacian(g: WeightedDigraph, restrict_to_followers: bool = True) -> np.ndarray:
    """Graph Laplacian: diagonal holds row sums of weights, off-diagonal -a_ij.

    With ``restrict_to_followers`` (the default) only the follower
    subgraph (nodes 1..N) enters, which is the matrix the control law
    uses.  Every row sums to zero either way.
    """
    w = g.weights[1:, 1:] if restrict_to_followers else g.weights
    lap = -np.array(w)
    np.fill_diagonal(lap, w.sum(axis=1))
    return lap


def h_matrix(g: WeightedDigraph) -> np.ndarray:
    """Follower Laplacian plus the diagonal of leader-edge weights a_i0.

    The consensus coupling of every observer equation acts as -H on the
    stacked follower errors; H having eigenvalues with positive real
    parts is what connectivity buys.
    """
    return laplacian(g, restrict_to_followers=True) + np.diag(g.weights[1:, 0])


def union(gs: Sequence[WeightedDigraph]) -> WeightedDigraph:
    """Union of graphs over the same node set; weights are summed.

    Summation preserves the united edge set (any positive aggregate
    would) and keeps the operation associative.
    """
    if not gs:
        raise ValueError("union of an empty graph list is undefined")
    n = gs[0].n_nodes
    for g in gs[1:]:
        if g.n_nodes != n:
            raise ValueError(
                f"cannot union graphs with different node counts ({g.n_nodes} != {n})"
            )
    total = np.zeros((n, n))
    for g in gs:
        total += g.weights
    return WeightedDigraph(n, total)


def reachable_from_zero(g: WeightedDigraph) -> set[int]:
    """Follower nodes reachable from node 0 by a directed path (BFS)."""
    seen = {0}
    queue = deque([0])
    while queue:
        node = queue.popleft()
        for nxt in g.successors(node):
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    seen.discard(0)
    return seen


@dataclass(frozen=True)
class SwitchingSchedule:
    """Piecewise-constant graph schedule with a dwell time.

    ``segments`` is an ordered list of (graph_index, duration_s); with
    ``cyclic`` the segment list repeats forever.
    """

    graphs: tuple[WeightedDigraph, ...]
    segments: tuple[tuple[int, float], ...]
    dwell_time: float
    cyclic: bool = True

    def __post_init__(self):
        object.__setattr__(self, "graphs", tuple(self.graphs))
        object.__setattr__(
            self, "segments", tuple((int(i), float(d)) for i, d in self.segments)
        )
        if self.dwell_time <= 0:
            raise ValueError("dwell_time must be positive")
        if not self.graphs:
            raise ValueError("schedule needs at least one graph")
        if not self.segments:
            raise ValueError("schedule needs at least one segment")
        n = self.graphs[0].n_nodes
        for g in self.graphs:
            if g.n_nodes != n:
                raise ValueError("all graphs in a schedule must share one node set")
        for k, (gi, dur) in enumerate(self.segments):
            if not (0 <= gi < len(self.graphs)):
                raise ValueError(f"segments[{k}]: graph index {gi} out of range")
            if dur < self.dwell_time:
                raise ValueError(
                    f"segments[{k}]: duration {dur} shorter than dwell time "
                    f"{self.dwell_time}"
                )

    @property
    def n_nodes(self) -> int:
        return self.graphs[0].n_nodes

    @property
    def period(self) -> float:
        return float(sum(d for _, d in self.segments))

    def segment_starts(self) -> np.ndarray:
        """Start times of the segments within one pass of the list."""
        durs = np.array([d for _, d in self.segments])
        return np.concatenate([[0.0], np.cumsum(durs)[:-1]])

    def switching_instants(self, t_end: float) -> list[float]:
        """All switching instants in (0, t_end], including cyclic repeats."""
        instants = []
        t = 0.0
        k = 0
        nseg = len(self.segments)
        while True:
            t += self.segments[k % nseg][1]
            if t > t_end or (not self.cyclic and k + 1 >= nseg):
                break
            instants.append(t)
            k += 1
        return instants


def graph_at(s: SwitchingSchedule, t: float) -> WeightedDigraph:
    """Active graph at time t; right-continuous at switching instants."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    period = s.period
    if s.cyclic:
        t = t % period
    elif t >= period:
        raise ValueError(f"t={t} is past the end ({period}) of a non-cyclic schedule")
    acc = 0.0
    for gi, dur in s.segments:
        acc += dur
        if t < acc:
            return s.graphs[gi]
    return s.graphs[s.segments[-1][0]]  # t == period on a cyclic boundary


@dataclass(frozen=True)
class ConnectivityWindow:
    """One window of the greedy covering used by the connectivity check."""

    t_start: float
    t_end: float
    segment_indices: tuple[int, ...]
    reached: frozenset[int]
    connected: bool

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    def missing(self, n_followers: int) -> set[int]:
        return set(range(1, n_followers + 1)) - set(self.reached)


@dataclass(frozen=True)
class ConnectivityVerdict:
    holds: bool
    windows: tuple[ConnectivityWindow, ...]
    failure: ConnectivityWindow | None = None
    epsilon: float = field(default=0.0)

    def __bool__(self) -> bool:
        return self.holds


def verify_jointly_connected(
    s: SwitchingSchedule, epsilon: float
) -> ConnectivityVerdict:
    """Check joint connectivity by greedy windowing of the segment stream.

    Each window extends over consecutive segments until the union of its
    graphs makes every follower reachable from node 0; the window must
    close with total span strictly below epsilon.  Greedy success is an
    existential witness for the bounded-window condition.  Cyclic
    schedules terminate once a window start re-visits a segment offset
    seen before (the covering repeats from there on).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    n_followers = s.n_nodes - 1
    all_followers = set(range(1, n_followers + 1))
    nseg = len(s.segments)

    windows: list[ConnectivityWindow] = []
    seen_starts: set[int] = set()
    pos = 0  # absolute segment index in the (possibly unrolled) stream
    t = 0.0

    while True:
        offset = pos % nseg
        if s.cyclic:
            if offset in seen_starts and windows:
                return ConnectivityVerdict(True, tuple(windows), None, epsilon)
            seen_starts.add(offset)

        t_start = t
        members: list[int] = []
        acc: list[WeightedDigraph] = []
        reached: set[int] = set()
        connected = False
        while True:
            if not s.cyclic and pos >= nseg:
                break  # segments exhausted mid-window
            gi, dur = s.segments[pos % nseg]
            members.append(pos % nseg)
            acc.append(s.graphs[gi])
            t += dur
            pos += 1
            reached = reachable_from_zero(union(acc))
            if reached == all_followers:
                connected = True
                break
            if t - t_start >= epsilon:
                break

        window = ConnectivityWindow(
            t_start, t, tuple(members), frozenset(reached), connected
        )
        if not connected or window.duration >= epsilon:
            bad = ConnectivityWindow(
                t_start, t, tuple(members), frozenset(reached), connected
            )
            return ConnectivityVerdict(False, tuple(windows), bad, epsilon)
        windows.append(window)
        if not s.cyclic and pos >= nseg:
            return ConnectivityVerdict(True, tuple(windows), None, epsilon)
