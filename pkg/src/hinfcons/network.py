"""Switching communication/sensing topology driven by a continuous-time Markov chain.

All node and state indices exposed by this module are 1-based; arrays are
stored 0-based internally.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np


class NetworkError(ValueError):
    """Structurally malformed network data."""


@dataclass(frozen=True)
class Violation:
    field: str
    message: str

    def __str__(self) -> str:
        return f"{self.field}: {self.message}"


def _readonly(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Digraph:
    """Directed graph; ``adjacency[i, j] == 1`` iff node i+1 receives from node j+1."""

    adjacency: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.adjacency)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
            raise NetworkError(f"adjacency must be a non-empty square matrix, got shape {a.shape}")
        if not np.all((a == 0) | (a == 1)):
            raise NetworkError("adjacency entries must be 0 or 1")
        if np.any(np.diag(a) != 0):
            raise NetworkError("self-loops are not allowed")
        object.__setattr__(self, "adjacency", _readonly(a, dtype=np.int64))

    @classmethod
    def from_neighbours(cls, neighbours: Sequence[Iterable[int]]) -> "Digraph":
        """Build from per-node lists of (1-based) nodes each node receives from."""
        n = len(neighbours)
        a = np.zeros((n, n), dtype=np.int64)
        for i, nbrs in enumerate(neighbours):
            for j in nbrs:
                if not 1 <= j <= n:
                    raise NetworkError(f"node {i + 1}: neighbour {j} out of range 1..{n}")
                a[i, j - 1] = 1
        return cls(a)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    def neighbours(self, i: int) -> tuple[int, ...]:
        """Nodes that node ``i`` receives from (its neighbourhood V_i)."""
        self._check(i)
        return tuple(int(j) + 1 for j in np.flatnonzero(self.adjacency[i - 1]))

    def receivers(self, j: int) -> tuple[int, ...]:
        """Nodes that receive from node ``j``."""
        self._check(j)
        return tuple(int(i) + 1 for i in np.flatnonzero(self.adjacency[:, j - 1]))

    def _check(self, i: int) -> None:
        if not 1 <= i <= self.n_nodes:
            raise IndexError(f"node index {i} out of range 1..{self.n_nodes}")

    def is_weakly_connected(self) -> bool:
        und = (self.adjacency + self.adjacency.T) > 0
        return _reachable(und, 0).all()

    def edges(self) -> list[tuple[int, int]]:
        """Pairs (i, j) with node i receiving from node j."""
        return [(int(i) + 1, int(j) + 1) for i, j in zip(*np.nonzero(self.adjacency))]


def _reachable(adj: np.ndarray, start: int) -> np.ndarray:
    seen = np.zeros(adj.shape[0], dtype=bool)
    seen[start] = True
    stack = [start]
    while stack:
        u = stack.pop()
        for v in np.flatnonzero(adj[u]):
            if not seen[v]:
                seen[v] = True
                stack.append(int(v))
    return seen


def laplacian(g: Digraph) -> np.ndarray:
    """In-degree Laplacian ``D_in - A``; every row sums to zero."""
    a = g.adjacency.astype(float)
    return np.diag(a.sum(axis=1)) - a


def degrees(g: Digraph, i: int) -> tuple[int, int]:
    """(in-degree p_i, out-degree q_i) of node ``i``."""
    g._check(i)
    return int(g.adjacency[i - 1].sum()), int(g.adjacency[:, i - 1].sum())


@dataclass(frozen=True, eq=False)
class MarkovGenerator:
    """Transition rate matrix of a continuous-time Markov chain."""

    Lambda: np.ndarray

    def __post_init__(self):
        L = np.asarray(self.Lambda, dtype=float)
        if L.ndim != 2 or L.shape[0] != L.shape[1] or L.shape[0] == 0:
            raise NetworkError(f"Lambda must be a non-empty square matrix, got shape {L.shape}")
        off = L - np.diag(np.diag(L))
        if np.any(off < 0):
            raise NetworkError("off-diagonal transition rates must be nonnegative")
        scale = max(1.0, np.abs(L).max())
        if np.any(np.abs(L.sum(axis=1)) > 1e-12 * scale * L.shape[0]):
            raise NetworkError("each row of Lambda must sum to zero")
        object.__setattr__(self, "Lambda", _readonly(L))

    @property
    def M(self) -> int:
        return self.Lambda.shape[0]

    def rate(self, k: int) -> float:
        """Total exit rate |lambda_kk| of state ``k``."""
        return -float(self.Lambda[k - 1, k - 1])

    def is_irreducible(self) -> bool:
        adj = self.Lambda > 0
        np.fill_diagonal(adj, False)
        if not _reachable(adj, 0).all():
            return False
        return _reachable(adj.T, 0).all()


def invariant_distribution(m: MarkovGenerator) -> np.ndarray:
    """Stationary distribution lam_bar with lam_bar' Lambda = 0 and sum 1."""
    if not m.is_irreducible():
        raise NetworkError("generator is reducible; the invariant distribution is not unique")
    M = m.M
    aug = np.vstack([m.Lambda.T, np.ones((1, M))])
    rhs = np.zeros(M + 1)
    rhs[-1] = 1.0
    sol, _, rank, _ = np.linalg.lstsq(aug, rhs, rcond=None)
    if rank < M:
        raise NetworkError("augmented stationary system is rank deficient")
    sol = np.clip(sol, 0.0, None)
    return sol / sol.sum()


@dataclass(frozen=True, eq=False)
class StateMapping:
    """The table Phi: global state k -> tuple of local states (k_1, ..., k_N)."""

    local_counts: tuple[int, ...]
    phi: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.local_counts)
        phi = tuple(tuple(int(v) for v in row) for row in self.phi)
        if not phi:
            raise NetworkError("phi must list at least one global state")
        for k, row in enumerate(phi, start=1):
            if len(row) != len(counts):
                raise NetworkError(f"phi[{k}] has {len(row)} entries, expected {len(counts)}")
        object.__setattr__(self, "local_counts", counts)
        object.__setattr__(self, "phi", phi)

    @property
    def N(self) -> int:
        return len(self.local_counts)

    @property
    def M(self) -> int:
        return len(self.phi)

    def local(self, i: int, k: int) -> int:
        """Phi_i(k)."""
        return self.phi[k - 1][i - 1]

    def states_with_local(self, i: int, k_i: int) -> list[int]:
        """Global states l with Phi_i(l) == k_i."""
        return [l for l in range(1, self.M + 1) if self.phi[l - 1][i - 1] == k_i]

    def violations(self) -> list[Violation]:
        out = []
        if len(set(self.phi)) != len(self.phi):
            out.append(Violation("network.phi", "mapping is not injective (repeated N-tuples)"))
        for k, row in enumerate(self.phi, start=1):
            for i, (v, c) in enumerate(zip(row, self.local_counts), start=1):
                if not 1 <= v <= c:
                    out.append(Violation(f"network.phi[{k}]",
                                         f"node {i} local state {v} outside 1..{c}"))
        for i, c in enumerate(self.local_counts, start=1):
            used = {row[i - 1] for row in self.phi}
            missing = set(range(1, c + 1)) - used
            if missing:
                out.append(Violation("network.local_counts",
                                     f"node {i} local states {sorted(missing)} never occur"))
        return out


@dataclass(frozen=True, eq=False)
class SwitchingNetwork:
    """Graph family indexed by global state, its Markov generator and the map Phi."""

    graphs: tuple[Digraph, ...]
    generator: MarkovGenerator
    mapping: StateMapping

    def __post_init__(self):
        graphs = tuple(self.graphs)
        object.__setattr__(self, "graphs", graphs)
        if len(graphs) != self.generator.M or self.mapping.M != self.generator.M:
            raise NetworkError(
                f"inconsistent state counts: {len(graphs)} graphs, "
                f"Lambda {self.generator.M}x{self.generator.M}, phi {self.mapping.M} rows")
        sizes = {g.n_nodes for g in graphs}
        if sizes != {self.mapping.N}:
            raise NetworkError(f"graphs must all have N={self.mapping.N} nodes, got {sorted(sizes)}")

    @property
    def N(self) -> int:
        return self.mapping.N

    @property
    def M(self) -> int:
        return self.generator.M

    def graph(self, k: int) -> Digraph:
        return self.graphs[k - 1]

    def neighbours(self, i: int, k: int) -> tuple[int, ...]:
        return self.graphs[k - 1].neighbours(i)

    def receivers(self, j: int, k: int) -> tuple[int, ...]:
        return self.graphs[k - 1].receivers(j)

    def in_degree(self, i: int, k: int) -> int:
        return degrees(self.graphs[k - 1], i)[0]

    def out_degree(self, i: int, k: int) -> int:
        return degrees(self.graphs[k - 1], i)[1]

    def laplacian(self, k: int) -> np.ndarray:
        return laplacian(self.graphs[k - 1])

    def local(self, i: int, k: int) -> int:
        return self.mapping.local(i, k)

    def channels(self) -> list[tuple[int, int]]:
        """All ordered pairs (i, j) that are an edge in some global state."""
        seen = set()
        for g in self.graphs:
            seen.update(g.edges())
        return sorted(seen)

    @cached_property
    def stationary(self) -> np.ndarray:
        return invariant_distribution(self.generator)


def conditional_weights(net: SwitchingNetwork, i: int, k_i: int) -> dict[int, float]:
    """Weights lam_bar_l / sum lam_bar over the global states l with Phi_i(l) == k_i."""
    states = net.mapping.states_with_local(i, k_i)
    if not states:
        raise NetworkError(f"no global state maps node {i} to local state {k_i}")
    lam = net.stationary
    total = sum(lam[l - 1] for l in states)
    return {l: float(lam[l - 1] / total) for l in states}


@dataclass(frozen=True, eq=False)
class MarkovPath:
    """Right-continuous piecewise-constant path: ``states[j]`` holds on [times[j], times[j+1])."""

    times: np.ndarray
    states: np.ndarray
    horizon: float

    def __post_init__(self):
        object.__setattr__(self, "times", _readonly(self.times))
        object.__setattr__(self, "states", _readonly(self.states, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.states)

    def state_at(self, t: float) -> int:
        j = int(np.searchsorted(self.times, t, side="right")) - 1
        return int(self.states[max(j, 0)])

    def segments(self):
        """Yield (start, end, state) over [0, horizon]."""
        ends = np.append(self.times[1:], self.horizon)
        for a, b, s in zip(self.times, ends, self.states):
            yield float(a), float(b), int(s)

    def restrict(self, horizon: float) -> "MarkovPath":
        keep = self.times < horizon
        keep[0] = True
        return MarkovPath(self.times[keep], self.states[keep], float(horizon))

    def occupation(self, M: int) -> np.ndarray:
        occ = np.zeros(M)
        for a, b, s in self.segments():
            occ[s - 1] += b - a
        return occ / self.horizon


def sample_ctmc_path(m: MarkovGenerator, m0: int, horizon: float, rng=None) -> MarkovPath:
    """Exact-jump sample of the chain on [0, horizon] started in state ``m0``."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if not 1 <= m0 <= m.M:
        raise ValueError(f"initial state {m0} out of range 1..{m.M}")
    rng = np.random.default_rng(rng)
    L = m.Lambda
    times, states = [0.0], [m0]
    t, k = 0.0, m0
    while True:
        rate = -L[k - 1, k - 1]
        if rate <= 0:
            break
        t += rng.exponential(1.0 / rate)
        if t >= horizon:
            break
        probs = np.clip(L[k - 1], 0.0, None)
        probs[k - 1] = 0.0
        k = int(rng.choice(m.M, p=probs / probs.sum())) + 1
        times.append(t)
        states.append(k)
    return MarkovPath(np.array(times), np.array(states), float(horizon))


def local_path(net: SwitchingNetwork, path: MarkovPath, i: int) -> MarkovPath:
    """Pointwise image of a global path under Phi_i, with repeated segments merged."""
    loc = [net.local(i, int(s)) for s in path.states]
    times, states = [], []
    for t, s in zip(path.times, loc):
        if states and states[-1] == s:
            continue
        times.append(float(t))
        states.append(s)
    return MarkovPath(np.array(times), np.array(states), path.horizon)


def validate_network(net: SwitchingNetwork) -> list[Violation]:
    """Connectivity, injectivity of Phi and local-state/neighbourhood consistency."""
    out = list(net.mapping.violations())
    for k in range(1, net.M + 1):
        if not net.graph(k).is_weakly_connected():
            out.append(Violation(f"network.adjacency[{k}]",
                                 f"graph of global state {k} is not weakly connected"))
    for i in range(1, net.N + 1):
        seen: dict[int, tuple[int, tuple[int, ...]]] = {}
        for k in range(1, net.M + 1):
            ki = net.local(i, k)
            nb = net.neighbours(i, k)
            if ki in seen and seen[ki][1] != nb:
                out.append(Violation(
                    f"network.adjacency[{k}]",
                    f"node {i} has neighbourhood {list(nb)} in state {k} but "
                    f"{list(seen[ki][1])} in state {seen[ki][0]}, with the same local state {ki}"))
            seen.setdefault(ki, (k, nb))
    return out
