"""JSON problem descriptions.

Any matrix field may be a nested list or the name of an entry in the
top-level ``matrices`` table.  Nodes and states are 1-based; edge keys are
strings ``"i,j"`` meaning node i receives from node j.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import Digraph, MarkovGenerator, StateMapping, SwitchingNetwork, NetworkError, validate_network
from .plant import (ChannelModel, EstimationModel, MeasurementModel, ModelError, PlantModel,
                    UncertaintyBudget, validate_all)
from .sdp import SolverOptions
from .simulator import DisturbanceSet, DisturbanceSpec


class ConfigError(ValueError):
    """Malformed configuration; ``path`` locates the offending field."""

    def __init__(self, path: str, message: str, violations=None):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message
        self.violations = list(violations) if violations else [(path, message)]


@dataclass
class SimulationOptions:
    horizon: float = 20.0
    step: float = 1e-3
    seed: int = 0
    runs: int = 10
    m0: int = 1
    x0: list = field(default_factory=lambda: [1.0])
    mode: str = "local"
    record_every: float = 0.01
    battery: list = field(default_factory=list)   # (x0, DisturbanceSet) pairs
    disturbances: DisturbanceSet = field(default_factory=DisturbanceSet)


@dataclass
class ProblemConfig:
    model: EstimationModel
    budget: UncertaintyBudget
    solver: SolverOptions
    simulation: SimulationOptions
    raw: dict

    @property
    def net(self) -> SwitchingNetwork:
        return self.model.net


class _Reader:
    def __init__(self, raw: dict):
        self.raw = raw
        self.lib = raw.get("matrices", {}) or {}

    def get(self, d: dict, key: str, path: str, default=...):
        if not isinstance(d, dict):
            raise ConfigError(path, "expected an object")
        if key not in d:
            if default is ...:
                raise ConfigError(f"{path}.{key}" if path else key, "missing field")
            return default
        return d[key]

    def matrix(self, v, path: str, ndim: int = 2) -> np.ndarray:
        if isinstance(v, str):
            if v not in self.lib:
                raise ConfigError(path, f"unknown matrix name {v!r}")
            v = self.lib[v]
        try:
            a = np.array(v, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError(path, "not a numeric array") from None
        if a.ndim == 0:
            a = a.reshape(1, 1)
        if ndim == 2 and a.ndim == 1:
            a = a.reshape(1, -1)
        if a.ndim != ndim:
            raise ConfigError(path, f"expected a {ndim}-d array")
        if not np.all(np.isfinite(a)):
            raise ConfigError(path, "non-finite entries")
        return a

    def number(self, v, path: str, positive: bool = False) -> float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(path, "expected a number")
        if positive and v <= 0:
            raise ConfigError(path, "must be positive")
        return float(v)


def _edge_key(s: str, path: str) -> tuple[int, int]:
    try:
        i, j = (int(x) for x in str(s).split(","))
    except ValueError:
        raise ConfigError(path, f"edge key {s!r} is not of the form 'i,j'") from None
    return i, j


def _depth(v) -> int:
    """List nesting depth along first elements; a name counts as a 2-d matrix."""
    d = 0
    while isinstance(v, list) and v:
        v = v[0]
        d += 1
    return d + 2 if isinstance(v, str) else d


def _per_node_state(rd: _Reader, v, N: int, M: int, path: str) -> list:
    """Matrix table indexed [node][state].

    Accepted forms: one matrix for everything (a name, or a list of numeric
    rows); or a list of N node entries, each a matrix name, a 2-d matrix, or
    a list of M per-state matrices (names or 2-d lists).
    """
    if isinstance(v, str) or _depth(v) <= 2:
        m = rd.matrix(v, path)
        return [[m] * M for _ in range(N)]
    if not isinstance(v, list) or len(v) != N:
        raise ConfigError(path, f"expected {N} node entries")
    out = []
    for i, row in enumerate(v):
        p = f"{path}[{i}]"
        if isinstance(row, list) and all(isinstance(x, str) or _depth(x) == 2 for x in row):
            if len(row) != M:
                raise ConfigError(p, f"expected {M} per-state matrices")
            out.append([rd.matrix(x, f"{p}[{k}]") for k, x in enumerate(row)])
        else:
            m = rd.matrix(row, p)
            out.append([m] * M)
    return out


def _spec(rd: _Reader, d, path: str) -> DisturbanceSpec:
    if d is None or d == "zero":
        return DisturbanceSpec()
    if not isinstance(d, dict):
        raise ConfigError(path, "expected a disturbance object")
    kind = rd.get(d, "kind", path)
    try:
        if kind == "damped-sine":
            def tup(x):
                return tuple(x) if isinstance(x, list) else x
            return DisturbanceSpec("damped-sine", a=tup(d.get("a", 0.0)), phi=tup(d.get("phi", 0.0)),
                                   b=tup(rd.get(d, "b", path)), amp=tup(d.get("amp", 1.0)))
        if kind == "custom":
            return DisturbanceSpec("custom", times=tuple(rd.get(d, "times", path)),
                                   values=tuple(map(tuple, np.atleast_2d(np.array(rd.get(d, "values", path),
                                                                                  dtype=float).T).T)))
        if kind == "random-pc":
            return DisturbanceSpec("random-pc", b=d.get("b", 1.0), amp=d.get("amp", 1.0), dt=d.get("dt", 0.1))
        if kind == "zero":
            return DisturbanceSpec()
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None
    raise ConfigError(f"{path}.kind", f"unknown disturbance kind {kind!r}")


def _disturbances(rd: _Reader, d: dict, model: EstimationModel, path: str) -> DisturbanceSet:
    if d is None:
        return DisturbanceSet()
    xi = _spec(rd, d.get("xi"), f"{path}.xi")
    xi_i = {}
    v = d.get("xi_i")
    if isinstance(v, dict) and "kind" not in v:
        for key, s in v.items():
            xi_i[int(key)] = _spec(rd, s, f"{path}.xi_i.{key}")
    elif v is not None:
        s = _spec(rd, v, f"{path}.xi_i")
        xi_i = {i: s for i in range(1, model.N + 1)}
    w = {}
    v = d.get("w")
    if isinstance(v, dict) and "kind" not in v:
        for key, s in v.items():
            w[_edge_key(key, f"{path}.w")] = _spec(rd, s, f"{path}.w.{key}")
    elif v is not None:
        s = _spec(rd, v, f"{path}.w")
        w = {e: s for e in model.net.channels()}
    return DisturbanceSet(xi, xi_i, w, bool(d.get("symmetric_w", False)))


def parse_config(raw: dict) -> ProblemConfig:
    """Parse a config dict; ConfigError on malformed fields or failed validation."""
    if not isinstance(raw, dict):
        raise ConfigError("", "top level must be an object")
    rd = _Reader(raw)

    pl = rd.get(raw, "plant", "")
    A = rd.matrix(rd.get(pl, "A", "plant"), "plant.A")
    B2 = rd.matrix(rd.get(pl, "B2", "plant"), "plant.B2")
    if B2.shape[0] != A.shape[0] and B2.shape[1] == A.shape[0]:
        B2 = B2.T
    try:
        plant = PlantModel(A, B2)
    except (ModelError, ValueError) as exc:
        raise ConfigError("plant", str(exc)) from None

    nw = rd.get(raw, "network", "")
    Lam = rd.matrix(rd.get(nw, "Lambda", "network"), "network.Lambda")
    M = Lam.shape[0]
    if "neighbours" in nw:
        nbs = nw["neighbours"]
        if not isinstance(nbs, list) or len(nbs) != M:
            raise ConfigError("network.neighbours", f"expected one neighbour list per state ({M})")
        graphs = []
        for k, lst in enumerate(nbs):
            try:
                graphs.append(Digraph.from_neighbours(lst))
            except (NetworkError, ValueError, TypeError) as exc:
                raise ConfigError(f"network.neighbours[{k}]", str(exc)) from None
    elif "adjacency" in nw:
        adj = nw["adjacency"]
        if not isinstance(adj, list) or len(adj) != M:
            raise ConfigError("network.adjacency", f"expected one adjacency matrix per state ({M})")
        graphs = []
        for k, a in enumerate(adj):
            try:
                graphs.append(Digraph(rd.matrix(a, f"network.adjacency[{k}]")))
            except NetworkError as exc:
                raise ConfigError(f"network.adjacency[{k}]", str(exc)) from None
    else:
        raise ConfigError("network.adjacency", "missing field (or give network.neighbours)")
    N = graphs[0].n_nodes
    if "N" in nw and nw["N"] != N:
        raise ConfigError("network.N", f"declared {nw['N']} nodes but graphs have {N}")
    if "M" in nw and nw["M"] != M:
        raise ConfigError("network.M", f"declared {nw['M']} states but Lambda is {M}x{M}")
    phi = rd.get(nw, "phi", "network")
    if not isinstance(phi, list) or len(phi) != M:
        raise ConfigError("network.phi", f"expected one local-state tuple per global state ({M})")
    for k, row in enumerate(phi):
        if not isinstance(row, list) or len(row) != N:
            raise ConfigError(f"network.phi[{k}]", f"expected {N} local states")
    phi_t = tuple(tuple(int(x) for x in row) for row in phi)
    counts = nw.get("local_counts")
    if counts is None:
        counts = [max(row[i] for row in phi_t) for i in range(N)]
    try:
        gen = MarkovGenerator(Lam)
    except NetworkError as exc:
        raise ConfigError("network.Lambda", str(exc)) from None
    try:
        net = SwitchingNetwork(tuple(graphs), gen, StateMapping(tuple(counts), phi_t))
    except NetworkError as exc:
        raise ConfigError("network", str(exc)) from None
    bad = validate_network(net)
    if bad:
        raise ConfigError(bad[0].field, bad[0].message, [(v.field, v.message) for v in bad])

    ms = rd.get(raw, "measurements", "")
    C = _per_node_state(rd, rd.get(ms, "C", "measurements"), N, M, "measurements.C")
    D = _per_node_state(rd, ms.get("D", [[0.0]]), N, M, "measurements.D")
    Db = _per_node_state(rd, rd.get(ms, "Dbar", "measurements"), N, M, "measurements.Dbar")
    try:
        meas = MeasurementModel(C, D, Db)
    except (ModelError, ValueError) as exc:
        raise ConfigError("measurements", str(exc)) from None

    ch = rd.get(raw, "channels", "")
    H, G = {}, {}
    for name, store in (("H", H), ("G", G)):
        v = rd.get(ch, name, "channels")
        if isinstance(v, dict):
            for key, m in v.items():
                store[_edge_key(key, f"channels.{name}")] = rd.matrix(m, f"channels.{name}.{key}")
            missing = [e for e in net.channels() if e not in store]
            if missing:
                i, j = missing[0]
                raise ConfigError(f"channels.{name}", f"no matrix for edge {i},{j}")
        else:
            m = rd.matrix(v, f"channels.{name}")
            store.update({e: m for e in net.channels()})
    chan = ChannelModel(H, G)

    bd = rd.get(raw, "budget", "")
    gamma2 = rd.number(rd.get(bd, "gamma2", "budget"), "budget.gamma2", positive=True)
    alpha = bd.get("alpha", [0.0] * N)
    delta = rd.get(bd, "delta", "budget")
    if isinstance(delta, (int, float)):
        delta = [delta] * N
    for name, v in (("alpha", alpha), ("delta", delta)):
        if not isinstance(v, list) or len(v) != N:
            raise ConfigError(f"budget.{name}", f"expected {N} values")
    beta = {}
    for key, v in (bd.get("beta") or {}).items():
        beta[_edge_key(key, "budget.beta")] = rd.number(v, f"budget.beta.{key}")
    budget = UncertaintyBudget(gamma2, tuple(float(a) for a in alpha), tuple(float(x) for x in delta), beta)

    model = EstimationModel(plant, meas, chan, net)
    bad = validate_all(model, budget)
    if bad:
        raise ConfigError(bad[0].field, bad[0].message, [(v.field, v.message) for v in bad])

    so = raw.get("solver") or {}
    known = set(SolverOptions.__dataclass_fields__)
    for key in so:
        if key not in known:
            raise ConfigError(f"solver.{key}", "unknown solver option")
    solver = SolverOptions(**so)

    sm = raw.get("simulation") or {}
    sim = SimulationOptions()
    for key in ("horizon", "step", "record_every"):
        if key in sm:
            setattr(sim, key, rd.number(sm[key], f"simulation.{key}", positive=True))
    for key in ("seed", "runs", "m0"):
        if key in sm:
            if not isinstance(sm[key], int) or isinstance(sm[key], bool):
                raise ConfigError(f"simulation.{key}", "expected an integer")
            setattr(sim, key, sm[key])
    if not 1 <= sim.m0 <= M:
        raise ConfigError("simulation.m0", f"initial state must be in 1..{M}")
    if "mode" in sm:
        if sm["mode"] not in ("local", "global"):
            raise ConfigError("simulation.mode", "expected 'local' or 'global'")
        sim.mode = sm["mode"]
    n = plant.n
    sim.x0 = list(rd.matrix(sm.get("x0", [1.0] * n), "simulation.x0", ndim=1))
    if len(sim.x0) != n:
        raise ConfigError("simulation.x0", f"expected {n} entries")
    sim.disturbances = _disturbances(rd, sm.get("disturbances"), model, "simulation.disturbances")
    for c, case in enumerate(sm.get("battery", [])):
        p = f"simulation.battery[{c}]"
        x0 = rd.matrix(case.get("x0", sim.x0), f"{p}.x0", ndim=1)
        if len(x0) != n:
            raise ConfigError(f"{p}.x0", f"expected {n} entries")
        sim.battery.append((x0, _disturbances(rd, case, model, p)))
    return ProblemConfig(model, budget, solver, sim, raw)


def load_config(path) -> ProblemConfig:
    """Read and parse a JSON config; JSON syntax errors carry line and column."""
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno} column {exc.colno}", exc.msg) from None
    return parse_config(raw)
