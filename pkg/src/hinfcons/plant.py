"""Plant, measurement and channel matrices plus the uncertainty budget."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .network import SwitchingNetwork, Violation, validate_network


class ModelError(ValueError):
    """A standing positivity or dimension assumption is violated."""


def _mat(a) -> np.ndarray:
    a = np.atleast_2d(np.array(a, dtype=float))
    a.setflags(write=False)
    return a


def pd_threshold(m: np.ndarray) -> float:
    return 1e-10 * max(1.0, float(np.linalg.norm(m, 2)))


def is_pd(m: np.ndarray) -> bool:
    if m.size == 0:
        return True
    if not np.allclose(m, m.T, atol=1e-12 * max(1.0, np.abs(m).max())):
        return False
    return float(np.linalg.eigvalsh(m).min()) > pd_threshold(m)


@dataclass(frozen=True, eq=False)
class PlantModel:
    A: np.ndarray
    B2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", _mat(self.A))
        object.__setattr__(self, "B2", _mat(self.B2))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def l(self) -> int:
        return self.B2.shape[1]


@dataclass(frozen=True, eq=False)
class MeasurementModel:
    """Per-(node, global state) triplets; ``C[i-1][k-1]`` is C_i^k."""

    C: tuple
    D: tuple
    Dbar: tuple

    def __post_init__(self):
        for name in ("C", "D", "Dbar"):
            rows = tuple(tuple(_mat(m) for m in per_node) for per_node in getattr(self, name))
            object.__setattr__(self, name, rows)

    @property
    def N(self) -> int:
        return len(self.C)

    @property
    def M(self) -> int:
        return len(self.C[0]) if self.C else 0

    def triplet(self, i: int, k: int):
        return self.C[i - 1][k - 1], self.D[i - 1][k - 1], self.Dbar[i - 1][k - 1]

    def r(self, i: int) -> int:
        return self.C[i - 1][0].shape[0]

    def l_i(self, i: int) -> int:
        return self.Dbar[i - 1][0].shape[1]


@dataclass(frozen=True, eq=False)
class ChannelModel:
    """State-independent channel matrices keyed by ordered pair (i, j)."""

    H: Mapping[tuple[int, int], np.ndarray]
    G: Mapping[tuple[int, int], np.ndarray]

    def __post_init__(self):
        object.__setattr__(self, "H", {tuple(e): _mat(m) for e, m in self.H.items()})
        object.__setattr__(self, "G", {tuple(e): _mat(m) for e, m in self.G.items()})

    @classmethod
    def uniform(cls, edges, H, G) -> "ChannelModel":
        return cls({e: H for e in edges}, {e: G for e in edges})

    def edges(self) -> list[tuple[int, int]]:
        return sorted(self.H)


@dataclass(frozen=True, eq=False)
class UncertaintyBudget:
    gamma2: float
    alpha: tuple[float, ...]
    delta: tuple[float, ...]
    beta: Mapping[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "delta", tuple(float(d) for d in self.delta))
        object.__setattr__(self, "beta", {tuple(e): float(b) for e, b in self.beta.items()})
        object.__setattr__(self, "gamma2", float(self.gamma2))

    @property
    def gamma(self) -> float:
        return float(np.sqrt(self.gamma2))

    def alpha_i(self, i: int) -> float:
        return self.alpha[i - 1]

    def delta_i(self, i: int) -> float:
        return self.delta[i - 1]

    def beta_ij(self, i: int, j: int) -> float:
        return self.beta.get((i, j), 0.0)

    def with_gamma2(self, gamma2: float) -> "UncertaintyBudget":
        return UncertaintyBudget(gamma2, self.alpha, self.delta, dict(self.beta))

    def violations(self) -> list[Violation]:
        out = []
        if not np.isfinite(self.gamma2) or self.gamma2 <= 0:
            out.append(Violation("budget.gamma2", "must be positive"))
        for i, a in enumerate(self.alpha, start=1):
            if a < 0:
                out.append(Violation(f"budget.alpha[{i}]", "must be nonnegative"))
        for i, d in enumerate(self.delta, start=1):
            if d <= 0:
                out.append(Violation(f"budget.delta[{i}]", "must be positive"))
        for e, b in self.beta.items():
            if b < 0:
                out.append(Violation(f"budget.beta[{e[0]},{e[1]}]", "must be nonnegative"))
        return out


def noise_shape_E(mm: MeasurementModel, i: int, k: int) -> np.ndarray:
    """E_i^k = D D' + Dbar Dbar'; raises ModelError unless positive definite."""
    _, D, Db = mm.triplet(i, k)
    E = D @ D.T + Db @ Db.T
    E = 0.5 * (E + E.T)
    if not is_pd(E):
        raise ModelError(f"E[{i},{k}] is not positive definite")
    return E


def noise_shape_F(cm: ChannelModel, i: int, j: int) -> np.ndarray:
    """F_ij = G G'; raises ModelError unless positive definite."""
    if (i, j) not in cm.G:
        raise KeyError(f"no channel modeled for edge ({i},{j})")
    G = cm.G[(i, j)]
    F = 0.5 * (G @ G.T + (G @ G.T).T)
    if not is_pd(F):
        raise ModelError(f"F[{i},{j}] is not positive definite")
    return F


@dataclass(frozen=True, eq=False)
class EstimationModel:
    """Everything the synthesis and simulation code needs, bundled."""

    plant: PlantModel
    meas: MeasurementModel
    chan: ChannelModel
    net: SwitchingNetwork

    @property
    def n(self) -> int:
        return self.plant.n

    @property
    def N(self) -> int:
        return self.net.N

    @property
    def M(self) -> int:
        return self.net.M

    def E(self, i: int, k: int) -> np.ndarray:
        return noise_shape_E(self.meas, i, k)

    def F(self, i: int, j: int) -> np.ndarray:
        return noise_shape_F(self.chan, i, j)

    def H(self, i: int, j: int) -> np.ndarray:
        return self.chan.H[(i, j)]


def validate_model(pm: PlantModel, mm: MeasurementModel, cm: ChannelModel,
                   net: SwitchingNetwork) -> list[Violation]:
    out: list[Violation] = []
    n = pm.A.shape[0]
    if pm.A.shape != (n, n):
        out.append(Violation("plant.A", f"must be square, got {pm.A.shape}"))
        return out
    if pm.B2.shape[0] != n:
        out.append(Violation("plant.B2", f"expected {n} rows, got {pm.B2.shape[0]}"))
    l = pm.B2.shape[1]
    if mm.N != net.N:
        out.append(Violation("measurements", f"expected {net.N} nodes, got {mm.N}"))
        return out
    for i in range(1, net.N + 1):
        if any(len(getattr(mm, f)[i - 1]) != net.M for f in ("C", "D", "Dbar")):
            out.append(Violation(f"measurements[{i}]", f"expected {net.M} global states"))
            continue
        r, li = mm.C[i - 1][0].shape[0], mm.Dbar[i - 1][0].shape[1]
        for k in range(1, net.M + 1):
            C, D, Db = mm.triplet(i, k)
            path = f"measurements[{i}][{k}]"
            if C.shape != (r, n):
                out.append(Violation(path + ".C", f"expected shape {(r, n)}, got {C.shape}"))
            if D.shape != (r, l):
                out.append(Violation(path + ".D", f"expected shape {(r, l)}, got {D.shape}"))
            if Db.shape != (r, li):
                out.append(Violation(path + ".Dbar", f"expected shape {(r, li)}, got {Db.shape}"))
            if D.shape[0] == Db.shape[0]:
                E = D @ D.T + Db @ Db.T
                if not is_pd(E):
                    out.append(Violation(path, "E = D D' + Dbar Dbar' is not positive definite"))
        # triplets are images of local triplets
        first: dict[int, int] = {}
        for k in range(1, net.M + 1):
            ki = net.local(i, k)
            if ki not in first:
                first[ki] = k
                continue
            k0 = first[ki]
            for a, b, nm in zip(mm.triplet(i, k0), mm.triplet(i, k), ("C", "D", "Dbar")):
                if a.shape != b.shape or not np.array_equal(a, b):
                    out.append(Violation(
                        f"measurements[{i}][{k}].{nm}",
                        f"differs from global state {k0} although both have local state {ki}"))
    for e in net.channels():
        if e not in cm.H or e not in cm.G:
            out.append(Violation(f"channels[{e[0]},{e[1]}]", "edge has no channel model"))
            continue
        H, G = cm.H[e], cm.G[e]
        if H.shape[1] != n:
            out.append(Violation(f"channels[{e[0]},{e[1]}].H", f"expected {n} columns"))
        if G.shape[0] != H.shape[0]:
            out.append(Violation(f"channels[{e[0]},{e[1]}].G", "row count must match H"))
        elif not is_pd(G @ G.T):
            out.append(Violation(f"channels[{e[0]},{e[1]}].G", "F = G G' is not positive definite"))
    return out


def validate_all(model: EstimationModel, budget: UncertaintyBudget | None = None) -> list[Violation]:
    out = validate_network(model.net)
    out += validate_model(model.plant, model.meas, model.chan, model.net)
    if budget is not None:
        if len(budget.alpha) != model.N:
            out.append(Violation("budget.alpha", f"expected {model.N} entries"))
        if len(budget.delta) != model.N:
            out.append(Violation("budget.delta", f"expected {model.N} entries"))
        chans = set(model.net.channels())
        for e in budget.beta:
            if e not in chans:
                out.append(Violation(f"budget.beta[{e[0]},{e[1]}]", "not an edge of any state"))
        out += budget.violations()
    return out
