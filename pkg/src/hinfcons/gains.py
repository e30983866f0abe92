"""Observer gains from LMI solutions, their local averages and post-solve checks."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .lmi import (LmiProblem, LmiSolution, build_global_problem, build_robust_problem,
                  build_local_problem, constant_delta_violations, xname, yname)
from .network import SwitchingNetwork, conditional_weights
from .plant import EstimationModel, UncertaintyBudget
from .sdp import (FEASIBLE, INFEASIBLE, FeasibilityReport, SolverOptions, solve_feasibility,
                  solve_rank_constrained)

log = logging.getLogger(__name__)

XY_WARN = 1e-4


@dataclass
class GainSet:
    """Global gains keyed by (i, k) / (i, j, k); local gains by (i, k_i) / (i, j, k_i)."""

    L: dict
    K: dict
    gamma2: float
    P: np.ndarray | None = None
    m0: int = 1
    L_local: dict = field(default_factory=dict)
    K_local: dict = field(default_factory=dict)
    dev_L: dict = field(default_factory=dict)
    dev_K: dict = field(default_factory=dict)
    xy_residual: float | None = None
    source: str = ""

    @property
    def has_local(self) -> bool:
        return bool(self.L_local)

    # -- serialization (floats are written with repr, so the round trip is exact)
    def to_dict(self) -> dict:
        def mat(m):
            return np.asarray(m, dtype=float).tolist()
        d = {
            "source": self.source,
            "gamma2": self.gamma2,
            "m0": self.m0,
            "P": None if self.P is None else mat(self.P),
            "xy_residual": self.xy_residual,
            "global": {
                "L": [{"node": i, "state": k, "matrix": mat(v)} for (i, k), v in sorted(self.L.items())],
                "K": [{"node": i, "neighbour": j, "state": k, "matrix": mat(v)}
                      for (i, j, k), v in sorted(self.K.items())],
            },
        }
        if self.has_local:
            d["local"] = {
                "L": [{"node": i, "local_state": k, "matrix": mat(v)}
                      for (i, k), v in sorted(self.L_local.items())],
                "K": [{"node": i, "neighbour": j, "local_state": k, "matrix": mat(v)}
                      for (i, j, k), v in sorted(self.K_local.items())],
            }
            d["deviations"] = {
                "norm": "spectral",
                "L": [{"node": i, "state": k, "value": v} for (i, k), v in sorted(self.dev_L.items())],
                "K": [{"node": i, "neighbour": j, "state": k, "value": v}
                      for (i, j, k), v in sorted(self.dev_K.items())],
            }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "GainSet":
        def arr(m):
            return np.array(m, dtype=float)
        g = d["global"]
        gs = cls(
            L={(e["node"], e["state"]): arr(e["matrix"]) for e in g["L"]},
            K={(e["node"], e["neighbour"], e["state"]): arr(e["matrix"]) for e in g["K"]},
            gamma2=float(d["gamma2"]),
            P=None if d.get("P") is None else arr(d["P"]),
            m0=int(d.get("m0", 1)),
            xy_residual=d.get("xy_residual"),
            source=d.get("source", ""),
        )
        if "local" in d:
            gs.L_local = {(e["node"], e["local_state"]): arr(e["matrix"]) for e in d["local"]["L"]}
            gs.K_local = {(e["node"], e["neighbour"], e["local_state"]): arr(e["matrix"])
                          for e in d["local"]["K"]}
        if "deviations" in d:
            gs.dev_L = {(e["node"], e["state"]): float(e["value"]) for e in d["deviations"]["L"]}
            gs.dev_K = {(e["node"], e["neighbour"], e["state"]): float(e["value"])
                        for e in d["deviations"]["K"]}
        return gs

    @classmethod
    def from_json(cls, text: str) -> "GainSet":
        return cls.from_dict(json.loads(text))


def performance_weight(model: EstimationModel, solution: LmiSolution, gamma2: float, m0: int) -> np.ndarray:
    """P = (1 / (gamma^2 N)) sum_i X_i^{m0}."""
    S = sum(np.asarray(solution[xname(i, m0)]) for i in range(1, model.N + 1))
    return S / (gamma2 * model.N)


def global_gains(model: EstimationModel, solution: LmiSolution, budget: UncertaintyBudget,
                 use_y: bool | None = None, m0: int = 1) -> GainSet:
    """K = g2 X^{-1} H' F^{-1},  L = (g2 X^{-1} C' + B2 D') E^{-1}; Y replaces X^{-1} when present."""
    g2 = budget.gamma2
    B2 = model.plant.B2
    if use_y is None:
        use_y = solution.get(yname(1, 1)) is not None
    L, K = {}, {}
    xy = 0.0
    for k in range(1, model.M + 1):
        for i in range(1, model.N + 1):
            X = np.asarray(solution[xname(i, k)])
            if use_y:
                W = np.asarray(solution[yname(i, k)])
                xy = max(xy, float(np.linalg.norm(X @ W - np.eye(model.n), 2)))
            else:
                if np.linalg.cond(X) > 1e14:
                    raise np.linalg.LinAlgError(f"X[{i},{k}] is singular")
                W = np.linalg.inv(X)
            C, D, _ = model.meas.triplet(i, k)
            E = model.E(i, k)
            L[(i, k)] = np.linalg.solve(E.T, (g2 * W @ C.T + B2 @ D.T).T).T
            for j in model.net.neighbours(i, k):
                H, F = model.H(i, j), model.F(i, j)
                K[(i, j, k)] = g2 * W @ np.linalg.solve(F.T, H).T
    if use_y and xy > XY_WARN:
        warnings.warn(f"rank residual ||XY - I|| = {xy:.3g} exceeds {XY_WARN}; using Y", RuntimeWarning)
    P = performance_weight(model, solution, g2, m0)
    return GainSet(L, K, g2, P, m0, xy_residual=xy if use_y else None)


def localize_gains(gains: GainSet, net: SwitchingNetwork) -> GainSet:
    """Average the global gains over the global states compatible with each local state."""
    Lloc, Kloc = {}, {}
    for i in range(1, net.N + 1):
        for ki in range(1, net.mapping.local_counts[i - 1] + 1):
            if not net.mapping.states_with_local(i, ki):
                continue
            w = conditional_weights(net, i, ki)
            Lloc[(i, ki)] = sum(wl * gains.L[(i, l)] for l, wl in w.items())
            l0 = next(iter(w))
            for j in net.neighbours(i, l0):
                Kloc[(i, j, ki)] = sum(wl * gains.K[(i, j, l)] for l, wl in w.items())
    out = GainSet(dict(gains.L), dict(gains.K), gains.gamma2, gains.P, gains.m0,
                  Lloc, Kloc, xy_residual=gains.xy_residual, source=gains.source)
    out.dev_L, out.dev_K = _deviations(out, net)
    return out


def _deviations(gains: GainSet, net: SwitchingNetwork):
    dL, dK = {}, {}
    for (i, k), Lk in gains.L.items():
        ki = net.local(i, k)
        dL[(i, k)] = float(np.linalg.norm(gains.L_local[(i, ki)] - Lk, 2))
    for (i, j, k), Kk in gains.K.items():
        ki = net.local(i, k)
        dK[(i, j, k)] = float(np.linalg.norm(gains.K_local[(i, j, ki)] - Kk, 2))
    return dL, dK


@dataclass
class DeviationReport:
    rows: list  # (kind, i, j or None, k, value, bound, ok)

    @property
    def ok(self) -> bool:
        return all(r[-1] for r in self.rows)

    def failures(self) -> list:
        return [r for r in self.rows if not r[-1]]


def deviation_bounds(gains: GainSet, budget: UncertaintyBudget) -> DeviationReport:
    """Check ||L~ - L|| <= alpha_i and ||K~ - K|| <= beta_ij (spectral norm)."""
    rows = []
    for (i, k), v in sorted(gains.dev_L.items()):
        a = budget.alpha_i(i)
        rows.append(("L", i, None, k, v, a, v <= a))
    for (i, j, k), v in sorted(gains.dev_K.items()):
        b = budget.beta_ij(i, j)
        rows.append(("K", i, j, k, v, b, v <= b))
    return DeviationReport(rows)


# ---------------------------------------------------------------------------
# dissipation check


def pi_matrix(net: SwitchingNetwork, budget: UncertaintyBudget, k: int) -> np.ndarray:
    """N x N matrix with -2 delta_i on the diagonal and 2 delta_j / (q_j + 1) for j in V_i."""
    N = net.N
    Pi = np.zeros((N, N))
    for i in range(1, N + 1):
        Pi[i - 1, i - 1] = -2.0 * budget.delta_i(i)
        for j in net.neighbours(i, k):
            Pi[i - 1, j - 1] = 2.0 * budget.delta_i(j) / (net.out_degree(j, k) + 1)
    return Pi


def decay_rate(net: SwitchingNetwork, budget: UncertaintyBudget) -> float:
    """epsilon = min over (i, k) of 2 delta_i / (q_i^k + 1)."""
    return min(2.0 * budget.delta_i(i) / (net.out_degree(i, k) + 1)
               for i in range(1, net.N + 1) for k in range(1, net.M + 1))


def error_matrix(model: EstimationModel, L_of, K_of, k: int) -> np.ndarray:
    """Closed-loop error generator F_k for stacked errors (e_1, ..., e_N) in state k.

    ``L_of(i, k)`` and ``K_of(i, j, k)`` return the gains applied in state k.
    """
    n, N = model.n, model.N
    A = model.plant.A
    F = np.zeros((n * N, n * N))
    for i in range(1, N + 1):
        C, _, _ = model.meas.triplet(i, k)
        bi = slice((i - 1) * n, i * n)
        F[bi, bi] = A - L_of(i, k) @ C
        for j in model.net.neighbours(i, k):
            KH = K_of(i, j, k) @ model.H(i, j)
            bj = slice((j - 1) * n, j * n)
            F[bi, bi] -= KH
            F[bi, bj] += KH
    return F


def disagreement_matrix(net: SwitchingNetwork, k: int, n: int) -> np.ndarray:
    """W with  e' W e = N * Psi^k  (sum over edges of ||e_i - e_j||^2)."""
    N = net.N
    W = np.zeros((N, N))
    for i, j in net.graph(k).edges():
        W[i - 1, i - 1] += 1
        W[j - 1, j - 1] += 1
        W[i - 1, j - 1] -= 1
        W[j - 1, i - 1] -= 1
    return np.kron(W, np.eye(n))


@dataclass
class DissipationReport:
    column_sums: dict       # k -> 1' Pi^k
    eps: float
    pi_ok: bool
    max_form: dict          # (variant, k) -> exact max eigenvalue
    sampled_max: dict       # (variant, k) -> max over the random unit samples
    witness: np.ndarray | None

    @property
    def ok(self) -> bool:
        return self.pi_ok and all(v < 0 for v in self.sampled_max.values()) \
            and all(v < 0 for v in self.max_form.values())


def verify_dissipation(model: EstimationModel, solution: LmiSolution, gains: GainSet,
                       budget: UncertaintyBudget, samples: int = 1000, rng=0) -> DissipationReport:
    """Column sums of Pi^k and the zero-disturbance form  LV + N Psi + eps V  on unit vectors.

    The form is checked for the global gains and, when present, for the local
    gains (an admissible perturbation of the global ones).
    """
    net = model.net
    rng = np.random.default_rng(rng)
    eps = decay_rate(net, budget)
    cols, pi_ok = {}, True
    for k in range(1, model.M + 1):
        cs = pi_matrix(net, budget, k).sum(axis=0)
        cols[k] = cs
        pi_ok = pi_ok and bool(np.all(cs <= -eps))
    n, N, Lam = model.n, model.N, net.generator.Lambda
    Xbar = {k: np.zeros((n * N, n * N)) for k in range(1, model.M + 1)}
    for k in Xbar:
        for i in range(1, N + 1):
            b = slice((i - 1) * n, i * n)
            Xbar[k][b, b] = np.asarray(solution[xname(i, k)])
    variants = {"global": (lambda i, k: gains.L[(i, k)], lambda i, j, k: gains.K[(i, j, k)])}
    if gains.has_local:
        variants["local"] = (lambda i, k: gains.L_local[(i, net.local(i, k))],
                             lambda i, j, k: gains.K_local[(i, j, net.local(i, k))])
    max_form, sampled, witness = {}, {}, None
    E = rng.standard_normal((samples, n * N))
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    for name, (Lf, Kf) in variants.items():
        for k in range(1, model.M + 1):
            F = error_matrix(model, Lf, Kf, k)
            Qk = Xbar[k] @ F + F.T @ Xbar[k] + sum(Lam[k - 1, l - 1] * Xbar[l] for l in Xbar)
            Qk = Qk + disagreement_matrix(net, k, n) + eps * Xbar[k]
            Qk = 0.5 * (Qk + Qk.T)
            ev, V = np.linalg.eigh(Qk)
            max_form[(name, k)] = float(ev[-1])
            vals = np.einsum("si,ij,sj->s", E, Qk, E)
            sampled[(name, k)] = float(vals.max())
            if vals.max() >= 0 and witness is None:
                witness = E[int(vals.argmax())]
            elif ev[-1] >= 0 and witness is None:
                witness = V[:, -1]
    return DissipationReport(cols, eps, pi_ok, max_form, sampled, witness)


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class SynthesisResult:
    mode: str
    status: str
    report: FeasibilityReport
    problem: LmiProblem
    gains: GainSet | None = None
    deviations: DeviationReport | None = None
    message: str = ""

    @property
    def feasible(self) -> bool:
        return self.status == FEASIBLE


MODES = ("global", "robust", "local")


def build_problem(model: EstimationModel, budget: UncertaintyBudget, mode: str) -> LmiProblem:
    if mode == "global":
        return build_global_problem(model, budget)
    if mode == "robust":
        return build_robust_problem(model, budget)
    if mode == "local":
        return build_local_problem(model, budget)
    raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def synthesize(model: EstimationModel, budget: UncertaintyBudget, mode: str = "local",
               options: SolverOptions | None = None, m0: int = 1) -> SynthesisResult:
    """Solve the LMI family for ``mode`` and turn a feasible point into gains.

    global: broadcast design (no multipliers); robust: non-fragile design with
    global gains only; local: non-fragile design plus gain-gap and rank
    constraints, followed by local averaging.
    """
    prob = build_problem(model, budget, mode)
    if mode == "local":
        bad = constant_delta_violations(model, budget)
        if bad:
            rep = FeasibilityReport(INFEASIBLE, None, np.inf, 0, message=f"constant LMIs fail: {bad}")
            return SynthesisResult(mode, INFEASIBLE, rep, prob, message=rep.message)
        rep = solve_rank_constrained(prob, options)
    else:
        rep = solve_feasibility(prob, options)
    res = SynthesisResult(mode, rep.status, rep, prob, message=rep.message)
    if rep.status != FEASIBLE:
        return res
    gains = global_gains(model, rep.solution, budget, use_y=(mode == "local"), m0=m0)
    gains.source = mode
    if mode == "local":
        gains = localize_gains(gains, model.net)
        res.deviations = deviation_bounds(gains, budget)
    res.gains = gains
    return res
