"""Small dense feasibility solver for affine matrix inequalities.

The default inner method is a primal log-det barrier (phase I: maximise a
common slack ``s`` with every constraint shifted by ``s I``).  Rank-constrained
problems alternate between a truncated-eigen projection onto the rank set and
a barrier projection back onto the LMI set.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import linalg as sla

from .lmi import LmiProblem, LmiSolution, RankConstraint

log = logging.getLogger(__name__)

FEASIBLE = "feasible"
INFEASIBLE = "infeasible-suspected"
LIMIT = "iteration-limit"


@dataclass
class SolverOptions:
    eps_feas: float | None = None   # default 1e-7 * (1 + max constant-block norm)
    eps_rank: float = 1e-6
    eps_nonstrict: float = 1e-9     # relative tolerance for non-strict constraints
    max_inner: int = 400            # Newton steps per barrier run
    max_outer: int = 60             # rank alternating-projection rounds
    mu: float = 20.0
    box: float = 1e6
    method: str = "barrier"         # or "projection"
    projection_iters: int = 500
    log_csv: str | None = None


@dataclass
class FeasibilityReport:
    status: str
    solution: LmiSolution | None
    margin: float
    iterations: int
    residual_history: list = field(default_factory=list)
    eps_feas: float = 0.0
    message: str = ""

    @property
    def feasible(self) -> bool:
        return self.status == FEASIBLE


# ---------------------------------------------------------------------------
# independent evaluation


def min_slack_eig(problem: LmiProblem, assignment: Mapping) -> dict[str, float]:
    """Extreme eigenvalue per constraint: the largest for '<', the smallest for '>'."""
    out = {}
    for c in problem.constraints:
        m = c.expr.evaluate(assignment, problem.variables)
        ev = np.linalg.eigvalsh(0.5 * (m + m.T))
        out[c.name] = float(ev[-1] if c.sense == "<" else ev[0])
    return out


def violations(problem: LmiProblem, assignment: Mapping) -> dict[str, float]:
    """Signed violation per constraint; negative means the inequality holds."""
    slack = min_slack_eig(problem, assignment)
    return {c.name: (slack[c.name] if c.sense == "<" else -slack[c.name])
            for c in problem.constraints}


def default_eps_feas(problem: LmiProblem) -> float:
    return 1e-7 * (1.0 + problem.const_scale())


def _nonstrict_tol(problem: LmiProblem, c, assignment, opts: SolverOptions) -> float:
    m = c.expr.evaluate(assignment, problem.variables)
    return opts.eps_nonstrict * max(1.0, float(np.linalg.norm(m, 2)))


def recheck(problem: LmiProblem, assignment: Mapping, eps_feas: float,
            opts: SolverOptions | None = None) -> tuple[bool, float, list[str]]:
    """Re-verify an assignment from scratch. Returns (ok, margin, failing names)."""
    opts = opts or SolverOptions()
    viol = violations(problem, assignment)
    bad = []
    for c in problem.constraints:
        v = viol[c.name]
        if c.strict:
            if v > -eps_feas:
                bad.append(c.name)
        elif v > _nonstrict_tol(problem, c, assignment, opts):
            bad.append(c.name)
    strict = [viol[c.name] for c in problem.constraints if c.strict]
    margin = max(strict) if strict else -np.inf
    return not bad, float(margin), bad


def rank_residual(rc: RankConstraint, problem: LmiProblem, assignment: Mapping) -> float:
    """sigma_{r+1} / sigma_1 of the rank block."""
    m = rc.expr.evaluate(assignment, problem.variables)
    s = np.linalg.svd(m, compute_uv=False)
    if s[0] == 0:
        return 0.0
    return float(s[rc.max_rank] / s[0]) if len(s) > rc.max_rank else 0.0


# ---------------------------------------------------------------------------
# compiled form


class _Compiled:
    """Constraints in the canonical form  S(z) = G0 + sum_v z_v G_v  > 0."""

    def __init__(self, problem: LmiProblem):
        self.problem = problem
        self.names = list(problem.variables)
        self.offsets = {}
        off = 0
        for name in self.names:
            self.offsets[name] = off
            off += problem.variables[name].dim
        self.D = off
        self.mats = []    # (constraint, idx, G0, G)
        self.lin = []     # (constraint, idx, g0, g)
        self.consts = []  # constant constraints
        for c in problem.constraints:
            sgn = -1.0 if c.sense == "<" else 1.0
            e = c.expr
            if e.is_constant():
                self.consts.append(c)
                continue
            idx = np.concatenate([np.arange(self.offsets[v], self.offsets[v] + problem.variables[v].dim)
                                  for v in e.terms])
            G = sgn * np.concatenate([e.terms[v] for v in e.terms], axis=0)
            G0 = sgn * e.const
            keep = np.any(G != 0, axis=(1, 2))
            idx, G = idx[keep], G[keep]
            if e.shape[0] == 1:
                self.lin.append((c, idx, float(G0[0, 0]), G[:, 0, 0]))
            else:
                self.mats.append((c, idx, G0, G))
        # linear part as a dense system  g0 + Gl z > 0
        self.lin_g0 = np.array([g0 for _, _, g0, _ in self.lin])
        self.lin_G = np.zeros((len(self.lin), self.D))
        for r, (_, idx, _, g) in enumerate(self.lin):
            np.add.at(self.lin_G[r], idx, g)
        self.lin_strict = np.array([c.strict for c, _, _, _ in self.lin], dtype=bool)
        self.mat_strict = [c.strict for c, _, _, _ in self.mats]

    def pack(self, values: Mapping) -> np.ndarray:
        z = np.zeros(self.D)
        for name in self.names:
            v = self.problem.variables[name]
            z[self.offsets[name]:self.offsets[name] + v.dim] = v.to_vector(values[name])
        return z

    def unpack(self, z: np.ndarray) -> dict:
        out = {}
        for name in self.names:
            v = self.problem.variables[name]
            out[name] = v.from_vector(z[self.offsets[name]:self.offsets[name] + v.dim])
        return out

    def mat_value(self, j: int, z: np.ndarray) -> np.ndarray:
        _, idx, G0, G = self.mats[j]
        return G0 + np.tensordot(z[idx], G, axes=1)

    def min_eigs(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        me = np.array([np.linalg.eigvalsh(self.mat_value(j, z))[0] for j in range(len(self.mats))])
        le = self.lin_g0 + self.lin_G @ z
        return me, le

    def initial_point(self, warm: Mapping | None) -> np.ndarray:
        vals = {}
        for name, v in self.problem.variables.items():
            if warm is not None and name in warm:
                vals[name] = warm[name]
            else:
                vals[name] = np.eye(v.size) if v.kind == "sym" else 1.0
        return self.pack(vals)


# ---------------------------------------------------------------------------
# barrier machinery


class _Barrier:
    """-sum log det(S_c(z) - shift_c) - sum log(linear) over a coordinate vector w.

    ``w`` is ``z`` optionally followed by the phase-I slack ``s`` that enters
    every non-box constraint with coefficient -I.
    """

    def __init__(self, comp: _Compiled, box: float, with_slack: bool,
                 shift_mat=None, shift_lin=None):
        self.comp = comp
        self.with_slack = with_slack
        D = comp.D
        self.W = D + (1 if with_slack else 0)
        self.box = box
        self.shift_mat = shift_mat if shift_mat is not None else [0.0] * len(comp.mats)
        self.shift_lin = shift_lin if shift_lin is not None else np.zeros(len(comp.lin))
        blocks = []
        for j, (c, idx, G0, G) in enumerate(comp.mats):
            m = G0.shape[0]
            if with_slack:
                idx = np.append(idx, D)
                G = np.concatenate([G, -np.eye(m)[None]], axis=0)
            blocks.append((idx, G0 - self.shift_mat[j] * np.eye(G0.shape[0]), G))
        self.blocks = blocks
        A = comp.lin_G
        if with_slack:
            A = np.hstack([A, -np.ones((A.shape[0], 1))])
        # box rows  box - z_i > 0 and box + z_i > 0  (no slack)
        I = np.eye(D, self.W)
        self.lin_A = np.vstack([A, -I, I])
        self.lin_b = np.concatenate([comp.lin_g0 - self.shift_lin, np.full(2 * D, box)])
        self.degree = sum(G0.shape[0] for _, G0, _ in blocks) + len(self.lin_b)

    def value(self, w: np.ndarray) -> float:
        tot = 0.0
        for idx, G0, G in self.blocks:
            S = G0 + np.tensordot(w[idx], G, axes=1)
            try:
                L = np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                return np.inf
            tot -= 2.0 * np.log(np.diag(L)).sum()
        s = self.lin_b + self.lin_A @ w
        if np.any(s <= 0):
            return np.inf
        return tot - np.log(s).sum()

    def derivs(self, w: np.ndarray):
        g = np.zeros(self.W)
        H = np.zeros((self.W, self.W))
        for idx, G0, G in self.blocks:
            S = G0 + np.tensordot(w[idx], G, axes=1)
            cf = sla.cho_factor(S, lower=True)
            Mv = np.stack([sla.cho_solve(cf, Gv) for Gv in G])
            g[idx] -= np.einsum("vii->v", Mv)
            H[np.ix_(idx, idx)] += np.einsum("vij,wji->vw", Mv, Mv)
        s = self.lin_b + self.lin_A @ w
        inv = 1.0 / s
        g -= self.lin_A.T @ inv
        H += (self.lin_A * (inv * inv)[:, None]).T @ self.lin_A
        return g, H


def _center(f_val, f_derivs, w, max_steps: int, tol: float = 1e-9):
    """Damped Newton minimisation of a self-concordant function from a feasible w."""
    steps = 0
    fw = f_val(w)
    while steps < max_steps:
        g, H = f_derivs(w)
        H = 0.5 * (H + H.T)
        try:
            cf = sla.cho_factor(H + 1e-14 * np.trace(H) / len(H) * np.eye(len(H)))
            dw = -sla.cho_solve(cf, g)
        except (np.linalg.LinAlgError, ValueError):
            dw = -np.linalg.lstsq(H, g, rcond=None)[0]
        dec2 = float(-g @ dw)
        steps += 1
        if dec2 / 2 <= tol:
            break
        a = 1.0
        while a > 1e-12:
            wn = w + a * dw
            fn = f_val(wn)
            if np.isfinite(fn) and fn <= fw - 0.25 * a * dec2:
                break
            a *= 0.5
        else:
            break
        w, fw = wn, fn
    return w, steps


# ---------------------------------------------------------------------------
# feasibility


def _check_constants(comp: _Compiled, eps: float, opts: SolverOptions) -> list[str]:
    bad = []
    for c in comp.consts:
        ev = np.linalg.eigvalsh(c.expr.const)
        v = ev[-1] if c.sense == "<" else -ev[0]
        lim = -eps if c.strict else opts.eps_nonstrict * max(1.0, np.abs(ev).max())
        if v > lim:
            bad.append(c.name)
    return bad


def _phase1(comp: _Compiled, z0: np.ndarray, eps: float, opts: SolverOptions,
            history: list | None = None):
    """Maximise the common slack s.  Returns (z, s, status, newton steps)."""
    bar = _Barrier(comp, opts.box, with_slack=True)
    me, le = comp.min_eigs(z0)
    smin = min(np.min(me, initial=np.inf), np.min(le, initial=np.inf))
    if not np.isfinite(smin):
        smin = 0.0
    z0 = np.clip(z0, -0.5 * opts.box, 0.5 * opts.box)
    w = np.append(z0, smin - 1.0 - abs(smin) * 0.1)
    target = 2.0 * eps
    t = 1.0
    total = 0
    theta = bar.degree
    # objective: minimise -t s + barrier
    while total < opts.max_inner:
        f_val = lambda x: -t * x[-1] + bar.value(x)

        def f_derivs(x):
            g, H = bar.derivs(x)
            g[-1] -= t
            return g, H
        w, k = _center(f_val, f_derivs, w, opts.max_inner - total)
        total += k
        s = w[-1]
        if history is not None:
            history.append((total, float(s)))
        if s >= target:
            return w[:-1], float(s), FEASIBLE, total
        if s + theta / t < target:
            return w[:-1], float(s), INFEASIBLE, total
        t *= opts.mu
    return w[:-1], float(w[-1]), LIMIT, total


def _projection_start(comp: _Compiled, z: np.ndarray, eps: float, iters: int) -> np.ndarray:
    """Averaged alternating projections: clip each constraint's spectrum, then least squares."""
    rows, rhs = [], []
    for j, (c, idx, G0, G) in enumerate(comp.mats):
        m = G0.shape[0]
        A = np.zeros((m * m, comp.D))
        A[:, idx] = G.reshape(len(idx), -1).T
        rows.append(A)
        rhs.append(G0.ravel())
    if len(comp.lin):
        rows.append(comp.lin_G)
        rhs.append(comp.lin_g0)
    if not rows:
        return z
    A = np.vstack(rows)
    b0 = np.concatenate(rhs)
    pinv = np.linalg.pinv(A)
    for _ in range(iters):
        target = []
        ok = True
        for j, (c, idx, G0, G) in enumerate(comp.mats):
            S = comp.mat_value(j, z)
            ev, V = np.linalg.eigh(S)
            if ev[0] < 2 * eps:
                ok = False
            target.append(((V * np.maximum(ev, 2 * eps)) @ V.T).ravel())
        if len(comp.lin):
            s = comp.lin_g0 + comp.lin_G @ z
            ok = ok and bool(np.all(s >= 2 * eps))
            target.append(np.maximum(s, 2 * eps))
        if ok:
            break
        z = pinv @ (np.concatenate(target) - b0)
    return z


def _log_history(path: str | None, history: list) -> None:
    if not path:
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "margin", "rank_residual"])
        for row in history:
            w.writerow([row[0], repr(row[1]), repr(row[2]) if len(row) > 2 else ""])


def solve_feasibility(problem: LmiProblem, options: SolverOptions | None = None,
                      warm_start: Mapping | None = None) -> FeasibilityReport:
    """Find a point satisfying every (strict) constraint with margin eps_feas."""
    opts = options or SolverOptions()
    eps = opts.eps_feas if opts.eps_feas is not None else default_eps_feas(problem)
    comp = _Compiled(problem)
    bad = _check_constants(comp, eps, opts)
    if bad:
        return FeasibilityReport(INFEASIBLE, None, np.inf, 0, [], eps,
                                 f"constant constraints violated: {bad}")
    z0 = comp.initial_point(warm_start)
    if opts.method == "projection":
        z0 = _projection_start(comp, z0, eps, opts.projection_iters)
    elif opts.method != "barrier":
        raise ValueError(f"unknown method {opts.method!r}")
    hist: list = []
    z, s, status, its = _phase1(comp, z0, eps, opts, hist)
    values = comp.unpack(z)
    ok, margin, failing = recheck(problem, values, eps, opts)
    rows = [(i, -h) for i, h in hist]
    _log_history(opts.log_csv, rows)
    if status == FEASIBLE and not ok:
        status = LIMIT
        msg = f"independent re-check failed on {failing[:5]}"
    else:
        msg = ""
    sol = LmiSolution(values, margin)
    return FeasibilityReport(status, sol, margin, its, rows, eps, msg)


# ---------------------------------------------------------------------------
# rank constraints


def _pair_indices(comp: _Compiled, rc: RankConstraint):
    yname, xname = rc.pair
    vy, vx = comp.problem.variables[yname], comp.problem.variables[xname]
    iy = np.arange(comp.offsets[yname], comp.offsets[yname] + vy.dim)
    ix = np.arange(comp.offsets[xname], comp.offsets[xname] + vx.dim)
    return iy, ix, vy, vx


def _rank_project(Y: np.ndarray, X: np.ndarray, r: int, s: float):
    """Nearest PSD rank-r matrix to [[sY, I], [I, X/s]], returned as unscaled diagonal blocks."""
    n = Y.shape[0]
    B = np.block([[s * Y, np.eye(n)], [np.eye(n), X / s]])
    ev, V = np.linalg.eigh(0.5 * (B + B.T))
    order = np.argsort(ev)[::-1][:r]
    lam = np.maximum(ev[order], 0.0)
    Vr = V[:, order]
    Bh = (Vr * lam) @ Vr.T
    dist = float(np.linalg.norm(B - Bh))
    return Bh[:n, :n] / s, Bh[n:, n:] * s, dist


def solve_rank_constrained(problem: LmiProblem, options: SolverOptions | None = None,
                           warm_start: Mapping | None = None) -> FeasibilityReport:
    """LMIs plus rank[[Y, I], [I, X]] <= n constraints, by alternating projections.

    Each round first tries the substitution Y := X^{-1}; when that keeps every
    LMI satisfied the point is accepted.  Otherwise the rank blocks are
    projected onto the rank-n set and the result is projected back onto the
    (margin-shrunk) LMI set with a barrier method.
    """
    opts = options or SolverOptions()
    if not problem.rank_constraints:
        return solve_feasibility(problem, opts, warm_start)
    eps = opts.eps_feas if opts.eps_feas is not None else default_eps_feas(problem)
    first = solve_feasibility(problem, opts, warm_start)
    if first.status != FEASIBLE:
        return first
    comp = _Compiled(problem)
    z = comp.pack(first.solution.values)
    pairs = [_pair_indices(comp, rc) for rc in problem.rank_constraints]
    scales = []
    for iy, ix, vy, vx in pairs:
        Y, X = vy.from_vector(z[iy]), vx.from_vector(z[ix])
        scales.append(float(np.sqrt(np.linalg.norm(X) / max(np.linalg.norm(Y), 1e-300))))

    # Frobenius-consistent coordinate weights for the projection objective
    wts = np.zeros(comp.D)
    for (iy, ix, vy, vx), s in zip(pairs, scales):
        off = np.array([1.0 if a == b else 2.0 for a, b in zip(*np.triu_indices(vy.size))])
        wts[iy] = off * s * s
        wts[ix] = off / (s * s)
    shift_mat = [eps if st else 0.0 for st in comp.mat_strict]
    shift_lin = np.where(comp.lin_strict, eps, 0.0)
    bar = _Barrier(comp, opts.box, with_slack=False, shift_mat=shift_mat, shift_lin=shift_lin)
    reg = 1e-10 * max(1.0, wts.max())

    history = []
    best = None
    for it in range(1, opts.max_outer + 1):
        # try Y := X^{-1}
        trial = z.copy()
        for iy, ix, vy, vx in pairs:
            X = vx.from_vector(z[ix])
            try:
                trial[iy] = vy.to_vector(np.linalg.inv(X))
            except np.linalg.LinAlgError:
                pass
        vals = comp.unpack(trial)
        ok, margin, _ = recheck(problem, vals, eps, opts)
        rres = max(rank_residual(rc, problem, vals) for rc in problem.rank_constraints)
        if ok and rres <= opts.eps_rank:
            history.append((it, margin, rres, 0.0))
            _log_history(opts.log_csv, history)
            return FeasibilityReport(FEASIBLE, LmiSolution(vals, margin), margin, it, history, eps)

        # rank projection of the current LMI-feasible point
        target = z.copy()
        dist2 = 0.0
        rmax = 0.0
        vals_z = comp.unpack(z)
        for (iy, ix, vy, vx), s, rc in zip(pairs, scales, problem.rank_constraints):
            Y, X = vy.from_vector(z[iy]), vx.from_vector(z[ix])
            Yh, Xh, d = _rank_project(Y, X, rc.max_rank, s)
            target[iy], target[ix] = vy.to_vector(Yh), vx.to_vector(Xh)
            dist2 += d * d
            rmax = max(rmax, rank_residual(rc, problem, vals_z))
        _, zmargin, _ = recheck(problem, vals_z, eps, opts)
        history.append((it, zmargin, rmax, float(np.sqrt(dist2))))
        if best is None or rmax < best[0]:
            best = (rmax, z.copy())

        # barrier projection onto the LMI set
        t = 1.0
        w = z.copy()
        steps = 0
        while True:
            def f_val(x, t=t):
                d = x - target
                return 0.5 * t * float(d @ (wts * d) + reg * d @ d) + bar.value(x)

            def f_derivs(x, t=t):
                g, H = bar.derivs(x)
                d = x - target
                g += t * (wts + reg) * d
                H[np.diag_indices_from(H)] += t * (wts + reg)
                return g, H
            w, k = _center(f_val, f_derivs, w, opts.max_inner)
            steps += k
            if bar.degree / t < 1e-9 * max(1.0, dist2) or steps >= opts.max_inner:
                break
            t *= opts.mu
        z = w

    _log_history(opts.log_csv, history)
    zb = best[1] if best is not None else z
    vals = comp.unpack(zb)
    _, margin, _ = recheck(problem, vals, eps, opts)
    return FeasibilityReport(LIMIT, LmiSolution(vals, margin), margin, opts.max_outer, history, eps,
                             "rank constraints not met within the outer iteration limit")
