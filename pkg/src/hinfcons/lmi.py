"""Affine matrix expressions and the coupled LMI families of the observer design.

Expressions are stored as ``const + sum_v sum_c z_{v,c} * coef[v][c]`` where
``z_v`` is the coordinate vector of decision variable ``v``.  Symmetric matrix
variables use the basis {E_aa} u {E_ab + E_ba, a < b}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .network import NetworkError, conditional_weights
from .plant import EstimationModel, UncertaintyBudget


# ---------------------------------------------------------------------------
# variables and expressions


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str  # "sym" or "scalar"
    size: int = 1

    def __post_init__(self):
        if self.kind not in ("sym", "scalar"):
            raise ValueError(f"unknown variable kind {self.kind!r}")
        if self.kind == "scalar" and self.size != 1:
            raise ValueError("scalar variables have size 1")

    @property
    def dim(self) -> int:
        return self.size * (self.size + 1) // 2

    def basis(self) -> np.ndarray:
        n = self.size
        out = np.zeros((self.dim, n, n))
        iu = np.triu_indices(n)
        for c, (a, b) in enumerate(zip(*iu)):
            out[c, a, b] = 1.0
            out[c, b, a] = 1.0
        return out

    def to_vector(self, value) -> np.ndarray:
        v = np.atleast_2d(np.asarray(value, dtype=float))
        if v.shape != (self.size, self.size):
            raise ValueError(f"{self.name}: expected shape {(self.size, self.size)}, got {v.shape}")
        return 0.5 * (v + v.T)[np.triu_indices(self.size)]

    def from_vector(self, vec) -> np.ndarray | float:
        vec = np.asarray(vec, dtype=float)
        if self.kind == "scalar":
            return float(vec[0])
        m = np.zeros((self.size, self.size))
        m[np.triu_indices(self.size)] = vec
        return m + np.triu(m, 1).T


class AffineMatrix:
    """Matrix-valued affine function of named variables."""

    __slots__ = ("const", "terms")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, const, terms: Mapping[str, np.ndarray] | None = None):
        self.const = np.atleast_2d(np.asarray(const, dtype=float))
        self.terms: dict[str, np.ndarray] = dict(terms or {})

    @classmethod
    def var(cls, v: Variable) -> "AffineMatrix":
        return cls(np.zeros((v.size, v.size)), {v.name: v.basis()})

    @classmethod
    def scaled(cls, v: Variable, mat) -> "AffineMatrix":
        """``v * mat`` for a scalar variable ``v``."""
        if v.kind != "scalar":
            raise ValueError("scaled() needs a scalar variable")
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        return cls(np.zeros_like(mat), {v.name: mat[None].copy()})

    @classmethod
    def zeros(cls, p: int, q: int | None = None) -> "AffineMatrix":
        return cls(np.zeros((p, p if q is None else q)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.const.shape

    def is_constant(self) -> bool:
        return all(not np.any(c) for c in self.terms.values())

    def variables(self) -> list[str]:
        return list(self.terms)

    def __add__(self, other):
        other = _as_affine(other)
        if other.shape != self.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        terms = dict(self.terms)
        for k, c in other.terms.items():
            terms[k] = terms[k] + c if k in terms else c
        return AffineMatrix(self.const + other.const, terms)

    __radd__ = __add__

    def __neg__(self):
        return AffineMatrix(-self.const, {k: -c for k, c in self.terms.items()})

    def __sub__(self, other):
        return self + (-_as_affine(other))

    def __rsub__(self, other):
        return _as_affine(other) + (-self)

    def __mul__(self, s):
        s = float(s)
        return AffineMatrix(s * self.const, {k: s * c for k, c in self.terms.items()})

    __rmul__ = __mul__

    def __matmul__(self, m):
        m = np.atleast_2d(np.asarray(m, dtype=float))
        return AffineMatrix(self.const @ m, {k: c @ m for k, c in self.terms.items()})

    def __rmatmul__(self, m):
        m = np.atleast_2d(np.asarray(m, dtype=float))
        return AffineMatrix(m @ self.const,
                            {k: np.einsum("rp,dpq->drq", m, c) for k, c in self.terms.items()})

    @property
    def T(self) -> "AffineMatrix":
        return AffineMatrix(self.const.T, {k: c.transpose(0, 2, 1) for k, c in self.terms.items()})

    def evaluate(self, values: Mapping[str, np.ndarray | float], variables: Mapping[str, Variable]):
        out = self.const.copy()
        for name, coef in self.terms.items():
            vec = variables[name].to_vector(values[name])
            out += np.tensordot(vec, coef, axes=1)
        return out

    def symmetry_defect(self) -> float:
        d = np.abs(self.const - self.const.T).max(initial=0.0)
        for c in self.terms.values():
            d = max(d, np.abs(c - c.transpose(0, 2, 1)).max(initial=0.0))
        return float(d)


def _as_affine(x) -> AffineMatrix:
    return x if isinstance(x, AffineMatrix) else AffineMatrix(x)


def block(rows: Sequence[Sequence[AffineMatrix | np.ndarray | None]]) -> AffineMatrix:
    """Assemble a block matrix; ``None`` entries are zero blocks."""
    nr, nc = len(rows), len(rows[0])
    heights = [None] * nr
    widths = [None] * nc
    for a, row in enumerate(rows):
        if len(row) != nc:
            raise ValueError("ragged block layout")
        for b, blk in enumerate(row):
            if blk is None:
                continue
            h, w = _as_affine(blk).shape
            if heights[a] not in (None, h) or widths[b] not in (None, w):
                raise ValueError(f"inconsistent block size at ({a},{b})")
            heights[a], widths[b] = h, w
    if None in heights or None in widths:
        raise ValueError("every block row and column needs at least one sized block")
    ro = np.concatenate([[0], np.cumsum(heights)])
    co = np.concatenate([[0], np.cumsum(widths)])
    const = np.zeros((ro[-1], co[-1]))
    terms: dict[str, np.ndarray] = {}
    for a, row in enumerate(rows):
        for b, blk in enumerate(row):
            if blk is None:
                continue
            blk = _as_affine(blk)
            const[ro[a]:ro[a + 1], co[b]:co[b + 1]] = blk.const
            for k, c in blk.terms.items():
                if k not in terms:
                    terms[k] = np.zeros((c.shape[0], ro[-1], co[-1]))
                terms[k][:, ro[a]:ro[a + 1], co[b]:co[b + 1]] += c
    return AffineMatrix(const, terms)


def sym_block(lower: Sequence[Sequence[AffineMatrix | np.ndarray | None]]) -> AffineMatrix:
    """Symmetric block matrix from its lower triangle (row a has a+1 entries)."""
    n = len(lower)
    full: list[list] = [[None] * n for _ in range(n)]
    for a in range(n):
        if len(lower[a]) != a + 1:
            raise ValueError("lower-triangular layout expected")
        for b in range(a + 1):
            blk = lower[a][b]
            full[a][b] = blk
            if a != b and blk is not None:
                full[b][a] = _as_affine(blk).T
    return block(full)


# ---------------------------------------------------------------------------
# problem containers


@dataclass
class LmiConstraint:
    """``expr < 0`` (sense "<") or ``expr > 0`` (sense ">"); strict unless noted."""

    name: str
    expr: AffineMatrix
    sense: str = "<"
    strict: bool = True

    def __post_init__(self):
        if self.sense not in ("<", ">"):
            raise ValueError(f"sense must be '<' or '>', got {self.sense!r}")

    @property
    def size(self) -> int:
        return self.expr.shape[0]


@dataclass
class RankConstraint:
    """``rank(expr) <= max_rank`` for the block [[Y, I], [I, X]]."""

    name: str
    expr: AffineMatrix
    max_rank: int
    pair: tuple[str, str] | None = None  # (Y name, X name)


@dataclass
class LmiProblem:
    variables: dict[str, Variable] = field(default_factory=dict)
    constraints: list[LmiConstraint] = field(default_factory=list)
    rank_constraints: list[RankConstraint] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add_variable(self, v: Variable) -> Variable:
        old = self.variables.get(v.name)
        if old is not None and old != v:
            raise ValueError(f"variable {v.name} redefined")
        self.variables[v.name] = v
        return v

    def add(self, c: LmiConstraint | Iterable[LmiConstraint]) -> None:
        if isinstance(c, LmiConstraint):
            self.constraints.append(c)
        else:
            self.constraints.extend(c)

    def check(self) -> None:
        """Raise if an expression is asymmetric or references an unknown variable."""
        for c in list(self.constraints) + list(self.rank_constraints):
            e = c.expr
            if e.shape[0] != e.shape[1]:
                raise ValueError(f"{c.name}: expression is not square")
            if e.symmetry_defect() > 1e-12 * max(1.0, np.abs(e.const).max(initial=0.0)):
                raise ValueError(f"{c.name}: expression is not symmetric")
            for v in e.terms:
                if v not in self.variables:
                    raise ValueError(f"{c.name}: unknown variable {v}")
                if e.terms[v].shape[0] != self.variables[v].dim:
                    raise ValueError(f"{c.name}: coefficient size mismatch for {v}")

    def constraint(self, name: str) -> LmiConstraint:
        for c in self.constraints:
            if c.name == name:
                return c
        raise KeyError(name)

    def const_scale(self) -> float:
        return max((float(np.linalg.norm(c.expr.const, 2)) for c in self.constraints), default=0.0)

    def to_json(self) -> str:
        """Debug dump: variables, block shapes and constant matrices."""
        doc = {
            "meta": self.meta,
            "variables": [{"name": v.name, "kind": v.kind, "size": v.size}
                          for v in self.variables.values()],
            "constraints": [{"name": c.name, "sense": c.sense, "strict": c.strict,
                             "shape": list(c.expr.shape), "const": c.expr.const.tolist(),
                             "variables": c.expr.variables()} for c in self.constraints],
            "rank_constraints": [{"name": r.name, "max_rank": r.max_rank,
                                  "shape": list(r.expr.shape)} for r in self.rank_constraints],
        }
        return json.dumps(doc, indent=1)


@dataclass
class LmiSolution:
    values: dict[str, np.ndarray | float]
    margin: float  # largest violation measure; negative when every constraint holds

    def __getitem__(self, name):
        return self.values[name]

    def get(self, name, default=None):
        return self.values.get(name, default)


# ---------------------------------------------------------------------------
# the constraint families


def xname(i, k):
    return f"X[{i},{k}]"


def yname(i, k):
    return f"Y[{i},{k}]"


def tauname(i, k):
    return f"tau[{i},{k}]"


def thetaname(i, j, k):
    return f"theta[{i},{j},{k}]"


def varthetaname(i, j, k):
    return f"vartheta[{i},{j},{k}]"


def _X(model, i, k) -> Variable:
    return Variable(xname(i, k), "sym", model.n)


def _Y(model, i, k) -> Variable:
    return Variable(yname(i, k), "sym", model.n)


def _s(name) -> Variable:
    return Variable(name, "scalar")


def assemble_scalar_lmis(model: EstimationModel, budget: UncertaintyBudget) -> list[LmiConstraint]:
    """gamma^2 I - tau alpha^2 E > 0 per (i,k) and gamma^2 I - theta beta^2 F > 0 per edge."""
    g2 = budget.gamma2
    out = []
    for k in range(1, model.M + 1):
        for i in range(1, model.N + 1):
            E = model.E(i, k)
            a2 = budget.alpha_i(i) ** 2
            expr = g2 * np.eye(E.shape[0]) - AffineMatrix.scaled(_s(tauname(i, k)), a2 * E)
            out.append(LmiConstraint(f"scalar_tau[{i},{k}]", expr, ">"))
            for j in model.net.neighbours(i, k):
                F = model.F(i, j)
                b2 = budget.beta_ij(i, j) ** 2
                expr = g2 * np.eye(F.shape[0]) - AffineMatrix.scaled(_s(thetaname(i, j, k)), b2 * F)
                out.append(LmiConstraint(f"scalar_theta[{i},{j},{k}]", expr, ">"))
    return out


def _common_blocks(model: EstimationModel, budget: UncertaintyBudget, i: int, k: int,
                   robust: bool):
    """Q, N, S, the neighbour list and the Xi/Z blocks shared by both block LMIs."""
    n, g2 = model.n, budget.gamma2
    net = model.net
    A, B2 = model.plant.A, model.plant.B2
    C, D, Db = model.meas.triplet(i, k)
    E = model.E(i, k)
    Einv = np.linalg.inv(E)
    Abar = A + budget.delta_i(i) * np.eye(n) - B2 @ D.T @ Einv @ C
    X = AffineMatrix.var(_X(model, i, k))
    nbrs = net.neighbours(i, k)
    p, q = net.in_degree(i, k), net.out_degree(i, k)

    Q = X @ Abar + Abar.T @ X + (p + q) * np.eye(n)
    if robust:
        for j in net.receivers(i, k):
            b = budget.beta_ij(j, i)
            if b > 0:
                H = model.H(j, i)
                Q = Q + AffineMatrix.scaled(_s(varthetaname(j, i, k)), b * b * H.T @ H)
    Lam = net.generator.Lambda
    for l in range(1, model.M + 1):
        if Lam[k - 1, l - 1] != 0:
            Q = Q + Lam[k - 1, l - 1] * AffineMatrix.var(_X(model, i, l))
    Q = Q - g2 * C.T @ Einv @ C
    xi_blocks = []
    for j in nbrs:
        H, F = model.H(i, j), model.F(i, j)
        HFH = H.T @ np.linalg.solve(F, H)
        Q = Q - g2 * HFH
        xi_blocks.append(g2 * HFH - np.eye(n))
    l = B2.shape[1]
    Nb = (np.eye(l) - D.T @ Einv @ D) @ B2.T @ X
    Sb = (-Db.T @ Einv @ D @ B2.T) @ X
    Z = []
    for j in nbrs:
        qj = net.out_degree(j, k)
        Z.append((2.0 * budget.delta_i(j) / (qj + 1)) * AffineMatrix.var(_X(model, j, k)))
    return Q, Nb, Sb, X, list(zip(nbrs, xi_blocks, Z)), g2


def _assemble_block(model, budget, i, k, robust: bool) -> AffineMatrix:
    Q, Nb, Sb, X, nb, g2 = _common_blocks(model, budget, i, k, robust)
    n = model.n
    l, li = Nb.shape[0], Sb.shape[0]
    rows: list[list] = [[Q], [Nb, -g2 * np.eye(l)], [Sb, None, -g2 * np.eye(li)]]
    if robust:
        tvars = []
        if budget.alpha_i(i) > 0:
            tvars.append(tauname(i, k))
        active = [j for j, _, _ in nb if budget.beta_ij(i, j) > 0]
        tvars += [thetaname(i, j, k) for j in active]
        tvars += [varthetaname(i, j, k) for j in active]
        for t in tvars:
            r = len(rows)
            row: list = [X] + [None] * r
            row[r] = AffineMatrix.scaled(_s(t), -np.eye(n))
            rows.append(row)
    for _, xi, Z in nb:
        r = len(rows)
        row = [xi.T] + [None] * r
        row[r] = -Z
        rows.append(row)
    # explicit zeros so that every block row and column is sized
    sizes = [_as_affine(rw[-1]).shape[0] for rw in rows]
    lower = [[blk if blk is not None else np.zeros((sizes[a], sizes[b]))
              for b, blk in enumerate(rw)] for a, rw in enumerate(rows)]
    return sym_block(lower)


def assemble_main_lmi(model: EstimationModel, budget: UncertaintyBudget, i: int, k: int) -> LmiConstraint:
    """Robust block LMI for node ``i`` in global state ``k`` (required negative definite).

    Block order: Q, N, S, one X-row per active multiplier (tau when alpha_i > 0,
    theta and vartheta for each neighbour with beta_ij > 0), then one row per neighbour.
    """
    return LmiConstraint(f"main[{i},{k}]", _assemble_block(model, budget, i, k, True), "<")


def assemble_global_lmi(model: EstimationModel, budget: UncertaintyBudget, i: int, k: int) -> LmiConstraint:
    """Global-state broadcast LMI: the main LMI with all multiplier terms removed."""
    return LmiConstraint(f"glob[{i},{k}]", _assemble_block(model, budget, i, k, False), "<")


def assemble_delta_lmis(model: EstimationModel, budget: UncertaintyBudget, i: int, k: int) -> list[LmiConstraint]:
    """Bounds on the gap between the global and the locally averaged gains, affine in Y."""
    net = model.net
    try:
        w = conditional_weights(net, i, net.local(i, k))
    except NetworkError:
        raise
    n, g2 = model.n, budget.gamma2
    C, _, _ = model.meas.triplet(i, k)
    Ek = model.E(i, k)
    r = C.shape[0]
    Yk = AffineMatrix.var(_Y(model, i, k))
    dL = AffineMatrix.zeros(n, r)
    for l, wl in w.items():
        if l == k:
            continue
        Cl, _, _ = model.meas.triplet(i, l)
        El = model.E(i, l)
        Yl = AffineMatrix.var(_Y(model, i, l))
        dL = dL + (g2 * wl) * (Yk @ np.linalg.solve(Ek, C).T - Yl @ np.linalg.solve(El, Cl).T)
    a = budget.alpha_i(i)
    out = [LmiConstraint(f"deltaL[{i},{k}]",
                         sym_block([[a * a * np.eye(n)], [dL.T, np.eye(r)]]), ">")]
    for j in net.neighbours(i, k):
        H, F = model.H(i, j), model.F(i, j)
        HF = np.linalg.solve(F, H).T
        dK = AffineMatrix.zeros(n, H.shape[0])
        for l, wl in w.items():
            if l == k:
                continue
            Yl = AffineMatrix.var(_Y(model, i, l))
            dK = dK + (g2 * wl) * ((Yk - Yl) @ HF)
        b = budget.beta_ij(i, j)
        out.append(LmiConstraint(f"deltaK[{i},{j},{k}]",
                                 sym_block([[b * b * np.eye(n)], [dK.T, np.eye(H.shape[0])]]), ">"))
    return out


def assemble_rank_blocks(i: int, k: int, n: int) -> RankConstraint:
    """rank [[Y, I], [I, X]] <= n, which forces Y = X^{-1} when both blocks are positive."""
    X = AffineMatrix.var(Variable(xname(i, k), "sym", n))
    Y = AffineMatrix.var(Variable(yname(i, k), "sym", n))
    expr = sym_block([[Y], [np.eye(n), X]])
    return RankConstraint(f"rank[{i},{k}]", expr, n, (yname(i, k), xname(i, k)))


# ---------------------------------------------------------------------------
# problem builders


def _declare_vars(prob: LmiProblem, model: EstimationModel, robust: bool, with_y: bool) -> None:
    net = model.net
    for k in range(1, model.M + 1):
        for i in range(1, model.N + 1):
            prob.add_variable(_X(model, i, k))
            if with_y:
                prob.add_variable(_Y(model, i, k))
            if robust:
                prob.add_variable(_s(tauname(i, k)))
                for j in net.neighbours(i, k):
                    prob.add_variable(_s(thetaname(i, j, k)))
                    prob.add_variable(_s(varthetaname(i, j, k)))


def _positivity(prob: LmiProblem) -> None:
    for v in list(prob.variables.values()):
        if v.name.startswith("Y["):
            continue  # Y enters through the rank blocks
        expr = AffineMatrix.var(v)
        prob.add(LmiConstraint(f"pos:{v.name}", expr, ">"))


def build_robust_problem(model: EstimationModel, budget: UncertaintyBudget) -> LmiProblem:
    prob = LmiProblem(meta={"family": "robust", "gamma2": budget.gamma2})
    _declare_vars(prob, model, robust=True, with_y=False)
    prob.add(assemble_scalar_lmis(model, budget))
    for k in range(1, model.M + 1):
        for i in range(1, model.N + 1):
            prob.add(assemble_main_lmi(model, budget, i, k))
    _positivity(prob)
    prob.check()
    return prob


def build_global_problem(model: EstimationModel, budget: UncertaintyBudget) -> LmiProblem:
    prob = LmiProblem(meta={"family": "broadcast", "gamma2": budget.gamma2})
    _declare_vars(prob, model, robust=False, with_y=False)
    for k in range(1, model.M + 1):
        for i in range(1, model.N + 1):
            prob.add(assemble_global_lmi(model, budget, i, k))
    _positivity(prob)
    prob.check()
    return prob


def build_local_problem(model: EstimationModel, budget: UncertaintyBudget) -> LmiProblem:
    """Robust LMIs plus gain-gap LMIs and rank constraints linking Y to X^{-1}.

    Gain-gap LMIs whose expression is constant (singleton conditioning sets) are
    left out of the problem; they are checked separately by ``constant_delta_violations``.
    """
    prob = build_robust_problem(model, budget)
    prob.meta["family"] = "localized"
    n = model.n
    for k in range(1, model.M + 1):
        for i in range(1, model.N + 1):
            prob.add_variable(_Y(model, i, k))
    for k in range(1, model.M + 1):
        for i in range(1, model.N + 1):
            for c in assemble_delta_lmis(model, budget, i, k):
                if not c.expr.is_constant():
                    prob.add(c)
            rc = assemble_rank_blocks(i, k, n)
            prob.rank_constraints.append(rc)
            # convex relaxation of the rank condition
            prob.add(LmiConstraint(f"psd:{rc.name}", rc.expr, ">", strict=False))
    prob.check()
    return prob


def constant_delta_violations(model: EstimationModel, budget: UncertaintyBudget) -> list[str]:
    """Names of constant gain-gap LMIs that fail (e.g. alpha_i = 0 is fine, Delta = 0)."""
    bad = []
    for k in range(1, model.M + 1):
        for i in range(1, model.N + 1):
            for c in assemble_delta_lmis(model, budget, i, k):
                if c.expr.is_constant():
                    ev = np.linalg.eigvalsh(c.expr.const)
                    # [[a^2 I, 0], [0, I]] is only semidefinite when a = 0; Delta = 0 still holds
                    if ev.min() < 0:
                        bad.append(c.name)
    return bad
