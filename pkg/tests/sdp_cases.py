"""LMI problems with known answers, shared by the solver and acceptance tests."""

import numpy as np

from hinfcons.lmi import AffineMatrix, LmiConstraint, LmiProblem, Variable
from hinfcons.sdp import min_slack_eig


def unsound(prob, rep) -> list:
    """Strict constraints that an independent eigenvalue check finds violated at the reported point."""
    slack = min_slack_eig(prob, rep.solution.values)
    bad = []
    for c in prob.constraints:
        if not c.strict:
            continue
        ok = slack[c.name] <= -rep.eps_feas if c.sense == "<" else slack[c.name] >= rep.eps_feas
        if not ok:
            bad.append(c.name)
    return bad


def assert_sound(prob, rep):
    assert unsound(prob, rep) == []


def lyapunov_problem(A):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    X = Variable("X", "sym", n)
    prob = LmiProblem()
    prob.add_variable(X)
    Xe = AffineMatrix.var(X)
    prob.add(LmiConstraint("lyap", A.T @ Xe + Xe @ A, "<"))
    prob.add(LmiConstraint("pos", Xe, ">"))
    return prob


def random_feasible_problem(rng, n_vars=2, n_cons=3, size=2):
    """Constraints built around a known interior point X0 so feasibility is guaranteed."""
    prob = LmiProblem()
    vs = [prob.add_variable(Variable(f"X{v}", "sym", size)) for v in range(n_vars)]
    t = prob.add_variable(Variable("t", "scalar"))
    X0 = {}
    for v in vs:
        R = rng.standard_normal((size, size))
        X0[v.name] = R @ R.T + np.eye(size)
    X0["t"] = 1.0
    for c in range(n_cons):
        expr = AffineMatrix.zeros(size)
        for v in vs:
            Acoef = rng.standard_normal((size, size))
            expr = expr + Acoef.T @ AffineMatrix.var(v) + AffineMatrix.var(v) @ Acoef
        expr = expr + AffineMatrix.scaled(t, np.diag(rng.standard_normal(size)))
        at0 = expr.evaluate(X0, prob.variables)
        lam = np.linalg.eigvalsh(at0).max()
        expr = expr + (-(lam + 0.1 + rng.random())) * np.eye(size)
        prob.add(LmiConstraint(f"c{c}", expr, "<"))
    for v in vs:
        prob.add(LmiConstraint(f"pos:{v.name}", AffineMatrix.var(v), ">"))
    return prob


def infeasible_problems():
    out = []
    # unstable scalar Lyapunov
    out.append(lyapunov_problem([[1.0]]))
    # unstable 2x2 Lyapunov
    out.append(lyapunov_problem([[0.5, 1.0], [0.0, -1.0]]))
    # X > I and X < 0.5 I
    X = Variable("X", "sym", 2)
    p = LmiProblem()
    p.add_variable(X)
    p.add(LmiConstraint("lo", AffineMatrix.var(X) - np.eye(2), ">"))
    p.add(LmiConstraint("hi", AffineMatrix.var(X) - 0.5 * np.eye(2), "<"))
    out.append(p)
    # two positive matrices with negative sum
    p = LmiProblem()
    a, b = p.add_variable(Variable("A", "sym", 2)), p.add_variable(Variable("B", "sym", 2))
    p.add(LmiConstraint("pa", AffineMatrix.var(a), ">"))
    p.add(LmiConstraint("pb", AffineMatrix.var(b), ">"))
    p.add(LmiConstraint("sum", AffineMatrix.var(a) + AffineMatrix.var(b), "<"))
    out.append(p)
    # scalar t > 1 and t < 0
    p = LmiProblem()
    t = p.add_variable(Variable("t", "scalar"))
    p.add(LmiConstraint("lo", AffineMatrix.scaled(t, [[1.0]]) - np.eye(1), ">"))
    p.add(LmiConstraint("hi", AffineMatrix.scaled(t, [[1.0]]), "<"))
    out.append(p)
    return out
