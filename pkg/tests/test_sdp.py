import numpy as np
import pytest

from hinfcons.lmi import (AffineMatrix, LmiConstraint, LmiProblem, Variable, assemble_rank_blocks,
                          build_robust_problem, xname, yname)
from hinfcons.sdp import (FEASIBLE, INFEASIBLE, SolverOptions, min_slack_eig, rank_residual, solve_feasibility,
                          solve_rank_constrained)
from sdp_cases import assert_sound, infeasible_problems, lyapunov_problem, random_feasible_problem


def test_scalar_lyapunov():
    assert solve_feasibility(lyapunov_problem([[-1.0]])).status == FEASIBLE
    assert solve_feasibility(lyapunov_problem([[1.0]])).status == INFEASIBLE


def test_nonnormal_lyapunov_checked_by_eigen_oracle():
    prob = lyapunov_problem([[-1.0, 10.0], [0.0, -1.0]])
    rep = solve_feasibility(prob)
    assert rep.status == FEASIBLE
    assert_sound(prob, rep)
    X = rep.solution["X"]
    A = np.array([[-1.0, 10.0], [0.0, -1.0]])
    assert np.linalg.eigvalsh(A.T @ X + X @ A).max() < 0 < np.linalg.eigvalsh(X).min()


def test_min_slack_eig_examples():
    prob = lyapunov_problem([[-1.0]])
    slack = min_slack_eig(prob, {"X": np.zeros((1, 1))})
    assert slack["lyap"] == 0.0 and slack["pos"] == 0.0
    rep = solve_feasibility(prob)
    big = {"X": rep.solution["X"] + 0.0}
    prob2 = lyapunov_problem([[-1.0]])
    prob2.add(LmiConstraint("cap", AffineMatrix.var(prob2.variables["X"]) - 5 * np.eye(1), "<"))
    big["X"] = big["X"] + 100 * np.eye(1)
    assert max(v for k, v in min_slack_eig(prob2, big).items() if k == "cap") > 0


@pytest.mark.parametrize("seed", range(20))
def test_random_feasible_problems_areassert_sound(seed):
    rng = np.random.default_rng(seed)
    prob = random_feasible_problem(rng, n_vars=1 + seed % 3, n_cons=2 + seed % 4, size=2 + seed % 2)
    rep = solve_feasibility(prob)
    assert rep.status == FEASIBLE
    assert_sound(prob, rep)


@pytest.mark.parametrize("idx", range(5))
def test_infeasible_problems_flagged(idx):
    prob = infeasible_problems()[idx]
    rep = solve_feasibility(prob)
    assert rep.status != FEASIBLE


def test_projection_method_agrees():
    rng = np.random.default_rng(99)
    prob = random_feasible_problem(rng)
    rep = solve_feasibility(prob, SolverOptions(method="projection"))
    assert rep.status == FEASIBLE
    assert_sound(prob, rep)


def test_solver_is_deterministic():
    rng = np.random.default_rng(5)
    prob = random_feasible_problem(rng)
    a, b = solve_feasibility(prob), solve_feasibility(prob)
    for k in a.solution.values:
        np.testing.assert_array_equal(a.solution[k], b.solution[k])


def _rank_problem(lo, hi, n=1, ylo=None):
    prob = LmiProblem()
    rc = assemble_rank_blocks(1, 1, n)
    X = prob.add_variable(Variable(xname(1, 1), "sym", n))
    Y = prob.add_variable(Variable(yname(1, 1), "sym", n))
    prob.add(LmiConstraint("xlo", AffineMatrix.var(X) - lo * np.eye(n), ">"))
    prob.add(LmiConstraint("xhi", AffineMatrix.var(X) - hi * np.eye(n), "<"))
    if ylo is not None:
        prob.add(LmiConstraint("ylo", AffineMatrix.var(Y) - np.diag(ylo), ">"))
    prob.rank_constraints.append(rc)
    prob.add(LmiConstraint("psd:rank", rc.expr, ">", strict=False))
    return prob


def test_rank_constraint_scalar_forces_inverse():
    prob = _rank_problem(0.1, 10.0)
    rep = solve_rank_constrained(prob)
    assert rep.status == FEASIBLE
    x = rep.solution[xname(1, 1)][0, 0]
    y = rep.solution[yname(1, 1)][0, 0]
    assert abs(y - 1 / x) <= 1e-6
    assert rep.iterations == 1


def test_rank_projection_distance_non_increasing():
    prob = _rank_problem(0.1, 10.0, n=2, ylo=[2.0, 0.5])
    rep = solve_rank_constrained(prob)
    assert rep.status == FEASIBLE
    dists = [row[3] for row in rep.residual_history]
    assert len(dists) >= 2
    assert all(b <= a * (1 + 1e-9) for a, b in zip(dists, dists[1:]))
    assert rank_residual(prob.rank_constraints[0], prob, rep.solution.values) <= 1e-6
    X, Y = rep.solution[xname(1, 1)], rep.solution[yname(1, 1)]
    np.testing.assert_allclose(X @ Y, np.eye(2), atol=1e-5)


def test_log_csv(tmp_path):
    path = tmp_path / "log.csv"
    solve_rank_constrained(_rank_problem(0.1, 10.0, n=2, ylo=[2.0, 0.5]), SolverOptions(log_csv=str(path)))
    lines = path.read_text().splitlines()
    assert lines[0].startswith("iteration,margin,rank_residual")
    assert len(lines) >= 2


def test_feasibility_persists_at_larger_gamma(chua):
    """Feasible at the budget level stays feasible when gamma^2 is relaxed."""
    assert solve_feasibility(build_robust_problem(chua.model, chua.budget)).status == FEASIBLE
    for g2 in (1.0, 2.0):
        prob = build_robust_problem(chua.model, chua.budget.with_gamma2(g2))
        rep = solve_feasibility(prob)
        assert rep.status == FEASIBLE
        assert_sound(prob, rep)
