import dataclasses

import numpy as np
import pytest
from scipy.linalg import expm

from hinfcons.gains import GainSet
from hinfcons.network import MarkovPath, StateMapping, SwitchingNetwork
from hinfcons.simulator import (ClosedLoop, DisturbanceSet, DisturbanceSpec, GainMismatchError, SimulationError,
                                _InputLayout, _Inputs, _path_rngs, disagreement, estimate_hinf_ratio, mu_P,
                                rk4_step, signal_energy, simulate, simulate_batch)
from conftest import small_model


def frozen(T, k=1):
    return MarkovPath(np.array([0.0]), np.array([k]), T)


def sine(a=1.0, phi=0.3, b=0.5):
    return DisturbanceSpec("damped-sine", a=a, phi=phi, b=b)


@pytest.fixture(scope="module")
def pair():
    """Two mutual neighbours measuring a scalar stable plant, one static state."""
    m = small_model([[-0.5]], [[[1.0]], [[0.0]]], [[[2], [1]]], Lambda=((0.0,),))
    g = GainSet({(1, 1): np.array([[1.0]]), (2, 1): np.array([[0.0]])},
                {(1, 2, 1): np.array([[0.5]]), (2, 1, 1): np.array([[0.5]])}, 1.0, np.eye(1), 1)
    return m, g


def test_disagreement_examples():
    m = small_model(np.eye(3), [[np.eye(3)], [np.eye(3)]], [[[2], [1]]], Lambda=((0.0,),))
    assert disagreement(m.net, 1, [np.ones(3), np.ones(3)]) == 0.0
    assert disagreement(m.net, 1, [[1.0, 0, 0], [0.0, 0, 0]]) == pytest.approx(1.0)
    ring = small_model(np.eye(3), [[np.eye(3)]] * 3, [[[3], [1], [2]]], Lambda=((0.0,),))
    assert disagreement(ring.net, 1, np.eye(3)) == pytest.approx(2.0)


def test_mu_p_examples(pair):
    m, _ = pair
    assert mu_P(np.eye(1), [0.0], DisturbanceSet(), m, horizon=5.0) == 0.0
    m2 = small_model(np.eye(2), [[np.eye(2)]], [[[]]], Lambda=((0.0,),))
    assert mu_P(np.eye(2), [1.0, 1.0], DisturbanceSet(), m2, horizon=5.0) == 2.0
    # w = sin(pi/2) e^{-t} = e^{-t} on the one always-on edge 1 <- 2
    one = small_model([[-1.0]], [[[1.0]], [[1.0]]], [[[2], []]], Lambda=((0.0,),))
    T = 40.0
    d = DisturbanceSet(w={(1, 2): DisturbanceSpec("damped-sine", a=0.0, phi=np.pi / 2, b=1.0)})
    val = mu_P(np.eye(1), [0.0], d, one, paths=[frozen(T)])
    assert val == pytest.approx(1 / (2 * 2), rel=1e-10)
    with pytest.raises(ValueError):
        mu_P(-np.eye(1), [0.0], d, one, paths=[frozen(T)])


def test_gated_channel_energy():
    m = small_model([[-1.0]], [[[1.0], [1.0]], [[1.0], [1.0]]], [[[2], []], [[], []]])
    spec = DisturbanceSpec("damped-sine", a=0.0, phi=np.pi / 2, b=1.0)
    path = MarkovPath(np.array([0.0, 1.0]), np.array([1, 2]), 30.0)
    val = mu_P(np.eye(1), [0.0], DisturbanceSet(w={(1, 2): spec}), m, paths=[path])
    assert val == pytest.approx((1 - np.exp(-2.0)) / 2 / 2, rel=1e-10)
    assert signal_energy(spec, 1, 30.0, [(0.0, 1.0)]) == pytest.approx((1 - np.exp(-2.0)) / 2, rel=1e-12)


def test_exact_copy_observer_has_zero_error():
    m = small_model([[0.3, 1.0], [-1.0, 0.0]], [[np.zeros((1, 2))], [np.zeros((1, 2))]], [[[2], [1]]],
                    Lambda=((0.0,),))
    g = GainSet({(i, 1): np.zeros((2, 1)) for i in (1, 2)},
                {(1, 2, 1): np.zeros((2, 2)), (2, 1, 1): np.zeros((2, 2))}, 1.0, np.eye(2), 1)
    d = DisturbanceSet(xi_i={1: sine(), 2: sine(2.0)}, w={(1, 2): sine(0.5)})
    r = simulate(m, g, d, [0.0, 0.0], 1, 3.0, 0.01, mode="global", record_every=0.1)
    assert np.all(r.err_norms == 0.0)
    assert r.psi_integral == 0.0


def test_global_and_local_coincide_on_singleton_sets(chua, chua_local):
    x0 = np.array(chua.simulation.x0)
    d = chua.simulation.disturbances
    g = chua_local.gains
    # a model whose local states are the global states
    net = chua.net
    bij = SwitchingNetwork(net.graphs, net.generator, StateMapping((2,) * 5, ((1,) * 5, (2,) * 5)))
    m = dataclasses.replace(chua.model, net=bij)
    loc = GainSet(g.L, g.K, g.gamma2, g.P, g.m0,
                  {(i, k): g.L[(i, k)] for (i, k) in g.L}, dict(g.K))
    a = simulate_batch(m, loc, d, x0, 1, 2.0, 0.002, runs=3, seed=4, mode="global")
    b = simulate_batch(m, loc, d, x0, 1, 2.0, 0.002, runs=3, seed=4, mode="local")
    np.testing.assert_array_equal(a.psi_integral, b.psi_integral)
    np.testing.assert_array_equal(a.terminal_errors, b.terminal_errors)


def test_rk4_matches_matrix_exponential(chua, chua_global):
    x0 = np.array(chua.simulation.x0)
    T = 3.0
    r = simulate(chua.model, chua_global.gains, DisturbanceSet(), x0, 1, T, 1e-3, mode="global",
                 path=frozen(T), record_every=T)
    cl = ClosedLoop(chua.model, chua_global.gains, _InputLayout(chua.model, DisturbanceSet()), "global")
    zT = expm(cl.F[1] * T) @ np.tile(x0, 6)
    scale = np.abs(zT).max()
    np.testing.assert_allclose(r.x[-1], zT[:3], atol=1e-8 * scale)
    np.testing.assert_allclose((r.x[-1][None] - r.xhat[-1]).ravel(), zT[3:], atol=1e-8 * scale)


def test_rk4_step_single_input():
    F = np.array([[-1.0]])
    B = np.array([[1.0]])
    z = rk4_step(F, B, np.array([[1.0]]), np.array([[0.0]]), np.array([[0.0]]), np.array([[0.0]]), 0.1)
    assert z[0, 0] == pytest.approx(np.exp(-0.1), abs=1e-7)


def test_psi_integral_fourth_order(chua, chua_global):
    x0 = np.array(chua.simulation.x0)
    d = chua.simulation.disturbances
    T = 5.0
    v = [simulate(chua.model, chua_global.gains, d, x0, 1, T, h, mode="global", path=frozen(T)).psi_integral
         for h in (0.004, 0.002, 0.001)]
    ratio = (v[0] - v[1]) / (v[1] - v[2])
    assert 8 <= ratio <= 32


def test_jump_splitting_against_piecewise_expm():
    m2 = small_model([[-0.5]], [[[1.0], [1.0]], [[0.0], [0.0]]], [[[2], [1]], [[], []]])
    g2 = GainSet({(i, k): np.array([[1.0 if i == 1 else 0.0]]) for i in (1, 2) for k in (1, 2)},
                 {(1, 2, k): np.array([[0.5]]) for k in (1, 2)} | {(2, 1, k): np.array([[0.5]]) for k in (1, 2)},
                 1.0, np.eye(1), 1)
    path = MarkovPath(np.array([0.0, 0.3337, 0.71]), np.array([1, 2, 1]), 1.0)
    r = simulate(m2, g2, DisturbanceSet(), [1.0], 1, 1.0, 0.01, mode="global", path=path, record_every=1.0)
    cl = ClosedLoop(m2, g2, _InputLayout(m2, DisturbanceSet()), "global")
    z = np.ones(3)
    for a, b, s in path.segments():
        z = expm(cl.F[s] * (b - a)) @ z
    np.testing.assert_allclose(r.x[-1][0] - r.xhat[-1][:, 0], z[1:], rtol=1e-9)


def test_symmetric_channel_noise_bitwise():
    m = small_model([[-1.0]], [[[1.0]], [[1.0]]], [[[2], [1]]], Lambda=((0.0,),))
    spec = DisturbanceSpec("random-pc", b=0.2, dt=0.05)
    d = DisturbanceSet(w={(1, 2): spec}, symmetric_w=True)
    lay = _InputLayout(m, d)
    inp = _Inputs(lay, _path_rngs(9, 3), 2.0, 0.01)
    u = inp.chunk(np.linspace(0, 2, 201))
    a, b = u[..., lay.slices[("w", 1, 2)]], u[..., lay.slices[("w", 2, 1)]]
    assert np.any(a != 0)
    assert a.tobytes() == b.tobytes()
    d2 = DisturbanceSet(w={(1, 2): spec}, symmetric_w=False)
    u2 = _Inputs(_InputLayout(m, d2), _path_rngs(9, 3), 2.0, 0.01).chunk(np.linspace(0, 2, 201))
    assert not np.any(u2[..., _InputLayout(m, d2).slices[("w", 2, 1)]])


def test_zero_battery_rejected(pair):
    m, g = pair
    with pytest.warns(RuntimeWarning), pytest.raises(ValueError):
        estimate_hinf_ratio(m, g, [([0.0], DisturbanceSet())], runs=2, horizon=1.0, step=0.01, mode="global")


def test_identical_estimates_give_zero_ratio():
    m = small_model([[-1.0]], [[[1.0]], [[1.0]]], [[[2], [1]]], Lambda=((0.0,),))
    g = GainSet({(i, 1): np.array([[0.7]]) for i in (1, 2)},
                {(1, 2, 1): np.array([[0.3]]), (2, 1, 1): np.array([[0.3]])}, 1.0, np.eye(1), 1)
    d = DisturbanceSet(xi=sine())
    est = estimate_hinf_ratio(m, g, [([1.0], d)], runs=2, horizon=2.0, step=0.01, mode="global")
    assert 0.0 <= est.worst <= 1e-25  # roundoff only


def test_horizon_and_step_must_be_positive(pair):
    m, g = pair
    with pytest.raises(ValueError):
        simulate(m, g, DisturbanceSet(), [1.0], 1, 0.0, 0.01, mode="global")
    with pytest.raises(ValueError):
        simulate(m, g, DisturbanceSet(), [1.0], 1, 1.0, 0.0, mode="global")


def test_blowup_raises(pair):
    m, g = pair
    bad = small_model([[200.0]], [[[0.0]], [[0.0]]], [[[2], [1]]], Lambda=((0.0,),))
    with pytest.raises(SimulationError, match="non-finite"):
        simulate(bad, g, DisturbanceSet(), [1.0], 1, 10.0, 0.005, mode="global")


def test_gain_mismatch(pair, chua_local):
    m, _ = pair
    with pytest.raises(GainMismatchError):
        simulate(m, chua_local.gains, DisturbanceSet(), [1.0], 1, 1.0, 0.01)


def test_coarse_step_warns(pair):
    m, g = pair
    big = GainSet({(1, 1): np.array([[500.0]]), (2, 1): np.array([[0.0]])}, g.K, 1.0, np.eye(1), 1)
    with pytest.warns(RuntimeWarning, match="spectral radius"):
        try:
            simulate(m, big, DisturbanceSet(), [1.0], 1, 0.1, 0.01, mode="global")
        except SimulationError:
            pass


def test_deterministic_given_seed(chua, chua_local):
    x0 = np.array(chua.simulation.x0)
    d = chua.simulation.disturbances
    a = simulate_batch(chua.model, chua_local.gains, d, x0, 1, 2.0, 0.002, runs=3, seed=12)
    b = simulate_batch(chua.model, chua_local.gains, d, x0, 1, 2.0, 0.002, runs=3, seed=12)
    assert a.psi_integral.tobytes() == b.psi_integral.tobytes()
    assert a.err_integrals.tobytes() == b.err_integrals.tobytes()


def test_single_run_matches_batch(chua, chua_local):
    x0 = np.array(chua.simulation.x0)
    d = chua.simulation.disturbances
    b = simulate_batch(chua.model, chua_local.gains, d, x0, 1, 2.0, 0.002, runs=1, seed=5)
    r = simulate(chua.model, chua_local.gains, d, x0, 1, 2.0, 0.002, seed=5)
    assert r.psi_integral == pytest.approx(float(b.psi_integral[0]), rel=1e-12)
    assert r.mu_P == pytest.approx(float(b.mu_P[0]), rel=1e-12)
    assert r.psi_integral >= 0 and r.mu_P > 0


def test_error_integrals_have_small_tails(chua, chua_local):
    x0 = np.array(chua.simulation.x0)
    for _, d in chua.simulation.battery[:3]:
        a = simulate_batch(chua.model, chua_local.gains, d, x0, 1, 10.0, 0.002, runs=3, seed=3)
        b = simulate_batch(chua.model, chua_local.gains, d, x0, 1, 20.0, 0.002, runs=3, seed=3)
        tail = b.err_integrals - a.err_integrals
        assert np.all(tail >= -1e-12)
        assert np.all(tail <= 1e-3 * b.err_integrals)


def test_random_noise_runs(pair):
    m, g = pair
    d = DisturbanceSet(w={(1, 2): DisturbanceSpec("random-pc", b=0.5, dt=0.1)}, xi=sine())
    res = simulate_batch(m, g, d, [1.0], 1, 3.0, 0.01, runs=4, seed=1, mode="global")
    assert len(set(res.psi_integral.tolist())) == 4
    assert np.all(res.mu_P > 0)


def test_trajectory_rows(pair):
    m, g = pair
    r = simulate(m, g, DisturbanceSet(xi=sine()), [1.0], 1, 1.0, 0.01, mode="global", record_every=0.1)
    header, rows = r.to_rows()
    assert len(rows) == len(r.t)
    assert header[:2] == ["t", "eta"] and len(rows[0]) == len(header)
