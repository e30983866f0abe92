import numpy as np
import pytest

from hinfcons.network import (Digraph, MarkovGenerator, MarkovPath, NetworkError, StateMapping,
                              SwitchingNetwork, conditional_weights, degrees, invariant_distribution,
                              laplacian, local_path, sample_ctmc_path, validate_network)


def test_laplacian_small_cases():
    g = Digraph(np.array([[0, 0], [1, 0]]))
    np.testing.assert_array_equal(laplacian(g), [[0, 0], [-1, 1]])
    np.testing.assert_array_equal(laplacian(Digraph(np.zeros((3, 3)))), np.zeros((3, 3)))
    full = np.ones((3, 3)) - np.eye(3)
    np.testing.assert_array_equal(laplacian(Digraph(full)), 2 * np.eye(3) - full)


def test_laplacian_rows_sum_to_zero(rng):
    for _ in range(20):
        a = (rng.random((6, 6)) < 0.4).astype(float)
        np.fill_diagonal(a, 0)
        assert np.allclose(laplacian(Digraph(a)).sum(axis=1), 0)


def test_degrees():
    g = Digraph(np.array([[0, 0], [1, 0]]))
    assert degrees(g, 2) == (1, 0)
    assert degrees(g, 1) == (0, 1)
    k5 = Digraph(np.ones((5, 5)) - np.eye(5))
    assert all(degrees(k5, i) == (4, 4) for i in range(1, 6))


def test_neighbour_convention():
    g = Digraph.from_neighbours([[2], [], [1, 2]])
    assert g.neighbours(3) == (1, 2)
    assert g.receivers(2) == (1, 3)
    assert (3, 1) in g.edges()


def test_self_loop_rejected():
    with pytest.raises(NetworkError):
        Digraph(np.eye(2))


def test_invariant_distribution_examples():
    np.testing.assert_allclose(invariant_distribution(MarkovGenerator([[-0.1, 0.1], [0.1, -0.1]])), [0.5, 0.5])
    np.testing.assert_allclose(invariant_distribution(MarkovGenerator([[-2, 2], [1, -1]])), [1 / 3, 2 / 3])
    np.testing.assert_allclose(invariant_distribution(MarkovGenerator([[0.0]])), [1.0])


def test_reducible_generator_rejected():
    with pytest.raises(NetworkError):
        invariant_distribution(MarkovGenerator([[-1, 1, 0], [0, 0, 0], [0, 0, 0]]))


def test_generator_row_sums_checked():
    with pytest.raises(NetworkError):
        MarkovGenerator([[-1, 0.5], [1, -1]])


def test_conditional_weights_case_study(chua):
    net = chua.net
    assert conditional_weights(net, 1, 1) == pytest.approx({1: 0.5, 2: 0.5})
    assert conditional_weights(net, 2, 1) == pytest.approx({1: 1.0})


def test_conditional_weights_three_states():
    pi = np.array([0.2, 0.3, 0.5])
    Lam = np.tile(pi, (3, 1))
    np.fill_diagonal(Lam, 0)
    np.fill_diagonal(Lam, -Lam.sum(axis=1))
    g = Digraph.from_neighbours([[2], [1]])
    net = SwitchingNetwork((g, g, g), MarkovGenerator(Lam), StateMapping((2, 3), ((1, 1), (2, 2), (2, 3))))
    assert conditional_weights(net, 1, 2) == pytest.approx({2: 0.375, 3: 0.625})


def test_single_state_path():
    p = sample_ctmc_path(MarkovGenerator([[0.0]]), 1, 50.0, 1)
    assert list(p.states) == [1] and list(p.times) == [0.0]


def test_holding_times_and_occupation(chua):
    gen = chua.net.generator
    p = sample_ctmc_path(gen, 1, 1e5, 11)
    holds = np.diff(p.times)
    assert len(holds) > 9000
    assert abs(holds.mean() - 10.0) < 0.3
    assert abs(p.occupation(2)[0] - 0.5) < 0.01 * 2  # 2% band at this path length


def test_path_is_deterministic_given_seed(chua):
    a = sample_ctmc_path(chua.net.generator, 1, 200.0, 5)
    b = sample_ctmc_path(chua.net.generator, 1, 200.0, 5)
    np.testing.assert_array_equal(a.times, b.times)
    np.testing.assert_array_equal(a.states, b.states)


def test_local_path_case_study(chua):
    p = MarkovPath(np.array([0.0, 1.0, 2.0]), np.array([1, 2, 1]), 3.0)
    assert list(local_path(chua.net, p, 1).states) == [1]
    assert list(local_path(chua.net, p, 3).states) == [1, 2, 1]


def test_validate_network(chua):
    assert validate_network(chua.net) == []
    g = Digraph.from_neighbours([[2], [1]])
    dup = SwitchingNetwork((g, g), MarkovGenerator([[-1, 1], [1, -1]]), StateMapping((1, 1), ((1, 1), (1, 1))))
    assert any("injective" in v.message for v in validate_network(dup))
    broken = Digraph.from_neighbours([[2], [1], []])
    net = SwitchingNetwork((broken,), MarkovGenerator([[0.0]]), StateMapping((1, 1, 1), ((1, 1, 1),)))
    assert any("connected" in v.message for v in validate_network(net))


def test_case_study_topology_constraints(chua):
    net = chua.net
    assert net.neighbours(1, 1) == net.neighbours(1, 2) == (3,)
    for i in (3, 4, 5):
        assert net.neighbours(i, 1) != net.neighbours(i, 2)
    for k in (1, 2):
        assert net.graph(k).is_weakly_connected()
