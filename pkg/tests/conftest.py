import numpy as np
import pytest

from hinfcons import example_config_path
from hinfcons.config import load_config
from hinfcons.detectability import laplacian_zero_multiplicity
from hinfcons.gains import synthesize
from hinfcons.network import Digraph, MarkovGenerator, StateMapping, SwitchingNetwork, laplacian
from hinfcons.plant import (ChannelModel, EstimationModel, MeasurementModel, PlantModel,
                            UncertaintyBudget)


@pytest.fixture(scope="session")
def chua_path():
    return example_config_path()


@pytest.fixture(scope="session")
def chua(chua_path):
    return load_config(chua_path)


@pytest.fixture(scope="session")
def chua_local(chua):
    res = synthesize(chua.model, chua.budget, "local", chua.solver)
    assert res.feasible
    return res


@pytest.fixture(scope="session")
def chua_global(chua):
    res = synthesize(chua.model, chua.budget, "global", chua.solver)
    assert res.feasible
    return res


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def small_model(A, C_table, neighbours, Lambda=((-1.0, 1.0), (1.0, -1.0)), phi=None, counts=None,
                H=None, G=None, B2=None, Dbar=0.1):
    """Helper for hand-sized models; C_table[i][k] is node i's C in state k."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    M = len(neighbours)
    N = len(neighbours[0])
    if phi is None:
        phi = tuple(tuple([k + 1] * N) for k in range(M))
        counts = (M,) * N
    net = SwitchingNetwork(tuple(Digraph.from_neighbours(nb) for nb in neighbours),
                           MarkovGenerator(np.array(Lambda, dtype=float)[:M, :M] if M > 1 else np.zeros((1, 1))),
                           StateMapping(counts, phi))
    B2 = np.ones((n, 1)) * 0.1 if B2 is None else np.atleast_2d(B2)
    C = [[np.atleast_2d(np.asarray(c, dtype=float)) for c in row] for row in C_table]
    D = [[np.zeros((C[i][k].shape[0], B2.shape[1])) for k in range(M)] for i in range(N)]
    Db = [[Dbar * np.eye(C[i][k].shape[0]) for k in range(M)] for i in range(N)]
    H = np.eye(n) if H is None else np.atleast_2d(H)
    G = 0.5 * np.eye(H.shape[0]) if G is None else np.atleast_2d(G)
    chan = ChannelModel.uniform(net.channels(), H, G)
    return EstimationModel(PlantModel(A, B2), MeasurementModel(C, D, Db), chan, net)


def budget_for(model, gamma2=1.0, alpha=0.0, delta=0.3, beta=None):
    N = model.N
    return UncertaintyBudget(gamma2, (alpha,) * N, (delta,) * N, dict(beta or {}))


def random_detect_instance(rng):
    """Small single-state model with unstable modes hidden from some sensors.

    A has distinct real eigenvalues (so it is cyclic); sensor and channel rows
    are built in the eigenbasis with random zero patterns.  Resampled until the
    Laplacian zero eigenvalue is simple.
    """
    n = int(rng.integers(2, 4))
    N = int(rng.integers(2, 4))
    lam = rng.uniform(0.2, 2.0, n) * rng.choice([-1.0, 1.0], n)
    lam += 0.05 * np.arange(n)
    V = rng.standard_normal((n, n)) + 2 * np.eye(n)
    Vinv = np.linalg.inv(V)
    A = V @ np.diag(lam) @ Vinv

    def rows(p_zero):
        r = rng.standard_normal((1, n)) * (rng.random(n) > p_zero)
        return r @ Vinv

    C = [[rows(0.5)] for _ in range(N)]
    H = np.eye(n) if rng.random() < 0.3 else np.vstack([rows(0.4) for _ in range(n - 1)])
    while True:
        nb = [[j for j in range(1, N + 1) if j != i and rng.random() < 0.5] for i in range(1, N + 1)]
        net = Digraph.from_neighbours(nb)
        if net.is_weakly_connected() and laplacian_zero_multiplicity(laplacian(net)) == 1:
            break
    return small_model(A, C, [nb], H=H, G=np.eye(H.shape[0]), B2=np.zeros((n, 1)))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
