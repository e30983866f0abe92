import numpy as np
import pytest

from conftest import small_model
from hinfcons.plant import (ChannelModel, MeasurementModel, ModelError, PlantModel, UncertaintyBudget,
                            noise_shape_E, noise_shape_F, validate_model)


def _mm(D, Dbar):
    return MeasurementModel([[np.ones((1, 3))]], [[np.atleast_2d(D)]], [[np.atleast_2d(Dbar)]])


def test_noise_shape_E_examples():
    assert noise_shape_E(_mm(0.0, 0.025), 1, 1) == pytest.approx(np.array([[6.25e-4]]))
    mm = MeasurementModel([[np.eye(2)]], [[np.eye(2)]], [[np.zeros((2, 2))]])
    np.testing.assert_allclose(noise_shape_E(mm, 1, 1), np.eye(2))
    with pytest.raises(ModelError):
        noise_shape_E(_mm(0.0, 0.0), 1, 1)


def test_noise_shape_F_examples():
    cm = ChannelModel({(1, 2): np.eye(3)}, {(1, 2): 0.5 * np.eye(3)})
    np.testing.assert_allclose(noise_shape_F(cm, 1, 2), 0.25 * np.eye(3))
    cm = ChannelModel({(1, 2): np.eye(3)}, {(1, 2): np.eye(3)})
    np.testing.assert_allclose(noise_shape_F(cm, 1, 2), np.eye(3))
    cm = ChannelModel({(1, 2): np.eye(3)}, {(1, 2): np.zeros((3, 3))})
    with pytest.raises(ModelError):
        noise_shape_F(cm, 1, 2)


def test_case_study_model_is_valid(chua):
    m = chua.model
    assert validate_model(m.plant, m.meas, m.chan, m.net) == []
    for i in range(1, 6):
        for k in (1, 2):
            E = m.E(i, k)
            assert np.array_equal(E, E.T) and np.linalg.eigvalsh(E).min() > 0


def test_local_constancy_violation():
    # node 1 keeps one local state but its C changes with the global state
    C = [[[[1.0, 0.0]], [[0.0, 1.0]]], [[[1.0, 0.0]], [[1.0, 0.0]]]]
    m = small_model(-np.eye(2), C, [[[2], [1]], [[2], [1]]], phi=((1, 1), (1, 2)), counts=(1, 2))
    bad = validate_model(m.plant, m.meas, m.chan, m.net)
    assert any("node 1" in v.message or "[1" in v.field for v in bad)


def test_wrong_B2_rows():
    m = small_model(-np.eye(2), [[[[1.0, 0.0]]], [[[0.0, 1.0]]]], [[[2], [1]]], Lambda=((0.0,),))
    bad = validate_model(PlantModel(-np.eye(2), np.ones((3, 1))), m.meas, m.chan, m.net)
    assert any(v.field == "plant.B2" for v in bad)


def test_budget_violations():
    assert UncertaintyBudget(-1.0, (0.0,), (0.1,), {}).violations()
    assert UncertaintyBudget(1.0, (0.0,), (-0.1,), {}).violations()
    assert UncertaintyBudget(1.0, (0.0,), (0.1,), {}).violations() == []
