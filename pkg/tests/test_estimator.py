import numpy as np
import pytest
from numpy.testing import assert_array_equal
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mapo_lab.estimator import PreferenceAligner, check_conditions, check_preference_array, dataset_from_array
from mapo_lab.tasks import preset, synthesize_preferences

from conftest import tiny_denoiser


def rows(task, n=64, seed=0):
    d = synthesize_preferences(task, None, n, seed=seed)
    return np.hstack([d.c, d.x_w, d.x_l])


def small(**kw):
    base = dict(task="custom", mismatch_level=1.0, steps=10, batch_size=16, hidden=(8,), T=8)
    base.update(kw)
    return PreferenceAligner(**base)


def test_get_params_and_clone():
    est = small(beta=8.0)
    params = est.get_params()
    assert params["beta"] == 8.0 and params["objective"] == "mapo"
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(lr=5e-3)
    assert est.lr == 5e-3 and twin.lr == 1e-3


def test_fit_predict_score():
    task = preset("custom", 1.0)
    X = rows(task)
    est = small().fit(X)
    assert est.n_features_in_ == 8
    assert len(est.loss_curve_) == 10 and np.all(np.isfinite(est.loss_curve_))
    out = est.predict(np.array([0, 1, 2, 3]))
    assert out.shape == (4, 2)
    assert_array_equal(out, est.predict(np.eye(4)))
    s = est.score(X)
    assert s < 0 and s == est.score(X)
    assert est.sample(2, 5).shape == (5, 2)
    assert est.evaluate(n=64).n == 64


def test_fit_accepts_a_dataset_and_matches_array_input():
    task = preset("custom", 1.0)
    d = synthesize_preferences(task, None, 64, seed=0)
    a = small().fit(d)
    b = small().fit(np.hstack([d.c, d.x_w, d.x_l]))
    assert a.params_.checksum() == b.params_.checksum()


def test_fit_is_deterministic_and_seeded():
    X = rows(preset("custom", 1.0))
    a, b, c = small().fit(X), small().fit(X), small(seed=1).fit(X)
    assert a.checkpoint_.to_bytes() == b.checkpoint_.to_bytes()
    assert a.params_.checksum() != c.params_.checksum()


def test_dpo_uses_init_as_reference():
    task = preset("custom", 1.0)
    init = tiny_denoiser(0, cond_dim=4)
    est = small(objective="dpo", lr=0.0, init_params=init, hidden=(6,)).fit(rows(task))
    assert est.params_.checksum() == init.checksum()
    assert np.allclose(est.loss_curve_, np.log(2), atol=1e-12, rtol=0)


def test_unfitted_estimator_raises():
    with pytest.raises(NotFittedError):
        small().predict(np.array([0]))


def test_bad_init_params():
    with pytest.raises(TypeError):
        small(init_params="model.ckpt").fit(rows(preset("custom", 1.0)))


# validation helpers


def test_check_preference_array():
    X = rows(preset("custom", 1.0), n=4)
    assert check_preference_array(X, 2, 4).shape == (4, 8)
    with pytest.raises(ValueError, match="8 columns"):
        check_preference_array(X[:, :7], 2, 4)
    X[0, 5] = np.nan
    with pytest.raises(ValueError):
        check_preference_array(X, 2, 4)


def test_check_conditions():
    assert_array_equal(check_conditions([0, 2], 3), [[1, 0, 0], [0, 0, 1]])
    assert_array_equal(check_conditions(np.eye(3), 3), np.eye(3))
    for bad in ([0, 3], [0.5], [-1]):
        with pytest.raises(ValueError, match="integers"):
            check_conditions(bad, 3)
    with pytest.raises(ValueError, match="one-hot"):
        check_conditions([[0.5, 0.5, 0.0]], 3)
    with pytest.raises(ValueError, match="condition columns"):
        check_conditions(np.eye(2), 3)


def test_dataset_from_array_round_trip():
    task = preset("custom", 1.0)
    d = synthesize_preferences(task, None, 32, seed=4)
    back = dataset_from_array(np.hstack([d.c, d.x_w, d.x_l]), task, seed=4)
    assert back == d
