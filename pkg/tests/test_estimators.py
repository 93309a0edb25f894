import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.utils.estimator_checks import parametrize_with_checks

from mflab.estimators import MeanFieldNetRegressor


def data(n=48, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, 2))
    return X, np.tanh(3 * X[:, 0] - 2 * X[:, 1])


@parametrize_with_checks([MeanFieldNetRegressor(hidden_layer_sizes=(8,), solver="full-batch", learning_rate=0.1,
                                                n_steps=300, random_state=0)])
def test_sklearn_compatible(estimator, check):
    check(estimator)


@pytest.mark.parametrize("solver", ["sgd", "full-batch", "mf-rk4", "mf-euler"])
def test_solvers_reduce_loss(solver):
    X, y = data()
    m = MeanFieldNetRegressor(hidden_layer_sizes=(12, 12), solver=solver, learning_rate=0.05, n_steps=200,
                              random_state=0).fit(X, y)
    assert m.loss_curve_[-1] < 0.5 * m.loss_curve_[0]
    assert m.predict(X).shape == (48,)
    assert m.transform(X).shape == (48, 12)
    assert len(m.loss_times_) == len(m.loss_curve_)


def test_full_batch_equals_euler():
    X, y = data()
    kw = dict(hidden_layer_sizes=(6, 6), learning_rate=0.05, n_steps=40, random_state=3)
    a = MeanFieldNetRegressor(solver="full-batch", **kw).fit(X, y)
    b = MeanFieldNetRegressor(solver="mf-euler", **kw).fit(X, y)
    for u, v in zip(a.coefs_, b.coefs_):
        np.testing.assert_allclose(u, v, atol=1e-12, rtol=0)


def test_random_state_reproducible():
    X, y = data()
    kw = dict(hidden_layer_sizes=(5,), n_steps=50, random_state=7)
    a = MeanFieldNetRegressor(**kw).fit(X, y).predict(X)
    b = MeanFieldNetRegressor(**kw).fit(X, y).predict(X)
    assert a.tobytes() == b.tobytes()


def test_params_round_trip():
    m = MeanFieldNetRegressor(hidden_layer_sizes=(3, 4), init="pseudo-iid", lr_scale=(1.0, 2.0, 1.0))
    assert clone(m).get_params() == m.get_params()
    m.set_params(solver="mf-rk4")
    assert m.solver == "mf-rk4"


def test_not_fitted():
    with pytest.raises(NotFittedError):
        MeanFieldNetRegressor().predict(np.zeros((2, 2)))


def test_feature_count_checked():
    X, y = data()
    m = MeanFieldNetRegressor(hidden_layer_sizes=(4,), n_steps=5).fit(X, y)
    with pytest.raises(ValueError):
        m.predict(np.zeros((3, 5)))


@pytest.mark.parametrize("bad", [dict(solver="adam"), dict(n_steps=-1), dict(learning_rate=0.0),
                                 dict(hidden_layer_sizes=(0,)), dict(activation="relu")])
def test_invalid_params(bad):
    X, y = data()
    with pytest.raises(ValueError):
        MeanFieldNetRegressor(**bad).fit(X, y)


def test_pipeline():
    X, y = data(64)
    pipe = make_pipeline(StandardScaler(), MeanFieldNetRegressor(hidden_layer_sizes=(16,), solver="full-batch",
                                                                learning_rate=0.2, n_steps=300, random_state=0))
    assert pipe.fit(X, y).score(X, y) > 0.5
