import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from daflow import SSMLearner
from daflow import models as m
from daflow.rng import make_rng
from daflow.validation import check_observations, check_positive_int, check_seed, check_states


@pytest.fixture(scope="module")
def data():
    p = m.build_problem("linear", m.ProblemConfig(d_x=5, obs_var=0.5, init_var=4.0))
    X, Y = zip(*(p.model.simulate(p.reference_theta, 15, make_rng(0, "est", i))
                 for i in range(2)))
    return np.array(X), np.array(Y)


def small(**kw):
    base = dict(problem="linear", d_x=5, method="adenkf", N=20, epochs=3,
                eta0=0.01, taper_radius=None, random_state=3)
    base.update(kw)
    return SSMLearner(**base)


def test_params_and_clone():
    est = small(N=33)
    params = est.get_params()
    assert params["N"] == 33 and params["method"] == "adenkf"
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(epochs=7)
    assert est.epochs == 7


def test_unfitted_raises(data):
    _, Y = data
    with pytest.raises(NotFittedError):
        small().transform(Y[0])


def test_fit_transform_predict_score(data):
    X, Y = data
    est = small().fit(Y)
    assert len(est.history_) == 3 and est.n_features_in_ == 5
    means = est.transform(Y[0])
    assert means.shape == (15, 5)
    assert est.transform(Y).shape == (2, 15, 5)
    pred = est.predict(X[0, :4])
    assert pred.shape == (4, 5)
    A = m.tridiag_matrix(est.theta_.alpha, 5)
    assert np.allclose(pred, X[0, :4] @ A.T)
    s = est.score(Y[1])
    assert np.isfinite(s) and s == est.score(Y[1])


def test_fit_is_deterministic(data):
    _, Y = data
    a, b = small().fit(Y), small().fit(Y)
    assert a.theta_.equals(b.theta_)
    c = small(random_state=4).fit(Y)
    assert not a.theta_.equals(c.theta_)


def test_truncated_method_records(data):
    _, Y = data
    est = small(method="adenkf-t", L=5, epochs=2).fit(Y)
    assert len(est.history_) == 2 * 3


def test_input_validation(data):
    _, Y = data
    with pytest.raises(ValueError):
        small().fit(Y[..., :3])
    with pytest.raises(ValueError):
        small(N=1).fit(Y)
    with pytest.raises(ValueError):
        small(epochs=0).fit(Y)
    with pytest.raises(ValueError):
        small(random_state=-2).fit(Y)
    bad = Y.copy()
    bad[0, 3, 1] = np.nan
    with pytest.raises(ValueError):
        small().fit(bad)
    est = small().fit(Y)
    with pytest.raises(ValueError):
        est.predict(np.zeros((2, 4)))


def test_validation_helpers():
    arr, single = check_observations(np.zeros((4, 2)))
    assert arr.shape == (1, 4, 2) and single
    with pytest.raises(ValueError):
        check_observations(np.zeros(3))
    with pytest.raises(ValueError):
        check_observations(np.zeros((1, 0, 2)))
    assert check_states(np.zeros(3), 3).shape == (1, 3)
    with pytest.raises(ValueError):
        check_states(np.full((1, 3), np.inf), 3)
    assert check_positive_int("k", 3) == 3
    with pytest.raises(ValueError):
        check_positive_int("k", 2.5)
    assert check_seed(2 ** 64 - 1) == 2 ** 64 - 1
    with pytest.raises(ValueError):
        check_seed(2 ** 64)
