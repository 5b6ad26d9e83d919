import json
import math
from pathlib import Path

import numpy as np
import pytest

from daflow import metrics as mt
from daflow import models as m
from daflow.enkf import FilterDivergenceError
from daflow.rng import make_rng

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"


# -- relative L2 -------------------------------------------------------------------

def test_relative_l2_examples():
    assert mt.relative_l2([2.5, 2.5, 2.5], 2.5) == 0.0
    assert mt.relative_l2([-6.0], -3.0) == 1.0
    assert mt.relative_l2([1.0, 3.0], 2.0) == 0.5


def test_relative_l2_vectors_and_zero_truth():
    truth = np.array([3.0, 4.0])
    est = np.array([[3.0, 4.0], [3.0, 9.0]])
    assert math.isclose(mt.relative_l2(est, truth), math.sqrt(12.5) / 5)
    with pytest.raises(ValueError):
        mt.relative_l2([1.0], 0.0)


def test_relative_l2_permutation_invariant():
    est = np.random.default_rng(0).standard_normal(20)
    assert mt.relative_l2(est, 1.3) == pytest.approx(mt.relative_l2(est[::-1], 1.3),
                                                    rel=1e-15)


# -- rmse --------------------------------------------------------------------------

def test_rmse_f_examples():
    pts = np.random.default_rng(1).standard_normal((30, 4))
    flow = lambda x: 2 * x  # noqa: E731
    assert mt.rmse_f(flow, flow, pts) == 0.0
    assert math.isclose(mt.rmse_f(lambda x: 2 * x - 0.7, flow, pts), 0.7)


def test_rmse_f_poly18_at_reference():
    p = m.build_problem("parameterized", m.ProblemConfig(d_x=10))
    ref = lambda x: p.reference_model.transition({}, x)  # noqa: E731
    pts = mt.attractor_points(ref, 10, make_rng(0, "attr"), P=50, burn=100)
    params = dict(p.theta0.replace(alpha=m.POLY18_ALPHA_STAR).items())
    assert mt.rmse_f(lambda x: p.model.transition(params, x), ref, pts) < 1e-10


def test_attractor_points_shape_and_spread():
    p = m.build_problem("parameterized", m.ProblemConfig(d_x=10))
    ref = lambda x: p.reference_model.transition({}, x)  # noqa: E731
    pts = mt.attractor_points(ref, 10, make_rng(0, "attr"), P=100, burn=200)
    assert pts.shape == (100, 10)
    # points on the Lorenz-96 attractor (F = 8) have a spread of a few units
    assert 1.0 < pts.std() < 10.0


def test_rmse_a_examples():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((300, 5))
    assert mt.burn_in(300) == 60
    assert mt.rmse_a(x, x) == 0.0
    assert math.isclose(mt.rmse_a(x - 1.5, x), 1.5)


def test_rmse_a_skips_burn_in():
    x = np.zeros((10, 2))
    means = x.copy()
    means[:2] = 100.0  # steps 1..T_b are ignored
    assert mt.rmse_a(means, x) == 0.0
    means[2] = 1.0
    assert math.isclose(mt.rmse_a(means, x), math.sqrt(1 / 8))
    with pytest.raises(ValueError):
        mt.rmse_a(x, x, T_b=10)
    with pytest.raises(ValueError):
        mt.rmse_a(x, x[:5])


def test_rmse_a_averages_squares_across_sequences():
    truth = np.zeros((2, 5, 1))
    means = np.stack([np.full((5, 1), 1.0), np.full((5, 1), 3.0)])
    assert math.isclose(mt.rmse_a(means, truth, 0), math.sqrt(5.0))


# -- sigma_beta --------------------------------------------------------------------

def test_sigma_beta_examples():
    assert mt.sigma_beta(4 * np.eye(5)) == 2.0
    assert mt.sigma_beta(np.zeros((3, 3))) == 0.0
    assert math.isclose(mt.sigma_beta(np.diag([1.0, 2.0, 3.0])), math.sqrt(2))


# -- test log-likelihood -----------------------------------------------------------

def test_test_loglik_deterministic_and_empty():
    p = m.build_problem("linear", m.ProblemConfig(d_x=5, obs_var=0.5, init_var=4.0))
    _, Y = p.model.simulate(p.reference_theta, 6, make_rng(0, "tl"))
    a = mt.test_loglik(p.model, p.reference_theta, Y, "enkf", 20, 1)
    b = mt.test_loglik(p.model, p.reference_theta, Y, "enkf", 20, 1)
    assert a == b
    assert np.isfinite(mt.test_loglik(p.model, p.reference_theta, Y, "pf", 20, 1))
    assert mt.test_loglik(p.model, p.reference_theta, Y[:0], "enkf", 20) == 0.0
    with pytest.raises(ValueError):
        mt.test_loglik(p.model, p.reference_theta, Y, "ukf", 20)


def test_test_loglik_divergence():
    p = m.build_problem("linear", m.ProblemConfig(d_x=5, obs_var=0.5, init_var=4.0))
    _, Y = p.model.simulate(p.reference_theta, 6, make_rng(0, "tl"))
    theta = p.reference_theta.replace(alpha=np.array([1e200, 0, 0]))
    with np.errstate(all="ignore"), pytest.raises(FilterDivergenceError):
        mt.test_loglik(p.model, theta, Y, "enkf", 20)


def test_reference_model_test_loglik_fixture():
    rec = json.loads((FIXTURES / "enkf_test_loglik.json").read_text())
    p = m.build_problem("parameterized", m.ProblemConfig(d_x=rec["d_x"]))
    Y = np.array(rec["observations"])
    theta = p.theta0.replace(alpha=m.POLY18_ALPHA_STAR)
    val = mt.test_loglik(p.model, theta, Y, "enkf", rec["N"], rec["seed"],
                         rec["taper_radius"])
    assert val == rec["test_loglik"]
    # the perturbed starting point explains the same data worse
    worse = mt.test_loglik(p.model, p.theta0, Y, "enkf", rec["N"], rec["seed"],
                           rec["taper_radius"])
    assert worse < val


# -- rate fitting ------------------------------------------------------------------

def test_fit_rate_exact_power_laws():
    Ns = np.array([50, 100, 200, 400, 800])
    slope, icpt = mt.fit_rate(Ns, 3.0 * Ns ** -0.5)
    assert abs(slope + 0.5) < 1e-12 and math.isclose(icpt, math.log(3.0))
    assert abs(mt.fit_rate(Ns, 0.2 / Ns)[0] + 1) < 1e-12


def test_fit_rate_errors():
    with pytest.raises(ValueError):
        mt.fit_rate([1, 2, 3], [1.0, 0.5, 0.3])
    with pytest.raises(ValueError):
        mt.fit_rate([1, 2, 3, 4], [1.0, 0.0, 0.3, 0.2])


def test_small_rate_study():
    p = m.build_problem("linear", m.ProblemConfig(d_x=4, obs_var=0.5, init_var=4.0))
    _, Y = p.model.simulate(p.reference_theta, 5, make_rng(0, "rs"))
    Ns = [20, 40, 80, 160]
    res = mt.rate_study(p.model, p.reference_theta, Y, Ns, P=6, seed=1)
    assert set(res) == {"loglik", "grad_alpha", "grad_beta"}
    for r in res.values():
        assert r.Ns == Ns and len(r.errors) == 4 and r.P == 6
        assert all(e > 0 for e in r.errors) and all(s >= 0 for s in r.stderrs)
        assert r.slope < 0
        rows = list(r.rows())
        assert rows[0]["target"] == r.quantity and rows[-1]["N"] == 160
    assert res["grad_alpha"].samples[20].shape == (6, 3)
    again = mt.rate_study(p.model, p.reference_theta, Y, Ns, P=6, seed=1)
    assert again["loglik"].errors == res["loglik"].errors


def test_natural_beta_gradient_chain_rule():
    p = m.build_problem("linear", m.ProblemConfig(d_x=4, obs_var=0.5, init_var=4.0))
    g = p.theta0.replace(beta=np.array([1.0, 2.0]))
    nat = mt.natural_gradient_blocks(p.model, p.theta0, g)
    assert np.allclose(nat["beta"], np.array([1.0, 2.0]) / np.exp(p.theta0.beta))
