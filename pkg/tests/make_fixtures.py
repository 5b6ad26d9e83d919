"""Regenerate the recorded values under ``fixtures/``.

Run ``python3 tests/make_fixtures.py`` after an intentional numerical change;
the tests compare fresh computations against these files.
"""

import json
from pathlib import Path

import numpy as np

from daflow import kalman as kf
from daflow import models as m
from daflow.metrics import test_loglik
from daflow.rng import make_rng

OUT = Path(__file__).resolve().parents[1] / "fixtures"


def linear_mle():
    p = m.build_problem("linear", m.ProblemConfig(d_x=20, obs_var=0.5, init_var=4.0))
    _, Y = p.model.simulate(p.reference_theta, 10, make_rng(0, "data"))
    theta = kf.reference_mle(p.model, Y, p.theta0, tol=1e-8)
    return {
        "d_x": 20, "T": 10, "data_stream": "(0, 'data')",
        "alpha_mle": theta.alpha.tolist(),
        "beta_mle_natural": np.exp(theta["beta"]).tolist(),
        "radius": float(np.linalg.norm(theta.alpha - m.LINEAR_ALPHA_STAR)),
        "exact_loglik_at_mle": kf.exact_loglik(p.model, theta, Y),
    }


def enkf_test_loglik():
    p = m.build_problem("parameterized", m.ProblemConfig(d_x=10))
    _, Y = p.reference_model.simulate(m.ThetaParams({}), 50, make_rng(0, "fixture"))
    theta = p.theta0.replace(alpha=m.POLY18_ALPHA_STAR)
    return {
        "d_x": 10, "T": 50, "N": 50, "seed": 3, "taper_radius": 5,
        "observations": Y.tolist(),
        "test_loglik": test_loglik(p.model, theta, Y, "enkf", 50, 3, 5),
    }


if __name__ == "__main__":
    OUT.mkdir(exist_ok=True)
    for name, fn in (("linear_mle", linear_mle), ("enkf_test_loglik", enkf_test_loglik)):
        (OUT / f"{name}.json").write_text(json.dumps(fn(), indent=1) + "\n")
        print("wrote", name)
