"""Exact Kalman filtering for linear-Gaussian models.

Provides the exact log-likelihood and, by running the recursion on a tape,
its exact gradient.  These are the ground truth for the Monte-Carlo
estimators and for the reference maximum-likelihood fits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import autodiff as ad
from .models import ThetaParams


@dataclass
class KfState:
    mean: object
    cov: object
    loglik: object = 0.0


class NotConvergedError(RuntimeError):
    pass


def kf_step(state: KfState, A, Q, H, R, y) -> tuple[KfState, dict]:
    """One forecast/analysis cycle; the analysis covariance uses Joseph form.

    Returns the new state and the forecast moments ``{"mean", "cov"}``.
    """
    m_f = A @ state.mean
    c_f = A @ state.cov @ ad.swapaxes(A) + Q
    c_f = 0.5 * (c_f + ad.swapaxes(c_f))
    y = np.reshape(y, (-1, 1))
    s = H @ c_f @ H.T + R
    inc = ad.gaussian_logpdf(y, H @ m_f, s)
    gain = ad.swapaxes(ad.psd_solve(s, H @ c_f))
    mean = m_f + gain @ (y - H @ m_f)
    ikh = np.eye(H.shape[1]) - gain @ H
    cov = ikh @ c_f @ ad.swapaxes(ikh) + gain @ R @ ad.swapaxes(gain)
    cov = 0.5 * (cov + ad.swapaxes(cov))
    return KfState(mean, cov, state.loglik + ad.sum(inc)), {"mean": m_f,
                                                           "cov": c_f}


def transition_matrix(model, params):
    """Dense ``A`` of a linear transition, obtained by mapping the identity."""
    if not model.is_linear:
        raise TypeError("exact Kalman filtering needs a linear transition")
    return model.transition(params, np.eye(model.d_x))


def kalman_filter(model, params, Y, keep: bool = False):
    """Run the exact filter over one sequence ``Y`` of shape ``(T, d_y)``.

    With ``keep`` the filtered and forecast moments are returned as plain
    arrays alongside the final state.
    """
    A = transition_matrix(model, params)
    Q = model.noise.cov(params)
    state = KfState(model.m0, model.C0, 0.0)
    out = {"mean": [], "cov": [], "fmean": [], "fcov": []}
    for y in np.asarray(Y, dtype=np.float64):
        state, fc = kf_step(state, A, Q, model.H, model.R, y)
        if keep:
            out["mean"].append(np.array(ad.value_of(state.mean))[:, 0])
            out["cov"].append(np.array(ad.value_of(state.cov)))
            out["fmean"].append(np.array(ad.value_of(fc["mean"]))[:, 0])
            out["fcov"].append(np.array(ad.value_of(fc["cov"])))
    if keep:
        return state, {k: np.array(v) for k, v in out.items()}
    return state


def _sequences(Y):
    Y = np.asarray(Y, dtype=np.float64)
    return Y[None] if Y.ndim == 2 else Y


def exact_loglik(model, theta: ThetaParams, Y) -> float:
    params = dict(theta.items())
    return float(sum(np.sum(kalman_filter(model, params, y).loglik)
                     for y in _sequences(Y)))


def exact_loglik_and_grad(model, theta: ThetaParams, Y):
    """Exact ``L(theta)`` and its gradient as a :class:`ThetaParams`.

    ``Y`` may hold several sequences ``(B, T, d_y)``; their log-likelihoods
    are summed.
    """
    tape = ad.Tape()
    nodes = theta.to_nodes(tape)
    total = None
    for y in _sequences(Y):
        ll = kalman_filter(model, nodes, y).loglik
        total = ll if total is None else total + ll
    if not ad.is_node(total):
        return float(np.sum(total)), ThetaParams(
            {k: np.zeros_like(v) for k, v in theta.items()})
    grads = tape.backward(total)
    return total.item(), ThetaParams({k: grads[n.id] for k, n in nodes.items()})


def reference_mle(model, Y, theta0: ThetaParams, tol: float = 1e-6,
                  adam_steps: int = 300, lr: float = 0.01,
                  max_iter: int = 5000) -> ThetaParams:
    """Maximize the exact log-likelihood to ``|grad| < tol``.

    A short Adam warm start is followed by a BFGS polish, which is what
    actually drives the gradient norm below ``tol``.
    """
    from .training import Adam

    layout = theta0.layout

    def neg(vec):
        ll, g = exact_loglik_and_grad(model, ThetaParams.from_flat(layout, vec), Y)
        return -ll, -g.flatten()

    x = theta0.flatten()
    f, g = neg(x)
    if np.linalg.norm(g) < tol:
        return theta0.copy()
    opt = Adam(lr=lr)
    for _ in range(adam_steps):
        x = opt.step(x, g, maximize=False)
        f, g = neg(x)
        if not np.isfinite(f):
            raise NotConvergedError("objective became non-finite during warm start")
    best = x
    for _ in range(5):
        res = optimize.minimize(neg, best, jac=True, method="BFGS",
                                options={"gtol": tol * 0.1, "maxiter": max_iter})
        best = res.x
        if np.linalg.norm(neg(best)[1]) < tol:
            return ThetaParams.from_flat(layout, best)
    raise NotConvergedError(
        f"reference MLE stalled at |grad| = {np.linalg.norm(neg(best)[1]):.3g}")
