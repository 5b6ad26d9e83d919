"""Evaluation metrics and Monte-Carlo convergence studies."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .enkf import EnkfConfig, draw_noise, run_filter
from .kalman import exact_loglik_and_grad
from .models import ExpKernelNoise, ThetaParams
from .particle import PfConfig, draw_pf_noise, run_pf
from .rng import make_rng


def relative_l2(estimates, truth) -> float:
    """``sqrt(mean_p |est_p - truth|^2) / |truth|`` (vector norms for vectors)."""
    truth = np.asarray(truth, dtype=np.float64)
    est = np.asarray(estimates, dtype=np.float64).reshape((-1,) + truth.shape)
    scale = np.linalg.norm(truth)
    if scale < 1e-300:
        raise ValueError("relative error undefined for a zero reference")
    sq = np.sum((est - truth).reshape(est.shape[0], -1) ** 2, axis=1)
    return float(np.sqrt(np.mean(sq)) / scale)


def attractor_points(flow, d_x: int, rng: np.random.Generator, P: int = 500,
                     burn: int = 1000, every: int = 10) -> np.ndarray:
    """``(P, d_x)`` states from one long run of ``flow`` started at N(0, I)."""
    x = rng.standard_normal((d_x, 1))
    for _ in range(burn):
        x = flow(x)
    pts = []
    for k in range(P * every):
        x = flow(x)
        if (k + 1) % every == 0:
            pts.append(x[:, 0].copy())
    return np.array(pts)


def rmse_f(flow, flow_ref, points: np.ndarray) -> float:
    """Root-mean-square gap between two flow maps over ``points`` (``(P, d_x)``)."""
    cols = np.asarray(points, dtype=np.float64).T
    diff = np.asarray(flow(cols)) - np.asarray(flow_ref(cols))
    return float(np.sqrt(np.mean(diff ** 2)))


def burn_in(T: int) -> int:
    return T // 5


def rmse_a(means, truth, T_b: int | None = None) -> float:
    """Filter RMSE after burn-in.

    ``means`` and ``truth`` are ``(T, d_x)`` for steps ``1..T`` (or stacked
    ``(B, T, d_x)``; the mean square is then averaged over sequences before
    the root).  Steps ``T_b+1 .. T`` enter the average.
    """
    means = np.asarray(means, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if means.shape != truth.shape:
        raise ValueError(f"shape mismatch {means.shape} vs {truth.shape}")
    T = means.shape[-2]
    T_b = burn_in(T) if T_b is None else T_b
    if T <= T_b:
        raise ValueError("need T > T_b")
    return float(np.sqrt(np.mean((means[..., T_b:, :] - truth[..., T_b:, :]) ** 2)))


def sigma_beta(Q) -> float:
    Q = np.asarray(Q, dtype=np.float64)
    return float(math.sqrt(max(np.trace(Q), 0.0) / Q.shape[0]))


def test_loglik(model, theta: ThetaParams, Y, method: str = "enkf", N: int = 50,
                seed: int = 0, taper_radius=None, literal_proposal=False) -> float:
    """EnKF or PF log-likelihood estimate on held-out data (no gradient)."""
    Y = np.asarray(Y, dtype=np.float64)
    T = Y.shape[-2]
    if T == 0:
        return 0.0
    rng = make_rng(seed, "test-loglik")
    params = dict(theta.items())
    batch = Y.shape[:-2]
    if method == "enkf":
        draws = draw_noise(model, T, N, rng, batch)
        return run_filter(model, params, Y, draws, EnkfConfig(N, taper_radius),
                          record_means=False).loglik_value
    if method == "pf":
        draws = draw_pf_noise(model, T, N, rng, batch)
        return run_pf(model, params, Y, draws, PfConfig(N, literal_proposal)).loglik_value
    raise ValueError(f"unknown method {method!r}")


def filter_means(model, theta: ThetaParams, Y, N: int = 50, seed: int = 0,
                 taper_radius=None) -> np.ndarray:
    """EnKF analysis means ``(..., T, d_x)``."""
    Y = np.asarray(Y, dtype=np.float64)
    rng = make_rng(seed, "filter-means")
    draws = draw_noise(model, Y.shape[-2], N, rng, Y.shape[:-2])
    run = run_filter(model, dict(theta.items()), Y, draws, EnkfConfig(N, taper_radius))
    return run.mean_trajectory()


def fit_rate(Ns, errors) -> tuple[float, float]:
    """Least-squares ``(slope, intercept)`` of ``log err`` against ``log N``."""
    Ns = np.asarray(Ns, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    if Ns.size < 4:
        raise ValueError("need at least 4 grid points")
    if np.any(errors <= 0):
        raise ValueError("errors must be positive")
    slope, intercept = np.polyfit(np.log(Ns), np.log(errors), 1)
    return float(slope), float(intercept)


# ---------------------------------------------------------------------------
# rate studies


@dataclass
class RateStudyResult:
    quantity: str
    Ns: list
    errors: list                 # relative L2 error per N
    stderrs: list
    slope: float
    intercept: float
    P: int
    samples: dict = field(default_factory=dict, repr=False)

    def rows(self, target: str | None = None):
        for n, e, s in zip(self.Ns, self.errors, self.stderrs):
            yield {"N": n, "mean_rel_err": e, "stderr": s,
                   "target": target or self.quantity}


def natural_gradient_blocks(model, theta: ThetaParams, grad: ThetaParams) -> dict:
    """Gradient blocks w.r.t. the natural noise parameters.

    The exponential-kernel noise stores ``log beta``; the chain rule turns a
    gradient in ``log beta`` into one in ``beta``.
    """
    out = {"alpha": grad.alpha}
    g_beta = grad.beta
    if isinstance(model.noise, ExpKernelNoise):
        g_beta = g_beta / np.exp(theta.beta)
    out["beta"] = g_beta
    return out


def enkf_estimates(model, theta: ThetaParams, Y, N: int, rng, config=None):
    """One EnKF run: ``(loglik, natural gradient blocks)``."""
    config = config or EnkfConfig(N)
    draws = draw_noise(model, np.asarray(Y).shape[-2], N, rng)
    tape = ad.Tape()
    nodes = theta.to_nodes(tape)
    run = run_filter(model, nodes, Y, draws, config, record_means=False)
    grads = tape.backward(run.loglik)
    g = ThetaParams({k: grads[n.id] for k, n in nodes.items()})
    return run.loglik.item(), natural_gradient_blocks(model, theta, g)


def _replicate_errors(samples: np.ndarray, truth) -> tuple[float, float]:
    """Relative L2 error and a delta-method standard error."""
    truth = np.asarray(truth, dtype=np.float64)
    sq = np.sum((samples - truth).reshape(samples.shape[0], -1) ** 2, axis=1)
    scale = np.linalg.norm(truth)
    mse = np.mean(sq)
    err = math.sqrt(mse) / scale
    se_mse = np.std(sq, ddof=1) / math.sqrt(len(sq)) if len(sq) > 1 else 0.0
    return err, float(se_mse / (2 * math.sqrt(mse) * scale)) if mse > 0 else 0.0


def rate_study(model, theta: ThetaParams, Y, Ns, P: int, seed: int = 0,
               taper_radius=None, workers: int = 1) -> dict[str, RateStudyResult]:
    """Relative L2 errors of the EnKF log-likelihood and its gradients.

    Returns results for ``loglik``, ``grad_alpha`` and ``grad_beta`` with the
    exact Kalman values as truth.
    """
    ll, g = exact_loglik_and_grad(model, theta, Y)
    truth = {"loglik": ll, **{f"grad_{k}": v for k, v in
                              natural_gradient_blocks(model, theta, g).items()}}
    jobs = [(N, p) for N in Ns for p in range(P)]
    args = [(model, theta, Y, N, seed, p, taper_radius) for N, p in jobs]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as ex:
            outs = list(ex.map(_one_replicate, args, chunksize=4))
    else:
        outs = [_one_replicate(a) for a in args]
    results = {}
    for q in ("loglik", "grad_alpha", "grad_beta"):
        errs, ses, samples = [], [], {}
        for N in Ns:
            vals = np.array([o[q] for (n, _), o in zip(jobs, outs) if n == N])
            e, s = _replicate_errors(vals, truth[q])
            errs.append(e)
            ses.append(s)
            samples[N] = vals
        slope, icpt = fit_rate(Ns, errs)
        results[q] = RateStudyResult(q, list(Ns), errs, ses, slope, icpt, P,
                                     {"truth": truth[q], **samples})
    return results


def _one_replicate(args) -> dict:
    model, theta, Y, N, seed, p, taper = args
    rng = make_rng(seed, "rate", N, p)
    ll, g = enkf_estimates(model, theta, Y, N, rng, EnkfConfig(N, taper))
    return {"loglik": ll, "grad_alpha": g["alpha"], "grad_beta": g["beta"]}
