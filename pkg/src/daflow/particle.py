"""Particle filter with the optimal proposal for linear-Gaussian observations.

The log-likelihood estimate is ``sum_t log((1/N) sum_n w_t^n)``, the standard
unbiased estimator of the likelihood when resampling at every step.
Resampling indices are treated as constants: the selected particle values stay
differentiable, but no gradient flows through the choice of ancestors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .enkf import FilterDivergenceError


class WeightDegeneracyError(FloatingPointError):
    pass


@dataclass
class PfDraws:
    """Inputs of one PF run: ``x0 (..., d_x, N)``, ``eps (T, ..., d_x, N)``,
    ``eta (T, ..., d_y, N)`` standard normals and ``unif (T, ..., N)``."""

    x0: np.ndarray
    eps: np.ndarray
    eta: np.ndarray
    unif: np.ndarray

    @property
    def T(self) -> int:
        return self.eps.shape[0]


def draw_pf_noise(model, T: int, N: int, rng: np.random.Generator,
                  batch: tuple = (), x0=None) -> PfDraws:
    batch = tuple(batch)
    if x0 is None:
        x0 = model.sample_initial(rng, N, batch)
    eps = rng.standard_normal((T,) + batch + (model.d_x, N))
    eta = rng.standard_normal((T,) + batch + (model.d_y, N))
    unif = rng.random((T,) + batch + (N,))
    return PfDraws(np.asarray(x0, dtype=np.float64), eps, eta, unif)


def optimal_proposal_step(model, params, x, y, eps, eta, literal: bool = False):
    """Propose from ``p(x_t | x_{t-1}, y_t)`` and weight by ``N(y; H F(x), S)``.

    Returns ``(proposed particles, log weights (..., 1, N))``.  The default
    proposal noise ``(I - KH) S_beta eps + K R^{1/2} eta`` has covariance
    ``(I - KH) Q``.  With ``literal`` the noise is ``S_beta eps``.
    """
    H, R = model.H, model.R
    f = model.transition(params, x)
    q = model.noise.cov(params)
    s = H @ q @ H.T + R
    gain = ad.swapaxes(ad.psd_solve(s, H @ q))
    hf = H @ f
    logw = ad.gaussian_logpdf(y, hf, s)
    mean = f + gain @ (y - hf)
    z = model.noise.apply(params, eps)
    if literal:
        xi = z
    else:
        r_root = np.linalg.cholesky(R)
        xi = z - gain @ (H @ z) + gain @ (r_root @ eta)
    return mean + xi, logw


def normalized_weights(logw) -> np.ndarray:
    lw = np.asarray(ad.value_of(logw), dtype=np.float64)[..., 0, :]
    if not np.all(np.isfinite(lw)):
        raise WeightDegeneracyError("non-finite log weights")
    w = np.exp(lw - lw.max(axis=-1, keepdims=True))
    total = w.sum(axis=-1, keepdims=True)
    if np.any(total <= 0) or not np.all(np.isfinite(total)):
        raise WeightDegeneracyError("all weights vanished")
    return w / total


def ancestors(w: np.ndarray, unif: np.ndarray, scheme: str = "multinomial"):
    """Ancestor indices from normalized weights ``(..., N)``.

    Multinomial uses ``unif`` as N iid uniforms; systematic uses its first
    entry as the single offset.
    """
    N = w.shape[-1]
    cdf = np.cumsum(w, axis=-1)
    cdf[..., -1] = 1.0
    if scheme == "systematic":
        u = (unif[..., :1] + np.arange(N)) / N
    elif scheme == "multinomial":
        u = unif
    else:
        raise ValueError(f"unknown resampling scheme {scheme!r}")
    flat_c = cdf.reshape(-1, N)
    flat_u = u.reshape(-1, N)
    idx = np.stack([np.searchsorted(c, v, side="right")
                    for c, v in zip(flat_c, flat_u)])
    return np.minimum(idx, N - 1).reshape(w.shape)


def resample(particles, logw, unif, scheme: str = "multinomial"):
    """Equally weighted ensemble drawn from the weighted one."""
    idx = ancestors(normalized_weights(logw), unif, scheme)
    return ad.gather_cols(particles, idx), idx


@dataclass
class PfConfig:
    N: int = 100
    literal_proposal: bool = False
    resampling: str = "multinomial"


@dataclass
class PfRun:
    particles: object
    loglik: object
    means: list = field(default_factory=list)
    ess: list = field(default_factory=list)
    increments: list = field(default_factory=list)

    @property
    def loglik_value(self) -> float:
        return float(np.sum(ad.value_of(self.loglik)))

    def mean_trajectory(self) -> np.ndarray:
        return np.stack([np.asarray(m)[..., 0] for m in self.means], axis=-2)


def run_pf(model, params, Y, draws: PfDraws, config: PfConfig, x0=None,
           per_sequence: bool = False) -> PfRun:
    """Optimal-proposal PF over ``Y`` (``(..., T, d_y)``), resampling every step.

    The returned ``loglik`` is summed over batch axes unless ``per_sequence``,
    in which case it keeps shape ``(...,)``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    T = Y.shape[-2]
    x = draws.x0 if x0 is None else x0
    N = ad.value_of(x).shape[-1]
    log_n = math.log(N)
    total = 0.0
    run = PfRun(x, 0.0)
    for t in range(T):
        y = Y[..., t, :, None]
        try:
            xp, logw = optimal_proposal_step(model, params, x, y, draws.eps[t],
                                             draws.eta[t], config.literal_proposal)
            inc = ad.logsumexp(logw, axis=-1) - log_n
            w = normalized_weights(logw)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            raise FilterDivergenceError(t + 1, exc) from exc
        idx = ancestors(w, draws.unif[t], config.resampling)
        run.means.append(np.einsum("...dn,...n->...d", ad.value_of(xp), w)[..., None])
        run.ess.append(1.0 / np.sum(w * w, axis=-1))
        x = ad.gather_cols(xp, idx)
        run.increments.append(np.array(ad.value_of(inc))[..., 0, 0])
        total = total + (inc if per_sequence else ad.sum(inc))
    run.particles = x
    if per_sequence and not ad.is_node(total):
        total = np.asarray(total, dtype=np.float64)
        total = total[..., 0, 0] if total.ndim >= 2 else total
    run.loglik = total
    return run
