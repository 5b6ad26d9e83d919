"""EM with an ensemble Kalman filter/smoother E-step.

The E-step produces a frozen particle history.  The M-step updates ``Q`` in
closed form and takes a few gradient-ascent steps on the Monte-Carlo
complete-data log-likelihood in ``alpha``, with the particles held as
constants; no gradient flows through the filter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .enkf import EnkfConfig, draw_noise, run_filter
from .models import ThetaParams


@dataclass
class SmoothedHistory:
    """Plain-array particles ``(T+1, ..., d_x, N)`` after smoothing with lag ``lag``."""

    particles: np.ndarray
    lag: int

    def __post_init__(self):
        self.particles = np.array(self.particles, dtype=np.float64)
        self.particles.setflags(write=False)


def enks_fixed_lag(history: dict, lag: int, inflation: float = 0.0) -> SmoothedHistory:
    """Fixed-lag EnKS from a stored filter history.

    At each time ``t`` the states at ``t-1 ... t-lag`` are corrected with the
    cross-covariance between their ensemble and the observed forecast
    anomalies at ``t``, reusing the filter's perturbed innovations
    ``S_t^{-1} D_t``.  ``lag = 0`` returns the filter particles unchanged.
    """
    analysis = history["analysis"]
    T = len(analysis) - 1
    if lag < 0 or lag > T:
        raise ValueError(f"smoother lag {lag} outside [0, {T}]")
    parts = np.array(analysis, dtype=np.float64)
    if lag == 0:
        return SmoothedHistory(parts, 0)
    N = parts.shape[-1]
    scale = (1.0 + inflation) / (N - 1)
    for t in range(1, T + 1):
        hx = history["hx_anom"][t - 1]
        sd = history["sinv_d"][t - 1]
        hx_t = np.swapaxes(hx, -1, -2)
        for s in range(1, min(lag, t) + 1):
            x = parts[t - s]
            a = x - x.mean(axis=-1, keepdims=True)
            # cross-covariance (d_x, d_y) first, so no N x N matrix is formed
            parts[t - s] = x + ((a @ hx_t) * scale) @ sd
    return SmoothedHistory(parts, lag)


def transition_values(model, params, particles: np.ndarray,
                      chunk: int = 50) -> np.ndarray:
    """``F_alpha`` applied to ``x_0 ... x_{T-1}``, batched over time chunks."""
    prev = particles[:-1]
    return np.concatenate([np.asarray(model.transition(params, prev[s:s + chunk]))
                           for s in range(0, prev.shape[0], chunk)])


def em_q_update(particles: np.ndarray, forecasts: np.ndarray) -> np.ndarray:
    """``(1/count) sum r r^T`` over residuals ``r = x_t - F(x_{t-1})``.

    ``forecasts`` holds ``F(x_{t-1})`` aligned with ``particles[1:]``.
    """
    r = np.asarray(particles[1:]) - np.asarray(forecasts)
    d, N = r.shape[-2:]
    flat = np.moveaxis(r, -2, 0).reshape(d, -1)
    q = flat @ flat.T / flat.shape[1]
    return 0.5 * (q + q.T)


def em_objective(model, params, particles: np.ndarray, q):
    """``(1/N) sum_n sum_t log N(x_t^n; F(x_{t-1}^n), Q)``, summed over batch."""
    N = particles.shape[-1]
    f = model.transition(params, particles[:-1])
    lp = ad.gaussian_logpdf(particles[1:], f, q)
    return ad.sum(lp) * (1.0 / N)


def em_m_step_alpha(model, theta: ThetaParams, particles: np.ndarray, q,
                    J: int, optimizer, lr: float,
                    chunk_elems: int = 50_000) -> tuple[ThetaParams, float]:
    """``J`` ascent steps on :func:`em_objective` in the dynamics blocks only.

    ``particles`` are plain arrays, i.e. constants on the tape.  The objective
    is a sum over time, so it is differentiated in time chunks of about
    ``chunk_elems`` state entries to bound tape memory.
    """
    names = theta.alpha_names()
    theta = theta.copy()
    T = particles.shape[0] - 1
    step = max(1, chunk_elems // max(1, particles[0].size))
    value = float("nan")
    for _ in range(J):
        value, gvec = 0.0, np.zeros(theta.alpha.size)
        for s in range(0, T, step):
            tape = ad.Tape()
            nodes = {k: tape.leaf(v, k in names) for k, v in theta.items()}
            obj = em_objective(model, nodes, particles[s:s + step + 1], q)
            value += float(np.sum(ad.value_of(obj)))
            if ad.is_node(obj):
                grads = tape.backward(obj)
                gvec += np.concatenate([grads[nodes[k].id].ravel() for k in names])
        theta = _set_alpha(theta, optimizer.step(theta.alpha, gvec, lr=lr))
    return theta, value


def _set_alpha(theta: ThetaParams, vec: np.ndarray) -> ThetaParams:
    blocks, start = dict(theta.items()), 0
    for k in theta.alpha_names():
        n = blocks[k].size
        blocks[k] = vec[start:start + n].reshape(blocks[k].shape)
        start += n
    return ThetaParams(blocks)


@dataclass
class EmConfig:
    N: int = 50
    lag: int = 0
    J: int = 3
    taper_radius: float | None = None
    inflation: float = 0.0


@dataclass
class EmState:
    theta: ThetaParams
    q_hat: np.ndarray | None = None
    objective: float = float("nan")
    filter_loglik: float = float("nan")
    extra: dict = field(default_factory=dict)


def em_iteration(model, theta: ThetaParams, Y, rng, config: EmConfig,
                 optimizer, lr: float) -> EmState:
    """One E-step (filter + smoother) followed by the ``Q`` and ``alpha`` updates."""
    Y = np.asarray(Y, dtype=np.float64)
    batch = Y.shape[:-2]
    fcfg = EnkfConfig(N=config.N, taper_radius=config.taper_radius,
                      inflation=config.inflation, store_history=True)
    draws = draw_noise(model, Y.shape[-2], config.N, rng, batch)
    params = dict(theta.items())
    run = run_filter(model, params, Y, draws, fcfg, record_means=False)
    smoothed = enks_fixed_lag(run.history, config.lag, config.inflation)
    return em_m_step(model, theta, smoothed.particles, config.J, optimizer, lr,
                     filter_loglik=run.loglik_value)


def em_m_step(model, theta: ThetaParams, particles: np.ndarray, J: int,
              optimizer, lr: float, filter_loglik: float = float("nan")) -> EmState:
    params = dict(theta.items())
    q_hat = em_q_update(particles, transition_values(model, params, particles))
    beta = model.noise.project(q_hat, start=theta.beta)
    theta = theta.replace(beta=beta)
    q = np.asarray(model.noise.cov(dict(theta.items())))
    theta, obj = em_m_step_alpha(model, theta, particles, q, J, optimizer, lr)
    return EmState(theta, q_hat, obj, filter_loglik)


def run_em(model, theta0: ThetaParams, Y, iterations: int, rng_factory,
           config: EmConfig | None = None, lr=0.1, optimizer=None):
    """Alternate E- and M-steps; ``rng_factory(k)`` supplies iteration ``k``'s
    generator and ``lr`` may be a callable of the 1-based iteration."""
    from .training import Adam

    config = config or EmConfig()
    optimizer = optimizer or Adam()
    theta = theta0.copy()
    trajectory = [theta]
    for k in range(1, iterations + 1):
        eta = lr(k) if callable(lr) else lr
        state = em_iteration(model, theta, Y, rng_factory(k), config, optimizer, eta)
        theta = state.theta
        trajectory.append(theta)
    return trajectory
