"""Perturbed-observation ensemble Kalman filter with a differentiable
log-likelihood estimate.

All stochastic inputs of a run (initial ensemble, process-noise draws,
observation perturbations) are drawn up front into a :class:`NoiseDraws`
bundle.  The filter is then a deterministic function of ``(theta, draws)``,
which is what makes the reparameterized gradient well defined and lets tests
freeze the randomness for finite-difference checks.

Arrays may carry leading batch axes: an ensemble is ``(..., d_x, N)`` and
observations are ``(..., T, d_y)``.  Independent sequences in a batch share
``theta`` and their log-likelihoods are summed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class FilterDivergenceError(RuntimeError):
    """A filter step failed; ``t`` is the 1-based time index."""

    def __init__(self, t: int, cause: BaseException):
        super().__init__(f"filter diverged at t={t}: {cause}")
        self.t = t
        self.cause = cause


@dataclass
class EnkfConfig:
    N: int = 100
    taper_radius: float | None = None
    circular_taper: bool = False
    inflation: float = 0.0
    store_history: bool = False

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("EnKF needs N >= 2")
        if self.taper_radius is not None and self.taper_radius < 1:
            raise ValueError("taper radius must be >= 1")
        if self.inflation < 0:
            raise ValueError("inflation must be >= 0")


@dataclass
class NoiseDraws:
    """Standard-normal inputs of one filter run.

    ``x0`` is ``(..., d_x, N)`` (already scaled by the initial law),
    ``eps`` is ``(T, ..., d_x, N)`` and ``gamma`` is ``(T, ..., d_y, N)``
    (already scaled by ``R^{1/2}``).
    """

    x0: np.ndarray
    eps: np.ndarray
    gamma: np.ndarray

    @property
    def T(self) -> int:
        return self.eps.shape[0]

    def permute(self, perm) -> "NoiseDraws":
        return NoiseDraws(self.x0[..., perm], self.eps[..., perm],
                          self.gamma[..., perm])


def draw_noise(model, T: int, N: int, rng: np.random.Generator,
               batch: tuple = (), x0=None) -> NoiseDraws:
    batch = tuple(batch)
    if x0 is None:
        x0 = model.sample_initial(rng, N, batch)
    eps = rng.standard_normal((T,) + batch + (model.d_x, N))
    r_root = np.linalg.cholesky(model.R)
    gamma = r_root @ rng.standard_normal((T,) + batch + (model.d_y, N))
    return NoiseDraws(np.asarray(x0, dtype=np.float64), eps, gamma)


def gaspari_cohn_phi(z) -> np.ndarray:
    """Fifth-order compactly supported correlation function, support [0, 2)."""
    z = np.abs(np.asarray(z, dtype=np.float64))
    out = np.zeros_like(z)
    inner = z <= 1.0
    outer = (z > 1.0) & (z < 2.0)
    a = z[inner]
    out[inner] = 1 - 5 / 3 * a**2 + 5 / 8 * a**3 + 0.5 * a**4 - 0.25 * a**5
    b = z[outer]
    out[outer] = (4 - 5 * b + 5 / 3 * b**2 + 5 / 8 * b**3 - 0.5 * b**4
                  + b**5 / 12 - 2 / (3 * b))
    return out


def gaspari_cohn(d_x: int, r: float, circular: bool = False) -> np.ndarray:
    """Taper matrix ``rho[i, j] = phi(dist(i, j) / r)``."""
    if r < 1:
        raise ValueError("taper radius must be >= 1")
    idx = np.arange(d_x)
    dist = np.abs(np.subtract.outer(idx, idx))
    if circular:
        dist = np.minimum(dist, d_x - dist)
    return gaspari_cohn_phi(dist / r)


def empirical_moments(x):
    """Mean (divisor N) and sample covariance (divisor N-1) of the columns."""
    N = ad.value_of(x).shape[-1]
    if N < 2:
        raise ad.ShapeError("empirical moments need N >= 2")
    m = ad.mean_cols(x)
    a = x - m
    return m, (a @ ad.swapaxes(a)) / (N - 1)


def forecast_step(model, params, x, eps):
    """``F_alpha(x) + S_beta eps`` with ``eps`` a constant draw."""
    return model.forecast(params, x, eps)


@dataclass
class _Obs:
    H: np.ndarray
    R: np.ndarray
    identity: bool

    @classmethod
    def of(cls, model):
        H = model.H
        ident = H.shape[0] == H.shape[1] and np.array_equal(H, np.eye(H.shape[0]))
        return cls(H, model.R, ident)

    def apply(self, x):
        return x if self.identity else self.H @ x


@dataclass
class AnalysisResult:
    particles: object
    mean: object
    innov_cov: object
    hx_anom: object = None
    sinv_d: object = None


def analysis_step(xf, y, obs: _Obs, gamma, config: EnkfConfig,
                  taper: np.ndarray | None = None) -> AnalysisResult:
    """Perturbed-observation update of the forecast ensemble ``xf``.

    ``y`` is ``(..., d_y, 1)`` and ``gamma`` ``(..., d_y, N)``.  Without a taper
    the gain is assembled from anomaly products so no ``d_x x d_x`` matrix is
    formed.
    """
    N = ad.value_of(xf).shape[-1]
    infl = 1.0 + config.inflation
    m = ad.mean_cols(xf)
    a = xf - m
    ha = obs.apply(a)
    if taper is None:
        c_ht = (a @ ad.swapaxes(ha)) * (infl / (N - 1))
        hch = (ha @ ad.swapaxes(ha)) * (infl / (N - 1))
    else:
        c = (a @ ad.swapaxes(a)) * (1.0 / (N - 1))
        c = (taper * infl) * c
        c_ht = c if obs.identity else c @ obs.H.T
        hch = obs.apply(c_ht)
    s = hch + obs.R
    d = (y + gamma) - obs.apply(xf)
    sinv_d = ad.psd_solve(s, d)
    xa = xf + c_ht @ sinv_d
    return AnalysisResult(xa, m, s, ha, sinv_d)


def loglik_increment(mean, innov_cov, y, obs: _Obs):
    """``log N(y; H m, H C H^T + R)`` summed over any batch axes."""
    lp = ad.gaussian_logpdf(y, obs.apply(mean), innov_cov)
    return ad.sum(lp)


@dataclass
class FilterRun:
    particles: object
    loglik: object
    means: list = field(default_factory=list)
    history: dict | None = None
    diagnostics: list = field(default_factory=list)

    @property
    def loglik_value(self) -> float:
        return float(np.sum(ad.value_of(self.loglik)))

    def mean_trajectory(self) -> np.ndarray:
        """Filter means as ``(..., T, d_x)``."""
        if not self.means:
            return np.zeros((0,))
        arr = np.stack([np.asarray(ad.value_of(m))[..., 0] for m in self.means],
                       axis=-2)
        return arr


def _taper_for(model, config: EnkfConfig):
    if config.taper_radius is None:
        return None
    if np.isinf(config.taper_radius):
        return None
    rho = gaspari_cohn(model.d_x, config.taper_radius, config.circular_taper)
    # an all-ones taper is the identity; keep the factored path
    return None if np.all(rho == 1.0) else rho


def run_filter(model, params, Y, draws: NoiseDraws, config: EnkfConfig,
               x0=None, record_means: bool = True) -> FilterRun:
    """Run the EnKF over ``Y`` (``(..., T, d_y)``) and accumulate the
    log-likelihood estimate.

    ``params`` maps block names to nodes or arrays; with arrays the run is
    plain numerics.  ``x0`` overrides ``draws.x0`` (used to carry particles
    between truncated windows).
    """
    Y = np.asarray(Y, dtype=np.float64)
    T = Y.shape[-2]
    if draws.T < T:
        raise ValueError(f"noise draws cover {draws.T} steps, need {T}")
    obs = _Obs.of(model)
    taper = _taper_for(model, config)
    x = draws.x0 if x0 is None else x0
    N = ad.value_of(x).shape[-1]
    if N != config.N:
        raise ad.ShapeError(f"ensemble has {N} members, config says {config.N}")
    total = 0.0
    run = FilterRun(x, 0.0)
    if config.store_history:
        run.history = {"analysis": [np.array(ad.value_of(x))], "forecast": [],
                       "hx_anom": [], "sinv_d": []}
    for t in range(T):
        y = Y[..., t, :, None]
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                xf = forecast_step(model, params, x, draws.eps[t])
                res = analysis_step(xf, y, obs, draws.gamma[t], config, taper)
                inc = loglik_increment(res.mean, res.innov_cov, y, obs)
            if not (np.all(np.isfinite(ad.value_of(res.particles)))
                    and np.all(np.isfinite(ad.value_of(inc)))):
                raise FloatingPointError("non-finite ensemble")
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            raise FilterDivergenceError(t + 1, exc) from exc
        x = res.particles
        total = total + inc
        if record_means:
            run.means.append(ad.value_of(ad.mean_cols(x)))
        if config.store_history:
            h = run.history
            h["analysis"].append(np.array(ad.value_of(x)))
            h["forecast"].append(np.array(ad.value_of(xf)))
            h["hx_anom"].append(np.array(ad.value_of(res.hx_anom)))
            h["sinv_d"].append(np.array(ad.value_of(res.sinv_d)))
        run.diagnostics.append({
            "t": t + 1,
            "mean_norm": float(np.linalg.norm(ad.value_of(res.mean))),
            "trace_cov": float(np.sum(np.var(ad.value_of(xf), axis=-1, ddof=1))),
            "increment": float(np.sum(ad.value_of(inc))),
        })
    run.particles = x
    run.loglik = total
    return run


def enkf_loglik(model, params, Y, draws: NoiseDraws, config: EnkfConfig) -> float:
    """Plain-numeric log-likelihood estimate."""
    return run_filter(model, params, Y, draws, config,
                      record_means=False).loglik_value
