"""State-space model zoo.

A :class:`StateSpaceModel` bundles a transition map ``F_alpha``, a
process-noise parameterization ``beta -> S_beta`` (``Q_beta = S S^T``), a
known linear observation pair ``(H, R)`` and a Gaussian initial law.  The
learnable parameters live in a :class:`ThetaParams` of named blocks; every
block whose name starts with ``"alpha"`` belongs to the dynamics, ``"beta"``
to the noise.

States are stored column-wise: an ensemble is ``(..., d_x, N)``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy import optimize

from . import autodiff as ad
from .rng import make_rng

#: Nonzero Lorenz-96 coefficients in the 18-term polynomial basis.
POLY18_ALPHA_STAR = np.zeros(18)
POLY18_ALPHA_STAR[[0, 3, 11, 16]] = [8.0, -1.0, -1.0, 1.0]

LINEAR_ALPHA_STAR = np.array([0.3, 0.6, 0.1])
LINEAR_BETA_STAR = np.array([0.5, 1.0])

NN_CHANNELS = (72, 37)
NN_KERNEL = 5

BLOWUP_LIMIT = 1e6


class BlowUpError(FloatingPointError):
    """Integration of a vector field diverged."""


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


# ---------------------------------------------------------------------------
# parameters


class ThetaParams:
    """Ordered named parameter blocks with a flat-vector view."""

    def __init__(self, blocks: Mapping[str, np.ndarray]):
        self.blocks = {k: np.array(v, dtype=np.float64) for k, v in blocks.items()}

    def __repr__(self):
        shapes = ", ".join(f"{k}{v.shape}" for k, v in self.blocks.items())
        return f"ThetaParams({shapes})"

    def __getitem__(self, key):
        return self.blocks[key]

    def __contains__(self, key):
        return key in self.blocks

    def keys(self):
        return self.blocks.keys()

    def items(self):
        return self.blocks.items()

    @property
    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, v.shape) for k, v in self.blocks.items()]

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.blocks.values()))

    def flatten(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self.blocks.values()])

    @classmethod
    def from_flat(cls, layout, vec) -> "ThetaParams":
        vec = np.asarray(vec, dtype=np.float64)
        total = int(sum(math.prod(s) for _, s in layout))
        if vec.size != total:
            raise ValueError(f"flat vector has {vec.size} entries, layout "
                             f"needs {total}")
        blocks, start = {}, 0
        for name, shape in layout:
            n = math.prod(shape)
            blocks[name] = vec[start:start + n].reshape(shape).copy()
            start += n
        return cls(blocks)

    def alpha_names(self) -> list[str]:
        return [k for k in self.blocks if k.startswith("alpha")]

    @property
    def alpha(self) -> np.ndarray:
        names = self.alpha_names()
        if not names:
            return np.zeros(0)
        return np.concatenate([self.blocks[k].ravel() for k in names])

    @property
    def beta(self) -> np.ndarray:
        return self.blocks.get("beta", np.zeros(0))

    def copy(self) -> "ThetaParams":
        return ThetaParams(self.blocks)

    def replace(self, **blocks) -> "ThetaParams":
        new = self.copy()
        for k, v in blocks.items():
            new.blocks[k] = np.array(v, dtype=np.float64)
        return new

    def to_nodes(self, tape: ad.Tape, differentiable: bool = True) -> dict:
        return {k: tape.leaf(v, differentiable) for k, v in self.blocks.items()}

    def equals(self, other: "ThetaParams") -> bool:
        return (self.layout == other.layout
                and all(np.array_equal(v, other.blocks[k])
                        for k, v in self.blocks.items()))


# ---------------------------------------------------------------------------
# vector fields and transitions


def _tridiag_fwd(a, x):
    out = a[0] * x
    out[..., :-1, :] += a[1] * x[..., 1:, :]
    out[..., 1:, :] += a[2] * x[..., :-1, :]
    return out


def tridiag_matmul(alpha, x):
    """``A_alpha @ x`` for the tridiagonal Toeplitz matrix with diagonal
    ``alpha[0]``, super-diagonal ``alpha[1]`` and sub-diagonal ``alpha[2]``."""
    if ad.value_of(x).shape[-2] < 2:
        raise ad.ShapeError("linear transition needs d_x >= 2")

    def vjp(g, out, v, n):
        a, X = v
        ga = gx = None
        if n[0]:
            ga = np.array([np.sum(g * X),
                           np.sum(g[..., :-1, :] * X[..., 1:, :]),
                           np.sum(g[..., 1:, :] * X[..., :-1, :])])
        if n[1]:
            gx = a[0] * g
            gx[..., 1:, :] += a[1] * g[..., :-1, :]
            gx[..., :-1, :] += a[2] * g[..., 1:, :]
        return ga, gx

    return ad.apply("tridiag_matmul", _tridiag_fwd, vjp, alpha, x)


def linear_transition(alpha, x):
    return tridiag_matmul(alpha, x)


def tridiag_matrix(alpha, d: int) -> np.ndarray:
    a = np.asarray(alpha, dtype=np.float64)
    return (a[0] * np.eye(d) + a[1] * np.eye(d, k=1) + a[2] * np.eye(d, k=-1))


def lorenz96_field(x, forcing: float = 8.0):
    """Lorenz-96 tendency with circular indexing along the state axis."""
    if ad.value_of(x).shape[-2] < 4:
        raise ad.ShapeError("Lorenz-96 needs d_x >= 4")
    xm1 = ad.roll(x, 1)
    xm2 = ad.roll(x, 2)
    xp1 = ad.roll(x, -1)
    return -(xm1 * (xm2 - xp1)) - x + forcing


# offsets of the linear, square and cross-product features
_LIN = {-2: 1, -1: 2, 0: 3, 1: 4, 2: 5}
_SQ = {-2: 6, -1: 7, 0: 8, 1: 9, 2: 10}
_CROSS = [((-2, -1), 11), ((-1, 0), 12), ((0, 1), 13), ((1, 2), 14),
          ((-2, 0), 15), ((-1, 1), 16), ((0, 2), 17)]


def _shifted(x):
    # v[o][i] = x[i + o]
    return {o: np.roll(x, -o, axis=-2) for o in range(-2, 3)}


def poly18_features(x) -> np.ndarray:
    """The 18 basis polynomials per coordinate, stacked on a new first axis."""
    v = _shifted(np.asarray(x, dtype=np.float64))
    feats = [np.ones_like(v[0])]
    feats += [v[o] for o in range(-2, 3)]
    feats += [v[o] ** 2 for o in range(-2, 3)]
    feats += [v[a] * v[b] for (a, b), _ in _CROSS]
    return np.stack(feats)


def poly18_field(alpha, x):
    """Quadratic local vector field ``f_alpha`` on a periodic lattice."""
    if ad.value_of(x).shape[-2] < 5:
        raise ad.ShapeError("polynomial field needs d_x >= 5")

    def fwd(a, X):
        return np.tensordot(a, poly18_features(X), axes=1)

    def vjp(g, out, vals, n):
        a, X = vals
        ga = gx = None
        if n[0]:
            feats = poly18_features(X)
            ga = np.tensordot(feats.reshape(18, -1), g.ravel(), axes=1)
        if n[1]:
            v = _shifted(X)
            gx = np.zeros_like(X)
            for o in range(-2, 3):
                d = a[_LIN[o]] + 2.0 * a[_SQ[o]] * v[o]
                for (p, q), k in _CROSS:
                    if p == o:
                        d = d + a[k] * v[q]
                    elif q == o:
                        d = d + a[k] * v[p]
                gx += np.roll(g * d, o, axis=-2)
        return ga, gx

    return ad.apply("poly18_field", fwd, vjp, alpha, x)


def rk4_flow(field: Callable, x, dt: float, steps: int):
    """Classical RK4 composition of ``steps`` steps of size ``dt``."""
    if steps < 1:
        raise ValueError("rk4_flow needs at least one step")
    for step in range(steps):
        try:
            k1 = field(x)
            k2 = field(x + (0.5 * dt) * k1)
            k3 = field(x + (0.5 * dt) * k2)
            k4 = field(x + dt * k3)
            x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        except ad.NonFiniteError as exc:
            raise BlowUpError(f"integration blew up at RK4 step {step}") from exc
        val = ad.value_of(x)
        if not np.all(np.isfinite(val)) or np.max(np.abs(val)) > BLOWUP_LIMIT:
            raise BlowUpError(f"integration blew up at RK4 step {step}")
    return x


class Lorenz96Field:
    block_names: tuple[str, ...] = ()

    def __call__(self, params, x):
        return lorenz96_field(x)


@dataclass
class Poly18Field:
    key: str = "alpha"

    @property
    def block_names(self):
        return (self.key,)

    def __call__(self, params, x):
        return poly18_field(params[self.key], x)


@dataclass
class NNField:
    """Convolutional surrogate: conv(1->72,k5) split in three groups of 24,
    ``concat(g1, g2*g3)`` -> conv(48->37,k5) -> conv(37->1,k1).  No pointwise
    activations; the group product is the only nonlinearity."""

    prefix: str = "alpha"

    @property
    def block_names(self):
        return tuple(f"{self.prefix}.{n}" for n in
                     ("w1", "b1", "w2", "b2", "w3", "b3"))

    @staticmethod
    def shapes() -> dict[str, tuple[int, ...]]:
        c1, c2 = NN_CHANNELS
        k = NN_KERNEL
        return {"w1": (c1, 1, k), "b1": (c1,),
                "w2": (c2, 2 * c1 // 3, k), "b2": (c2,),
                "w3": (1, c2, 1), "b3": (1,)}

    @classmethod
    def n_weights(cls) -> int:
        return int(sum(math.prod(s) for s in cls.shapes().values()))

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        shapes = self.shapes()
        out = {}
        for layer in ("1", "2", "3"):
            w_shape = shapes["w" + layer]
            bound = 1.0 / math.sqrt(w_shape[1] * w_shape[2])
            out[f"{self.prefix}.w{layer}"] = rng.uniform(-bound, bound, w_shape)
            out[f"{self.prefix}.b{layer}"] = rng.uniform(
                -bound, bound, shapes["b" + layer])
        return out

    def zero_params(self) -> dict[str, np.ndarray]:
        return {f"{self.prefix}.{k}": np.zeros(s) for k, s in self.shapes().items()}

    def __call__(self, params, x):
        p = self.prefix
        shape = ad.value_of(x).shape
        d, ncol = shape[-2], shape[-1]
        h = ad.reshape(ad.swapaxes(x), (-1, 1, d))
        h = ad.conv1d_circular(h, params[f"{p}.w1"], params[f"{p}.b1"])
        g = NN_CHANNELS[0] // 3
        g1 = h[:, :g, :]
        g2 = h[:, g:2 * g, :]
        g3 = h[:, 2 * g:, :]
        h = ad.concat([g1, g2 * g3], axis=1)
        h = ad.conv1d_circular(h, params[f"{p}.w2"], params[f"{p}.b2"])
        h = ad.conv1d_circular(h, params[f"{p}.w3"], params[f"{p}.b3"])
        h = ad.reshape(h, shape[:-2] + (ncol, d))
        return ad.swapaxes(h)


nn_field = NNField()


@dataclass
class CorrectedField:
    """A frozen approximate polynomial model plus a learned NN residual."""

    base_alpha: np.ndarray
    nn: NNField = field(default_factory=NNField)

    @property
    def block_names(self):
        return self.nn.block_names

    def __call__(self, params, x):
        return poly18_field(self.base_alpha, x) + self.nn(params, x)


@dataclass
class LinearBanded:
    key: str = "alpha"
    is_linear = True

    @property
    def block_names(self):
        return (self.key,)

    def __call__(self, params, x):
        return tridiag_matmul(params[self.key], x)


@dataclass
class OdeFlow:
    """The ``dt_obs``-flow of an autonomous vector field, via RK4."""

    field: Callable
    dt_obs: float = 0.05
    dt_int: float = 0.01
    is_linear = False

    def __post_init__(self):
        ratio = self.dt_obs / self.dt_int
        if ratio < 1 or abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("dt_obs must be an integer multiple of dt_int")

    @property
    def steps(self) -> int:
        return int(round(self.dt_obs / self.dt_int))

    @property
    def block_names(self):
        return self.field.block_names

    def __call__(self, params, x):
        return rk4_flow(lambda z: self.field(params, z), x, self.dt_int,
                        self.steps)


# ---------------------------------------------------------------------------
# process noise


def exp_kernel_cov(beta_natural, d: int):
    """``Q[i, j] = beta1 * exp(-beta2 |i - j|)``."""
    dist = np.abs(np.subtract.outer(np.arange(d), np.arange(d))).astype(float)
    b1 = beta_natural[0:1] if ad.is_node(beta_natural) else beta_natural[0]
    b2 = beta_natural[1:2] if ad.is_node(beta_natural) else beta_natural[1]
    return b1 * ad.exp(-(b2 * dist))


def exp_kernel_sqrt(beta_natural, d: int):
    return ad.cholesky(exp_kernel_cov(beta_natural, d))


@dataclass
class ExpKernelNoise:
    """Exponentially correlated noise; ``beta`` stores ``log(beta1, beta2)``."""

    d_x: int
    key: str = "beta"

    def natural(self, raw):
        return np.exp(raw)

    def from_natural(self, beta):
        return np.log(np.asarray(beta, dtype=np.float64))

    def cov(self, params):
        return exp_kernel_cov(ad.exp(params[self.key]), self.d_x)

    def sqrt(self, params):
        return ad.cholesky(self.cov(params))

    def apply(self, params, eps):
        return self.sqrt(params) @ eps

    def project(self, q_hat: np.ndarray, start=None) -> np.ndarray:
        """Maximize ``-1/2 logdet Q - 1/2 tr(Q^{-1} q_hat)`` over the family."""
        q_hat = 0.5 * (q_hat + q_hat.T)

        def objective(raw):
            tape = ad.Tape()
            leaf = tape.leaf(raw)
            q = exp_kernel_cov(ad.exp(leaf), self.d_x)
            inv_q_hat = ad.psd_solve(q, q_hat)
            val = 0.5 * ad.logdet(q) + 0.5 * ad.trace(inv_q_hat)
            (g,) = tape.gradients(val, [leaf])
            return val.item(), g

        if start is None:
            start = np.log([max(np.mean(np.diag(q_hat)), 1e-12), 1.0])
        res = optimize.minimize(objective, np.asarray(start, float), jac=True,
                                method="BFGS", options={"gtol": 1e-10})
        return res.x


@dataclass
class DiagNoise:
    """``S_beta = diag(softplus(beta))``, so ``Q_beta = diag(softplus(beta)^2)``."""

    d_x: int
    key: str = "beta"

    def natural(self, raw):
        return softplus(raw) ** 2

    def from_natural(self, q_diag):
        return softplus_inv(np.sqrt(np.asarray(q_diag, dtype=np.float64)))

    def std(self, params):
        return ad.reshape(ad.softplus(params[self.key]), (self.d_x, 1))

    def cov(self, params):
        s = ad.softplus(params[self.key])
        return ad.diag(s * s)

    def sqrt(self, params):
        return ad.diag(ad.softplus(params[self.key]))

    def apply(self, params, eps):
        return self.std(params) * eps

    def project(self, q_hat: np.ndarray, start=None) -> np.ndarray:
        return self.from_natural(np.maximum(np.diag(q_hat), 1e-300))


def diag_noise_sqrt(beta):
    return ad.diag(ad.softplus(beta))


@dataclass
class ZeroNoise:
    d_x: int
    key = None

    def cov(self, params):
        return np.zeros((self.d_x, self.d_x))

    def sqrt(self, params):
        return np.zeros((self.d_x, self.d_x))

    def apply(self, params, eps):
        return np.zeros_like(eps)


# ---------------------------------------------------------------------------
# model


def observation_matrix(d_x: int, pattern: str = "full") -> np.ndarray:
    """``full`` -> identity; ``two-of-three`` drops every third coordinate."""
    if pattern == "full":
        return np.eye(d_x)
    if pattern == "two-of-three":
        keep = [i for i in range(d_x) if i % 3 != 2]
        return np.eye(d_x)[keep]
    raise ValueError(f"unknown observation pattern {pattern!r}")


@dataclass
class StateSpaceModel:
    """``x_t = F(x_{t-1}) + S eps``, ``y_t = H x_t + N(0, R)``, ``x_0 ~ N(m0, C0)``."""

    transition: object
    noise: object
    H: np.ndarray
    R: np.ndarray
    m0: np.ndarray
    C0: np.ndarray

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=np.float64))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=np.float64))
        self.m0 = np.asarray(self.m0, dtype=np.float64).reshape(-1, 1)
        self.C0 = np.atleast_2d(np.asarray(self.C0, dtype=np.float64))
        d_x, d_y = self.H.shape[1], self.H.shape[0]
        if self.R.shape != (d_y, d_y):
            raise ValueError("R must be d_y x d_y")
        if not np.allclose(self.R, self.R.T):
            raise ValueError("R must be symmetric")
        try:
            np.linalg.cholesky(self.R)
        except np.linalg.LinAlgError:
            raise ValueError("R must be positive definite") from None
        if self.m0.shape[0] != d_x or self.C0.shape != (d_x, d_x):
            raise ValueError("initial moments do not match H")
        if np.min(np.linalg.eigvalsh(0.5 * (self.C0 + self.C0.T))) < -1e-12:
            raise ValueError("C0 must be PSD")

    @property
    def d_x(self) -> int:
        return self.H.shape[1]

    @property
    def d_y(self) -> int:
        return self.H.shape[0]

    @property
    def is_linear(self) -> bool:
        return bool(getattr(self.transition, "is_linear", False))

    def sample_initial(self, rng: np.random.Generator, n: int,
                       batch: tuple = ()) -> np.ndarray:
        eps = rng.standard_normal(tuple(batch) + (self.d_x, n))
        root = _psd_root(self.C0)
        return self.m0 + root @ eps

    def forecast(self, params, x, eps):
        return self.transition(params, x) + self.noise.apply(params, eps)

    def simulate(self, theta, T: int, rng: np.random.Generator, x0=None):
        """Draw ``(x_{0:T}, y_{1:T})``; rows are time steps."""
        params = dict(theta.items()) if isinstance(theta, ThetaParams) else theta
        x = self.sample_initial(rng, 1) if x0 is None else np.reshape(
            np.asarray(x0, dtype=np.float64), (self.d_x, 1))
        r_root = _psd_root(self.R)
        xs, ys = [x[:, 0]], []
        for _ in range(T):
            eps = rng.standard_normal((self.d_x, 1))
            x = np.asarray(self.forecast(params, x, eps))
            y = self.H @ x + r_root @ rng.standard_normal((self.d_y, 1))
            xs.append(x[:, 0])
            ys.append(y[:, 0])
        return np.array(xs), np.array(ys).reshape(T, self.d_y)


def _psd_root(c):
    try:
        return np.linalg.cholesky(c)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(0.5 * (c + c.T))
        return v * np.sqrt(np.clip(w, 0.0, None))


# ---------------------------------------------------------------------------
# learning problems


@dataclass
class ProblemConfig:
    d_x: int = 40
    observe: str = "full"
    obs_var: float = 1.0
    init_var: float = 50.0
    dt_obs: float = 0.05
    dt_int: float = 0.01
    q0_var: float = 2.0
    seed: int = 0
    perturbation_var: tuple = (1.0, 0.1, 0.01)
    alpha0: tuple | None = None
    beta0: tuple | None = None


@dataclass
class Problem:
    """A learnable model, its starting point, and the reference truth."""

    kind: str
    model: StateSpaceModel
    theta0: ThetaParams
    reference_model: StateSpaceModel
    reference_theta: ThetaParams
    alpha_ref: np.ndarray | None = None
    config: ProblemConfig = field(default_factory=ProblemConfig)
    approx_alpha: np.ndarray | None = None


KINDS = ("linear", "parameterized", "fully-unknown", "correction")


def perturbed_alpha(seed: int, variances=(1.0, 0.1, 0.01)) -> np.ndarray:
    """Fixed draw ``alpha_i ~ N(alpha*_i, var)`` with the variance set by the
    polynomial order of coefficient ``i``."""
    rng = make_rng(seed, "approx-alpha")
    var = np.empty(18)
    var[0] = variances[0]
    var[1:6] = variances[1]
    var[6:] = variances[2]
    return POLY18_ALPHA_STAR + np.sqrt(var) * rng.standard_normal(18)


def build_problem(kind: str, config: ProblemConfig | None = None) -> Problem:
    """Assemble one of the learning problems.

    ``linear`` is the banded linear-Gaussian model; ``parameterized``,
    ``fully-unknown`` and ``correction`` learn Lorenz-96 dynamics with a
    polynomial field, a NN field, or a frozen perturbed polynomial plus a NN
    residual.
    """
    kind = kind.lower().replace("_", "-")
    if kind not in KINDS:
        raise ValueError(f"unknown problem kind {kind!r}; expected one of {KINDS}")
    if config is None:
        config = (ProblemConfig(d_x=20, obs_var=0.5, init_var=4.0)
                  if kind == "linear" else ProblemConfig())
    d = config.d_x
    H = observation_matrix(d, config.observe)
    R = config.obs_var * np.eye(H.shape[0])
    m0 = np.zeros(d)
    C0 = config.init_var * np.eye(d)

    if kind == "linear":
        noise = ExpKernelNoise(d)
        model = StateSpaceModel(LinearBanded(), noise, H, R, m0, C0)
        alpha0 = config.alpha0 if config.alpha0 is not None else (0.5, 0.5, 0.5)
        beta0 = config.beta0 if config.beta0 is not None else (1.0, 0.1)
        theta0 = ThetaParams({"alpha": alpha0, "beta": noise.from_natural(beta0)})
        ref_theta = ThetaParams({"alpha": LINEAR_ALPHA_STAR,
                                 "beta": noise.from_natural(LINEAR_BETA_STAR)})
        return Problem(kind, model, theta0, model, ref_theta,
                       LINEAR_ALPHA_STAR.copy(), config)

    reference = StateSpaceModel(
        OdeFlow(Lorenz96Field(), config.dt_obs, config.dt_int), ZeroNoise(d),
        H, R, m0, C0)
    noise = DiagNoise(d)
    beta0 = (np.full(d, noise.from_natural(config.q0_var))
             if config.beta0 is None else np.asarray(config.beta0, float))
    ref_theta = ThetaParams({})
    if kind == "parameterized":
        flow = OdeFlow(Poly18Field(), config.dt_obs, config.dt_int)
        alpha0 = np.zeros(18) if config.alpha0 is None else config.alpha0
        theta0 = ThetaParams({"alpha": alpha0, "beta": beta0})
        model = StateSpaceModel(flow, noise, H, R, m0, C0)
        return Problem(kind, model, theta0, reference, ref_theta,
                       POLY18_ALPHA_STAR.copy(), config)

    nn = NNField()
    weights = nn.init_params(make_rng(config.seed, "nn-init"))
    approx = None
    if kind == "fully-unknown":
        vf = nn
    else:
        approx = perturbed_alpha(config.seed, config.perturbation_var)
        vf = CorrectedField(approx, nn)
    flow = OdeFlow(vf, config.dt_obs, config.dt_int)
    model = StateSpaceModel(flow, noise, H, R, m0, C0)
    theta0 = ThetaParams({**weights, "beta": beta0})
    return Problem(kind, model, theta0, reference, ref_theta, None, config,
                   approx)


def with_config(problem_config: ProblemConfig, **changes) -> ProblemConfig:
    return dataclasses.replace(problem_config, **changes)
