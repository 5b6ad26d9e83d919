"""Gradient-ascent drivers.

``adenkf`` differentiates the EnKF log-likelihood over the whole sequence;
``adenkf-t`` splits it into windows of length ``L`` and updates after each
window, carrying the particles across the boundary as plain values.  The
``adpf``/``adpf-t`` variants do the same with the particle filter and ``em``
runs the EnKF/EnKS expectation-maximization baseline.

Every random draw is keyed by ``(seed, epoch, window)``, so a run resumed
from a checkpoint reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .em import EmConfig, em_iteration
from .enkf import EnkfConfig, FilterDivergenceError, draw_noise, run_filter
from .models import BlowUpError, ThetaParams
from .particle import PfConfig, draw_pf_noise, run_pf
from .rng import make_rng

METHODS = ("adenkf", "adenkf-t", "adpf", "adpf-t", "em")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, window: int, cause: BaseException):
        super().__init__(f"training diverged at epoch {epoch}, window {window}: "
                         f"{cause}")
        self.epoch = epoch
        self.window = window
        self.cause = cause


def schedule_eta(i: int, eta0: float, I0: int = 10, tau: float = 0.0) -> float:
    """``eta0`` for ``i <= I0``, then ``eta0 * (i - I0)^(-tau)``."""
    if i < 1:
        raise ValueError("iterations are counted from 1")
    if i <= I0:
        return eta0
    return eta0 * (i - I0) ** (-tau)


class Adam:
    """Adam with bias correction; ``lr`` may be a scalar or per-coordinate."""

    def __init__(self, lr=1e-3, b1: float = 0.9, b2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta, grad, lr=None, maximize: bool = True):
        grad = np.asarray(grad, dtype=np.float64)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite gradient")
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        g = grad if maximize else -grad
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        rate = self.lr if lr is None else lr
        return theta + rate * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        self.m = None if state.get("m") is None else np.array(state["m"])
        self.v = None if state.get("v") is None else np.array(state["v"])


def adam_update(theta, grad, state: dict | None, eta):
    """Functional form of one Adam ascent step; returns ``(theta', state')``."""
    opt = Adam()
    if state:
        opt.load_state_dict(state)
    theta = opt.step(theta, grad, lr=eta)
    return theta, opt.state_dict()


class PlainAscent:
    """``theta + eta * grad``."""

    def __init__(self, lr=1e-3):
        self.lr = lr
        self.t = 0

    def step(self, theta, grad, lr=None, maximize: bool = True):
        grad = np.asarray(grad, dtype=np.float64)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite gradient")
        self.t += 1
        rate = self.lr if lr is None else lr
        return theta + rate * grad if maximize else theta - rate * grad

    def state_dict(self) -> dict:
        return {"t": self.t, "m": None, "v": None}

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])


@dataclass
class TrainConfig:
    method: str = "adenkf"
    iterations: int = 100
    N: int = 100
    optimizer: str = "adam"
    eta0: float = 0.1
    I0: int = 10
    tau: float = 0.0
    eta_alpha: float | None = None
    eta_beta: float | None = None
    L: int | None = None
    seed: int = 0
    eval_every: int = 0
    taper_radius: float | None = None
    circular_taper: bool = False
    inflation: float = 0.0
    literal_proposal: bool = False
    resampling: str = "multinomial"
    lag: int = 0
    J: int = 3
    fixed_initial: bool = False

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected {METHODS}")
        if self.method.endswith("-t") and (self.L is None or self.L < 1):
            raise ValueError("truncated methods need L >= 1")
        if self.eta0 <= 0 or self.tau < 0:
            raise ValueError("need eta0 > 0 and tau >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainRecord:
    iter: int
    epoch: int
    method: str
    objective: float
    grad_norm: float
    theta_dist_to_ref: float
    wall_ms: float
    seed: int
    theta: ThetaParams | None = field(default=None, repr=False)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("theta")
        return d


@dataclass
class TrainState:
    theta: ThetaParams
    optimizer: dict
    epoch: int = 0
    update: int = 0


def windows(T: int, L: int | None) -> list[tuple[int, int]]:
    """``[(t0, t1), ...]`` covering ``0..T`` in chunks of ``L``."""
    if L is None or L >= T:
        return [(0, T)]
    return [(s, min(s + L, T)) for s in range(0, T, L)]


class Trainer:
    """Runs one training method on a model and a stack of sequences."""

    def __init__(self, model, config: TrainConfig, alpha_ref=None,
                 callback: Callable | None = None):
        self.model = model
        self.config = config
        self.alpha_ref = None if alpha_ref is None else np.asarray(alpha_ref, float)
        self.callback = callback
        self.records: list[TrainRecord] = []

    # -- optimizer ---------------------------------------------------------
    def make_optimizer(self):
        return Adam() if self.config.optimizer == "adam" else PlainAscent()

    def lr_vector(self, theta: ThetaParams, epoch: int) -> np.ndarray:
        c = self.config
        factor = schedule_eta(epoch, 1.0, c.I0, c.tau)
        e_a = c.eta0 if c.eta_alpha is None else c.eta_alpha
        e_b = c.eta0 if c.eta_beta is None else c.eta_beta
        parts = [np.full(v.size, e_b if k == "beta" else e_a)
                 for k, v in theta.items()]
        return factor * np.concatenate(parts)

    def initial_state(self, theta0: ThetaParams) -> TrainState:
        return TrainState(theta0.copy(), self.make_optimizer().state_dict())

    # -- objectives --------------------------------------------------------
    def _filter_grad(self, theta: ThetaParams, Y, t0: int, t1: int, x_in,
                     rng) -> tuple[float, ThetaParams, np.ndarray]:
        c = self.config
        batch = Y.shape[:-2]
        y = Y[..., t0:t1, :]
        tape = ad.Tape()
        nodes = theta.to_nodes(tape)
        if c.method.startswith("adpf"):
            draws = draw_pf_noise(self.model, t1 - t0, c.N, rng, batch, x0=x_in)
            run = run_pf(self.model, nodes, y, draws,
                         PfConfig(c.N, c.literal_proposal, c.resampling))
        else:
            draws = draw_noise(self.model, t1 - t0, c.N, rng, batch, x0=x_in)
            run = run_filter(self.model, nodes, y, draws,
                             EnkfConfig(c.N, c.taper_radius, c.circular_taper,
                                        c.inflation), record_means=False)
        obj = run.loglik
        if ad.is_node(obj):
            grads = tape.backward(obj)
            g = ThetaParams({k: grads[n.id] for k, n in nodes.items()})
        else:
            g = ThetaParams({k: np.zeros_like(v) for k, v in theta.items()})
        return float(np.sum(ad.value_of(obj))), g, np.array(ad.value_of(run.particles))

    def _initial_particles(self, epoch: int, batch):
        c = self.config
        key = 0 if c.fixed_initial else epoch
        rng = make_rng(c.seed, "fit-init", key)
        return self.model.sample_initial(rng, c.N, batch)

    def dist_to_ref(self, theta: ThetaParams) -> float:
        if self.alpha_ref is None or theta.alpha.size != self.alpha_ref.size:
            return float("nan")
        return float(np.linalg.norm(theta.alpha - self.alpha_ref))

    # -- loop --------------------------------------------------------------
    def run_epoch(self, state: TrainState, Y) -> list[TrainRecord]:
        c = self.config
        Y = np.asarray(Y, dtype=np.float64)
        epoch = state.epoch + 1
        opt = self.make_optimizer()
        opt.load_state_dict(state.optimizer)
        theta = state.theta
        out = []
        if c.method == "em":
            t_start = time.perf_counter()
            em_cfg = EmConfig(c.N, c.lag, c.J, c.taper_radius, c.inflation)
            lr = schedule_eta(epoch, c.eta0 if c.eta_alpha is None else c.eta_alpha,
                              c.I0, c.tau)
            try:
                res = em_iteration(self.model, theta, Y,
                                   make_rng(c.seed, "fit", epoch, 0), em_cfg, opt, lr)
            except (FilterDivergenceError, BlowUpError, np.linalg.LinAlgError,
                    FloatingPointError) as exc:
                raise TrainingDivergedError(epoch, 0, exc) from exc
            theta = res.theta
            state.update += 1
            out.append(self._record(state.update, epoch, res.filter_loglik,
                                    float("nan"), theta, t_start))
        else:
            x = self._initial_particles(epoch, Y.shape[:-2])
            for j, (t0, t1) in enumerate(windows(Y.shape[-2], c.L)):
                t_start = time.perf_counter()
                try:
                    val, g, x = self._filter_grad(
                        theta, Y, t0, t1, x, make_rng(c.seed, "fit", epoch, j))
                    gvec = g.flatten()
                    new = opt.step(theta.flatten(), gvec,
                                   lr=self.lr_vector(theta, epoch))
                except (FilterDivergenceError, BlowUpError, np.linalg.LinAlgError,
                        FloatingPointError) as exc:
                    raise TrainingDivergedError(epoch, j, exc) from exc
                theta = ThetaParams.from_flat(theta.layout, new)
                state.update += 1
                out.append(self._record(state.update, epoch, val,
                                        float(np.linalg.norm(gvec)), theta, t_start))
        state.theta = theta
        state.optimizer = opt.state_dict()
        state.epoch = epoch
        self.records.extend(out)
        return out

    def _record(self, it, epoch, obj, gnorm, theta, t_start) -> TrainRecord:
        return TrainRecord(it, epoch, self.config.method, obj, gnorm,
                           self.dist_to_ref(theta),
                           1000.0 * (time.perf_counter() - t_start),
                           self.config.seed, theta)

    def fit(self, theta0: ThetaParams, Y, state: TrainState | None = None,
            epochs: int | None = None) -> TrainState:
        """Train until ``config.iterations`` epochs (or ``epochs`` more)."""
        state = state or self.initial_state(theta0)
        stop = self.config.iterations if epochs is None else state.epoch + epochs
        while state.epoch < stop:
            recs = self.run_epoch(state, Y)
            if self.callback is not None:
                self.callback(state, recs)
        return state


def n_updates_per_epoch(T: int, L: int | None) -> int:
    return 1 if L is None or L >= T else math.ceil(T / L)
