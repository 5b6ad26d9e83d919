"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation applied to :class:`Node` objects in
topological order; :meth:`Tape.backward` walks it once in reverse to
accumulate adjoints.  Node values are matrices in the common case (vectors
are ``n x 1``), but leading batch axes are allowed and broadcast like numpy.

Every op also accepts plain ndarrays.  When no operand is a Node the op just
returns the numeric result, so model code runs unchanged with or without a
tape.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy import linalg as sla

__all__ = [
    "Node", "Tape", "NotPSDError", "NonFiniteError", "ShapeError",
    "apply", "value_of", "is_node",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "transpose",
    "swapaxes", "reshape", "getitem", "gather_cols", "concat", "concat_rows",
    "slice_rows", "roll", "sum", "sumsq", "mean_cols", "broadcast_col",
    "hadamard", "diag", "exp", "log", "softplus", "square", "logsumexp",
    "cholesky", "psd_solve", "logdet", "gaussian_logpdf", "conv1d_circular",
    "trace",
]

LOG_2PI = math.log(2.0 * math.pi)


class NotPSDError(np.linalg.LinAlgError):
    """Raised when a matrix cannot be factorized even after jitter."""


class NonFiniteError(FloatingPointError):
    """Raised when an op would record a NaN or Inf value."""


class ShapeError(ValueError):
    pass


class Node:
    """A value recorded on a tape.

    Attributes
    ----------
    value : ndarray
        Float64 array (immutable by convention once recorded).
    id : int
        Position on the tape.
    op : str
        Tag of the producing operation (``"leaf"`` for inputs).
    parents : tuple of Node
        Inputs that are themselves nodes; all have smaller ids.
    """

    __slots__ = ("value", "id", "op", "parents", "tape", "requires_grad",
                 "_fwd", "_vjp", "_inputs")
    __array_ufunc__ = None  # make ndarray <op> Node defer to Node.__rop__

    def __init__(self, tape, value, op, parents, requires_grad, fwd=None,
                 vjp=None, inputs=None):
        self.tape = tape
        self.value = value
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self._fwd = fwd
        self._vjp = vjp
        self._inputs = inputs
        self.id = len(tape.nodes)

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return self.value.item()

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)


class Tape:
    """Append-only record of nodes.

    A tape is single-writer; independent runs should use independent tapes.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: list[int] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, differentiable: bool = True) -> Node:
        value = _as_float_array(value)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError("leaf value is not finite")
        node = Node(self, value, "leaf", (), differentiable)
        self.nodes.append(node)
        if differentiable:
            self.leaves.append(node.id)
        return node

    def constant(self, value) -> Node:
        return self.leaf(value, differentiable=False)

    def _record(self, value, op, inputs, fwd, vjp) -> Node:
        parents = tuple(x for x in inputs if isinstance(x, Node))
        requires_grad = any(p.requires_grad for p in parents)
        node = Node(self, value, op, parents, requires_grad, fwd,
                    vjp if requires_grad else None, inputs)
        self.nodes.append(node)
        return node

    def backward(self, seed: Node) -> dict[int, np.ndarray]:
        """Adjoints of ``seed`` with respect to every differentiable leaf.

        Returns a map ``{leaf id: adjoint}``; leaves not connected to the seed
        get exact zeros.
        """
        if not isinstance(seed, Node) or seed.tape is not self:
            raise ShapeError("seed must be a node on this tape")
        if seed.value.size != 1:
            raise ShapeError(f"seed must be scalar, got shape {seed.shape}")
        adjoints: dict[int, np.ndarray] = {seed.id: np.ones_like(seed.value)}
        grads: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes[: seed.id + 1]):
            g = adjoints.pop(node.id, None)
            if g is None or not node.requires_grad:
                continue
            if node._vjp is None:
                grads[node.id] = g
                continue
            inputs = node._inputs
            values = [x.value if isinstance(x, Node) else x for x in inputs]
            needs = [isinstance(x, Node) and x.requires_grad for x in inputs]
            in_grads = node._vjp(g, node.value, values, needs)
            for x, need, gx in zip(inputs, needs, in_grads):
                if not need or gx is None:
                    continue
                gx = _unbroadcast(np.asarray(gx, dtype=np.float64), x.value.shape)
                prev = adjoints.get(x.id)
                adjoints[x.id] = gx if prev is None else prev + gx
        return {i: grads.get(i, np.zeros_like(self.nodes[i].value))
                for i in self.leaves}

    def gradients(self, seed: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
        grads = self.backward(seed)
        return [grads[n.id] for n in wrt]

    def replay(self) -> list[np.ndarray]:
        """Recompute every node's value from the leaves, in tape order."""
        out: list[np.ndarray] = []
        for node in self.nodes:
            if node.op == "leaf":
                out.append(node.value)
                continue
            values = [out[x.id] if isinstance(x, Node) else x
                      for x in node._inputs]
            out.append(node._fwd(*values))
        return out


def is_node(x) -> bool:
    return isinstance(x, Node)


def value_of(x):
    """The numeric value of a node or array."""
    return x.value if isinstance(x, Node) else x


def _as_float_array(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def apply(op: str, fwd: Callable, vjp: Callable, *inputs):
    """Evaluate ``fwd`` on the input values and record it.

    ``vjp(g, out, values, needs)`` must return one adjoint (or None) per
    input.  Non-node inputs are treated as constants.  If no input is a node
    the plain result is returned.
    """
    tape = None
    for x in inputs:
        if isinstance(x, Node):
            tape = x.tape
            break
    values = [x.value if isinstance(x, Node) else x for x in inputs]
    out = fwd(*values)
    if tape is None:
        return out
    for x in inputs:
        if isinstance(x, Node) and x.tape is not tape:
            raise ValueError("operands live on different tapes")
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"op {op!r} produced a non-finite value")
    return tape._record(out, op, inputs, fwd, vjp)


# ---------------------------------------------------------------------------
# elementwise and linear ops


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError:
        raise ShapeError(f"{op}: shapes {np.shape(a)} and {np.shape(b)} "
                         "do not broadcast") from None


def add(a, b):
    _check_broadcast(value_of(a), value_of(b), "add")
    return apply("add", np.add, lambda g, out, v, n: (g, g), a, b)


def sub(a, b):
    _check_broadcast(value_of(a), value_of(b), "sub")
    return apply("sub", np.subtract, lambda g, out, v, n: (g, -g), a, b)


def mul(a, b):
    _check_broadcast(value_of(a), value_of(b), "mul")
    return apply("mul", np.multiply,
                 lambda g, out, v, n: (g * v[1] if n[0] else None,
                                       g * v[0] if n[1] else None), a, b)


hadamard = mul


def div(a, b):
    _check_broadcast(value_of(a), value_of(b), "div")
    return apply("div", np.divide,
                 lambda g, out, v, n: (g / v[1] if n[0] else None,
                                       -g * out / v[1] if n[1] else None),
                 a, b)


def neg(a):
    return apply("neg", np.negative, lambda g, out, v, n: (-g,), a)


def scale(a, c: float):
    c = float(c)
    return apply("scale", lambda x: c * x, lambda g, out, v, n: (c * g,), a)


def _mT(x):
    return np.swapaxes(x, -1, -2)


def matmul(a, b):
    va, vb = value_of(a), value_of(b)
    if va.ndim < 2 or vb.ndim < 2 or va.shape[-1] != vb.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {va.shape} @ {vb.shape}")

    def vjp(g, out, v, n):
        return (g @ _mT(v[1]) if n[0] else None,
                _mT(v[0]) @ g if n[1] else None)

    return apply("matmul", np.matmul, vjp, a, b)


def swapaxes(a, axis1: int = -1, axis2: int = -2):
    return apply("swapaxes", lambda x: np.swapaxes(x, axis1, axis2),
                 lambda g, out, v, n: (np.swapaxes(g, axis1, axis2),), a)


def transpose(a):
    return swapaxes(a, -1, -2)


def reshape(a, shape):
    shape = tuple(shape)
    return apply("reshape", lambda x: np.reshape(x, shape),
                 lambda g, out, v, n: (np.reshape(g, v[0].shape),), a)


def getitem(a, index):
    fancy = any(isinstance(i, (np.ndarray, list))
                for i in (index if isinstance(index, tuple) else (index,)))

    def vjp(g, out, v, n):
        z = np.zeros_like(v[0])
        if fancy:
            np.add.at(z, index, g)
        else:
            z[index] += g
        return (z,)

    return apply("getitem", lambda x: x[index], vjp, a)


def slice_rows(a, start: int, stop: int):
    return getitem(a, (..., slice(start, stop), slice(None)))


def gather_cols(a, index):
    """Select columns per batch: ``out[..., :, j] = a[..., :, index[..., j]]``.

    ``index`` is an integer array with the batch shape of ``a`` plus one
    trailing axis; it is a constant (no gradient flows into it).
    """
    index = np.asarray(index)
    idx = index[..., None, :]

    def fwd(x):
        return np.take_along_axis(x, np.broadcast_to(
            idx, x.shape[:-1] + index.shape[-1:]), axis=-1)

    def vjp(g, out, v, n):
        x = v[0]
        zt = np.zeros(np.swapaxes(x, -1, -2).shape)
        batch = x.shape[:-2]
        flat_z = zt.reshape((-1,) + zt.shape[-2:])
        flat_g = np.swapaxes(g, -1, -2).reshape((-1,) + flat_z.shape[-2:])
        flat_i = np.broadcast_to(index, batch + index.shape[-1:]).reshape(
            -1, index.shape[-1])
        rows = np.arange(flat_z.shape[0])[:, None]
        np.add.at(flat_z, (rows, flat_i), flat_g)
        return (np.swapaxes(flat_z.reshape(zt.shape), -1, -2),)

    return apply("gather_cols", fwd, vjp, a)


def concat(nodes: Sequence, axis: int = -2):
    sizes = [value_of(x).shape[axis] for x in nodes]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g, out, v, n):
        return tuple(np.split(g, splits, axis=axis))

    return apply("concat", lambda *xs: np.concatenate(xs, axis=axis), vjp,
                 *nodes)


def concat_rows(nodes: Sequence):
    return concat(nodes, axis=-2)


def roll(a, shift: int, axis: int = -2):
    return apply("roll", lambda x: np.roll(x, shift, axis=axis),
                 lambda g, out, v, n: (np.roll(g, -shift, axis=axis),), a)


def sum(a, axis=None, keepdims: bool = True):  # noqa: A001 - mirrors numpy
    def fwd(x):
        return np.sum(x, axis=axis, keepdims=keepdims)

    def vjp(g, out, v, n):
        x = v[0]
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        elif not keepdims:
            g = np.reshape(g, (1,) * x.ndim)
        return (np.broadcast_to(g, x.shape),)

    return apply("sum", fwd, vjp, a)


def sumsq(a):
    return sum(mul(a, a))


def trace(a):
    return apply("trace",
                 lambda x: np.trace(x, axis1=-2, axis2=-1)[..., None, None],
                 lambda g, out, v, n: (g * np.eye(v[0].shape[-1]),), a)


def mean_cols(a):
    def vjp(g, out, v, n):
        return (np.broadcast_to(g / v[0].shape[-1], v[0].shape),)

    return apply("mean_cols", lambda x: np.mean(x, axis=-1, keepdims=True),
                 vjp, a)


def broadcast_col(a, ncols: int):
    def fwd(x):
        if x.shape[-1] != 1:
            raise ShapeError("broadcast_col expects a single column")
        return np.broadcast_to(x, x.shape[:-1] + (ncols,)).copy()

    return apply("broadcast_col", fwd,
                 lambda g, out, v, n: (np.sum(g, axis=-1, keepdims=True),), a)


def diag(v):
    """Diagonal matrix from a vector (1-D or ``n x 1``)."""
    def fwd(x):
        return np.diag(np.ravel(x))

    def vjp(g, out, vals, n):
        return (np.reshape(np.diagonal(g).copy(), vals[0].shape),)

    return apply("diag", fwd, vjp, v)


def exp(a):
    return apply("exp", np.exp, lambda g, out, v, n: (g * out,), a)


def log(a):
    def fwd(x):
        if np.any(x <= 0):
            raise NonFiniteError("log of a non-positive value")
        return np.log(x)

    return apply("log", fwd, lambda g, out, v, n: (g / v[0],), a)


def _softplus(x):
    return np.logaddexp(0.0, x)


def softplus(a):
    def vjp(g, out, v, n):
        return (g * _expit(v[0]),)

    return apply("softplus", _softplus, vjp, a)


def _expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def square(a):
    return apply("square", np.square, lambda g, out, v, n: (2.0 * g * v[0],), a)


def logsumexp(a, axis: int = -1):
    def fwd(x):
        m = np.max(x, axis=axis, keepdims=True)
        return m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))

    def vjp(g, out, v, n):
        return (g * np.exp(v[0] - out),)

    return apply("logsumexp", fwd, vjp, a)


# ---------------------------------------------------------------------------
# symmetric positive (semi)definite algebra


def _sym(a):
    return 0.5 * (a + _mT(a))


def _factor(a):
    """Cholesky factor of the symmetrized matrix, with one jitter retry."""
    a = _sym(a)
    try:
        return np.linalg.cholesky(a), a
    except np.linalg.LinAlgError:
        pass
    d = a.shape[-1]
    tr = np.trace(a, axis1=-2, axis2=-1)[..., None, None]
    jittered = a + 1e-10 * np.abs(tr) / d * np.eye(d)
    try:
        return np.linalg.cholesky(jittered), jittered
    except np.linalg.LinAlgError:
        raise NotPSDError("matrix is not PSD (factorization failed after "
                          "jitter)") from None


def _tri_solve(L, b, lower=True, trans=False):
    if L.ndim == 2 and b.ndim == 2:
        return sla.solve_triangular(L, b, lower=lower,
                                    trans=1 if trans else 0,
                                    check_finite=False)
    if L.ndim == 2:
        # shared factor: fold the batch into columns
        d, m = b.shape[-2:]
        cols = np.moveaxis(b, -2, 0).reshape(d, -1)
        x = sla.solve_triangular(L, cols, lower=lower, trans=1 if trans else 0,
                                 check_finite=False)
        return np.moveaxis(x.reshape((d,) + b.shape[:-2] + (m,)), 0, -2)
    shape = np.broadcast_shapes(L.shape[:-2], b.shape[:-2])
    Lb = np.broadcast_to(L, shape + L.shape[-2:]).reshape((-1,) + L.shape[-2:])
    bb = np.broadcast_to(b, shape + b.shape[-2:]).reshape((-1,) + b.shape[-2:])
    out = np.empty(bb.shape)
    for i in range(Lb.shape[0]):
        out[i] = sla.solve_triangular(Lb[i], bb[i], lower=lower,
                                      trans=1 if trans else 0,
                                      check_finite=False)
    return out.reshape(shape + b.shape[-2:])


def _cho_solve(L, b):
    return _tri_solve(L, _tri_solve(L, b), trans=True)


def _cho_inverse(L):
    eye = np.broadcast_to(np.eye(L.shape[-1]), L.shape)
    return _cho_solve(L, eye)


def _phi(x):
    out = np.tril(x)
    d = x.shape[-1]
    idx = np.arange(d)
    out[..., idx, idx] *= 0.5
    return out


def cholesky(a):
    """Lower Cholesky factor ``L`` with ``sym(a) = L L^T``.

    The input is symmetrized first; a single jitter of ``1e-10 tr(a)/d`` is
    tried before raising :class:`NotPSDError`.
    """
    va = value_of(a)
    if va.ndim < 2 or va.shape[-1] != va.shape[-2]:
        raise ShapeError(f"cholesky expects square matrices, got {va.shape}")

    def fwd(x):
        return _factor(x)[0]

    def vjp(g, L, v, n):
        P = _phi(_mT(L) @ g)
        # S = L^{-T} P L^{-1}
        X = _tri_solve(L, P, trans=True)
        S = _mT(_tri_solve(L, _mT(X), trans=True))
        return (_sym(S),)

    return apply("cholesky", fwd, vjp, a)


def psd_solve(a, b):
    """``X`` solving ``sym(a) X = b`` for PSD ``a``."""
    va, vb = value_of(a), value_of(b)
    if va.shape[-1] != va.shape[-2] or va.shape[-1] != vb.shape[-2]:
        raise ShapeError(f"psd_solve: shapes {va.shape}, {vb.shape}")

    def fwd(A, B):
        L, _ = _factor(A)
        return _cho_solve(L, B)

    def vjp(g, X, v, n):
        L, _ = _factor(v[0])
        gb = _cho_solve(L, g)
        ga = -_sym(gb @ _mT(X)) if n[0] else None
        return ga, gb

    return apply("psd_solve", fwd, vjp, a, b)


def logdet(a):
    """``log det a`` for PSD ``a``, shaped ``(..., 1, 1)``."""
    def fwd(A):
        L, _ = _factor(A)
        d = np.diagonal(L, axis1=-2, axis2=-1)
        return 2.0 * np.sum(np.log(d), axis=-1)[..., None, None]

    def vjp(g, out, v, n):
        L, _ = _factor(v[0])
        return (g * _cho_inverse(L),)

    return apply("logdet", fwd, vjp, a)


def gaussian_logpdf(y, mu, sigma):
    """Column-wise Gaussian log density ``log N(y; mu[:, m], sigma)``.

    ``y`` has shape ``(..., d, 1)`` or ``(..., d, M)``, ``mu`` ``(..., d, M)``
    and ``sigma`` ``(..., d, d)``; the result has shape ``(..., 1, M)``.
    """
    vy, vm, vs = value_of(y), value_of(mu), value_of(sigma)
    d = vs.shape[-1]
    if vs.shape[-2] != d or vm.shape[-2] != d or vy.shape[-2] != d:
        raise ShapeError(f"gaussian_logpdf: shapes y={vy.shape}, "
                         f"mu={vm.shape}, sigma={vs.shape}")

    def fwd(Y, M, S):
        L, _ = _factor(S)
        r = Y - M
        z = _tri_solve(L, r)
        quad = np.sum(z * z, axis=-2, keepdims=True)
        ld = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)),
                          axis=-1)[..., None, None]
        return -0.5 * (d * LOG_2PI + ld) - 0.5 * quad

    def vjp(g, out, v, n):
        Y, M, S = v
        L, _ = _factor(S)
        r = Y - M
        w = _cho_solve(L, r)  # sigma^{-1} r
        gw = w * g
        gs = None
        if n[2]:
            gsum = np.sum(g, axis=-1, keepdims=True)
            gs = 0.5 * (gw @ _mT(w)) - 0.5 * gsum * _cho_inverse(L)
        return -gw if n[0] else None, gw if n[1] else None, gs

    return apply("gaussian_logpdf", fwd, vjp, y, mu, sigma)


# ---------------------------------------------------------------------------
# convolution


def _unfold_circular(x, k):
    """``(M, C, d) -> (C*k, M, d)`` with circular neighbours along ``d``."""
    half = (k - 1) // 2
    cols = [np.roll(x, -o, axis=-1) for o in range(-half, half + 1)]
    # stacked[c, o] = x[:, c, i + o]
    stacked = np.stack(cols, axis=2)  # (M, C, k, d)
    M, C, _, d = stacked.shape
    return stacked.transpose(1, 2, 0, 3).reshape(C * k, M, d)


def conv1d_circular(x, weight, bias):
    """Circular 1-D convolution (cross-correlation, as in deep-learning libs).

    ``x`` is ``(M, C_in, d)``, ``weight`` ``(C_out, C_in, k)`` with odd ``k``
    and ``bias`` ``(C_out,)``.  Output position ``i`` combines inputs at
    ``i - (k-1)/2 ... i + (k-1)/2`` modulo ``d``.
    """
    vw = value_of(weight)
    c_out, c_in, k = vw.shape
    if k % 2 == 0:
        raise ShapeError("conv1d_circular requires an odd kernel size")
    if value_of(x).shape[-2] != c_in:
        raise ShapeError(f"conv1d_circular: input has {value_of(x).shape[-2]} "
                         f"channels, kernel expects {c_in}")
    half = (k - 1) // 2

    def fwd(X, W, b):
        M, _, d = X.shape
        cols = _unfold_circular(X, k).reshape(c_in * k, M * d)
        out = W.reshape(c_out, c_in * k) @ cols
        out = out.reshape(c_out, M, d).transpose(1, 0, 2)
        return out + b[None, :, None]

    def vjp(g, out, v, n):
        X, W, b = v
        M, _, d = X.shape
        g2 = g.transpose(1, 0, 2).reshape(c_out, M * d)
        gx = gw = gb = None
        if n[1]:
            cols = _unfold_circular(X, k).reshape(c_in * k, M * d)
            gw = (g2 @ cols.T).reshape(c_out, c_in, k)
        if n[2]:
            gb = g.sum(axis=(0, 2))
        if n[0]:
            gcols = (W.reshape(c_out, c_in * k).T @ g2).reshape(c_in, k, M, d)
            gx = np.zeros((M, c_in, d))
            for j, o in enumerate(range(-half, half + 1)):
                gx += np.roll(gcols[:, j].transpose(1, 0, 2), o, axis=-1)
        return gx, gw, gb

    return apply("conv1d_circular", fwd, vjp, x, weight, bias)
