import numpy as np
import pytest

from daflow import autodiff as ad

from oracles import circular_conv_naive, fd_gradient


def grad_of(fn, *values):
    """Autodiff gradients of scalar ``fn(*nodes)`` w.r.t. every input."""
    tape = ad.Tape()
    nodes = [tape.leaf(v) for v in values]
    out = fn(*nodes)
    grads = tape.backward(out)
    return out.item(), [grads[n.id] for n in nodes]


def check_fd(fn, *values, tol=1e-5):
    _, grads = grad_of(fn, *values)
    for k, (v, g) in enumerate(zip(values, grads)):
        def f(flat, k=k):
            args = list(values)
            args[k] = flat.reshape(np.shape(v))
            return float(np.sum(fn(*args)))
        fd = fd_gradient(f, np.ravel(v))
        err = np.abs(np.ravel(g) - fd) / (1 + np.abs(fd))
        assert err.max() < tol, (k, err.max())


rng = np.random.default_rng(7)


def spd(d, seed=0):
    m = np.random.default_rng(seed).standard_normal((d, d))
    return m @ m.T + np.eye(d)


# -- leaves -------------------------------------------------------------------

def test_zero_leaf_gets_zero_adjoint():
    tape = ad.Tape()
    x = tape.leaf(np.zeros((2, 2)))
    out = ad.sum(x * x)
    assert np.array_equal(tape.backward(out)[x.id], np.zeros((2, 2)))


def test_constant_leaf_has_no_adjoint():
    tape = ad.Tape()
    c = tape.constant(np.eye(3))
    x = tape.leaf(np.ones((3, 1)))
    grads = tape.backward(ad.sum(c @ x))
    assert c.id not in grads
    assert np.allclose(grads[x.id], np.ones((3, 1)))


def test_sumsq_gradient_is_2x():
    x0 = rng.standard_normal((4, 1))
    _, (g,) = grad_of(ad.sumsq, x0)
    assert np.allclose(g, 2 * x0)


def test_non_finite_leaf_rejected():
    with pytest.raises(ad.NonFiniteError):
        ad.Tape().leaf(np.array([[np.nan]]))


def test_seed_is_its_own_gradient():
    tape = ad.Tape()
    x = tape.leaf(np.array([[3.0]]))
    assert tape.backward(x)[x.id][0, 0] == 1.0


def test_non_scalar_seed_rejected():
    tape = ad.Tape()
    x = tape.leaf(np.ones((2, 1)))
    with pytest.raises(ad.ShapeError):
        tape.backward(x * 2.0)


def test_unconnected_leaf_gets_exact_zero():
    tape = ad.Tape()
    x = tape.leaf(np.ones((2, 1)))
    y = tape.leaf(np.full((2, 1), 5.0))
    g = tape.backward(ad.sum(x))
    assert np.array_equal(g[y.id], np.zeros((2, 1)))


# -- linear algebra ---------------------------------------------------------------

def test_matmul_identity():
    A = rng.standard_normal((2, 3))
    tape = ad.Tape()
    a = tape.leaf(A)
    out = np.eye(2) @ a
    assert np.array_equal(out.value, A)
    seed = rng.standard_normal((2, 3))
    g = tape.backward(ad.sum(out * seed))[a.id]
    assert np.allclose(g, seed)


def test_hadamard_all_ones_is_identity():
    C = spd(4)
    tape = ad.Tape()
    c = tape.leaf(C)
    assert np.array_equal((np.ones((4, 4)) * c).value, C)


def test_frobenius_gradient():
    A = rng.standard_normal((3, 3))
    _, (g,) = grad_of(lambda a: ad.sum(a * a), A)
    assert np.allclose(g, 2 * A)


def test_trace_gradient_identity():
    _, (g,) = grad_of(ad.trace, np.eye(2))
    assert np.array_equal(g, np.eye(2))


def test_shape_mismatch_raises():
    tape = ad.Tape()
    with pytest.raises(ValueError):
        ad.add(tape.leaf(np.ones((2, 2))), tape.leaf(np.ones((3, 3))))


@pytest.mark.parametrize("fn", [
    lambda a, b: ad.sum(ad.sub(a, b) * a),
    lambda a, b: ad.sum(ad.scale(a, 3.0) @ ad.transpose(b)),
    lambda a, b: ad.sum(ad.mean_cols(a * b)),
    lambda a, b: ad.sum(ad.concat_rows([a, b]) * ad.concat_rows([b, a])),
    lambda a, b: ad.sum(ad.slice_rows(a @ ad.transpose(b), 0, 1)),
    lambda a, b: ad.sum(ad.broadcast_col(ad.mean_cols(a), 4) * b),
    lambda a, b: ad.sum(ad.div(a, ad.exp(b))),
    lambda a, b: ad.sum(ad.softplus(a) * ad.log(ad.exp(b) + 1.0)),
    lambda a, b: ad.sum(ad.logsumexp(a * b, axis=-1)),
    lambda a, b: ad.sum(ad.roll(a, 1) * b),
])
def test_elementwise_ops_match_fd(fn):
    check_fd(fn, rng.standard_normal((3, 4)), rng.standard_normal((3, 4)))


# -- PSD ops ------------------------------------------------------------------------

def test_cholesky_examples():
    assert np.allclose(ad.cholesky(ad.Tape().leaf(np.eye(3))).value, np.eye(3))
    L = ad.cholesky(ad.Tape().leaf(np.array([[4.0, 2.0], [2.0, 5.0]]))).value
    assert np.allclose(L, [[2, 0], [1, 2]])


@pytest.mark.parametrize("d", [1, 5, 20, 50])
def test_cholesky_reconstruction(d):
    M = np.random.default_rng(d).standard_normal((d, d))
    A = M @ M.T + np.eye(d)
    L = ad.cholesky(ad.Tape().leaf(A)).value
    assert np.allclose(L, np.tril(L))
    assert np.linalg.norm(L @ L.T - A) <= 1e-10 * (1 + np.linalg.norm(A))


def test_cholesky_not_psd():
    with pytest.raises(ad.NotPSDError):
        ad.cholesky(ad.Tape().leaf(np.array([[1.0, 0.0], [0.0, -1.0]])))


def test_cholesky_jitter_rescues_rank_deficiency():
    v = np.array([[1.0], [2.0], [3.0]])
    L = ad.cholesky(ad.Tape().leaf(v @ v.T)).value
    assert np.all(np.isfinite(L))


def test_cholesky_gradient_fd():
    A = spd(4, 3)
    W = rng.standard_normal((4, 4))
    check_fd(lambda a: ad.sum(ad.cholesky(a) * W), A)


def test_logdet_gradient_at_identity_via_cholesky():
    def f(a):
        L = ad.cholesky(a)
        return 2.0 * ad.sum(ad.log(ad.sum(L * np.eye(3), axis=-1)))
    _, (g,) = grad_of(f, np.eye(3))
    assert np.allclose(g, np.eye(3))


def test_logdet_and_solve_examples():
    assert np.isclose(ad.logdet(ad.Tape().leaf(2 * np.eye(2))).item(), 2 * np.log(2),
                      atol=1e-12)
    B = rng.standard_normal((3, 2))
    assert np.allclose(ad.psd_solve(ad.Tape().leaf(np.eye(3)), B).value, B)
    x = ad.psd_solve(ad.Tape().leaf(2 * np.eye(2)), np.array([[2.0], [4.0]]))
    assert np.allclose(x.value, [[1.0], [2.0]])


def test_psd_solve_residual():
    A = spd(30, 1)
    B = rng.standard_normal((30, 3))
    X = ad.psd_solve(ad.Tape().leaf(A), B).value
    assert np.linalg.norm(A @ X - B) <= 1e-8 * np.linalg.norm(B)


def test_psd_ops_gradient_fd():
    A, B = spd(3, 5), rng.standard_normal((3, 2))
    check_fd(lambda a, b: ad.sum(ad.psd_solve(a, b) * b), A, B)
    check_fd(lambda a: ad.sum(ad.logdet(a)), A)


def test_gaussian_logpdf_examples():
    t = ad.Tape()
    z = np.zeros((1, 1))
    assert np.isclose(ad.gaussian_logpdf(z, t.leaf(z), t.leaf([[1.0]])).item(),
                      -0.9189385, atol=1e-7)
    assert np.isclose(ad.gaussian_logpdf(z, t.leaf(z), t.leaf([[2.0]])).item(),
                      -1.2655121, atol=1e-7)
    y = rng.standard_normal((4, 1))
    val = ad.gaussian_logpdf(y, t.leaf(y), t.leaf(np.eye(4))).item()
    assert np.isclose(val, -2 * np.log(2 * np.pi))


def test_gaussian_logpdf_formula_and_gradient():
    y, mu, S = rng.standard_normal((3, 1)), rng.standard_normal((3, 2)), spd(3, 9)
    val = ad.gaussian_logpdf(y, mu, S)
    for m in range(2):
        r = y[:, 0] - mu[:, m]
        ref = (-0.5 * np.linalg.slogdet(2 * np.pi * S)[1]
               - 0.5 * r @ np.linalg.solve(S, r))
        assert np.isclose(val[0, m], ref)
    check_fd(lambda m, s: ad.sum(ad.gaussian_logpdf(y, m, s)), mu, S)


# -- convolution ------------------------------------------------------------------

def conv(x, w, b):
    return ad.conv1d_circular(x[None], w, b)[0]


def test_conv_identity_impulse():
    x = rng.standard_normal((1, 6))
    assert np.allclose(conv(x, np.ones((1, 1, 1)), np.zeros(1)), x)


def test_conv_constant_input():
    out = conv(np.full((1, 7), 2.5), np.ones((1, 1, 5)), np.zeros(1))
    assert np.allclose(out, 12.5)


def test_conv_hand_example():
    out = conv(np.array([[1.0, 2.0, 3.0]]), np.ones((1, 1, 3)), np.zeros(1))
    assert np.allclose(out, [[6, 6, 6]])


def test_conv_matches_naive_and_fd():
    x = rng.standard_normal((2, 9))
    w = rng.standard_normal((3, 2, 5))
    b = rng.standard_normal(3)
    assert np.allclose(conv(x, w, b), circular_conv_naive(x, w, b))
    X = rng.standard_normal((2, 2, 9))
    G = rng.standard_normal((2, 3, 9))
    check_fd(lambda x_, w_, b_: ad.sum(ad.conv1d_circular(x_, w_, b_) * G), X, w, b)


def test_conv_even_kernel_rejected():
    with pytest.raises(ad.ShapeError):
        ad.conv1d_circular(np.ones((1, 1, 4)), np.ones((1, 1, 2)), np.zeros(1))


# -- tape properties -------------------------------------------------------------------

def test_backward_is_linear():
    A = spd(3, 2)
    x0 = rng.standard_normal((3, 1))

    def grads(a_coef, b_coef):
        tape = ad.Tape()
        x = tape.leaf(x0)
        f = ad.gaussian_logpdf(np.zeros((3, 1)), x, A)
        g = ad.sum(ad.softplus(x))
        return tape.backward(a_coef * f + b_coef * g)[x.id]

    assert np.allclose(grads(2.0, -3.0), 2.0 * grads(1.0, 0.0) - 3.0 * grads(0.0, 1.0))


def test_replay_is_bit_exact():
    tape = ad.Tape()
    a = tape.leaf(spd(4, 4))
    b = tape.leaf(rng.standard_normal((4, 2)))
    out = ad.sum(ad.psd_solve(a, b) * ad.exp(b)) + ad.sum(ad.logdet(a))
    replayed = tape.replay()
    assert all(np.array_equal(n.value, r) for n, r in zip(tape.nodes, replayed))
    assert out.id == len(tape) - 1
    assert all(p.id < n.id for n in tape.nodes for p in n.parents)


def test_non_finite_result_raises():
    tape = ad.Tape()
    with pytest.raises(ad.NonFiniteError):
        ad.log(tape.leaf(np.array([[-1.0]])))
