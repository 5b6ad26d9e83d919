"""Brute-force reference computations for the test-suite.

Nothing here imports the package's numerical kernels: every oracle is written
directly against numpy/scipy so that a bug in the subject cannot hide in the
oracle as well.
"""

from __future__ import annotations

import numpy as np


def fd_gradient(f, theta, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of a flat vector."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e.flat[i] = h
        fp, fm = f(theta + e), f(theta - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {i}")
        g.flat[i] = (fp - fm) / (2 * h)
    return g


def fd_directional(f, theta, direction, h: float = 1e-5) -> float:
    theta = np.asarray(theta, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    return (f(theta + h * d) - f(theta - h * d)) / (2 * h)


def complex_step_gradient(f, theta, h: float = 1e-20) -> np.ndarray:
    """``Im f(theta + i h e_k) / h``; ``f`` must be complex-analytic."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    for i in range(theta.size):
        z = theta.astype(complex)
        z[i] += 1j * h
        g[i] = np.imag(f(z)) / h
    return g


# ---------------------------------------------------------------------------
# linear-Gaussian models


def tridiag(alpha, d):
    a = alpha
    return a[0] * np.eye(d) + a[1] * np.eye(d, k=1) + a[2] * np.eye(d, k=-1)


def exp_kernel(beta, d):
    i = np.arange(d)
    return beta[0] * np.exp(-beta[1] * np.abs(i[:, None] - i[None, :]))


def kf_loglik(A, Q, H, R, m0, C0, Y):
    """Textbook Kalman filter log-likelihood; complex-safe for complex steps."""
    m = np.asarray(m0).reshape(-1)
    C = np.asarray(C0)
    ll = 0.0
    for y in Y:
        m = A @ m
        C = A @ C @ A.T + Q
        S = H @ C @ H.T + R
        r = y - H @ m
        ll = ll - 0.5 * (len(y) * np.log(2 * np.pi) + np.log(np.linalg.det(S))
                         + r @ np.linalg.solve(S, r))
        K = np.linalg.solve(S, H @ C).T
        m = m + K @ r
        C = C - K @ H @ C
    return ll


def kf_moments(A, Q, H, R, m0, C0, Y):
    """Filtered means/covariances for t = 0..T and forecasts for t = 1..T."""
    m, C = np.asarray(m0, float).reshape(-1), np.asarray(C0, float)
    ms, Cs, mf, Cf = [m], [C], [], []
    for y in Y:
        mp, Cp = A @ m, A @ C @ A.T + Q
        S = H @ Cp @ H.T + R
        K = Cp @ H.T @ np.linalg.inv(S)
        m = mp + K @ (y - H @ mp)
        C = (np.eye(len(m)) - K @ H) @ Cp
        ms.append(m); Cs.append(C); mf.append(mp); Cf.append(Cp)
    return np.array(ms), np.array(Cs), np.array(mf), np.array(Cf)


def rts_smoother_2d(A, Q, H, R, m0, C0, Y):
    """Rauch-Tung-Striebel smoother; returns means/covs for t = 0..T."""
    if A.shape[0] > 3:
        raise ValueError("oracle intended for d_x <= 3")
    ms, Cs, mf, Cf = kf_moments(A, Q, H, R, m0, C0, Y)
    T = len(Y)
    sm, sC = ms.copy(), Cs.copy()
    for t in range(T - 1, -1, -1):
        G = Cs[t] @ A.T @ np.linalg.pinv(Cf[t])
        sm[t] = ms[t] + G @ (sm[t + 1] - mf[t])
        sC[t] = Cs[t] + G @ (sC[t + 1] - Cf[t]) @ G.T
    return sm, sC


def joint_smoothing_law(A, Q, H, R, m0, C0, Y):
    """Exact ``p(x_{0:T} | y_{1:T})`` by conditioning the joint Gaussian.

    Returns the mean ``(T+1, d)`` and covariance ``((T+1) d, (T+1) d)``.
    """
    d = A.shape[0]
    T = len(Y)
    n = (T + 1) * d
    # x = M w with w = (x0, xi_1..xi_T)
    M = np.zeros((n, n))
    for t in range(T + 1):
        Ap = np.eye(d)
        for s in range(t, -1, -1):
            M[t * d:(t + 1) * d, s * d:(s + 1) * d] = Ap
            Ap = Ap @ A
    W = np.zeros((n, n))
    W[:d, :d] = C0
    for t in range(1, T + 1):
        W[t * d:(t + 1) * d, t * d:(t + 1) * d] = Q
    mean_x = np.concatenate([np.linalg.matrix_power(A, t) @ np.ravel(m0)
                             for t in range(T + 1)])
    cov_x = M @ W @ M.T
    dy = H.shape[0]
    G = np.zeros((T * dy, n))
    for t in range(1, T + 1):
        G[(t - 1) * dy:t * dy, t * d:(t + 1) * d] = H
    Ry = np.kron(np.eye(T), R)
    S = G @ cov_x @ G.T + Ry
    K = cov_x @ G.T @ np.linalg.inv(S)
    mean = mean_x + K @ (np.ravel(Y) - G @ mean_x)
    cov = cov_x - K @ G @ cov_x
    return mean.reshape(T + 1, d), 0.5 * (cov + cov.T)


def tridiag_least_squares(prev: np.ndarray, nxt: np.ndarray) -> np.ndarray:
    """Least-squares ``alpha`` for ``x_t ~ A_alpha x_{t-1}`` (Q = I).

    ``prev``/``nxt`` are ``(K, d)`` pairs of consecutive states.
    """
    d = prev.shape[1]
    rows, rhs = [], []
    for p, q in zip(prev, nxt):
        for i in range(d):
            up = p[i + 1] if i + 1 < d else 0.0
            lo = p[i - 1] if i >= 1 else 0.0
            rows.append([p[i], up, lo])
            rhs.append(q[i])
    X, y = np.array(rows), np.array(rhs)
    return np.linalg.solve(X.T @ X, X.T @ y)


def lorenz96(x):
    """Plain loop implementation with explicit modular indices."""
    d = len(x)
    return np.array([-x[(i - 1) % d] * (x[(i - 2) % d] - x[(i + 1) % d])
                     - x[i] + 8.0 for i in range(d)])


def circular_conv_naive(x, w, b):
    """``x (C_in, d)``, ``w (C_out, C_in, k)``: direct double loop."""
    c_out, c_in, k = w.shape
    d = x.shape[1]
    half = (k - 1) // 2
    out = np.zeros((c_out, d))
    for o in range(c_out):
        for i in range(d):
            s = b[o]
            for c in range(c_in):
                for j in range(k):
                    s += w[o, c, j] * x[c, (i + j - half) % d]
            out[o, i] = s
    return out
