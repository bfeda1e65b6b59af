"""Compiled inner loops for the network's bandwidth-bound layers.

Layouts are channel-major: activations ``(C, N, T)`` or ``(C, M)`` with
``M = N * T``.  Every loop keeps ``t`` innermost so it vectorizes without
reassociating floating-point sums, which keeps results bit-reproducible.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _padded(h, p):
    C, N, T = h.shape
    xp = np.zeros((C, N, T + 2 * p))
    xp[:, :, p : p + T] = h
    return xp


@njit(cache=True)
def depthwise(h, w):
    """Same-padded depthwise correlation: ``out[c,n,t] = sum_k w[c,k] h[c,n,t+k-p]``."""
    C, N, T = h.shape
    K = w.shape[1]
    xp = _padded(h, K // 2)
    out = np.zeros((C, N, T))
    for c in range(C):
        for n in range(N):
            for k in range(K):
                wk = w[c, k]
                for t in range(T):
                    out[c, n, t] += wk * xp[c, n, t + k]
    return out


@njit(cache=True)
def depthwise_input_grad(dout, w):
    """Adjoint of ``depthwise`` with respect to its input."""
    C, N, T = dout.shape
    K = w.shape[1]
    p = K // 2
    dp = np.zeros((C, N, T + 2 * p))
    for c in range(C):
        for n in range(N):
            for k in range(K):
                wk = w[c, k]
                for t in range(T):
                    dp[c, n, t + k] += wk * dout[c, n, t]
    return np.ascontiguousarray(dp[:, :, p : p + T])


@njit(cache=True)
def depthwise_weight_grad(h, dout, K):
    C, N, T = h.shape
    xp = _padded(h, K // 2)
    dw = np.zeros((C, K))
    acc = np.empty(T)
    for c in range(C):
        for k in range(K):
            acc[:] = 0.0
            for n in range(N):
                for t in range(T):
                    acc[t] += dout[c, n, t] * xp[c, n, t + k]
            dw[c, k] = acc.sum()
    return dw


@njit(cache=True)
def norm_relu(z, mu, inv, gamma, beta):
    """Normalize rows of ``z`` and apply the affine + ReLU; returns (xhat, out)."""
    C, M = z.shape
    xhat = np.empty((C, M))
    out = np.empty((C, M))
    for c in range(C):
        m = mu[c]
        s = inv[c]
        g = gamma[c]
        b = beta[c]
        for i in range(M):
            v = (z[c, i] - m) * s
            xhat[c, i] = v
            y = g * v + b
            out[c, i] = y if y > 0.0 else 0.0
    return xhat, out


@njit(cache=True)
def norm_relu_backward(dout, out, xhat, inv, gamma, batch_stats):
    """Backward of ``norm_relu``; returns (dz, dgamma, dbeta).

    With ``batch_stats`` the mean and variance are functions of the batch and
    their gradient paths are included.
    """
    C, M = dout.shape
    dz = np.empty((C, M))
    dgamma = np.zeros(C)
    dbeta = np.zeros(C)
    acc_b = np.empty(M)
    acc_g = np.empty(M)
    for c in range(C):
        for i in range(M):
            dy = dout[c, i] if out[c, i] > 0.0 else 0.0
            acc_b[i] = dy
            acc_g[i] = dy * xhat[c, i]
        sb = acc_b.sum()
        sg = acc_g.sum()
        dgamma[c] = sg
        dbeta[c] = sb
        g = gamma[c]
        s = inv[c]
        if batch_stats:
            # dxhat = g * dy; sums of dxhat and dxhat*xhat are g*sb and g*sg
            k = g * s / M
            for i in range(M):
                dz[c, i] = k * (M * acc_b[i] - sb - xhat[c, i] * sg)
        else:
            k = g * s
            for i in range(M):
                dz[c, i] = k * acc_b[i]
    return dz, dgamma, dbeta


@njit(cache=True)
def row_mean_var(z):
    C, M = z.shape
    mu = np.empty(C)
    var = np.empty(C)
    for c in range(C):
        s = 0.0
        for i in range(M):
            s += z[c, i]
        m = s / M
        q = 0.0
        for i in range(M):
            d = z[c, i] - m
            q += d * d
        mu[c] = m
        var[c] = q / M
    return mu, var
