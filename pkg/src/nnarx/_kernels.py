"""Compiled simulation/backpropagation kernel for the built-in activations.

Layers are packed into zero-padded arrays so one kernel serves any depth.
Results agree with the numpy reference path in ``training`` to rounding
error; the tests check this.
"""
from __future__ import annotations

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

ACTIVATION_CODES = {"tanh": 0, "identity": 1, "relu": 2}


def pack(params):
    """Padded arrays for :func:`loss_grad`, or ``None`` if not supported."""
    if numba is None:
        return None
    codes = []
    for layer in params.layers:
        if layer.activation not in ACTIVATION_CODES:
            return None
        codes.append(ACTIVATION_CODES[layer.activation])
    M = params.depth
    widths = np.array([layer.width for layer in params.layers], dtype=np.int64)
    H = int(widths.max())
    K = max(H, params.state_dim)
    m = params.n_inputs
    Ws = np.zeros((M, H, m))
    Us = np.zeros((M, H, K))
    bs = np.zeros((M, H))
    for i, layer in enumerate(params.layers):
        h, c = layer.U.shape
        Ws[i, :h] = layer.W
        Us[i, :h, :c] = layer.U
        bs[i, :h] = layer.b
    U0 = np.zeros((params.n_outputs, H))
    U0[:, :widths[-1]] = params.U0
    return Ws, Us, bs, widths, np.array(codes, dtype=np.int64), U0, np.array(params.b0)


def unpack_grads(params, gW, gU, gb, gU0, gb0):
    out = []
    for i, layer in enumerate(params.layers):
        h, c = layer.U.shape
        out += [gW[i, :h].copy(), gU[i, :h, :c].copy(), gb[i, :h].copy()]
    return out + [gU0[:, :params.layers[-1].width].copy(), gb0.copy()]


def _loss_grad(u, y, x0, washout, N, Ws, Us, bs, widths, codes, U0, b0, need_grad):
    T, m = u.shape
    p = y.shape[1]
    M = Ws.shape[0]
    H = Ws.shape[1]
    nb = m + p
    n = nb * N
    count = T - washout

    X = np.empty((T, n))
    A = np.zeros((M, T, H))
    Hs = np.zeros((M, T, H))
    F = np.empty((T, p))
    x = x0.copy()
    loss = 0.0
    status = -1
    for k in range(T):
        X[k] = x
        for i in range(M):
            w = widths[i]
            cols = n if i == 0 else widths[i - 1]
            for r in range(w):
                a = bs[i, r]
                for j in range(m):
                    a += Ws[i, r, j] * u[k, j]
                if i == 0:
                    for j in range(cols):
                        a += Us[i, r, j] * x[j]
                else:
                    for j in range(cols):
                        a += Us[i, r, j] * Hs[i - 1, k, j]
                A[i, k, r] = a
                c = codes[i]
                if c == 0:
                    Hs[i, k, r] = np.tanh(a)
                elif c == 1:
                    Hs[i, k, r] = a
                else:
                    Hs[i, k, r] = a if a > 0.0 else 0.0
        wl = widths[M - 1]
        finite = True
        for o in range(p):
            f = b0[o]
            for r in range(wl):
                f += U0[o, r] * Hs[M - 1, k, r]
            F[k, o] = f
            if not np.isfinite(f):
                finite = False
        if not finite:
            status = k
            break
        if k >= washout:
            for o in range(p):
                d = F[k, o] - y[k, o]
                loss += d * d
        for j in range(n - nb):
            x[j] = x[j + nb]
        for o in range(p):
            x[n - nb + o] = F[k, o]
        for j in range(m):
            x[n - m + j] = u[k, j]
    loss /= count

    gW = np.zeros_like(Ws)
    gU = np.zeros_like(Us)
    gb = np.zeros_like(bs)
    gU0 = np.zeros_like(U0)
    gb0 = np.zeros_like(b0)
    if status >= 0 or not need_grad:
        return loss, status, gW, gU, gb, gU0, gb0

    gx = np.zeros(n)
    gx_prev = np.zeros(n)
    g_f = np.zeros(p)
    gh = np.zeros(H)
    da = np.zeros(H)
    scale = 2.0 / count
    for k in range(T - 1, -1, -1):
        for o in range(p):
            g = gx[n - nb + o]
            if k >= washout:
                g += scale * (F[k, o] - y[k, o])
            g_f[o] = g
            gb0[o] += g
        wl = widths[M - 1]
        for r in range(wl):
            s = 0.0
            for o in range(p):
                s += g_f[o] * U0[o, r]
                gU0[o, r] += g_f[o] * Hs[M - 1, k, r]
            gh[r] = s
        for j in range(nb):
            gx_prev[j] = 0.0
        for j in range(nb, n):
            gx_prev[j] = gx[j - nb]
        for i in range(M - 1, -1, -1):
            w = widths[i]
            c = codes[i]
            for r in range(w):
                if c == 0:
                    h = Hs[i, k, r]
                    d = 1.0 - h * h
                elif c == 1:
                    d = 1.0
                else:
                    d = 1.0 if A[i, k, r] > 0.0 else 0.0
                da[r] = gh[r] * d
                gb[i, r] += da[r]
                for j in range(m):
                    gW[i, r, j] += da[r] * u[k, j]
            if i == 0:
                for j in range(n):
                    s = 0.0
                    for r in range(w):
                        s += da[r] * Us[i, r, j]
                        gU[i, r, j] += da[r] * X[k, j]
                    gx_prev[j] += s
            else:
                cols = widths[i - 1]
                for j in range(cols):
                    s = 0.0
                    for r in range(w):
                        s += da[r] * Us[i, r, j]
                        gU[i, r, j] += da[r] * Hs[i - 1, k, j]
                    gh[j] = s
        for j in range(n):
            gx[j] = gx_prev[j]
    return loss, status, gW, gU, gb, gU0, gb0


if numba is not None:
    loss_grad = numba.njit(cache=True, fastmath=False)(_loss_grad)
else:  # pragma: no cover
    loss_grad = None
