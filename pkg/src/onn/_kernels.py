"""Fused numba kernels for non-GEMM operator groups.

They evaluate nodal + pool directly on zero-padded maps instead of a
materialized patch matrix, which avoids the large temporaries of the numpy
path. Semantics (padding, tie-breaks, clamps) match ``operators`` exactly;
``tests/test_kernels.py`` holds the two engines against each other.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .operators import EXP_CLAMP, _SINC_SERIES

NODAL_CODES = {"mul": 0, "cubic": 1, "sin": 2, "exp": 3, "sinh": 4, "sinc": 5, "chirp": 6, "log": 7}
POOL_CODES = {"sum": 0, "median": 1, "max": 2}

# 19-comparator median-of-9 network; the median lands in slot 4
_MED9 = np.array(
    [(1, 2), (4, 5), (7, 8), (0, 1), (3, 4), (6, 7), (1, 2), (4, 5), (7, 8), (0, 3),
     (5, 8), (4, 7), (3, 6), (1, 4), (2, 5), (4, 7), (4, 2), (6, 4), (4, 2)],
    dtype=np.int64,
)


@njit(cache=True, inline="always")
def _sinc(u):
    if abs(u) < _SINC_SERIES:
        u2 = u * u
        return 1.0 - u2 / 6.0 + u2 * u2 / 120.0
    return math.sin(u) / u


@njit(cache=True, inline="always")
def _sinc_grad(u):
    if abs(u) < _SINC_SERIES:
        return -u / 3.0 + u * u * u / 30.0
    return (u * math.cos(u) - math.sin(u)) / (u * u)


@njit(cache=True, inline="always")
def _clip(u):
    return min(max(u, -EXP_CLAMP), EXP_CLAMP)


@njit(cache=True, inline="always")
def _signed_log(y):
    if y > 0.0:
        return math.log1p(y)
    if y < 0.0:
        return -math.log1p(-y)
    return 0.0


@njit(cache=True, inline="always")
def nodal_value(code, y, w):
    if code == 0:
        return w * y
    if code == 1:
        return w * (y * y * y)
    if code == 2:
        return math.sin(w * y)
    if code == 3:
        return math.expm1(_clip(w * y))
    if code == 4:
        # expm1 form avoids cancellation near 0 and a second libm call
        u = _clip(w * y)
        e = math.expm1(abs(u))
        return math.copysign(e * (e + 2.0) / (2.0 * (e + 1.0)), u)
    if code == 5:
        return _sinc(w * y)
    if code == 6:
        return math.sin(w * (y * y))
    return w * _signed_log(y)


@njit(cache=True, inline="always")
def nodal_partials(code, y, w):
    if code == 0:
        return w, y
    if code == 1:
        return 3.0 * w * y * y, y * y * y
    if code == 2:
        c = math.cos(w * y)
        return c * w, c * y
    if code == 3:
        u = w * y
        if abs(u) > EXP_CLAMP:
            return 0.0, 0.0
        e = math.exp(u)
        return e * w, e * y
    if code == 4:
        u = w * y
        if abs(u) > EXP_CLAMP:
            return 0.0, 0.0
        e = math.exp(u)
        c = 0.5 * (e + 1.0 / e)
        return c * w, c * y
    if code == 5:
        d = _sinc_grad(w * y)
        return d * w, d * y
    if code == 6:
        y2 = y * y
        c = math.cos(w * y2)
        return c * (2.0 * w * y), c * y2
    return w / (1.0 + abs(y)), _signed_log(y)


@njit(cache=True)
def group_forward(xpad, W, code, pool, pre, sel):
    """Accumulate pooled nodal outputs of ``W.shape[0]`` neurons into ``pre``.

    xpad: (B, A, M+m-1, N+n-1); W: (O, A, m, n); pre: (B, O, M, N), added to;
    sel: (B, O, A, M, N) tap index written for select pools.
    """
    B, A = xpad.shape[0], xpad.shape[1]
    O, m, n = W.shape[0], W.shape[2], W.shape[3]
    M, N = pre.shape[2], pre.shape[3]
    K = m * n
    t = (K - 1) // 2
    # one image row at a time, taps along the first axis, so the inner loops
    # run over contiguous pixels and vectorize
    z = np.empty((K, N))
    srt = np.empty((K, N))
    best = np.empty(N)
    bk = np.empty(N, np.int16)
    for b in range(B):
        for o in range(O):
            for a in range(A):
                Wa = W[o, a]
                xa = xpad[b, a]
                if pool == 0:
                    for u in range(m):
                        for v in range(n):
                            w = Wa[u, v]
                            for i in range(M):
                                for j in range(N):
                                    pre[b, o, i, j] += nodal_value(code, xa[i + u, j + v], w)
                    continue
                for i in range(M):
                    k = 0
                    for u in range(m):
                        for v in range(n):
                            w = Wa[u, v]
                            for j in range(N):
                                z[k, j] = nodal_value(code, xa[i + u, j + v], w)
                            k += 1
                    if pool == 2:
                        for j in range(N):
                            best[j] = z[0, j]
                            bk[j] = 0
                        for k in range(1, K):
                            for j in range(N):
                                if z[k, j] > best[j]:
                                    best[j] = z[k, j]
                                    bk[j] = k
                    else:
                        srt[:, :] = z
                        if K == 9:
                            for c in range(_MED9.shape[0]):
                                p, q = _MED9[c, 0], _MED9[c, 1]
                                for j in range(N):
                                    lo = min(srt[p, j], srt[q, j])
                                    hi = max(srt[p, j], srt[q, j])
                                    srt[p, j] = lo
                                    srt[q, j] = hi
                        else:
                            for r in range(K):
                                for q in range(r % 2, K - 1, 2):
                                    for j in range(N):
                                        lo = min(srt[q, j], srt[q + 1, j])
                                        hi = max(srt[q, j], srt[q + 1, j])
                                        srt[q, j] = lo
                                        srt[q + 1, j] = hi
                        for j in range(N):
                            best[j] = srt[t, j]
                        # lowest tap holding the lower-middle value
                        for k in range(K - 1, -1, -1):
                            for j in range(N):
                                if z[k, j] == best[j]:
                                    bk[j] = k
                    for j in range(N):
                        sel[b, o, a, i, j] = bk[j]
                        pre[b, o, i, j] += best[j]


@njit(cache=True)
def group_backward(xpad, W, code, pool, delta, sel, dW, dxpad, need_dx):
    """Weight gradients into ``dW`` (O, A, m, n) and, if ``need_dx``, input
    gradients scattered into the padded buffer ``dxpad``."""
    B, A = xpad.shape[0], xpad.shape[1]
    O, m, n = W.shape[0], W.shape[2], W.shape[3]
    M, N = delta.shape[2], delta.shape[3]
    for b in range(B):
        for o in range(O):
            for a in range(A):
                if pool == 0:
                    for u in range(m):
                        for v in range(n):
                            w = W[o, a, u, v]
                            acc = 0.0
                            for i in range(M):
                                for j in range(N):
                                    d = delta[b, o, i, j]
                                    dy, dw = nodal_partials(code, xpad[b, a, i + u, j + v], w)
                                    acc += d * dw
                                    if need_dx:
                                        dxpad[b, a, i + u, j + v] += d * dy
                            dW[o, a, u, v] += acc
                else:
                    for i in range(M):
                        for j in range(N):
                            k = sel[b, o, a, i, j]
                            u, v = k // n, k % n
                            d = delta[b, o, i, j]
                            dy, dw = nodal_partials(code, xpad[b, a, i + u, j + v], W[o, a, u, v])
                            dW[o, a, u, v] += d * dw
                            if need_dx:
                                dxpad[b, a, i + u, j + v] += d * dy
