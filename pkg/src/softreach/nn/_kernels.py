"""Fused per-step elementwise kernels for the LSTM loops.

The sequence loops spend most of their time in many tiny elementwise numpy
calls; fusing each step's gate math into one compiled kernel removes that
call overhead. When numba is unavailable the numpy fallbacks below compute
the identical recurrences (results agree to floating-point roundoff, and the
test suite compares the two paths).

Kernels are compiled without fastmath so results are deterministic
run-to-run on a given machine.
"""

from __future__ import annotations

import math

import numpy as np

try:  # pragma: no cover - exercised implicitly by the test suite
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


def _forward_pointwise_numpy(z, xw_t, c, h, tc):
    """z <- activated gates of (z + xw_t); c, h, tc updated in place.

    z arrives holding h_{t-1} @ W_h and leaves holding [i, f, o | g].
    """
    H = c.shape[1]
    z += xw_t
    zs = z[:, : 3 * H]
    np.negative(zs, out=zs)
    np.exp(zs, out=zs)
    zs += 1.0
    np.reciprocal(zs, out=zs)
    np.tanh(z[:, 3 * H :], out=z[:, 3 * H :])
    i = z[:, :H]
    f = z[:, H : 2 * H]
    o = z[:, 2 * H : 3 * H]
    g = z[:, 3 * H :]
    c *= f
    c += i * g
    np.tanh(c, out=tc)
    np.multiply(o, tc, out=h)


def _backward_pointwise_numpy(z, tc, cprev, dhs_t, dh, dc, dG_t):
    """One reverse step: fills dG_t and updates the dh/dc carries in place.

    dh arrives holding the carry from step t+1 and leaves holding
    dz @ nothing (caller overwrites it with dG_t @ W_h^T afterwards); dc
    leaves holding the carry into step t-1.
    """
    H = tc.shape[1]
    i = z[:, :H]
    f = z[:, H : 2 * H]
    o = z[:, 2 * H : 3 * H]
    g = z[:, 3 * H :]
    dh += dhs_t
    s = tc * tc
    np.subtract(1.0, s, out=s)
    s *= o
    s *= dh
    dc += s
    v = dG_t[:, :H]
    np.subtract(1.0, i, out=v)
    v *= i
    v *= g
    v *= dc
    v = dG_t[:, H : 2 * H]
    np.subtract(1.0, f, out=v)
    v *= f
    v *= cprev
    v *= dc
    v = dG_t[:, 2 * H : 3 * H]
    np.subtract(1.0, o, out=v)
    v *= o
    v *= tc
    v *= dh
    v = dG_t[:, 3 * H :]
    np.multiply(g, g, out=v)
    np.subtract(1.0, v, out=v)
    v *= i
    v *= dc
    dc *= f


if HAVE_NUMBA:

    @njit(cache=True)
    def _forward_pointwise_numba(z, xw_t, c, h, tc):  # pragma: no cover - compiled
        B, four_h = z.shape
        H = four_h // 4
        for b in range(B):
            for k in range(3 * H):
                z[b, k] = 1.0 / (1.0 + math.exp(-(z[b, k] + xw_t[b, k])))
            for k in range(3 * H, four_h):
                z[b, k] = math.tanh(z[b, k] + xw_t[b, k])
            for k in range(H):
                cv = z[b, H + k] * c[b, k] + z[b, k] * z[b, 3 * H + k]
                c[b, k] = cv
                tcv = math.tanh(cv)
                tc[b, k] = tcv
                h[b, k] = z[b, 2 * H + k] * tcv

    @njit(cache=True)
    def _backward_pointwise_numba(z, tc, cprev, dhs_t, dh, dc, dG_t):  # pragma: no cover
        B, H = tc.shape
        for b in range(B):
            for k in range(H):
                i = z[b, k]
                f = z[b, H + k]
                o = z[b, 2 * H + k]
                g = z[b, 3 * H + k]
                tcv = tc[b, k]
                dhv = dh[b, k] + dhs_t[b, k]
                dh[b, k] = dhv
                dcv = dc[b, k] + dhv * o * (1.0 - tcv * tcv)
                dG_t[b, k] = dcv * g * i * (1.0 - i)
                dG_t[b, H + k] = dcv * cprev[b, k] * f * (1.0 - f)
                dG_t[b, 2 * H + k] = dhv * tcv * o * (1.0 - o)
                dG_t[b, 3 * H + k] = dcv * i * (1.0 - g * g)
                dc[b, k] = dcv * f

    forward_pointwise = _forward_pointwise_numba
    backward_pointwise = _backward_pointwise_numba
else:  # pragma: no cover

    def forward_pointwise(z, xw_t, c, h, tc):
        _forward_pointwise_numpy(z, xw_t, c, h, tc)

    def backward_pointwise(z, tc, cprev, dhs_t, dh, dc, dG_t):
        _backward_pointwise_numpy(z, tc, cprev, dhs_t, dh, dc, dG_t)
