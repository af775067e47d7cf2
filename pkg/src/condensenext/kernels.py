"""Hot inner loops: depthwise convolution and batch normalization.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version with identical semantics.  The numba path is used when numba imports
and the environment variable ``CONDENSENEXT_NUMBA`` is not set to ``0``.
Both paths are importable explicitly (``NUMPY_KERNELS`` / ``NUMBA_KERNELS``)
for the benchmark and the cross-check tests.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_FLAG = os.environ.get("CONDENSENEXT_NUMBA", "1").strip().lower()
USE_NUMBA = HAVE_NUMBA and _FLAG not in ("0", "false", "no", "off")


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------

def _np_dw_forward(xpad, w, stride, out_h, out_w):
    n, c = xpad.shape[:2]
    k = w.shape[1]
    out = np.zeros((n, c, out_h, out_w), dtype=np.result_type(xpad, w))
    he = stride * (out_h - 1) + 1
    we = stride * (out_w - 1) + 1
    for i in range(k):
        for j in range(k):
            out += w[None, :, i, j, None, None] * xpad[:, :, i:i + he:stride, j:j + we:stride]
    return out


def _np_dw_backward_input(gout, w, stride, pad_h, pad_w):
    n, c, out_h, out_w = gout.shape
    k = w.shape[1]
    gx = np.zeros((n, c, pad_h, pad_w), dtype=np.result_type(gout, w))
    he = stride * (out_h - 1) + 1
    we = stride * (out_w - 1) + 1
    for i in range(k):
        for j in range(k):
            gx[:, :, i:i + he:stride, j:j + we:stride] += w[None, :, i, j, None, None] * gout
    return gx


def _np_dw_backward_weight(xpad, gout, stride, k):
    out_h, out_w = gout.shape[2:]
    gw = np.zeros((xpad.shape[1], k, k), dtype=np.result_type(xpad, gout))
    he = stride * (out_h - 1) + 1
    we = stride * (out_w - 1) + 1
    for i in range(k):
        for j in range(k):
            gw[:, i, j] = np.einsum("nchw,nchw->c", gout, xpad[:, :, i:i + he:stride, j:j + we:stride])
    return gw


def _np_bn_train_forward(x, gamma, beta, eps):
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, xhat, mean, var, inv_std.astype(x.dtype)


def _np_bn_backward(gout, xhat, gamma, inv_std):
    m = gout.shape[0] * gout.shape[2] * gout.shape[3]
    gbeta = gout.sum(axis=(0, 2, 3))
    ggamma = (gout * xhat).sum(axis=(0, 2, 3))
    scale = (gamma * inv_std / m)[None, :, None, None]
    gx = scale * (m * gout - gbeta[None, :, None, None] - xhat * ggamma[None, :, None, None])
    return gx, ggamma, gbeta


def _np_act(pre, act):
    if act == 1:
        return np.maximum(pre, 0)
    if act == 2:
        return np.minimum(np.maximum(pre, 0), 6)
    return pre


def _np_act_mask(pre, act):
    if act == 1:
        return pre > 0
    if act == 2:
        return (pre > 0) & (pre < 6)
    return None


def _np_bn_act_forward(x, gamma, beta, eps, act):
    pre, xhat, mean, var, inv_std = _np_bn_train_forward(x, gamma, beta, eps)
    return _np_act(pre, act).astype(x.dtype, copy=False), xhat, mean, var, inv_std


def _np_bn_act_backward(gout, xhat, gamma, beta, inv_std, act):
    mask = _np_act_mask(xhat * gamma[None, :, None, None] + beta[None, :, None, None], act)
    g = gout if mask is None else gout * mask
    return _np_bn_backward(g, xhat, gamma, inv_std)


NUMPY_KERNELS = SimpleNamespace(
    name="numpy",
    dw_forward=_np_dw_forward,
    dw_backward_input=_np_dw_backward_input,
    dw_backward_weight=_np_dw_backward_weight,
    bn_train_forward=_np_bn_train_forward,
    bn_backward=_np_bn_backward,
    bn_act_forward=_np_bn_act_forward,
    bn_act_backward=_np_bn_act_backward,
)


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if HAVE_NUMBA:
    _jit = njit(cache=True, nogil=True, fastmath=False, error_model="numpy")

    # Stride-1 rows are contiguous slices, which lets LLVM vectorize the
    # inner loop; other strides fall back to explicit indexing.
    @_jit
    def _nb_dw_forward(xpad, w, stride, out_h, out_w):
        n, c = xpad.shape[0], xpad.shape[1]
        k = w.shape[1]
        out = np.zeros((n, c, out_h, out_w), dtype=xpad.dtype)
        for b in range(n):
            for ch in range(c):
                o = out[b, ch]
                xs = xpad[b, ch]
                for i in range(k):
                    for j in range(k):
                        wv = w[ch, i, j]
                        for oh in range(out_h):
                            orow = o[oh]
                            if stride == 1:
                                xrow = xs[oh + i, j:j + out_w]
                                for ow in range(out_w):
                                    orow[ow] += wv * xrow[ow]
                            else:
                                row = oh * stride + i
                                for ow in range(out_w):
                                    orow[ow] += wv * xs[row, ow * stride + j]
        return out

    @_jit
    def _nb_dw_backward_input(gout, w, stride, pad_h, pad_w):
        n, c, out_h, out_w = gout.shape
        k = w.shape[1]
        gx = np.zeros((n, c, pad_h, pad_w), dtype=gout.dtype)
        for b in range(n):
            for ch in range(c):
                gs = gx[b, ch]
                go = gout[b, ch]
                for i in range(k):
                    for j in range(k):
                        wv = w[ch, i, j]
                        for oh in range(out_h):
                            grow = go[oh]
                            if stride == 1:
                                xrow = gs[oh + i, j:j + out_w]
                                for ow in range(out_w):
                                    xrow[ow] += wv * grow[ow]
                            else:
                                row = oh * stride + i
                                for ow in range(out_w):
                                    gs[row, ow * stride + j] += wv * grow[ow]
        return gx

    @_jit
    def _nb_dw_backward_weight(xpad, gout, stride, k):
        n, c, out_h, out_w = gout.shape
        gw = np.zeros((c, k, k), dtype=gout.dtype)
        acc = np.zeros(out_w, dtype=gout.dtype)  # per-column partial sums
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    acc[:] = 0
                    for b in range(n):
                        for oh in range(out_h):
                            grow = gout[b, ch, oh]
                            row = oh * stride + i
                            if stride == 1:
                                xrow = xpad[b, ch, row, j:j + out_w]
                                for ow in range(out_w):
                                    acc[ow] += grow[ow] * xrow[ow]
                            else:
                                for ow in range(out_w):
                                    acc[ow] += grow[ow] * xpad[b, ch, row, ow * stride + j]
                    s = 0.0
                    for ow in range(out_w):
                        s += acc[ow]
                    gw[ch, i, j] = s
        return gw

    @_jit
    def _nb_bn_train_forward(x, gamma, beta, eps):
        n, c, h, w = x.shape
        m = n * h * w
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        mean = np.empty(c, dtype=x.dtype)
        var = np.empty(c, dtype=x.dtype)
        inv_std = np.empty(c, dtype=x.dtype)
        for ch in range(c):
            s = 0.0
            for b in range(n):
                for i in range(h):
                    for j in range(w):
                        s += x[b, ch, i, j]
            mu = s / m
            ss = 0.0
            for b in range(n):
                for i in range(h):
                    for j in range(w):
                        d = x[b, ch, i, j] - mu
                        ss += d * d
            v = ss / m
            istd = 1.0 / np.sqrt(v + eps)
            mean[ch] = mu
            var[ch] = v
            inv_std[ch] = istd
            g = gamma[ch]
            bt = beta[ch]
            for b in range(n):
                for i in range(h):
                    for j in range(w):
                        xh = (x[b, ch, i, j] - mu) * istd
                        xhat[b, ch, i, j] = xh
                        out[b, ch, i, j] = xh * g + bt
        return out, xhat, mean, var, inv_std

    @_jit
    def _nb_bn_backward(gout, xhat, gamma, inv_std):
        n, c, h, w = gout.shape
        m = n * h * w
        gx = np.empty_like(gout)
        ggamma = np.empty(c, dtype=gout.dtype)
        gbeta = np.empty(c, dtype=gout.dtype)
        for ch in range(c):
            sg = 0.0
            sgx = 0.0
            for b in range(n):
                for i in range(h):
                    for j in range(w):
                        g = gout[b, ch, i, j]
                        sg += g
                        sgx += g * xhat[b, ch, i, j]
            gbeta[ch] = sg
            ggamma[ch] = sgx
            scale = gamma[ch] * inv_std[ch] / m
            for b in range(n):
                for i in range(h):
                    for j in range(w):
                        gx[b, ch, i, j] = scale * (m * gout[b, ch, i, j] - sg - xhat[b, ch, i, j] * sgx)
        return gx, ggamma, gbeta

    @_jit
    def _nb_bn_act_forward(x, gamma, beta, eps, act):
        n, c, h, w = x.shape
        m = n * h * w
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        mean = np.empty(c, dtype=x.dtype)
        var = np.empty(c, dtype=x.dtype)
        inv_std = np.empty(c, dtype=x.dtype)
        for ch in range(c):
            s = 0.0
            for b in range(n):
                for i in range(h):
                    for j in range(w):
                        s += x[b, ch, i, j]
            mu = s / m
            ss = 0.0
            for b in range(n):
                for i in range(h):
                    for j in range(w):
                        d = x[b, ch, i, j] - mu
                        ss += d * d
            v = ss / m
            istd = 1.0 / np.sqrt(v + eps)
            mean[ch] = mu
            var[ch] = v
            inv_std[ch] = istd
            g = gamma[ch]
            bt = beta[ch]
            for b in range(n):
                for i in range(h):
                    for j in range(w):
                        xh = (x[b, ch, i, j] - mu) * istd
                        xhat[b, ch, i, j] = xh
                        y = xh * g + bt
                        if act >= 1 and y < 0:
                            y = 0.0
                        if act == 2 and y > 6:
                            y = 6.0
                        out[b, ch, i, j] = y
        return out, xhat, mean, var, inv_std

    @_jit
    def _nb_bn_act_backward(gout, xhat, gamma, beta, inv_std, act):
        n, c, h, w = gout.shape
        m = n * h * w
        gx = np.empty_like(gout)
        ggamma = np.empty(c, dtype=gout.dtype)
        gbeta = np.empty(c, dtype=gout.dtype)
        gpre = np.empty((n, h, w), dtype=gout.dtype)
        for ch in range(c):
            gm = gamma[ch]
            bt = beta[ch]
            sg = 0.0
            sgx = 0.0
            for b in range(n):
                for i in range(h):
                    for j in range(w):
                        xh = xhat[b, ch, i, j]
                        g = gout[b, ch, i, j]
                        if act >= 1:
                            y = xh * gm + bt
                            if y <= 0 or (act == 2 and y >= 6):
                                g = 0.0
                        gpre[b, i, j] = g
                        sg += g
                        sgx += g * xh
            gbeta[ch] = sg
            ggamma[ch] = sgx
            scale = gm * inv_std[ch] / m
            for b in range(n):
                for i in range(h):
                    for j in range(w):
                        gx[b, ch, i, j] = scale * (m * gpre[b, i, j] - sg - xhat[b, ch, i, j] * sgx)
        return gx, ggamma, gbeta

    NUMBA_KERNELS = SimpleNamespace(
        name="numba",
        dw_forward=_nb_dw_forward,
        dw_backward_input=_nb_dw_backward_input,
        dw_backward_weight=_nb_dw_backward_weight,
        bn_train_forward=_nb_bn_train_forward,
        bn_backward=_nb_bn_backward,
        bn_act_forward=_nb_bn_act_forward,
        bn_act_backward=_nb_bn_act_backward,
    )
else:  # pragma: no cover
    NUMBA_KERNELS = None


def active():
    """Kernel namespace selected by the environment flag."""
    return NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS
