"""Direct nested-loop convolutions used as test oracles.

These follow the summation formulas literally, one multiply at a time, and
count the multiplies they execute so cost accounting can be checked against
work actually performed.  Slow by design; only for small instances.
"""

from __future__ import annotations

import numpy as np


def _padded(x, p):
    return np.pad(np.asarray(x, dtype=np.float64), ((0, 0), (0, 0), (p, p), (p, p)))


def _out(d, h, stride, padding):
    return (d + 2 * padding - h) // stride + 1


def conv_standard_loops(x, k, stride=1, padding=0, groups=1):
    """Y[n, o, r, c] = sum over (m, i, j) of K[o, m, i, j] * Xpad[n, g*ci + m, r*s + i, c*s + j].

    Returns ``(y, multiplies)``.
    """
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    n, c_in, hh, ww = x.shape
    c_out, ci, h, _ = k.shape
    co = c_out // groups
    xp = _padded(x, padding)
    ho, wo = _out(hh, h, stride, padding), _out(ww, h, stride, padding)
    y = np.zeros((n, c_out, ho, wo))
    mults = 0
    for b in range(n):
        for o in range(c_out):
            g = o // co
            for r in range(ho):
                for c in range(wo):
                    acc = 0.0
                    for m in range(ci):
                        for i in range(h):
                            for j in range(h):
                                acc += k[o, m, i, j] * xp[b, g * ci + m, r * stride + i, c * stride + j]
                                mults += 1
                    y[b, o, r, c] = acc
    return y, mults


def conv_depthwise_loops(x, k_hat, stride=1, padding=0):
    """Yhat[n, m, r, c] = sum over (i, j) of Khat[m, i, j] * Xpad[n, m, r*s + i, c*s + j]."""
    x = np.asarray(x, dtype=np.float64)
    k_hat = np.asarray(k_hat, dtype=np.float64)
    n, ch, hh, ww = x.shape
    h = k_hat.shape[1]
    xp = _padded(x, padding)
    ho, wo = _out(hh, h, stride, padding), _out(ww, h, stride, padding)
    y = np.zeros((n, ch, ho, wo))
    mults = 0
    for b in range(n):
        for m in range(ch):
            for r in range(ho):
                for c in range(wo):
                    acc = 0.0
                    for i in range(h):
                        for j in range(h):
                            acc += k_hat[m, i, j] * xp[b, m, r * stride + i, c * stride + j]
                            mults += 1
                    y[b, m, r, c] = acc
    return y, mults


def conv_pointwise_loops(x, k_tilde):
    """Y[n, o, r, c] = sum over m of Ktilde[o, m] * X[n, m, r, c]."""
    x = np.asarray(x, dtype=np.float64)
    k_tilde = np.asarray(k_tilde, dtype=np.float64)
    n, ch, hh, ww = x.shape
    c_out = k_tilde.shape[0]
    y = np.zeros((n, c_out, hh, ww))
    mults = 0
    for b in range(n):
        for o in range(c_out):
            for r in range(hh):
                for c in range(ww):
                    acc = 0.0
                    for m in range(ch):
                        acc += k_tilde[o, m] * x[b, m, r, c]
                        mults += 1
                    y[b, o, r, c] = acc
    return y, mults


def learned_group_conv_loops(x, weight, mask):
    """Masked 1x1 convolution, skipping pruned (group, input) connections entirely."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    groups = mask.shape[0]
    n, ch, hh, ww = x.shape
    c_out = weight.shape[0]
    y = np.zeros((n, c_out, hh, ww))
    mults = 0
    for b in range(n):
        for o in range(c_out):
            kept = [m for m in range(ch) if mask[o % groups, m]]
            for r in range(hh):
                for c in range(ww):
                    acc = 0.0
                    for m in kept:
                        acc += weight[o, m] * x[b, m, r, c]
                        mults += 1
                    y[b, o, r, c] = acc
    return y, mults
