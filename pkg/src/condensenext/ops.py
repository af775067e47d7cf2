"""Differentiable layer primitives.

Layout is (batch, channels, height, width) everywhere.  Convolutions are
cross-correlations with explicit zero padding; no kernel flip.  A
channel-last index (k, l, m) maps to (height, width, channel) here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .errors import ContractError, ParameterError, ShapeError
from .tensor import Tensor, make_result

MODES = ("standard", "grouped", "depthwise", "pointwise")


@dataclass(frozen=True)
class ConvConfig:
    kernel_size: int
    in_channels: int
    out_channels: int
    groups: int = 1
    stride: int = 1
    padding: int = 0
    mode: str = "standard"

    def __post_init__(self):
        for name in ("kernel_size", "in_channels", "out_channels", "groups", "stride"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be positive")
        if self.padding < 0:
            raise ShapeError("padding must be non-negative")
        if self.mode not in MODES:
            raise ContractError(f"unknown conv mode {self.mode!r}")
        i, o, g = self.in_channels, self.out_channels, self.groups
        if self.mode == "standard" and g != 1:
            raise ShapeError("standard convolution has a single group")
        if self.mode == "depthwise" and not (g == i and o == i):
            raise ShapeError("depthwise convolution needs groups == in == out channels")
        if self.mode == "pointwise" and not (self.kernel_size == 1 and g == 1):
            raise ShapeError("pointwise convolution needs a 1x1 kernel and one group")
        if i % g or o % g:
            raise ShapeError(f"channels ({i} -> {o}) not divisible by groups={g}")

    @property
    def group_in(self) -> int:
        return self.in_channels // self.groups

    @property
    def group_out(self) -> int:
        return self.out_channels // self.groups

    def output_size(self, d: int) -> int:
        out = (d + 2 * self.padding - self.kernel_size) // self.stride + 1
        if out < 1:
            raise ShapeError(f"input extent {d} too small for {self}")
        return out

    @property
    def weight_shape(self) -> tuple:
        h = self.kernel_size
        if self.mode == "depthwise":
            return (self.in_channels, h, h)
        if self.mode == "pointwise":
            return (self.out_channels, self.in_channels)
        return (self.out_channels, self.group_in, h, h)


def _common(*arrays):
    dt = np.result_type(*arrays)
    return [a if a.dtype == dt else a.astype(dt) for a in arrays]


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _check_input(x: Tensor, channels: int, what: str):
    if x.data.ndim != 4:
        raise ShapeError(f"{what}: expected a 4-d (N, C, H, W) input, got {x.shape}")
    if x.shape[1] != channels:
        raise ShapeError(f"{what}: input has {x.shape[1]} channels, kernel expects {channels}")


# --------------------------------------------------------------------------
# im2col convolution (single group)
# --------------------------------------------------------------------------

def _im2col_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    h = w.shape[2]
    xpad = _pad(x, padding)
    cols = sliding_window_view(xpad, (h, h), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cols


def _im2col_backward(g: np.ndarray, w: np.ndarray, cols, x_shape, stride: int, padding: int):
    h = w.shape[2]
    gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
    gcols = np.tensordot(g, w, axes=([1], [0]))  # (N, Ho, Wo, C, h, h)
    n, c, hh, ww = x_shape
    gxpad = np.zeros((n, c, hh + 2 * padding, ww + 2 * padding), dtype=g.dtype)
    ho, wo = g.shape[2:]
    he, we = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(h):
        for j in range(h):
            gxpad[:, :, i:i + he:stride, j:j + we:stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
    if padding:
        gxpad = gxpad[:, :, padding:-padding, padding:-padding]
    return gxpad, gw


def _grouped_forward(x, w, groups, stride, padding):
    if groups == 1:
        out, cols = _im2col_forward(x, w, stride, padding)
        return out, [cols]
    ci = x.shape[1] // groups
    co = w.shape[0] // groups
    outs, saved = [], []
    for g in range(groups):
        o, cols = _im2col_forward(x[:, g * ci:(g + 1) * ci], w[g * co:(g + 1) * co], stride, padding)
        outs.append(o)
        saved.append(cols)
    return np.concatenate(outs, axis=1), saved


def _grouped_backward(gout, w, saved, x_shape, groups, stride, padding):
    if groups == 1:
        return _im2col_backward(gout, w, saved[0], x_shape, stride, padding)
    n, c, h, ww = x_shape
    ci, co = c // groups, w.shape[0] // groups
    gx = np.empty(x_shape, dtype=gout.dtype)
    gw = np.empty(w.shape, dtype=gout.dtype)
    for g in range(groups):
        gxg, gwg = _im2col_backward(gout[:, g * co:(g + 1) * co], w[g * co:(g + 1) * co], saved[g],
                                    (n, ci, h, ww), stride, padding)
        gx[:, g * ci:(g + 1) * ci] = gxg
        gw[g * co:(g + 1) * co] = gwg
    return gx, gw


def _conv_op(x: Tensor, k: Tensor, cfg: ConvConfig, kind: str) -> Tensor:
    xd, wd = _common(x.data, k.data)
    out, saved = _grouped_forward(xd, wd, cfg.groups, cfg.stride, cfg.padding)

    def bw(g):
        gx, gw = _grouped_backward(g, wd, saved, xd.shape, cfg.groups, cfg.stride, cfg.padding)
        return gx, gw

    return make_result(out, (x, k), kind, bw)


def conv2d_standard(x: Tensor, k: Tensor, cfg: ConvConfig) -> Tensor:
    """Dense convolution: every output channel sees every input channel."""
    if cfg.mode != "standard":
        raise ContractError(f"conv2d_standard needs mode 'standard', got {cfg.mode!r}")
    _check_input(x, cfg.in_channels, "conv2d_standard")
    if k.shape != cfg.weight_shape:
        raise ShapeError(f"kernel shape {k.shape} does not match {cfg.weight_shape}")
    return _conv_op(x, k, cfg, "conv2d")


def conv2d_grouped(x: Tensor, k: Tensor, cfg: ConvConfig) -> Tensor:
    """Convolve each of ``cfg.groups`` channel slices independently and concatenate."""
    if cfg.mode not in ("grouped", "standard"):
        raise ContractError(f"conv2d_grouped cannot run mode {cfg.mode!r}")
    _check_input(x, cfg.in_channels, "conv2d_grouped")
    if k.shape != cfg.weight_shape:
        raise ShapeError(f"kernel shape {k.shape} does not match {cfg.weight_shape}")
    return _conv_op(x, k, cfg, "conv2d_grouped")


def conv2d_depthwise(x: Tensor, k_hat: Tensor, cfg: ConvConfig) -> Tensor:
    if cfg.mode != "depthwise":
        raise ContractError(f"conv2d_depthwise needs mode 'depthwise', got {cfg.mode!r}")
    if k_hat.data.ndim != 3 or k_hat.shape[0] != cfg.in_channels:
        raise ShapeError(f"depthwise kernel must be ({cfg.in_channels}, H, H), got {k_hat.shape}")
    if k_hat.shape != cfg.weight_shape:
        raise ShapeError(f"kernel shape {k_hat.shape} does not match {cfg.weight_shape}")
    _check_input(x, cfg.in_channels, "conv2d_depthwise")
    kern = kernels.active()
    xd, wd = _common(x.data, k_hat.data)
    xpad = np.ascontiguousarray(_pad(xd, cfg.padding))
    wd = np.ascontiguousarray(wd)
    ho = cfg.output_size(xd.shape[2])
    wo = cfg.output_size(xd.shape[3])
    out = kern.dw_forward(xpad, wd, cfg.stride, ho, wo)
    p = cfg.padding

    def bw(g):
        g = np.ascontiguousarray(g, dtype=xd.dtype)
        gx = kern.dw_backward_input(g, wd, cfg.stride, xpad.shape[2], xpad.shape[3])
        if p:
            gx = gx[:, :, p:-p, p:-p]
        gw = kern.dw_backward_weight(xpad, g, cfg.stride, wd.shape[1])
        return gx, gw

    return make_result(out, (x, k_hat), "conv2d_depthwise", bw)


def conv2d_pointwise(x: Tensor, k_tilde: Tensor) -> Tensor:
    """Per-pixel linear map across channels with an (O, I) matrix."""
    if k_tilde.data.ndim != 2:
        raise ShapeError(f"pointwise kernel must be 2-d (O, I), got {k_tilde.shape}")
    _check_input(x, k_tilde.shape[1], "conv2d_pointwise")
    xd, wd = _common(x.data, k_tilde.data)
    n, c, h, w = xd.shape
    xf = xd.reshape(n, c, h * w)
    out = np.matmul(wd, xf).reshape(n, wd.shape[0], h, w)

    def bw(g):
        gf = g.reshape(n, wd.shape[0], h * w)
        gx = np.matmul(wd.T, gf).reshape(xd.shape)
        gw = np.tensordot(gf, xf, axes=([0, 2], [0, 2]))
        return gx, gw

    return make_result(out, (x, k_tilde), "conv2d_pointwise", bw)


# --------------------------------------------------------------------------
# learned group convolution (masked 1x1)
# --------------------------------------------------------------------------

def expand_group_mask(mask: np.ndarray, out_channels: int) -> np.ndarray:
    """Expand a (G, I) connection mask to the (O, I) weight mask.

    Output channel ``j`` belongs to group ``j % G``; interleaving the groups
    lets the following grouped/depthwise stage see every group's outputs in
    each contiguous channel block.
    """
    groups = mask.shape[0]
    return mask[np.arange(out_channels) % groups]


def learned_group_conv(x: Tensor, weight: Tensor, mask: np.ndarray, gather: bool | None = None) -> Tensor:
    """1x1 convolution whose (group, input) connections are gated by ``mask``.

    Masked connections contribute exactly zero and receive zero gradient,
    whatever value the underlying weight holds.  When few connections remain
    the kept input channels are gathered per group (the condensed "index
    layer" form) instead of multiplying a mostly-zero dense matrix.
    """
    o, i = weight.shape
    mask = np.asarray(mask, dtype=bool)
    groups = mask.shape[0]
    if mask.shape[1] != i or o % groups:
        raise ShapeError(f"mask {mask.shape} incompatible with weight {weight.shape}")
    _check_input(x, i, "learned_group_conv")
    if gather is None:
        gather = mask.mean() <= 0.5
    xd, wd = _common(x.data, weight.data)
    n, _, h, w = xd.shape
    xf = xd.reshape(n, i, h * w)

    if not gather:
        m = expand_group_mask(mask, o).astype(wd.dtype)
        weff = wd * m
        out = np.matmul(weff, xf).reshape(n, o, h, w)

        def bw(g):
            gf = g.reshape(n, o, h * w)
            gx = np.matmul(weff.T, gf).reshape(xd.shape)
            gw = np.tensordot(gf, xf, axes=([0, 2], [0, 2])) * m
            return gx, gw

        return make_result(out, (x, weight), "learned_group_conv", bw)

    plan = []
    for g in range(groups):
        rows = np.arange(g, o, groups)
        idx = np.flatnonzero(mask[g])
        plan.append((rows, idx, wd[np.ix_(rows, idx)], xf[:, idx] if idx.size else None))
    out = np.zeros((n, o, h * w), dtype=xd.dtype)
    for rows, idx, wsub, xsub in plan:
        if idx.size:
            out[:, rows] = np.matmul(wsub, xsub)
    out = out.reshape(n, o, h, w)

    xf_shape, x_shape, w_shape = xf.shape, xd.shape, wd.shape
    dtype = xd.dtype

    def bw_gather(g):
        gf = g.reshape(n, o, h * w)
        gx = np.zeros(xf_shape, dtype=dtype)
        gw = np.zeros(w_shape, dtype=dtype)
        for rows, idx, wsub, xsub in plan:
            if not idx.size:
                continue
            gsub = gf[:, rows]
            gx[:, idx] += np.matmul(wsub.T, gsub)
            gw[np.ix_(rows, idx)] = np.tensordot(gsub, xsub, axes=([0, 2], [0, 2]))
        return gx.reshape(x_shape), gw

    del xf, xd
    return make_result(out, (x, weight), "learned_group_conv", bw_gather)


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------

def relu6(x: Tensor) -> Tensor:
    """min(max(0, x), 6); gradient 1 strictly inside (0, 6), else 0."""
    xd = x.data
    out = np.minimum(np.maximum(xd, 0), 6).astype(xd.dtype, copy=False)

    def bw(g):
        return (g * ((xd > 0) & (xd < 6)),)

    return make_result(out, (x,), "relu6", bw)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0).astype(xd.dtype, copy=False)
    return make_result(out, (x,), "relu", lambda g: (g * (xd > 0),))


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------

@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, name: str = "bn") -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, np.float32), requires_grad=True, name=f"{name}.weight"),
            beta=Tensor(np.zeros(channels, np.float32), requires_grad=True, name=f"{name}.bias"),
            running_mean=np.zeros(channels, np.float32),
            running_var=np.ones(channels, np.float32),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batch_norm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization; training mode also updates running statistics."""
    if x.data.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeError(f"batch_norm: input {x.shape} vs {state.channels} channels")
    for arr in (state.beta.data, state.running_mean, state.running_var):
        if arr.shape != (state.channels,):
            raise ShapeError("batch_norm: parameter lengths differ from channel count")
    xd, gamma, beta = _common(x.data, state.gamma.data, state.beta.data)
    if not training:
        inv_std = (1.0 / np.sqrt(state.running_var.astype(xd.dtype) + state.eps)).astype(xd.dtype)
        mean = state.running_mean.astype(xd.dtype)
        xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]

        def bw_eval(g):
            gx = g * (gamma * inv_std)[None, :, None, None]
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return make_result(out, (x, state.gamma, state.beta), "batch_norm", bw_eval)

    n, c, h, w = xd.shape
    m = n * h * w
    if m < 2:
        raise ContractError("batch_norm: one value per channel in training mode gives a degenerate variance")
    kern = kernels.active()
    xc = np.ascontiguousarray(xd)
    out, xhat, mean, var, inv_std = kern.bn_train_forward(xc, gamma, beta, state.eps)
    mom = state.momentum
    state.running_mean[:] = (1 - mom) * state.running_mean + mom * mean
    state.running_var[:] = (1 - mom) * state.running_var + mom * var * (m / (m - 1))

    def bw(g):
        gx, ggamma, gbeta = kern.bn_backward(np.ascontiguousarray(g, dtype=xd.dtype), xhat, gamma, inv_std)
        return gx, ggamma, gbeta

    return make_result(out, (x, state.gamma, state.beta), "batch_norm", bw)


ACTIVATIONS = {None: 0, "identity": 0, "relu": 1, "relu6": 2}


def bn_act(x: Tensor, state: BatchNormState, training: bool, act: str | None = "relu6") -> Tensor:
    """Fused ``act(batch_norm(x))`` that keeps only the normalized input for backward."""
    code = ACTIVATIONS[act]
    if x.data.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeError(f"bn_act: input {x.shape} vs {state.channels} channels")
    if not training:
        y = batch_norm(x, state, training=False)
        if code == 1:
            return relu(y)
        if code == 2:
            return relu6(y)
        return y
    xd, gamma, beta = _common(x.data, state.gamma.data, state.beta.data)
    n, c, h, w = xd.shape
    m = n * h * w
    if m < 2:
        raise ContractError("batch_norm: one value per channel in training mode gives a degenerate variance")
    kern = kernels.active()
    out, xhat, mean, var, inv_std = kern.bn_act_forward(np.ascontiguousarray(xd), gamma, beta, state.eps, code)
    mom = state.momentum
    state.running_mean[:] = (1 - mom) * state.running_mean + mom * mean
    state.running_var[:] = (1 - mom) * state.running_var + mom * var * (m / (m - 1))

    def bw(g):
        return kern.bn_act_backward(np.ascontiguousarray(g, dtype=xd.dtype), xhat, gamma, beta, inv_std, code)

    return make_result(out, (x, state.gamma, state.beta), "bn_act", bw)


# --------------------------------------------------------------------------
# pooling, linear, dropout, softmax
# --------------------------------------------------------------------------

def avg_pool(x: Tensor, window: int, stride: int) -> Tensor:
    if window < 1 or stride < 1:
        raise ParameterError("window and stride must be positive")
    xd = x.data
    n, c, h, w = xd.shape
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"avg_pool window {window} larger than input {h}x{w}")
    view = sliding_window_view(xd, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    out = view.mean(axis=(4, 5)).astype(xd.dtype, copy=False)
    area = window * window

    def bw(g):
        gx = np.zeros_like(xd)
        he, we = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        share = g / area
        for i in range(window):
            for j in range(window):
                gx[:, :, i:i + he:stride, j:j + we:stride] += share
        return (gx,)

    return make_result(out, (x,), "avg_pool", bw)


def global_avg_pool(x: Tensor) -> Tensor:
    xd = x.data
    n, c, h, w = xd.shape
    out = xd.mean(axis=(2, 3)).astype(xd.dtype, copy=False)

    def bw(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], xd.shape).copy(),)

    return make_result(out, (x,), "global_avg_pool", bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    arrays = [x.data, weight.data] + ([bias.data] if bias is not None else [])
    arrays = _common(*arrays)
    xd, wd = arrays[0], arrays[1]
    out = xd @ wd.T
    if bias is not None:
        out = out + arrays[2]

    def bw(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return make_result(out, inputs, "linear", bw)


def dropout(x: Tensor, rate: float, training: bool, seed: int | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    rng = np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    out = x.data * keep
    return make_result(out, (x,), "dropout", lambda g: (g * keep,))


def log_softmax(x: Tensor) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return make_result(out, (x,), "log_softmax", bw)


def softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)
