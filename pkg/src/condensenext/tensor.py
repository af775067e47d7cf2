"""Tensor storage and define-by-run reverse-mode differentiation."""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_ids = itertools.count(1)
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """One recorded operation: its inputs and the rule mapping output grad to input grads."""

    __slots__ = ("kind", "inputs", "backward")

    def __init__(self, kind: str, inputs: tuple, backward: Callable):
        self.kind = kind
        self.inputs = inputs
        self.backward = backward


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self._node = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def make_result(data: np.ndarray, inputs: Sequence[Tensor], kind: str, backward: Callable) -> Tensor:
    """Wrap an op result, recording it on the tape when any input tracks gradients.

    ``backward(grad_out)`` must return one array (or None) per input.
    """
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(kind, tuple(inputs), backward)
    return out


def tensor_new(shape: Sequence[int], fill=0.0, *, seed: int | None = None,
               std: float = 1.0, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    """Allocate a tensor filled with a constant or seeded random values.

    ``fill`` is a number, ``"normal"`` (zero mean, ``std``) or ``"uniform"``
    (on ``[-std, std]``).  Random fills require ``seed``.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    if isinstance(fill, str):
        if seed is None:
            raise ContractError("random fill needs a seed")
        rng = np.random.default_rng(seed)
        if fill == "normal":
            data = rng.normal(0.0, std, size=shape)
        elif fill == "uniform":
            data = rng.uniform(-std, std, size=shape)
        else:
            raise ContractError(f"unknown fill {fill!r}")
        data = data.astype(dtype)
    else:
        data = np.full(shape, fill, dtype=dtype)
    return Tensor(data, requires_grad=requires_grad)


# --------------------------------------------------------------------------
# tape and backward
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Record:
    kind: str
    input_ids: tuple
    output_id: int


@dataclass
class Tape:
    """Topologically ordered view of the operations reachable from a tensor."""

    records: list = field(default_factory=list)
    tensors: list = field(default_factory=list, repr=False)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order = _topo_order(out)
        tape = cls()
        for t in order:
            tape.tensors.append(t)
            if t._node is not None:
                tape.records.append(
                    Record(t._node.kind, tuple(p.node_id for p in t._node.inputs), t.node_id)
                )
        return tape

    def __len__(self):
        return len(self.records)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.inputs:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict:
    """Reverse-mode sweep from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` get ``.grad`` populated (accumulating
    into any existing gradient).  Returns ``{leaf: gradient of this call}``.
    """
    if any(s != 1 for s in loss.shape):
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    result = {}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._node is None:
            g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g
            result[t] = g
            continue
        in_grads = t._node.backward(g)
        for p, gp in zip(t._node.inputs, in_grads):
            if gp is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = gp
    return result


# --------------------------------------------------------------------------
# elementary differentiable ops
# --------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(out, (a, b), "add", bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        out = (a.data * c).astype(a.dtype, copy=False)
        return make_result(out, (a,), "scale", lambda g: (g * c,))
    ad, bd = a.data, b.data
    out = ad * bd

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_result(out, (a, b), "mul", bw)


def tsum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype).reshape(())
    shape = a.shape
    return make_result(out, (a,), "sum", lambda g: (np.broadcast_to(g, shape),))


def tmean(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(a.data.mean(), dtype=a.dtype).reshape(())
    shape = a.shape
    return make_result(out, (a,), "mean", lambda g: (np.broadcast_to(g / n, shape),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)
    orig = a.shape
    return make_result(out, (a,), "reshape", lambda g: (g.reshape(orig),))


def concat(tensors: Iterable[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tensors, "concat", bw)


# --------------------------------------------------------------------------
# finite-difference oracle
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(a: np.ndarray, d: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(d)), 1e-8)
    return np.abs(a - d) / denom


def _scalar(out, where: str) -> float:
    if not isinstance(out, Tensor) or any(s != 1 for s in out.shape):
        shape = out.shape if isinstance(out, Tensor) else type(out).__name__
        raise ContractError(f"{where}: function must return a scalar tensor, got {shape}")
    return float(out.data.reshape(-1)[0])


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-3,
                      tol: float = 1e-3) -> GradCheckReport:
    """Compare the analytic gradient of ``f`` at ``x`` with central differences.

    Both sides are evaluated in float64 so the step size does not drown in
    float32 rounding.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    base = np.array(x.data, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    _scalar(out, "finite_diff_check")
    backward(out)
    analytic = np.zeros_like(base) if xt.grad is None else np.asarray(xt.grad, dtype=np.float64)

    numeric = np.empty_like(base)
    flat = numeric.reshape(-1)
    probe = base.copy()
    pflat = probe.reshape(-1)
    with no_grad():
        for i in range(pflat.size):
            orig = pflat[i]
            pflat[i] = orig + step
            fp = _scalar(f(Tensor(probe.copy())), "finite_diff_check")
            pflat[i] = orig - step
            fm = _scalar(f(Tensor(probe.copy())), "finite_diff_check")
            pflat[i] = orig
            flat[i] = (fp - fm) / (2.0 * step)
    return GradCheckReport(analytic, numeric, relative_error(analytic, numeric), tol)
