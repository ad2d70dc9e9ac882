"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a node holding references to its
operands and a closure mapping the output gradient to operand gradients.
:func:`backward` replays those nodes in exact reverse execution order.

Binary elementwise operations never broadcast: operands must have equal
shapes. Scalars enter only through :func:`scale` and :func:`add_scalar`.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Sequence

import numpy as np

from .exceptions import ConfigurationError, ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "DiffTensor",
    "ComputationTape",
    "tensor",
    "constant",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "add",
    "sub",
    "hadamard",
    "scale",
    "add_scalar",
    "neg",
    "tanh",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "absolute",
    "power",
    "elementwise",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "concat",
    "diag",
    "softmax_rows",
    "conv1d_time",
    "shift_rows",
    "backward",
    "grad_check",
]

_seq = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording for the enclosed block (this thread only)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A float64 array that can take part in gradient accumulation.

    Leaves created with ``requires_grad=True`` own a ``grad`` buffer of the
    same shape. Non-leaf tensors carry the backward rule of the operation
    that produced them until the tape is consumed.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._seq = -1

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, power(other, -1.0))
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)


DiffTensor = Tensor


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    out._parents = ()
    out._backward = None
    out._seq = -1
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = rule
        out._seq = next(_seq)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), rule)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape).copy()
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(src),))


def diag(v: Tensor) -> Tensor:
    """Square matrix with ``v`` (1-D, or n×1) on its diagonal."""
    if v.ndim == 2 and v.shape[1] == 1:
        flat = v.data[:, 0]
    elif v.ndim == 1:
        flat = v.data
    else:
        raise DimensionError(f"diag needs a vector, got {v.shape}")
    src = v.shape
    return _make(np.diag(flat), (v,), lambda g: (np.diag(g).copy().reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(data, tensors, rule)


def _getitem(a: Tensor, index) -> Tensor:
    out = np.array(a.data[index], dtype=np.float64)
    if out.ndim == 0:
        out = out.reshape(1)
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, index, g.reshape(np.shape(a.data[index])))
        return (full,)

    return _make(out, (a,), rule)


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _make(np.array([a.data.sum()]), (a,), lambda g: (np.full(shape, g[0]),))
    out = a.data.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("hadamard", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + float(c), (a,), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    # split on sign so exp never overflows
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.logaddexp(0.0, x)
    s = np.exp(x - y)  # sigmoid(x), overflow-free
    return _make(y, (a,), lambda g: (g * s,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise NumericError("log of a non-positive value")
    return _make(np.log(x), (a,), lambda g: (g / x,))


def absolute(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def power(a: Tensor, p: float) -> Tensor:
    x = a.data
    p = float(p)
    y = x**p
    return _make(y, (a,), lambda g: (g * p * x ** (p - 1.0),))


_UNARY = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "neg": neg,
    "exp": exp,
    "abs": absolute,
    "absolute": absolute,
}
_BINARY = {"add": add, "sub": sub, "hadamard": hadamard}


def elementwise(op: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    """Dispatch a named pointwise operation.

    ``scale`` takes a float as ``b``; binary ops take a same-shape tensor.
    """
    if op in _UNARY:
        return _UNARY[op](a)
    if op in _BINARY:
        if not isinstance(b, Tensor):
            raise DimensionError(f"{op} needs a tensor second operand")
        return _BINARY[op](a, b)
    if op == "scale":
        return scale(a, b)
    raise ConfigurationError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# structured ops
# ---------------------------------------------------------------------------


def softmax_rows(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"softmax_rows needs a 2-D tensor, got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _make(y, (a,), rule)


def convolve_time(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Array-level kernel of :func:`conv1d_time` (no gradient tracking)."""
    m = x.shape[0]
    c = (k.size - 1) // 2
    out = np.zeros_like(x)
    # out[t] = sum_j k[j] * x[t + c - j], zero outside [0, m)
    for j, w in enumerate(k):
        s = c - j
        if w == 0.0 or abs(s) >= m:
            continue
        if s >= 0:
            out[: m - s] += w * x[s:]
        else:
            out[-s:] += w * x[: m + s]
    return out


def conv1d_time(x: Tensor, kernel: Tensor) -> Tensor:
    """Zero-padded convolution of every column of ``x`` along the time axis.

    ``out[t] = sum_j kernel[j] * x[t + (k-1)/2 - j]``, so ``[0, 1, 0]`` is the
    identity and ``[0, 1, -1]`` is the backward first difference.
    """
    if x.ndim != 2:
        raise DimensionError(f"conv1d_time needs an M×N input, got {x.shape}")
    k = kernel.data.reshape(-1)
    m = x.shape[0]
    if k.size % 2 == 0:
        raise ConfigurationError(f"kernel length must be odd, got {k.size}")
    if k.size > m:
        raise ConfigurationError(f"kernel length {k.size} exceeds window length {m}")
    xd = x.data
    c = (k.size - 1) // 2
    kshape = kernel.shape

    def rule(g):
        gx = convolve_time(g, k[::-1])  # adjoint of convolution is correlation
        gk = np.empty(k.size)
        for j in range(k.size):
            s = c - j
            if s >= 0:
                gk[j] = np.sum(g[: m - s] * xd[s:])
            else:
                gk[j] = np.sum(g[-s:] * xd[: m + s])
        return gx, gk.reshape(kshape)

    return _make(convolve_time(xd, k), (x, kernel), rule)


def shift_rows(x: Tensor, lag: int = 1) -> Tensor:
    """Delay rows by ``lag`` steps, clamping at the first row."""
    m = x.shape[0]
    src = np.clip(np.arange(m) - lag, 0, m - 1)

    def rule(g):
        out = np.zeros_like(g)
        np.add.at(out, src, g)
        return (out,)

    return _make(x.data[src].copy(), (x,), rule)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


class ComputationTape:
    """Operations reachable from an output, in execution order."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = self._collect(output)

    @staticmethod
    def _collect(output: Tensor) -> list:
        seen = set()
        nodes = []
        stack = [output]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def replay_order(self) -> list:
        return [t._seq for t in reversed(self.nodes)]

    def backward(self, retain: bool = False) -> None:
        grads = {id(self.output): np.ones_like(self.output.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            pgrads = node._backward(g)
            for parent, pg in zip(node._parents, pgrads):
                if not parent.requires_grad or pg is None:
                    continue
                if parent._backward is None:
                    parent.grad = parent.grad + pg
                elif id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        if not retain:
            for node in self.nodes:
                node._parents = ()
                node._backward = None
            self.nodes = []


def backward(output: Tensor, retain: bool = False) -> None:
    """Accumulate d(output)/d(leaf) into every reachable leaf's ``grad``."""
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise ContractError("output does not depend on any tensor requiring grad")
    if output._backward is None:
        output.grad = output.grad + np.ones_like(output.data)
        return
    ComputationTape(output).backward(retain=retain)


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f(*inputs)`` must return a scalar tensor. The relative error of one
    coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    params = [t for t in inputs if t.requires_grad]
    for t in params:
        t.zero_grad()
    out = f(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("grad_check: non-finite function value")
    backward(out)
    worst = 0.0
    with no_grad():
        for t in params:
            analytic = t.grad.reshape(-1)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f(*inputs).item()
                flat[i] = orig - h
                fm = f(*inputs).item()
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * h)
                if not (np.isfinite(numeric) and np.isfinite(analytic[i])):
                    raise NumericError(f"grad_check: non-finite derivative at index {i}")
                worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    return worst
