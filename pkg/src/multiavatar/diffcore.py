"""Reverse-mode automatic differentiation over dense numpy arrays, plus Adam.

Small define-by-run engine: every operation records its parents and a
backward closure on a dynamic tape, and ``Tensor.backward`` replays the
tape in reverse topological order. Gradient checks run in float64;
training normally runs float32. Broadcasting follows numpy's trailing
dimension rules (an extent may pair with 1).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_grad_enabled = True
_debug_checks = False


def set_debug_checks(enabled):
    """Enable finiteness assertions after every op (slow; for debugging)."""
    global _debug_checks
    _debug_checks = bool(enabled)


@contextmanager
def no_grad():
    """Context manager that disables tape recording (forward-only eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Dense n-dimensional real array with optional gradient tracking.

    ``data`` is a numpy array (float32 or float64). ``grad`` is allocated
    lazily and always matches ``data``'s shape. Tensors produced by ops
    are treated as immutable; only ``grad`` buffers and leaf ``data``
    (through the optimizer) are ever written in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad = None
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        if _debug_checks and not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite values in tensor")

    # ---- basics -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # ---- backward ---------------------------------------------------

    def backward(self):
        """Backpropagate from this scalar through the recorded tape.

        Every grad-requiring tensor reachable from here accumulates
        d(self)/d(tensor) into ``.grad`` (allocated as zeros first, so a
        parameter that appears in the graph but does not influence the
        loss ends up with an exact zero gradient).
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ValueError("backward on a tensor that does not require grad")

        # Iterative post-order topological sort; deterministic given the
        # construction order of the graph.
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        for node in topo:
            node.ensure_grad()
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # ---- operator sugar ---------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, "mean", axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce(self, "max", axis, keepdims)


def _as_tensor(x, dtype):
    """Wrap scalars/arrays at the dtype of the other operand (no silent
    float64 promotion from python literals)."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float64, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float64, requires_grad=False):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def _make(data, parents, backward):
    """Build a result node, recording the tape entry only when needed."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if _debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by op")
    if not track:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ---- elementwise arithmetic -----------------------------------------


def add(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)
    _check_broadcast(a, b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.shape)

    return _make(out_data, (a, b), backward)


def sub(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)
    _check_broadcast(a, b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.shape)

    return _make(out_data, (a, b), backward)


def mul(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)
    _check_broadcast(a, b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.shape)

    return _make(out_data, (a, b), backward)


def div(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)
    _check_broadcast(a, b)
    if _debug_checks and np.any(b.data == 0):
        raise FloatingPointError("division by zero")
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g / b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(-g * a.data / (b.data * b.data), b.shape)

    return _make(out_data, (a, b), backward)


def neg(a):
    def backward(g):
        a.grad -= g

    return _make(-a.data, (a,), backward)


def elementwise(a, b, op):
    """Dispatch form of the four broadcasting arithmetic ops."""
    table = {"add": add, "sub": sub, "mul": mul, "div": div}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](a, b)


# ---- matmul ----------------------------------------------------------


def matmul(a, b):
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul expects two tensors")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    return _make(out_data, (a, b), backward)


# ---- activations -----------------------------------------------------


def relu(x):
    out_data = np.maximum(x.data, 0)

    def backward(g):
        x.grad += g * (x.data > 0)

    return _make(out_data, (x,), backward)


def sigmoid(x):
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out_data[~pos] = e / (1.0 + e)

    def backward(g):
        x.grad += g * out_data * (1.0 - out_data)

    return _make(out_data, (x,), backward)


def softplus(x):
    out_data = np.logaddexp(np.zeros((), dtype=x.dtype), x.data)

    def backward(g):
        d = x.data
        s = np.empty_like(d)
        pos = d >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        e = np.exp(d[~pos])
        s[~pos] = e / (1.0 + e)
        x.grad += g * s

    return _make(out_data, (x,), backward)


def sin(x):
    def backward(g):
        x.grad += g * np.cos(x.data)

    return _make(np.sin(x.data), (x,), backward)


def cos(x):
    def backward(g):
        x.grad -= g * np.sin(x.data)

    return _make(np.cos(x.data), (x,), backward)


def exp(x):
    out_data = np.exp(x.data)

    def backward(g):
        x.grad += g * out_data

    return _make(out_data, (x,), backward)


def log(x):
    def backward(g):
        x.grad += g / x.data

    return _make(np.log(x.data), (x,), backward)


def sqrt(x):
    out_data = np.sqrt(x.data)

    def backward(g):
        x.grad += g * (0.5 / out_data)

    return _make(out_data, (x,), backward)


def absolute(x):
    def backward(g):
        x.grad += g * np.sign(x.data)

    return _make(np.abs(x.data), (x,), backward)


_ACTIVATIONS = {
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "sin": sin,
    "cos": cos,
    "exp": exp,
}


def activation(x, kind):
    """Elementwise nonlinearity with the matching backward rule."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# ---- softmax ---------------------------------------------------------


def softmax(x, axis=-1):
    """Numerically stabilized softmax along ``axis`` (max subtraction)."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x.grad += out_data * (g - dot)

    return _make(out_data, (x,), backward)


# ---- shape ops -------------------------------------------------------


def concat(parts, axis=0):
    parts = list(parts)
    if not parts:
        raise ValueError("concat of an empty list")
    ref = parts[0].shape
    for p in parts[1:]:
        a, b = list(ref), list(p.shape)
        if len(a) != len(b):
            raise ShapeError(f"concat rank mismatch: {ref} vs {p.shape}")
        a[axis] = b[axis] = 0
        if a != b:
            raise ShapeError(f"concat non-axis extents differ: {ref} vs {p.shape}")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p.grad += g[tuple(sl)]

    return _make(out_data, tuple(parts), backward)


def stack(parts, axis=0):
    expanded = [reshape(p, p.shape[:axis] + (1,) + p.shape[axis:]) for p in parts]
    return concat(expanded, axis=axis)


def reshape(x, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = x.shape

    def backward(g):
        x.grad += g.reshape(old)

    return _make(x.data.reshape(shape), (x,), backward)


def transpose(x, axes=None):
    def backward(g):
        if axes is None:
            x.grad += g.T
        else:
            x.grad += g.transpose(np.argsort(axes))

    return _make(x.data.transpose(axes), (x,), backward)


def broadcast_to(x, shape):
    out_data = np.broadcast_to(x.data, shape).copy()

    def backward(g):
        x.grad += _unbroadcast(g, x.shape)

    return _make(out_data, (x,), backward)


def getitem(x, idx):
    """Basic and integer-array indexing; backward scatter-adds."""
    out_data = x.data[idx]
    if np.isscalar(out_data) or out_data.ndim == 0:
        out_data = np.asarray(out_data)

    def backward(g):
        np.add.at(x.grad, idx, g)

    return _make(out_data, (x,), backward)


def gather(x, index):
    """Pick rows of a 1-d tensor by integer index; repeated indices allowed."""
    if x.ndim != 1:
        raise ShapeError(f"gather expects a 1-d tensor, got {x.shape}")
    index = np.asarray(index, dtype=np.int64)
    out_data = x.data[index]

    def backward(g):
        x.grad += np.bincount(index, weights=g, minlength=x.shape[0]).astype(x.dtype)

    return _make(out_data, (x,), backward)


def scatter_rows(values, index, length):
    """Place rows of ``values`` at the given (unique) row positions of a
    zero tensor with ``length`` leading rows."""
    index = np.asarray(index, dtype=np.int64)
    out_data = np.zeros((length,) + values.shape[1:], dtype=values.dtype)
    out_data[index] = values.data

    def backward(g):
        values.grad += g[index]

    return _make(out_data, (values,), backward)


def cumsum(x, axis):
    out_data = np.cumsum(x.data, axis=axis)

    def backward(g):
        x.grad += np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)

    return _make(out_data, (x,), backward)


# ---- reductions ------------------------------------------------------


def reduce(x, op, axis=None, keepdims=False):
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"reduce axis {axis} invalid for shape {x.shape}")
    if op == "sum":
        out_data = x.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            x.grad += _expand_reduced(g, x.shape, axis, keepdims)

    elif op == "mean":
        out_data = x.data.mean(axis=axis, keepdims=keepdims)
        count = x.data.size if axis is None else x.shape[axis]

        def backward(g):
            x.grad += _expand_reduced(g, x.shape, axis, keepdims) / count

    elif op == "max":
        out_data = x.data.max(axis=axis, keepdims=keepdims)

        def backward(g):
            full = x.data.max(axis=axis, keepdims=True)
            mask = x.data == full
            x.grad += mask * (_expand_reduced(g, x.shape, axis, keepdims) / mask.sum(axis=axis, keepdims=True))

    else:
        raise ValueError(f"unknown reduction {op!r}")

    return _make(out_data, (x,), backward)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


# ---- gradient checking ----------------------------------------------


def grad_check(f, x, eps=1e-5):
    """Compare reverse-mode gradients of scalar ``f`` against central
    differences, coordinate by coordinate.

    Returns the max relative error, with denominator
    max(|analytic|, |numeric|, 1e-8). Meaningful only in float64.
    """
    x0 = x.data.copy()
    out = f(x)
    x.zero_grad()
    out.backward()
    analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(x).item()
            flat[i] = orig - eps
            lo = f(x).item()
            flat[i] = orig
            numeric[i] = (hi - lo) / (2 * eps)
    x.data[...] = x0

    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom))


# ---- Adam ------------------------------------------------------------


class AdamState:
    """Per-group moment buffers and shared step counter."""

    def __init__(self, params):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    b1, b2 = betas
    state.t += 1
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


class Adam:
    """Adam over named parameter groups with per-group learning rates.

    ``groups`` is a list of dicts: {"params": [Tensor...], "lr": float}.
    """

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8):
        self.groups = groups
        self.betas = betas
        self.eps = eps
        self.states = [AdamState(g["params"]) for g in groups]

    def zero_grad(self):
        for g in self.groups:
            for p in g["params"]:
                p.zero_grad()

    def step(self):
        for g, st in zip(self.groups, self.states):
            grads = [p.ensure_grad() for p in g["params"]]
            adam_step(g["params"], grads, st, g["lr"], self.betas, self.eps)
