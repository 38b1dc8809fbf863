"""Reverse-mode automatic differentiation over small dense float64 tensors.

The primitive set is deliberately narrow: it covers what the encoders, the
fusion stack, the heads and the training losses use, and nothing else.
Broadcasting is limited to adding/multiplying a trailing-shape operand
(e.g. a bias row) across the leading axis.

Every op records its parents and a closure that pushes the upstream gradient
back into them. ``Tensor.backward`` walks the recorded graph once in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "NumericError",
    "DeterminismError",
    "no_grad",
    "is_grad_enabled",
    "topological_order",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "transpose",
    "reshape",
    "concat",
    "take_rows",
    "sigmoid",
    "log_sigmoid",
    "softplus",
    "exp",
    "log",
    "gelu",
    "power",
    "maximum",
    "minimum",
    "softmax",
    "log_softmax",
    "layer_norm",
    "embedding",
    "attention",
    "sum",
    "mean",
    "softmax_cross_entropy",
    "gradcheck",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericError(ArithmeticError):
    """A value that must be finite is not."""


class DeterminismError(RuntimeError):
    """Two evaluations of a supposedly pure function disagree."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (inference)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @classmethod
    def _wrap(cls, data: np.ndarray) -> Tensor:
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t.op = "const"
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | float | None = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"implicit backward needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        for node in order:
            if node._backward is not None:
                node.grad = None
        self._accumulate(np.broadcast_to(np.asarray(grad, dtype=np.float64), self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a supported primitive")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _index(self, idx)


def topological_order(root: Tensor) -> list[Tensor]:
    """Graph nodes reachable from ``root``; parents always precede children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _record(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor._wrap(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead > 0 else g.sum().reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape or b.ndim == 0 or a.ndim == 0:
        return
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    if a.ndim < b.ndim and b.shape[b.ndim - a.ndim:] == a.shape:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


# ---------------------------------------------------------------------------
# linear algebra and arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product ``a @ b`` with adjoints ``g @ b.T`` and ``a.T @ g``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    A, B = a.data, b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ B.T)
        if b.requires_grad:
            b._accumulate(A.T @ g)

    return _record(A @ B, (a, b), backward, "matmul")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _record(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    return add(a, neg(_as_tensor(b)))


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return _record(-a.data, (a,), backward, "neg")


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a constant array or scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    A, B = a.data, b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * B, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * A, b.shape))

    return _record(A * B, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    """Elementwise quotient ``a / b`` (same shapes or trailing broadcast)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    A, B = a.data, b.data
    out = A / B

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / B, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / B, b.shape))

    return _record(out, (a, b), backward, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        a._accumulate(g * c)

    return _record(a.data * c, (a,), backward, "scale")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects 2-D, got {a.shape}")

    def backward(g):
        a._accumulate(g.T)

    return _record(a.data.T.copy(), (a,), backward, "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape

    def backward(g):
        a._accumulate(g.reshape(src))

    return _record(a.data.reshape(shape), (a,), backward, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    sizes = [t.shape[axis] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _record(data, tensors, backward, "concat")


def _index(a: Tensor, idx) -> Tensor:
    data = a.data[idx]
    src = a.shape

    def backward(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _record(np.array(data, copy=True), (a,), backward, "index")


def take_rows(a: Tensor, rows) -> Tensor:
    """Gather rows of a 2-D tensor (repeats allowed)."""
    rows = np.asarray(rows, dtype=np.intp)
    return _index(a, rows)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        a._accumulate(g * out * (1.0 - out))

    return _record(out, (a,), backward, "sigmoid")


def log_sigmoid(a: Tensor) -> Tensor:
    """``log(sigmoid(x))`` without overflow for large ``|x|``."""
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        # d/dx log sigmoid(x) = sigmoid(-x)
        a._accumulate(g * np.exp(out - x))

    return _record(out, (a,), backward, "log_sigmoid")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        a._accumulate(g * np.exp(x - out))

    return _record(out, (a,), backward, "softplus")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out)

    return _record(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    x = a.data

    def backward(g):
        a._accumulate(g / x)

    return _record(np.log(x), (a,), backward, "log")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth, so finite differences stay clean)."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        a._accumulate(g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du))

    return _record(out, (a,), backward, "gelu")


def power(a: Tensor, k: float) -> Tensor:
    x = a.data

    def backward(g):
        a._accumulate(g * k * x ** (k - 1))

    return _record(x**k, (a,), backward, "power")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "maximum")
    pick_a = a.data >= b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(pick_a, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return _record(np.where(pick_a, a.data, b.data), (a, b), backward, "maximum")


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "minimum")
    pick_a = a.data <= b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(pick_a, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return _record(np.where(pick_a, a.data, b.data), (a, b), backward, "minimum")


# ---------------------------------------------------------------------------
# normalisations


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = _softmax_np(a.data, axis)

    def backward(g):
        a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _record(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        a._accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _record(out, (a,), backward, "log_softmax")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row over the last axis, then apply ``gamma``/``beta``."""
    x = a.data
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise DimensionError(f"layer_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    G = gamma.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.shape))
        if a.requires_grad:
            gx = g * G
            n = x.shape[-1]
            a._accumulate(
                inv / n * (n * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
            )

    return _record(xhat * G + beta.data, (a, gamma, beta), backward, "layer_norm")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    if ids.ndim != 1:
        raise DimensionError(f"embedding ids must be 1-D, got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range for table with {table.shape[0]} rows")
    return _index(table, ids)


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention as one fused primitive.

    ``q`` is (n, d); ``k`` and ``v`` are (m, d). Heads split ``d`` evenly.
    """
    n, d = q.shape
    m = k.shape[0]
    if k.shape != (m, d) or v.shape != (m, d) or d % n_heads:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}, heads {n_heads}")
    dh = d // n_heads
    Q = q.data.reshape(n, n_heads, dh).transpose(1, 0, 2)
    K = k.data.reshape(m, n_heads, dh).transpose(1, 0, 2)
    V = v.data.reshape(m, n_heads, dh).transpose(1, 0, 2)
    c = 1.0 / np.sqrt(dh)
    A = _softmax_np(Q @ K.transpose(0, 2, 1) * c, axis=-1)
    out = (A @ V).transpose(1, 0, 2).reshape(n, d)

    def backward(g):
        G = g.reshape(n, n_heads, dh).transpose(1, 0, 2)
        if v.requires_grad:
            v._accumulate((A.transpose(0, 2, 1) @ G).transpose(1, 0, 2).reshape(m, d))
        dA = G @ V.transpose(0, 2, 1)
        dS = A * (dA - (dA * A).sum(-1, keepdims=True)) * c
        if q.requires_grad:
            q._accumulate((dS @ K).transpose(1, 0, 2).reshape(n, d))
        if k.requires_grad:
            k._accumulate((dS.transpose(0, 2, 1) @ Q).transpose(1, 0, 2).reshape(m, d))

    return _record(out, (q, k, v), backward, "attention")


# ---------------------------------------------------------------------------
# reductions and losses


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    src = a.shape

    def backward(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gg, src))

    return _record(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """``-log softmax(logits)[target]`` for a 1-D logit vector."""
    if logits.ndim != 1:
        raise DimensionError(f"expected 1-D logits, got {logits.shape}")
    if not 0 <= target < logits.shape[0]:
        raise IndexError(f"target {target} out of range for {logits.shape[0]} classes")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("softmax_cross_entropy: non-finite logits")
    return neg(log_softmax(logits)[target])


# ---------------------------------------------------------------------------
# verification


def gradcheck(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-4) -> float:
    """Largest relative gap between backprop and central finite differences.

    ``f`` takes no arguments and closes over ``params``; entries are
    perturbed in place and restored. Relative error uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    params = list(params)
    first = f()
    second = f()
    if first.data.tobytes() != second.data.tobytes():
        raise DeterminismError("two forward passes of f produced different values")
    for p in params:
        p.grad = None
    first.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        num = np.empty(flat.size)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = f().item()
                flat[i] = orig - eps
                lo = f().item()
                flat[i] = orig
                num[i] = (hi - lo) / (2 * eps)
        a = analytic.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
        if flat.size:
            worst = max(worst, float(np.max(np.abs(a - num) / denom)))
    return worst
