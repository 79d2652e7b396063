"""Minimal dense float32 tensor library with reverse-mode autodiff.

Define-by-run: every op optionally records a backward closure; the tape is
rebuilt each forward pass, so graph shape may change freely between calls
(variable agent/task counts). Scope is deliberately small: 2-D matrices,
scalars, and exactly the ops the attention stack and PPO need. No silent
broadcasting beyond the documented bias/row cases.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator, Optional, Sequence

import numpy as np

NEG_INF = np.float32(-1.0e9)

_GRAD_ENABLED = True
_NAN_CHECKS = False


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording (rollouts, evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_nan_checks(enabled: bool) -> None:
    """Debug mode: raise if any op produces non-finite values."""
    global _NAN_CHECKS
    _NAN_CHECKS = bool(enabled)


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_spent")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._spent = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar over the module-level ops
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, mul_scalar(other, -1.0))

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul_scalar(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class Parameter(Tensor):
    """Named, gradient-tracked tensor; name must be unique within a network."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.shape})"


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _NAN_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from op '{op}'")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float32)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. Documented broadcast: b of shape (n,) or (1, n)
    against a of shape (m, n) (bias rows); anything else is a shape error."""
    if a.shape == b.shape:
        reduce_b = False
    elif a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        reduce_b = True
    elif a.ndim == 2 and b.ndim == 2 and b.shape[0] == 1 and b.shape[1] == a.shape[1]:
        reduce_b = True
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        _accum(a, g)
        if reduce_b:
            _accum(b, g.sum(axis=0).reshape(b.shape))
        else:
            _accum(b, g)

    return _node(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes must match, got {a.shape} and {b.shape}")

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _node(a.data * b.data, (a, b), backward, "mul")


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c32 = np.float32(c)

    def backward(g):
        _accum(a, g * c32)

    return _node(a.data * c32, (a,), backward, "mul_scalar")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul: operands must be 2-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose: operand must be 2-D")

    def backward(g):
        _accum(a, np.ascontiguousarray(g.T))

    return _node(np.ascontiguousarray(a.data.T), (a,), backward, "transpose")


def concat_features(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise feature concatenation: (m, p) ++ (m, q) -> (m, p + q)."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("concat_features: operands must be 2-D")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_features: leading extents differ, {a.shape} vs {b.shape}")
    p = a.shape[1]

    def backward(g):
        _accum(a, np.ascontiguousarray(g[:, :p]))
        _accum(b, np.ascontiguousarray(g[:, p:]))

    return _node(np.concatenate([a.data, b.data], axis=1), (a, b), backward, "concat_features")


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat_rows: need at least one tensor")
    width = tensors[0].shape[1]
    for t in tensors:
        if t.ndim != 2 or t.shape[1] != width:
            raise ShapeError("concat_rows: all operands must be 2-D with equal width")
    splits = np.cumsum([t.shape[0] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=0)):
            _accum(t, np.ascontiguousarray(piece))

    return _node(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), backward, "concat_rows")


def take_row(a: Tensor, i: int) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("take_row: operand must be 2-D")
    if not 0 <= i < a.shape[0]:
        raise ShapeError(f"take_row: row {i} out of range for shape {a.shape}")

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[i] = g[0]
        _accum(a, ga)

    return _node(a.data[i : i + 1].copy(), (a,), backward, "take_row")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), elementwise."""
    s = _sigmoid(a.data)

    def backward(g):
        _accum(a, g * (s * (1.0 + a.data * (1.0 - s))))

    return _node(a.data * s, (a,), backward, "silu")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _node(out_data, (a,), backward, "exp")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    lo32, hi32 = np.float32(lo), np.float32(hi)
    inside = (a.data >= lo32) & (a.data <= hi32)

    def backward(g):
        _accum(a, g * inside)

    return _node(np.clip(a.data, lo32, hi32), (a,), backward, "clamp")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"minimum: shapes must match, got {a.shape} and {b.shape}")
    take_a = a.data <= b.data

    def backward(g):
        _accum(a, g * take_a)
        _accum(b, g * ~take_a)

    return _node(np.minimum(a.data, b.data), (a, b), backward, "minimum")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is None:
            _accum(a, np.full_like(a.data, np.float32(g)))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape).astype(np.float32))

    return _node(a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if axis is None:
            _accum(a, np.full_like(a.data, np.float32(g) / count))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, (np.broadcast_to(gg, a.data.shape) / count).astype(np.float32))

    return _node(a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float32), (a,), backward, "mean")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ w + b with w of shape (in, out) and b of shape (out,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} @ {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match output width {w.shape[1]}")
    out_data = x.data @ w.data
    if b is not None:
        out_data = out_data + b.data

    def backward(g):
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        if b is not None:
            _accum(b, g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out_data, parents, backward, "linear")


def masked_softmax(scores: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax of (scores + mask) along `axis`.

    Mask entries must be exactly 0 or NEG_INF; masked positions get weight
    exactly 0 (post-hoc zeroing, so no -inf arithmetic). A fully-masked
    slice is an error, never a silent all-zero row.
    """
    mask = np.asarray(mask, dtype=np.float32)
    if mask.shape != scores.shape:
        raise ShapeError(f"masked_softmax: mask shape {mask.shape} != scores shape {scores.shape}")
    if not np.all((mask == 0.0) | (mask == NEG_INF)):
        raise ValueError("masked_softmax: mask entries must be exactly 0 or NEG_INF")
    masked = mask != 0.0
    if np.any(np.all(masked, axis=axis)):
        raise ValueError("masked_softmax: fully-masked slice")
    z = scores.data + mask
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    e[masked] = 0.0
    denom = e.sum(axis=axis, keepdims=True)
    out_data = e / denom

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(scores, out_data * (g - dot))

    return _node(out_data, (scores,), backward, "masked_softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out_data = z - lse

    def backward(g):
        soft = np.exp(out_data)
        _accum(x, g - soft * g.sum(axis=axis, keepdims=True))

    return _node(out_data, (x,), backward, "log_softmax")


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[i] = x[i, idx[i]]; one picked element per row, shape (m,)."""
    if x.ndim != 2:
        raise ShapeError("gather_rows: operand must be 2-D")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (x.shape[0],):
        raise ShapeError(f"gather_rows: index shape {idx.shape} != ({x.shape[0]},)")
    if np.any(idx < 0) or np.any(idx >= x.shape[1]):
        raise ShapeError("gather_rows: index out of range")
    rows = np.arange(x.shape[0])

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        _accum(x, gx)

    return _node(x.data[rows, idx], (x,), backward, "gather_rows")


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Reverse-topological gradient accumulation from a scalar loss.

    One pass per tape: a second call without re-running the forward is an
    error, and interior records are released afterwards.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward: graph is detached from any tracked parameter")
    if loss._spent:
        raise RuntimeError("backward: tape already consumed; re-run the forward pass")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    loss._spent = True
    for node in topo:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            if node is not loss:
                node.grad = None


# ---------------------------------------------------------------------------
# optimization


class Adam:
    """Standard Adam with bias correction; clears grads after each step."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {p.name: np.zeros_like(p.data) for p in params}
        self._v = {p.name: np.zeros_like(p.data) for p in params}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for p in self.params:
            if p.grad is None:
                raise RuntimeError(f"Adam.step: missing gradient for parameter '{p.name}'")
            g = p.grad
            m = self._m[p.name]
            v = self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(np.float32)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Global L2 clip in place; returns the norm of the clipped gradients."""
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(sq))
    if norm > max_norm:
        scale = np.float32(max_norm / norm)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
        return max_norm
    return norm
