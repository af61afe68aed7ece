"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Only the operations the segmentation pipeline needs are provided. Every op
records a node holding its inputs and an analytic backward rule; calling
:func:`backward` on a scalar linearises the recorded graph into a :class:`Tape`
(topological order) and walks it in reverse.

Gradients accumulate into ``Tensor.grad`` of leaves created with
``requires_grad=True`` until :meth:`Tensor.zero_grad` is called.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable node recording inside the block (inference only)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("inputs", "output", "backward_fn", "name")

    def __init__(self, inputs, output, backward_fn, name):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.name = name

    def __repr__(self):
        return f"Node({self.name})"


class Tensor:
    """Dense float64 array that can take part in reverse-mode differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _node: Node | None = None, _check: bool = True):
        arr = np.array(data, dtype=np.float64)
        if _check:
            if 0 in arr.shape:
                raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node = _node

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
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), _check=False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -1.0 * _as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -1.0 * self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, _check=False)


def _record(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    needs = _grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, _check=False)
    if needs:
        out.requires_grad = True
        out._node = Node(tuple(inputs), out, backward_fn, name)
    return out


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return g @ B.T, A.T @ g

    return _record(A @ B, (a, b), bw, "matmul")


def sparse_matmul(mat, x: Tensor) -> Tensor:
    """``mat @ x`` for a fixed scipy sparse matrix ``mat`` (not differentiated)."""
    x = _as_tensor(x)
    if x.ndim != 2 or mat.shape[1] != x.shape[0]:
        raise DimensionError(f"sparse matmul shape mismatch: {mat.shape} @ {x.shape}")
    matT = mat.T.tocsr()

    def bw(g):
        return (matT @ g,)

    return _record(np.asarray(mat @ x.data), (x,), bw, "sparse_matmul")


def spmm(g, x: Tensor, normalized: bool = True) -> Tensor:
    """Neighbourhood mixing on a grid graph.

    With ``normalized`` the symmetric propagation matrix
    ``D^-1/2 (A + I) D^-1/2`` is used, otherwise the raw ``A + I``.
    """
    x = _as_tensor(x)
    if x.ndim != 2 or x.shape[0] != g.num_nodes:
        raise DimensionError(f"graph has {g.num_nodes} nodes but features have shape {x.shape}")
    return sparse_matmul(g.norm_csr if normalized else g.csr, x)


# ---------------------------------------------------------------------------
# Elementwise


def add(a, b) -> Tensor:
    """Sum of two same-shape tensors; a 1-D ``b`` broadcasts over rows of a 2-D ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.ndim == 0:
        return _record(a.data + b.data, (a, b), lambda g: (g, np.asarray(g.sum())), "add_scalar")
    if a.ndim == 0:
        return add(b, a)
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return _record(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)), "add_bias")
    raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product, or scaling by a scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    A, B = a.data, b.data
    if a.shape == b.shape:
        return _record(A * B, (a, b), lambda g: (g * B, g * A), "mul")
    if b.ndim == 0:
        return _record(A * B, (a, b), lambda g: (g * B, np.asarray((g * A).sum())), "mul_scalar")
    if a.ndim == 0:
        return mul(b, a)
    raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")


def relu(x: Tensor) -> Tensor:
    """Rectifier; the subgradient at exactly 0 is taken as 0."""
    x = _as_tensor(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)
    return _record(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


# ---------------------------------------------------------------------------
# Shape manipulation


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; all other dimensions must agree."""
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat needs at least one tensor")
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[d] != ref[d] for d in range(len(ref)) if d != ax):
            raise DimensionError(f"concat shape mismatch: {ref} vs {x.shape} on axis {axis}")
    if len(xs) == 1:
        return xs[0]
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs)))

    return _record(np.concatenate([x.data for x in xs], axis=ax), xs, bw, "concat")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {x.shape}")
    return _record(np.ascontiguousarray(x.data.T), (x,), lambda g: (g.T,), "transpose")


def tensor_sum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


# ---------------------------------------------------------------------------
# Convolution and resampling on C x H x W maps


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    """Output length of a strided convolution.

    A remainder of ``size + 2*pad - k`` modulo ``stride`` is tolerated only if
    the rows left uncovered are padding, so no real input is silently dropped.
    """
    span = size + 2 * pad - k
    if span < 0:
        raise ConfigurationError(f"kernel {k} larger than padded input {size + 2 * pad}")
    if span % stride > pad:
        raise ConfigurationError(
            f"non-integral output size: ({size}+2*{pad}-{k})/{stride}; adjust padding or input size"
        )
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) of a C x H x W map with K x C x kh x kw kernels."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    K, C, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"kernel dims must be odd, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ConfigurationError(f"stride must be 1 or 2, got {stride}")
    _, H, W = x.shape
    Ho = conv_output_size(H, kh, stride, pad)
    Wo = conv_output_size(W, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wd = w.data
    out = np.zeros((K, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            ys = slice(i, i + stride * (Ho - 1) + 1, stride)
            xs_ = slice(j, j + stride * (Wo - 1) + 1, stride)
            patch = xp[:, ys, xs_].reshape(C, -1)
            out += (wd[:, :, i, j] @ patch).reshape(K, Ho, Wo)

    def bw(g):
        gx = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        g2 = g.reshape(K, -1)
        for i in range(kh):
            for j in range(kw):
                ys = slice(i, i + stride * (Ho - 1) + 1, stride)
                xs_ = slice(j, j + stride * (Wo - 1) + 1, stride)
                patch = xp[:, ys, xs_].reshape(C, -1)
                gw[:, :, i, j] = g2 @ patch.T
                gx[:, ys, xs_] += (wd[:, :, i, j].T @ g2).reshape(C, Ho, Wo)
        if pad:
            gx = gx[:, pad:-pad, pad:-pad]
        return gx, gw

    return _record(out, (x, w), bw, "conv2d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of a C x H x W map by an integer factor."""
    x = _as_tensor(x)
    if factor == 1:
        return x
    C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def bw(g):
        return (g.reshape(C, H, factor, W, factor).sum(axis=(2, 4)),)

    return _record(out, (x,), bw, "upsample")


# ---------------------------------------------------------------------------
# Loss


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax, stabilised by subtracting the row maximum."""
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def log_softmax_nll(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``."""
    logits = _as_tensor(logits)
    t = np.asarray(targets).reshape(-1)
    if logits.ndim != 2 or t.shape[0] != logits.shape[0] or t.shape[0] < 1:
        raise DimensionError(f"logits {logits.shape} incompatible with {t.shape[0]} targets")
    if not np.issubdtype(t.dtype, np.integer):
        if not np.all(t == np.round(t)):
            raise IndexError("targets must be integer class indices")
        t = t.astype(np.int64)
    N, C = logits.shape
    if t.min() < 0 or t.max() >= C:
        raise IndexError(f"target out of range [0, {C})")
    lsm = log_softmax(logits.data)
    rows = np.arange(N)
    loss = -lsm[rows, t].mean()

    def bw(g):
        d = np.exp(lsm)
        d[rows, t] -= 1.0
        return (d * (float(g) / N),)

    return _record(np.asarray(loss), (logits,), bw, "log_softmax_nll")


# ---------------------------------------------------------------------------
# Backward pass


@dataclass
class Tape:
    """Recorded operations in topological order (inputs before consumers)."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Node] = []
        seen: set[int] = set()
        if out._node is None:
            return cls(order)
        stack = [(out._node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in reversed(node.inputs):
                if inp._node is not None and id(inp._node) not in seen:
                    stack.append((inp._node, False))
        return cls(order)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into every ``requires_grad`` leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor requiring gradients")
    if loss._node is None:
        loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones_like(loss.data)
        return Tape()
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
    return tape
