"""Dense tensors with reverse-mode automatic differentiation.

Gradients are recorded on an explicit tape (`Graph`): operations append
nodes in execution order, so the node list is topologically sorted by
construction and the backward pass is a single reverse sweep. Nothing is
recorded unless a graph is active, which keeps plain numeric evaluation
(finite differences, oracles, eval-mode forwards) free of bookkeeping.

Usage:

    with record() as g:
        loss = mse_like_expression(params)
    g.backward(loss)        # populates .grad on participating tensors
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ArgumentError, GraphError, InputTooShortError, NumericError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class Tensor:
    """A dense float array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            dtype = DTYPES.get(dtype, dtype)
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPE_NAMES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # Operator sugar; constants adopt this tensor's dtype.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Node:
    """One executed operation: inputs, output, and the local backward rule."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Ordered record of operations; one backward sweep per forward recording."""

    def __init__(self, mode: str = "train"):
        if mode not in ("train", "eval"):
            raise ArgumentError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.nodes: list[Node] = []
        self.mode = mode
        self._consumed = False

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(tensor) into .grad for every participant.

        The tape is consumed: calling backward a second time raises
        GraphError rather than silently re-accumulating.
        """
        if self._consumed:
            raise GraphError("backward already ran on this graph; re-run the forward pass")
        if root.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        tensors: dict[int, Tensor] = {id(root): root}
        for node in reversed(self.nodes):
            out_grad = grads.pop(id(node.output), None)
            tensors.pop(id(node.output), None)
            if out_grad is None:
                continue
            contribs = node.backward_fn(out_grad)
            for inp, contrib in zip(node.inputs, contribs):
                if contrib is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib
                    tensors[key] = inp
        for key, g in grads.items():
            t = tensors[key]
            if not t.requires_grad:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g


_GRAPH_STACK: list[Graph] = []


def active_graph() -> Graph | None:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


@contextlib.contextmanager
def record(mode: str = "train"):
    """Activate a fresh tape; ops executed inside are differentiable."""
    g = Graph(mode=mode)
    _GRAPH_STACK.append(g)
    try:
        yield g
    finally:
        _GRAPH_STACK.pop()


@contextlib.contextmanager
def no_grad():
    """Suspend recording inside an active `record` block."""
    _GRAPH_STACK.append(None)  # type: ignore[arg-type]
    try:
        yield
    finally:
        _GRAPH_STACK.pop()


def _register(op: str, inputs: tuple[Tensor, ...], out: Tensor, backward_fn) -> Tensor:
    g = active_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        g.nodes.append(Node(op, inputs, out, backward_fn))
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(op: str, *ts: Tensor) -> None:
    dtypes = {t.data.dtype for t in ts}
    if len(dtypes) > 1:
        names = [_DTYPE_NAMES[t.data.dtype] for t in ts]
        raise ArgumentError(f"{op}: mixed dtypes {names}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and reduction ops


def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_same_dtype("add", a, b)
    out = Tensor(a.data + b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _register("add", (a, b), out, backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_same_dtype("sub", a, b)
    out = Tensor(a.data - b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _register("sub", (a, b), out, backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_same_dtype("mul", a, b)
    out = Tensor(a.data * b.data)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _register("mul", (a, b), out, backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=False),)

    return _register("sum", (x,), out, backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.data.dtype, copy=False),)

    return _register("mean", (x,), out, backward)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU (the wav2vec2-family activation)."""
    xd = x.data
    u = _GELU_C * (xd + _GELU_A * xd**3)
    t = np.tanh(u)
    out = Tensor(0.5 * xd * (1.0 + t))

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * xd**2)
        local = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * du
        return (g * local,)

    return _register("gelu", (x,), out, backward)


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data))

    def backward(g):
        return (g * out.data,)

    return _register("exp", (x,), out, backward)


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("logaddexp", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"logaddexp: shapes {a.shape} vs {b.shape}")
    out = Tensor(np.logaddexp(a.data, b.data))

    def backward(g):
        # Where out == -inf both inputs were -inf; weight is 0, not nan.
        with np.errstate(invalid="ignore"):
            wa = np.where(np.isneginf(out.data), 0.0, np.exp(a.data - out.data))
            wb = np.where(np.isneginf(out.data), 0.0, np.exp(b.data - out.data))
        return g * wa, g * wb

    return _register("logaddexp", (a, b), out, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericError("softmax: NaN in input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _register("softmax", (x,), out, backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericError("log_softmax: NaN in input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(shifted - lse)

    def backward(g):
        return (g - np.exp(out.data) * g.sum(axis=axis, keepdims=True),)

    return _register("log_softmax", (x,), out, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must be ({d},), got {gamma.shape} and {beta.shape}")
    if eps <= 0:
        raise ArgumentError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(gamma.data * xhat + beta.data)

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=lead)
        ggamma = (g * xhat).sum(axis=lead)
        gxhat = g * gamma.data
        gx = inv * (gxhat
                    - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _register("layer_norm", (x, gamma, beta), out, backward)


# ---------------------------------------------------------------------------
# Structural ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D operands or identical leading batch dims."""
    _check_same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return ga, gb

    return _register("matmul", (a, b), out, backward)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def backward(g):
        return (g.reshape(x.shape),)

    return _register("reshape", (x,), out, backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(x.data.transpose(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _register("transpose", (x,), out, backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    _check_same_dtype("concat", *tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _register("concat", tensors, out, backward)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along axis 0 with an int or 1-D integer index array."""
    if axis != 0:
        raise ArgumentError("take: only axis 0 is supported")
    scalar = isinstance(indices, (int, np.integer))
    idx = int(indices) if scalar else np.asarray(indices, dtype=np.int64)
    out = Tensor(x.data[idx])

    def backward(g):
        gx = np.zeros_like(x.data)
        if scalar:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _register("take", (x,), out, backward)


def conv1d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) strided 1-D convolution.

    x: [T, c_in], kernel: [c_out, c_in, k] -> [T', c_out] with
    T' = (T - k) // stride + 1.
    """
    _check_same_dtype("conv1d", x, kernel)
    if x.ndim != 2 or kernel.ndim != 3:
        raise ShapeError(f"conv1d: expected x [T,c_in] and kernel [c_out,c_in,k], got {x.shape} and {kernel.shape}")
    if stride < 1:
        raise ArgumentError(f"conv1d: stride must be >= 1, got {stride}")
    T, c_in = x.shape
    c_out, kc_in, k = kernel.shape
    if kc_in != c_in:
        raise ShapeError(f"conv1d: channel mismatch, x has {c_in} kernel expects {kc_in}")
    if T < k:
        raise InputTooShortError(f"conv1d: input length {T} shorter than kernel {k}")
    windows = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=0)[::stride]  # [T', c_in, k]
    out = Tensor(np.einsum("tck,ock->to", windows, kernel.data, optimize=True))
    t_out = out.shape[0]

    def backward(g):
        gkernel = np.einsum("to,tck->ock", g, windows, optimize=True)
        contrib = np.einsum("to,ock->tck", g, kernel.data, optimize=True)
        gx = np.zeros_like(x.data)
        for dt in range(k):
            gx[dt:dt + (t_out - 1) * stride + 1:stride] += contrib[:, :, dt]
        return gx, gkernel

    return _register("conv1d", (x, kernel), out, backward)


def toposort_check(g: Graph) -> bool:
    """True iff every node's inputs are leaves or outputs of earlier nodes."""
    produced: set[int] = set()
    leaves: set[int] = set()
    for node in g.nodes:
        for inp in node.inputs:
            if id(inp) not in produced:
                leaves.add(id(inp))
        if id(node.output) in leaves:
            return False
        produced.add(id(node.output))
    return True
