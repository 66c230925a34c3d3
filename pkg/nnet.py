"""
nnet: Minimal Reverse-Mode Numeric Core

Matrices in, gradients out. Every model in the toolkit (linguistic
transformer, autoregressive pitch decoder, diffusion denoiser) is built from
the handful of differentiable operations defined here.

- Tensor    - a numpy array plus the closure that pushes gradients to its parents
- ParamSet  - named 2-D parameters, gradient buffers and Adam moments
- forward_backward / grad_check / adam_step - the training contract

Model math runs in float32. Losses accumulate in float64. grad_check promotes
a copy of the parameters to float64 before differencing.
"""

import logging
import zlib
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigError, DivergedTrainingError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

ArrayLike = Union["Tensor", np.ndarray, float, int]


# =============================================================================
# TENSOR
# =============================================================================

class Tensor:
    """A value in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False,
                 parents: Tuple["Tensor", ...] = (), op: str = ""):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def _accum(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Reverse-mode sweep from this node over everything that requires grad."""
        # Iterative post-order; autoregressive graphs are far deeper than the
        # recursion limit.
        topo: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        self._accum(seed)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: float) -> "Tensor":
        return mul(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        return slice_basic(self, key)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op or 'leaf'})"


def const(x: ArrayLike, dtype=None) -> Tensor:
    """Wrap a value as a graph constant (no gradient)."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return Tensor(arr)


def _as_tensor(x: ArrayLike, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    live = tuple(p for p in parents if p.requires_grad)
    out = Tensor(data, requires_grad=bool(live), parents=live, op=op)
    if live:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape, module="nnet")


# =============================================================================
# ELEMENTWISE OPS
# =============================================================================

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_broadcast("add", a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_broadcast("sub", a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_broadcast("mul", a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        x._accum(g * (1.0 - y * y))

    return _make(y, (x,), backward, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)

    def backward(g):
        x._accum(g * y * (1.0 - y))

    return _make(y, (x,), backward, "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    y = x.data * s

    def backward(g):
        x._accum(g * (s * (1.0 + x.data * (1.0 - s))))

    return _make(y, (x,), backward, "silu")


def gated(filter_: Tensor, gate: Tensor) -> Tensor:
    """WaveNet gated activation tanh(filter) * sigmoid(gate)."""
    return tanh(filter_) * sigmoid(gate)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# =============================================================================
# STRUCTURAL OPS
# =============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape, module="nnet")

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(x: Tensor) -> Tensor:
    def backward(g):
        x._accum(g.T)

    return _make(x.data.T, (x,), backward, "transpose")


def slice_basic(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; fancy row gathers go through gather_rows."""
    out = x.data[key]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        x._accum(gx)

    return _make(np.array(out), (x,), backward, "slice")


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Rows x[index]; duplicate indices accumulate gradient."""
    index = np.asarray(index, dtype=np.int64)
    out = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        x._accum(gx)

    return _make(out, (x,), backward, "gather_rows")


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    return gather_rows(table, np.asarray(ids, dtype=np.int64))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = next((t for t in tensors if isinstance(t, Tensor)), None)
    tensors = [_as_tensor(t, ref) for t in tensors]
    for t in tensors[1:]:
        other_axes = [i for i in range(t.data.ndim) if i != axis]
        if t.data.ndim != tensors[0].data.ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in other_axes):
            raise ShapeError("concat", tensors[0].shape, t.shape, module="nnet")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, tuple(tensors), backward, "concat")


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        x._accum(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (1, x.shape[-1]) or beta.shape != gamma.shape:
        raise ShapeError("layer_norm", x.shape, gamma.shape, module="nnet")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    n = x.shape[-1]

    def backward(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=0, keepdims=True))
        if beta.requires_grad:
            beta._accum(g.sum(axis=0, keepdims=True))
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
            x._accum(dx)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


def conv1d(x: Tensor, w: Tensor, b: Optional[Tensor], kernel: int, dilation: int = 1) -> Tensor:
    """
    Non-causal 1-D convolution over time.

    x is T x C_in, w is (kernel*C_in) x C_out, b is 1 x C_out. Output keeps T
    frames (zero "same" padding). Applied as an im2col matmul.
    """
    if kernel % 2 != 1:
        raise ConfigError(f"conv1d kernel must be odd, got {kernel}", module="nnet")
    t_len, c_in = x.shape
    if w.shape[0] != kernel * c_in:
        raise ShapeError("conv1d", x.shape, w.shape, module="nnet")
    pad = dilation * (kernel - 1) // 2
    xp = np.pad(x.data, ((pad, pad), (0, 0)))
    cols = np.concatenate([xp[k * dilation:k * dilation + t_len] for k in range(kernel)], axis=1)
    out = cols @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if w.requires_grad:
            w._accum(cols.T @ g)
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=0, keepdims=True))
        if x.requires_grad:
            gcols = g @ w.data.T
            gxp = np.zeros_like(xp)
            for k in range(kernel):
                gxp[k * dilation:k * dilation + t_len] += gcols[:, k * c_in:(k + 1) * c_in]
            x._accum(gxp[pad:pad + t_len])

    return _make(out, parents, backward, "conv1d")


# =============================================================================
# LOSSES (float64 accumulation)
# =============================================================================

def _loss_weights(pred: Tensor, mask: Optional[np.ndarray]) -> Tuple[np.ndarray, float]:
    if mask is None:
        w = np.ones(pred.shape, dtype=np.float64)
    else:
        w = np.broadcast_to(np.asarray(mask, dtype=np.float64), pred.shape)
    return w, max(float(w.sum()), 1.0)


def mse_loss(pred: Tensor, target: ArrayLike, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean squared error over (masked) elements."""
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    if tgt.shape != pred.shape:
        raise ShapeError("mse_loss", pred.shape, tgt.shape, module="nnet")
    w, n = _loss_weights(pred, mask)
    diff = pred.data.astype(np.float64) - tgt.astype(np.float64)
    value = float((w * diff * diff).sum() / n)

    def backward(g):
        pred._accum(float(g) * 2.0 * w * diff / n)

    return _make(np.asarray(value), (pred,), backward, "mse")


def l1_loss(pred: Tensor, target: ArrayLike, mask: Optional[np.ndarray] = None) -> Tensor:
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    if tgt.shape != pred.shape:
        raise ShapeError("l1_loss", pred.shape, tgt.shape, module="nnet")
    w, n = _loss_weights(pred, mask)
    diff = pred.data.astype(np.float64) - tgt.astype(np.float64)
    value = float((w * np.abs(diff)).sum() / n)

    def backward(g):
        pred._accum(float(g) * w * np.sign(diff) / n)

    return _make(np.asarray(value), (pred,), backward, "l1")


def bce_with_logits(logits: Tensor, target: ArrayLike, mask: Optional[np.ndarray] = None) -> Tensor:
    tgt = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if tgt.shape != logits.shape:
        raise ShapeError("bce_with_logits", logits.shape, tgt.shape, module="nnet")
    w, n = _loss_weights(logits, mask)
    x = logits.data.astype(np.float64)
    value = float((w * (np.maximum(x, 0) - x * tgt + np.log1p(np.exp(-np.abs(x))))).sum() / n)

    def backward(g):
        logits._accum(float(g) * w * (_stable_sigmoid(x) - tgt) / n)

    return _make(np.asarray(value), (logits,), backward, "bce")


# =============================================================================
# PARAMETERS
# =============================================================================

class ParamSet:
    """
    Named 2-D parameters with gradient buffers and Adam moments.

    Initialization of each tensor is a pure function of (rng_seed, name), so
    adding a parameter never reshuffles the values of the others.
    """

    def __init__(self, rng_seed: int = 0, dtype=DEFAULT_DTYPE):
        self.rng_seed = int(rng_seed)
        self.dtype = np.dtype(dtype)
        self.tensors: Dict[str, Tensor] = {}
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step = 0

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.rng_seed, zlib.crc32(name.encode("utf-8"))])

    def add(self, name: str, rows: int, cols: int, init: str = "xavier",
            std: Optional[float] = None) -> Tensor:
        if name in self.tensors:
            raise ConfigError(f"parameter {name!r} registered twice", module="nnet")
        if init == "xavier":
            limit = np.sqrt(6.0 / (rows + cols))
            data = self._rng(name).uniform(-limit, limit, size=(rows, cols))
        elif init == "normal":
            data = self._rng(name).normal(0.0, std if std is not None else cols ** -0.5,
                                          size=(rows, cols))
        elif init == "zeros":
            data = np.zeros((rows, cols))
        elif init == "ones":
            data = np.ones((rows, cols))
        else:
            raise ConfigError(f"unknown init {init!r}", module="nnet")
        return self.put(name, data)

    def put(self, name: str, data: np.ndarray) -> Tensor:
        arr = np.array(data, dtype=self.dtype)
        if arr.ndim != 2:
            raise ShapeError("ParamSet.put", arr.shape, (-1, -1), module="nnet")
        t = Tensor(arr, requires_grad=True, op="param")
        t.grad = np.zeros_like(arr)
        self.tensors[name] = t
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> List[str]:
        return list(self.tensors)

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = np.zeros_like(t.data)

    def astype(self, dtype) -> "ParamSet":
        """Deep copy with parameters (and moments) cast to dtype."""
        out = ParamSet(self.rng_seed, dtype)
        for name, t in self.tensors.items():
            out.put(name, t.data)
            out.m[name] = self.m[name].astype(dtype)
            out.v[name] = self.v[name].astype(dtype)
        out.step = self.step
        return out

    def copy(self) -> "ParamSet":
        return self.astype(self.dtype)


# =============================================================================
# TRAINING CONTRACT
# =============================================================================

GraphFn = Callable[..., Tensor]


def forward_backward(graph_fn: GraphFn, params: ParamSet, *inputs) -> float:
    """
    Run graph_fn(params, *inputs) and fill every parameter's gradient buffer.

    Returns the scalar loss. Parameters the graph never reads keep an exact
    zero gradient.
    """
    params.zero_grad()
    loss = graph_fn(params, *inputs)
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ShapeError("forward_backward", getattr(loss, "shape", ()), (), module="nnet")
    value = float(loss.data)
    if not np.isfinite(value):
        raise DivergedTrainingError(f"non-finite loss {value}", module="nnet")
    if loss.requires_grad:
        loss.backward()
    return value


def grad_check(graph_fn: GraphFn, params: ParamSet, epsilon: float = 1e-4, *inputs,
               max_coords: int = 256, seed: int = 0) -> float:
    """
    Compare analytic gradients with five-point central differences.

    Every coordinate is checked when the model has at most max_coords
    scalars; otherwise a seeded random sample of max_coords coordinates.
    Returns max |g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8).
    """
    if not 1e-6 < epsilon < 1e-2:
        raise ConfigError(f"epsilon {epsilon} outside (1e-6, 1e-2)", module="nnet")
    p64 = params.astype(np.float64)
    forward_backward(graph_fn, p64, *inputs)
    analytic = {name: t.grad.copy() for name, t in p64.items()}

    sizes = [(name, t.data.size) for name, t in p64.items()]
    total = sum(s for _, s in sizes)
    if total <= max_coords:
        flat = np.arange(total)
    else:
        flat = np.sort(np.random.default_rng(seed).choice(total, size=max_coords, replace=False))
    offsets = np.cumsum([0] + [s for _, s in sizes])

    def loss_at() -> float:
        return float(graph_fn(p64, *inputs).data)

    worst = 0.0
    for k in flat:
        i = int(np.searchsorted(offsets, k, side="right") - 1)
        name = sizes[i][0]
        local = int(k - offsets[i])
        view = p64[name].data.reshape(-1)
        orig = view[local]
        vals = []
        for step in (2, 1, -1, -2):
            view[local] = orig + step * epsilon
            vals.append(loss_at())
        view[local] = orig
        fd = (-vals[0] + 8.0 * vals[1] - 8.0 * vals[2] + vals[3]) / (12.0 * epsilon)
        ga = float(analytic[name].reshape(-1)[local])
        rel = abs(ga - fd) / max(abs(ga), abs(fd), 1e-8)
        worst = max(worst, rel)
    return worst


def clip_grad_norm(params: ParamSet, max_norm: float = 1.0) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for t in params.tensors.values():
        total += float(np.sum(t.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if not np.isfinite(norm):
        raise DivergedTrainingError("non-finite gradient norm", module="nnet")
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for t in params.tensors.values():
            t.grad *= t.grad.dtype.type(scale)
    return norm


def adam_step(params: ParamSet, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update; moments and the step counter live in the ParamSet."""
    for name, t in params.items():
        if not np.all(np.isfinite(t.grad)):
            raise DivergedTrainingError(f"non-finite gradient in {name}", module="nnet")
    params.step += 1
    bc1 = 1.0 - beta1 ** params.step
    bc2 = 1.0 - beta2 ** params.step
    for name, t in params.items():
        g = t.grad
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        t.data -= update.astype(t.data.dtype)


# =============================================================================
# LAYER HELPERS
# =============================================================================

def add_dense(params: ParamSet, name: str, fan_in: int, fan_out: int, bias: bool = True) -> None:
    params.add(f"{name}.w", fan_in, fan_out)
    if bias:
        params.add(f"{name}.b", 1, fan_out, init="zeros")


def dense(params: ParamSet, name: str, x: Tensor) -> Tensor:
    y = matmul(x, params[f"{name}.w"])
    bias = f"{name}.b"
    return y + params[bias] if bias in params else y


def add_layer_norm(params: ParamSet, name: str, dim: int) -> None:
    params.add(f"{name}.g", 1, dim, init="ones")
    params.add(f"{name}.b", 1, dim, init="zeros")


def apply_layer_norm(params: ParamSet, name: str, x: Tensor) -> Tensor:
    return layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def add_conv(params: ParamSet, name: str, c_in: int, c_out: int, kernel: int) -> None:
    params.add(f"{name}.w", kernel * c_in, c_out)
    params.add(f"{name}.b", 1, c_out, init="zeros")


def apply_conv(params: ParamSet, name: str, x: Tensor, kernel: int, dilation: int = 1) -> Tensor:
    return conv1d(x, params[f"{name}.w"], params[f"{name}.b"], kernel, dilation)


def add_gru(params: ParamSet, name: str, in_dim: int, hidden: int) -> None:
    params.add(f"{name}.wx", in_dim, 3 * hidden)
    params.add(f"{name}.wh", hidden, 3 * hidden)
    params.add(f"{name}.b", 1, 3 * hidden, init="zeros")


def gru_step(params: ParamSet, name: str, x: Tensor, h: Tensor) -> Tensor:
    """One GRU cell update on 1-row inputs."""
    hidden = h.shape[1]
    gx = matmul(x, params[f"{name}.wx"]) + params[f"{name}.b"]
    gh = matmul(h, params[f"{name}.wh"])
    z = sigmoid(gx[:, :hidden] + gh[:, :hidden])
    r = sigmoid(gx[:, hidden:2 * hidden] + gh[:, hidden:2 * hidden])
    n = tanh(gx[:, 2 * hidden:] + r * gh[:, 2 * hidden:])
    return (1.0 - z) * n + z * h


def multi_head_attention(params: ParamSet, name: str, x: Tensor, n_heads: int) -> Tensor:
    """Bidirectional scaled dot-product self-attention over the rows of x."""
    d = x.shape[1]
    if d % n_heads:
        raise ConfigError(f"model dim {d} not divisible by {n_heads} heads", module="nnet")
    dh = d // n_heads
    q = dense(params, f"{name}.q", x)
    k = dense(params, f"{name}.k", x)
    v = dense(params, f"{name}.v", x)
    heads = []
    for h in range(n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        scores = matmul(q[:, cols], transpose(k[:, cols])) * (1.0 / np.sqrt(dh))
        heads.append(matmul(softmax(scores), v[:, cols]))
    return dense(params, f"{name}.o", concat(heads, axis=1))


def add_attention(params: ParamSet, name: str, d: int) -> None:
    for part in ("q", "k", "v", "o"):
        add_dense(params, f"{name}.{part}", d, d)


def sinusoidal_encoding(positions: np.ndarray, dim: int) -> np.ndarray:
    """Transformer-style sin/cos table, one row per position."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = positions * freqs[None, :]
    table = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        table = np.concatenate([table, np.zeros((table.shape[0], 1))], axis=1)
    return table


# =============================================================================
# TRAINING LOOP
# =============================================================================

@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 1e-3
    clip_norm: float = 1.0
    seed: int = 0
    log_every: int = 50
    crop_frames: int = 0


def train_loop(graph_fn: GraphFn, params: ParamSet, items: Sequence[Tuple[str, tuple]],
               cfg: TrainConfig, module: str,
               prepare: Optional[Callable[[tuple, np.random.Generator], tuple]] = None
               ) -> List[float]:
    """
    Plain single-item Adam loop.

    items are (utt_id, graph inputs). The visiting order is a seeded
    permutation per epoch, so the loss curve is a pure function of
    (params, items, cfg). prepare(inputs, rng) draws per-step randomness
    (diffusion step, noise, crops) from its own seeded stream.
    """
    rng = np.random.default_rng(cfg.seed)
    draw_rng = np.random.default_rng([cfg.seed, 1])
    order: List[int] = []
    history: List[float] = []
    for step in range(cfg.steps):
        if not order:
            order = rng.permutation(len(items)).tolist()
        utt_id, inputs = items[order.pop(0)]
        if prepare is not None:
            inputs = prepare(inputs, draw_rng)
        try:
            loss = forward_backward(graph_fn, params, *inputs)
            clip_grad_norm(params, cfg.clip_norm)
            adam_step(params, cfg.lr)
        except DivergedTrainingError as e:
            raise e.with_context(module=module, utt_id=utt_id)
        history.append(loss)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            logger.info("[TRAIN] %s step %d/%d loss %.6f", module, step + 1, cfg.steps, loss)
    return history


def evaluate_loss(graph_fn: GraphFn, params: ParamSet,
                  items: Sequence[Tuple[str, tuple]]) -> float:
    """Mean loss over items without touching gradients."""
    if not items:
        return float("nan")
    return float(np.mean([float(graph_fn(params, *inputs).data) for _, inputs in items]))
