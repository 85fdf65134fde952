"""Dense-tensor engine with reverse-mode automatic differentiation.

Design:
  * A Tensor wraps a contiguous row-major numpy array (channel-first
    layout for images), a requires_grad flag and an optional gradient.
    Shape is fixed after construction.
  * A Graph is a tape: operations executed while a Graph is active (as a
    context manager) append one node each, in execution order. backward()
    walks the tape in exact reverse insertion order, so gradients are
    deterministic and two runs on the same inputs are bitwise identical.
  * Graphs are tracked per thread; independent graphs may run in
    parallel threads. Without an active graph, ops run forward-only.

Gradient-check tests use float64 tensors; training uses float32.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, ValidationError

__all__ = [
    "Tensor", "Graph", "backward", "sgd_step", "zero_grad",
    "conv2d", "maxpool2d", "concat_channels", "linear", "relu",
    "softmax_cross_entropy", "affine_rows", "shrink", "exp",
    "add", "sub", "mul", "scale", "sum_all", "mean_all",
    "global_avg_pool", "flatten", "channel_slice",
    "save_checkpoint", "load_checkpoint",
    "numerical_gradient", "max_relative_gradient_error", "scaled_uniform",
]


class Tensor:
    """N-dimensional array with optional gradient.

    data is stored row-major; shape is immutable after construction
    (mutate .data in place for parameter updates, never rebind its shape).
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

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

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        head = f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}"
        if self.name:
            head += f", name={self.name!r}"
        if self.requires_grad:
            head += ", requires_grad=True"
        return head + ")"

    # arithmetic sugar used by the loss plumbing
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


# ---------------------------------------------------------------------------
# tape

class _Node:
    __slots__ = ("op", "inputs", "input_ids", "output", "bwd")

    def __init__(self, op, inputs, input_ids, output, bwd):
        self.op = op
        self.inputs = inputs
        self.input_ids = input_ids  # producing node index, -1 for leaves
        self.output = output
        self.bwd = bwd


_local = threading.local()


def _stack():
    s = getattr(_local, "graphs", None)
    if s is None:
        s = []
        _local.graphs = s
    return s


class Graph:
    """Insertion-ordered operation tape for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._producer: dict[int, int] = {}

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack().pop()
        return False

    def node_of(self, tensor: Tensor):
        return self._producer.get(id(tensor))

    def backward(self, loss):
        backward(self, loss)


def _record(op: str, inputs: tuple, output: Tensor, bwd) -> Tensor:
    s = _stack()
    if s:
        g = s[-1]
        ids = tuple(g._producer.get(id(t), -1) for t in inputs)
        g.nodes.append(_Node(op, inputs, ids, output, bwd))
        g._producer[id(output)] = len(g.nodes) - 1
    return output


def _any_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def backward(graph: Graph, loss) -> None:
    """Populate .grad on every requires_grad tensor recorded in the graph.

    loss may be the loss Tensor or its node index. Tensors in the graph
    that do not influence the loss receive zero gradients. Gradients are
    overwritten, not accumulated across backward() calls.
    """
    if isinstance(loss, int):
        if not 0 <= loss < len(graph.nodes):
            raise ContractError(f"node id {loss} not in graph of {len(graph.nodes)} nodes")
        loss = graph.nodes[loss].output
    if not isinstance(loss, Tensor):
        raise ContractError(f"loss must be a Tensor or node id, got {type(loss).__name__}")
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if graph.node_of(loss) is None:
        raise ContractError("loss tensor was not produced by this graph")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        gout = grads.get(id(node.output))
        if gout is None or node.bwd is None:
            continue
        if not _any_grad(*node.inputs):
            continue
        in_grads = node.bwd(gout)
        for t, ig in zip(node.inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            prev = grads.get(id(t))
            if prev is None:
                grads[id(t)] = ig
            else:
                prev += ig

    seen = set()
    for node in graph.nodes:
        for t in node.inputs + (node.output,):
            if t.requires_grad and id(t) not in seen:
                seen.add(id(t))
                g = grads.get(id(t))
                t.grad = g if g is not None else np.zeros_like(t.data)


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def sgd_step(params: Sequence[Tensor], learning_rate: float, momentum: float,
             velocity: dict) -> Sequence[Tensor]:
    """One SGD step with momentum: v <- m*v - lr*grad; p <- p + v.

    velocity is keyed by position in params and mutated in place; pass the
    same dict (and param order) on every step. Params with
    requires_grad=False are skipped entirely.
    """
    for i, p in enumerate(params):
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise ContractError(f"parameter {p.name or f'params[{i}]'} has no gradient")
        v = velocity.get(i)
        if v is None:
            v = np.zeros_like(p.data)
            velocity[i] = v
        v *= momentum
        v -= learning_rate * p.grad
        p.data += v
    return params


# ---------------------------------------------------------------------------
# operations

def conv2d(x: Tensor, kernels_t: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation over a (C,H,W) input with (O,C,kh,kw) kernels."""
    if bias.ndim != 1 or bias.shape[0] != kernels_t.shape[0]:
        raise DimensionError(f"bias shape {bias.shape} does not match kernels {kernels_t.shape}")
    y = kernels.conv2d_forward(x.data, kernels_t.data, stride, padding)
    y += bias.data[:, None, None]
    out = Tensor(y, requires_grad=_any_grad(x, kernels_t, bias))
    xd, wd = x.data, kernels_t.data

    def bwd(g):
        gx, gw = kernels.conv2d_backward(xd, wd, g, stride, padding)
        return gx, gw, g.sum(axis=(1, 2))

    return _record("conv2d", (x, kernels_t, bias), out, bwd)


def maxpool2d(x: Tensor, window: int, stride: int, padding: int = 0) -> Tensor:
    """Max pooling; gradient routes to the first maximal element (row-major)."""
    y, argmax = kernels.maxpool2d_forward(x.data, window, stride, padding)
    out = Tensor(y, requires_grad=x.requires_grad)
    h, w = x.shape[1], x.shape[2]

    def bwd(g):
        return (kernels.maxpool2d_backward(argmax, g, h, w),)

    return _record("maxpool2d", (x,), out, bwd)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate (C_i,H,W) tensors along the channel axis, input order."""
    if len(inputs) == 0:
        raise ContractError("concat_channels needs at least one input")
    hw = inputs[0].shape[1:]
    for i, t in enumerate(inputs):
        if t.ndim != 3:
            raise DimensionError(f"input {i} is not 3-D: shape {t.shape}")
        if t.shape[1:] != hw:
            raise DimensionError(f"input {i} spatial dims {t.shape[1:]} differ from input 0 {hw}")
    out = Tensor(np.concatenate([t.data for t in inputs], axis=0),
                 requires_grad=_any_grad(*inputs))
    splits = np.cumsum([t.shape[0] for t in inputs])[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, splits, axis=0))

    return _record("concat_channels", tuple(inputs), out, bwd)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice channels [start, stop) of a (C,H,W) tensor."""
    if not (0 <= start < stop <= x.shape[0]):
        raise DimensionError(f"slice [{start}:{stop}) out of range for {x.shape[0]} channels")
    out = Tensor(x.data[start:stop].copy(), requires_grad=x.requires_grad)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _record("channel_slice", (x,), out, bwd)


def linear(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Fully-connected layer on a 1-D input: y = W x + b."""
    if x.ndim != 1 or weights.ndim != 2:
        raise DimensionError(f"linear expects 1-D input and 2-D weights, got {x.shape} and {weights.shape}")
    if weights.shape[1] != x.shape[0]:
        raise DimensionError(f"weights {weights.shape} do not match input length {x.shape[0]}")
    if bias.shape != (weights.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} does not match weights {weights.shape}")
    out = Tensor(weights.data @ x.data + bias.data, requires_grad=_any_grad(x, weights, bias))
    xd, wd = x.data, weights.data

    def bwd(g):
        return wd.T @ g, np.outer(g, xd), g.copy()

    return _record("linear", (x, weights, bias), out, bwd)


def affine_rows(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Row-batched linear map: (B,D) x (K,D) -> (B,K), optional bias."""
    if x.ndim != 2 or weights.ndim != 2 or weights.shape[1] != x.shape[1]:
        raise DimensionError(f"affine_rows shapes incompatible: {x.shape} and {weights.shape}")
    y = x.data @ weights.data.T
    if bias is not None:
        if bias.shape != (weights.shape[0],):
            raise DimensionError(f"bias shape {bias.shape} does not match weights {weights.shape}")
        y += bias.data
    inputs = (x, weights) if bias is None else (x, weights, bias)
    out = Tensor(y, requires_grad=_any_grad(*inputs))
    xd, wd = x.data, weights.data

    def bwd(g):
        gx = g @ wd
        gw = g.T @ xd
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _record("affine_rows", inputs, out, bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0), requires_grad=x.requires_grad)
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return _record("relu", (x,), out, bwd)


def shrink(a: Tensor, theta: Tensor) -> Tensor:
    """Soft threshold sign(a)*max(|a|-theta, 0), differentiable in a and theta.

    theta broadcasts along the last axis of a; the subgradient at the
    kinks |a| == theta is taken as 0.
    """
    if theta.ndim != 1 or a.shape[-1] != theta.shape[0]:
        raise DimensionError(f"theta shape {theta.shape} does not broadcast over {a.shape}")
    ad, td = a.data, theta.data
    out_data = np.sign(ad) * np.maximum(np.abs(ad) - td, 0)
    out = Tensor(out_data, requires_grad=_any_grad(a, theta))
    mask = np.abs(ad) > td

    def bwd(g):
        ga = g * mask
        gt = -(g * np.sign(ad) * mask)
        if a.ndim > 1:
            gt = gt.reshape(-1, td.shape[0]).sum(axis=0)
        return ga, gt

    return _record("shrink", (a, theta), out, bwd)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = Tensor(y, requires_grad=x.requires_grad)

    def bwd(g):
        return (g * y,)

    return _record("exp", (x,), out, bwd)


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op} operands differ in shape: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data, requires_grad=_any_grad(a, b))

    def bwd(g):
        return g.copy(), g.copy()

    return _record("add", (a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data, requires_grad=_any_grad(a, b))

    def bwd(g):
        return g.copy(), -g

    return _record("sub", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data, requires_grad=_any_grad(a, b))
    ad, bd = a.data, b.data

    def bwd(g):
        return g * bd, g * ad

    return _record("mul", (a, b), out, bwd)


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c, requires_grad=x.requires_grad)

    def bwd(g):
        return (g * c,)

    return _record("scale", (x,), out, bwd)


def shift(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data + c, requires_grad=x.requires_grad)

    def bwd(g):
        return (g.copy(),)

    return _record("shift", (x,), out, bwd)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(dtype=x.dtype)), requires_grad=x.requires_grad)

    def bwd(g):
        return (np.full_like(x.data, g.reshape(())),)

    return _record("sum_all", (x,), out, bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor(np.asarray(x.data.mean(dtype=x.dtype)), requires_grad=x.requires_grad)

    def bwd(g):
        return (np.full_like(x.data, g.reshape(()) / n),)

    return _record("mean_all", (x,), out, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dims of a (C,H,W) tensor -> (C,)."""
    if x.ndim != 3:
        raise DimensionError(f"global_avg_pool expects (C,H,W), got {x.shape}")
    out = Tensor(x.data.mean(axis=(1, 2)), requires_grad=x.requires_grad)
    n = x.shape[1] * x.shape[2]

    def bwd(g):
        return (np.broadcast_to(g[:, None, None] / n, x.shape).astype(x.dtype, copy=True),)

    return _record("global_avg_pool", (x,), out, bwd)


def flatten(x: Tensor) -> Tensor:
    out = Tensor(x.data.reshape(-1).copy(), requires_grad=x.requires_grad)
    shp = x.shape

    def bwd(g):
        return (g.reshape(shp).copy(),)

    return _record("flatten", (x,), out, bwd)


def softmax_cross_entropy(logits: Tensor, true_class: int) -> Tensor:
    """Negative log softmax probability of true_class, max-shifted for stability."""
    if logits.ndim != 1:
        raise DimensionError(f"logits must be 1-D, got shape {logits.shape}")
    k = logits.shape[0]
    if not 0 <= true_class < k:
        raise IndexError(f"true_class {true_class} out of range for {k} classes")
    z = logits.data - logits.data.max()
    ez = np.exp(z)
    p = ez / ez.sum()
    loss = np.asarray(-(z[true_class] - np.log(ez.sum())), dtype=logits.dtype)
    out = Tensor(loss, requires_grad=logits.requires_grad)

    def bwd(g):
        gl = p.copy()
        gl[true_class] -= 1.0
        return (gl * g.reshape(()),)

    return _record("softmax_cross_entropy", (logits,), out, bwd)


# ---------------------------------------------------------------------------
# initialization

def scaled_uniform(shape, fan_in: int, rng: np.random.Generator,
                   dtype=np.float32, name=None) -> Tensor:
    """Zero-mean uniform init with variance 2/fan_in."""
    a = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-a, a, size=shape).astype(dtype),
                  requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# checkpoint format: "DNT1", u64 tensor count, then per tensor
# u64 name length + utf-8 name, u64 rank, u64 dims, raw <f4 data.
# All integers little-endian; round-trips are bit-exact.

_MAGIC = b"DNT1"


def save_checkpoint(path, tensors) -> None:
    items = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(items)))
        for name, t in items:
            arr = t.data if isinstance(t, Tensor) else np.asarray(t)
            arr = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<Q", len(nb)))
            f.write(nb)
            f.write(struct.pack("<Q", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    def take(f, n, what):
        b = f.read(n)
        if len(b) != n:
            raise ValidationError(f"checkpoint truncated while reading {what}")
        return b

    out = {}
    with open(path, "rb") as f:
        if take(f, 4, "magic") != _MAGIC:
            raise ValidationError(f"{path} is not a DNT1 checkpoint")
        (count,) = struct.unpack("<Q", take(f, 8, "tensor count"))
        for _ in range(count):
            (nlen,) = struct.unpack("<Q", take(f, 8, "name length"))
            name = take(f, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<Q", take(f, 8, "rank"))
            shape = struct.unpack(f"<{rank}Q", take(f, 8 * rank, "shape"))
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(take(f, 4 * n, f"data of {name}"), dtype="<f4")
            out[name] = Tensor(data.reshape(shape).copy(), requires_grad=False, name=name)
    return out


# ---------------------------------------------------------------------------
# finite-difference gradient checking

def numerical_gradient(f: Callable[[], Tensor], t: Tensor, eps: float = 1e-3,
                       coords=None) -> np.ndarray:
    """Central finite differences of the scalar f() w.r.t. t.data.

    Only forward evaluations are used, so this is independent of the
    backward pass it is checking. coords restricts to flat indices.
    """
    flat = t.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f().item()
        flat[i] = old - eps
        fm = f().item()
        flat[i] = old
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(t.shape)


def _central_diff_at(f: Callable[[], Tensor], t: Tensor, i: int, eps: float) -> float:
    flat = t.data.reshape(-1)
    old = flat[i]
    flat[i] = old + eps
    fp = f().item()
    flat[i] = old - eps
    fm = f().item()
    flat[i] = old
    return (fp - fm) / (2.0 * eps)


def max_relative_gradient_error(f: Callable[[], Tensor], wrt: Sequence[Tensor],
                                eps: float = 1e-3, coords_per_tensor=None,
                                rng: np.random.Generator | None = None,
                                refine_above: float | None = None) -> float:
    """Compare analytic gradients of f() against central differences.

    Returns the max of |analytic - numeric| / max(|analytic|, |numeric|, 1)
    over all checked coordinates. coords_per_tensor samples that many flat
    indices per tensor (all coordinates when None).

    With refine_above set, coordinates whose error exceeds it are
    re-estimated at eps/2. If the two estimates agree, the mismatch is
    real and is kept; if they disagree, the difference quotient itself is
    unstable (a relu/maxpool kink inside the interval, where the loss is
    not differentiable), and the coordinate is excluded.
    """
    with Graph() as g:
        loss = f()
    backward(g, loss)
    analytic = [np.array(t.grad, dtype=np.float64) for t in wrt]

    worst = 0.0
    for t, ana in zip(wrt, analytic):
        if coords_per_tensor is None or t.size <= coords_per_tensor:
            coords = np.arange(t.size)
        else:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = np.sort(gen.choice(t.size, size=coords_per_tensor, replace=False))
        ana_flat = ana.reshape(-1)
        num = numerical_gradient(f, t, eps=eps, coords=coords).reshape(-1)
        for i in coords:
            a, n = ana_flat[i], num[i]
            err = abs(a - n) / max(abs(a), abs(n), 1.0)
            if refine_above is not None and err > refine_above:
                n2 = _central_diff_at(f, t, int(i), eps / 2.0)
                if abs(n - n2) > 0.5 * abs(a - n):
                    continue  # kink inside the interval: estimate unusable
                err = abs(a - n2) / max(abs(a), abs(n2), 1.0)
            worst = max(worst, float(err))
    return worst
