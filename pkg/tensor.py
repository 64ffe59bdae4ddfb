"""
Tensor Module - Dense tensors with reverse-mode differentiation

Ops record onto the active Tape (see `recording`) whenever an input requires
grad. `backward` replays the recorded adjoints in reverse execution order.
Training and evaluation run in 32-bit; `precision(np.float64)` switches the
default element type for gradient checking.
"""
import contextlib
import logging
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from dcgct import ShapeError, NumericalError, GradientError, check_finite_enabled

log = logging.getLogger("dcgct.tensor")

_default_dtype = np.float32
_active_tapes: List["Tape"] = []
_corrupt_ops = set()

ArrayLike = Union[np.ndarray, float, int, Sequence]


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the element type of newly created tensors"""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = previous


@contextlib.contextmanager
def corrupt_adjoint(op_name: str):
    """Debug hook: scale the adjoint of one op by 1.5 (negative control for grad checks)"""
    _corrupt_ops.add(op_name)
    try:
        yield
    finally:
        _corrupt_ops.discard(op_name)


class Tensor:
    """N-dimensional real array with optional gradient recording"""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = "", dtype=None):
        self.data = np.array(data, dtype=dtype or _default_dtype)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, name=self.name, dtype=dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor / tensor is not supported")
        return mul(self, 1.0 / float(other))


class Node:
    __slots__ = ("op", "out", "inputs", "adjoint")

    def __init__(self, op: str, out: Tensor, inputs: Sequence[Tensor], adjoint: Callable):
        self.op = op
        self.out = out
        self.inputs = tuple(inputs)
        self.adjoint = adjoint


class Tape:
    """Ordered record of executed ops; single writer"""

    def __init__(self):
        self.nodes: List[Node] = []

    def __len__(self):
        return len(self.nodes)

    def record(self, node: Node):
        node.out._tape = self
        self.nodes.append(node)

    def reset(self):
        for node in self.nodes:
            node.out._tape = None
        self.nodes = []


@contextlib.contextmanager
def recording(tape: Optional[Tape] = None):
    """Record ops executed inside the block onto `tape`"""
    tape = tape if tape is not None else Tape()
    _active_tapes.append(tape)
    try:
        yield tape
    finally:
        _active_tapes.pop()


def is_recording() -> bool:
    return bool(_active_tapes)


def as_tensor(x: ArrayLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _finish(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], adjoint: Callable) -> Tensor:
    if check_finite_enabled() and not np.all(np.isfinite(out_data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise NumericalError(f"non-finite output from {op} on finite inputs")
    needs_grad = is_recording() and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad, dtype=out_data.dtype)
    if needs_grad:
        _active_tapes[-1].record(Node(op, out, inputs, adjoint))
    return out


def _result_dtype(*tensors: Tensor):
    return np.result_type(*[t.data.dtype for t in tensors])


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = (a.data + b.data).astype(_result_dtype(a, b), copy=False)
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _finish("add", out, (a, b), adjoint)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = (a.data - b.data).astype(_result_dtype(a, b), copy=False)
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _finish("sub", out, (a, b), adjoint)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b, dtype=a.dtype)
    try:
        out = (a.data * b.data).astype(_result_dtype(a, b), copy=False)
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def adjoint(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _finish("mul", out, (a, b), adjoint)


# Linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Batched matrix product a[..., m, k] @ b[..., k, n]

    Batch dims broadcast; adjoints dA = dC·Bᵀ and dB = Aᵀ·dC are summed back
    over broadcast dims.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}")

    def adjoint(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        db = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if da is None else _unbroadcast(da, a.shape),
                None if db is None else _unbroadcast(db, b.shape))
    return _finish("matmul", out, (a, b), adjoint)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight (+ bias); per-joint linear map over the channel axis"""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# Reductions and shape ops

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)
    return _finish("sum", out, (x,), adjoint)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}")

    def adjoint(g):
        return (g.reshape(x.shape),)
    return _finish("reshape", out, (x,), adjoint)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def adjoint(g):
        return (np.transpose(g, inverse),)
    return _finish("transpose", np.transpose(x.data, axes), (x,), adjoint)


def select(x: Tensor, index: int, axis: int) -> Tensor:
    """Pick one slice along `axis`, dropping that axis"""
    x = as_tensor(x)
    axis = axis % x.ndim
    if not -x.shape[axis] <= index < x.shape[axis]:
        raise ShapeError(f"index {index} out of range for axis {axis} of {x.shape}")
    out = np.take(x.data, index, axis=axis)

    def adjoint(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        slicer = [slice(None)] * x.ndim
        slicer[axis] = index
        full[tuple(slicer)] = g
        return (full,)
    return _finish("select", out, (x,), adjoint)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the trailing (channel) axis"""
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise ShapeError(f"concat_channels: leading dims differ: {xs[0].shape} vs {x.shape}")
    sizes = [x.shape[-1] for x in xs]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([x.data for x in xs], axis=-1)

    def adjoint(g):
        return tuple(g[..., offsets[i]:offsets[i + 1]] for i in range(len(xs)))
    return _finish("concat_channels", out, xs, adjoint)


def split_channels(x: Tensor, sizes: Sequence[int]) -> List[Tensor]:
    """Split the trailing axis into consecutive chunks of `sizes`"""
    x = as_tensor(x)
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes) or np.sum(sizes) != x.shape[-1]:
        raise ShapeError(f"split_channels: sizes {sizes} do not add up to {x.shape[-1]} channels")
    parts = []
    start = 0
    for size in sizes:
        lo, hi = start, start + size

        def adjoint(g, lo=lo, hi=hi):
            full = np.zeros(x.shape, dtype=g.dtype)
            full[..., lo:hi] = g
            return (full,)
        parts.append(_finish("split_channels", x.data[..., lo:hi].copy(), (x,), adjoint))
        start = hi
    return parts


# Nonlinearities and normalization

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the trailing axis with max subtraction"""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def adjoint(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return _finish("softmax_rows", y, (x,), adjoint)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU x·Φ(x)"""
    x = as_tensor(x)
    cdf = special.ndtr(x.data).astype(x.dtype)
    out = x.data * cdf

    def adjoint(g):
        pdf = np.exp(-0.5 * x.data ** 2) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x.data * pdf),)
    return _finish("gelu", out, (x,), adjoint)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each row over the channel axis, then scale by gamma and shift by beta"""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ShapeError("layer_norm: eps must be > 0")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine shape must be ({x.shape[-1]},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def adjoint(g):
        reduce_axes = tuple(range(x.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta
    return _finish("layer_norm", out, (x, gamma, beta), adjoint)


class RunningStats:
    """Batch-norm running mean/variance; None until first populated"""

    def __init__(self, channels: int, momentum: float = 0.1, initialized: bool = True):
        self.channels = channels
        self.momentum = momentum
        self.mean: Optional[np.ndarray] = np.zeros(channels) if initialized else None
        self.var: Optional[np.ndarray] = np.ones(channels) if initialized else None

    @property
    def ready(self) -> bool:
        return self.mean is not None and self.var is not None

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray):
        if not self.ready:
            self.mean = batch_mean.astype(np.float64).copy()
            self.var = batch_var.astype(np.float64).copy()
            return
        m = self.momentum
        self.mean = (1.0 - m) * self.mean + m * batch_mean
        self.var = (1.0 - m) * self.var + m * batch_var


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_stats: RunningStats,
               mode: str = "train", eps: float = 1e-5) -> Tensor:
    """
    Per-channel normalization over all leading (batch x joint) axes

    Args:
        x: Tensor [B, N, C]
        gamma, beta: Affine [C]
        running_stats: Updated in train mode, consumed in eval mode
        mode: "train" or "eval"
        eps: Variance guard

    Returns:
        Normalized tensor, same shape
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    channels = x.shape[-1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batch_norm: affine shape must be ({channels},)")
    axes = tuple(range(x.ndim - 1))
    count = int(np.prod(x.shape[:-1]))

    if mode == "train":
        if count < 2:
            raise ShapeError(f"batch_norm: train mode needs at least 2 values per channel, got {count}")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_stats.update(mu, var)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        out = (xhat * gamma.data + beta.data).astype(x.dtype)

        def adjoint(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            gx = g * gamma.data
            dx = inv * (gx - gx.mean(axis=axes) - xhat * (gx * xhat).mean(axis=axes))
            return dx.astype(x.dtype), dgamma, dbeta
        return _finish("batch_norm", out, (x, gamma, beta), adjoint)

    if mode != "eval":
        raise ShapeError(f"batch_norm: unknown mode {mode!r}")
    if not running_stats.ready:
        raise NumericalError("batch_norm: eval mode before any running statistics exist")
    inv = (1.0 / np.sqrt(running_stats.var + eps)).astype(x.dtype)
    xhat = (x.data - running_stats.mean.astype(x.dtype)) * inv
    out = xhat * gamma.data + beta.data

    def adjoint_eval(g):
        return g * gamma.data * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    return _finish("batch_norm", out, (x, gamma, beta), adjoint_eval)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity when rate is 0 or not training"""
    if rate <= 0.0 or not training:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep, dtype=x.dtype))


def joint_norm(x: Tensor) -> Tensor:
    """Euclidean norm over the trailing axis; zero-length vectors get a zero adjoint"""
    x = as_tensor(x)
    norm = np.sqrt((x.data ** 2).sum(axis=-1))

    def adjoint(g):
        safe = np.where(norm > 0, norm, 1.0)
        scale = np.where(norm > 0, g / safe, 0.0)
        return (x.data * scale[..., None],)
    return _finish("joint_norm", norm, (x,), adjoint)


# Differentiation

def backward(tape: Tape, loss: Tensor):
    """
    Populate .grad of every requires_grad leaf reachable from `loss`

    Leaf grads accumulate across calls; call zero_grad on the leaves to reset.
    """
    if loss.size != 1:
        raise GradientError(f"loss must be a scalar, got shape {loss.shape}")
    end = None
    for i in range(len(tape.nodes) - 1, -1, -1):
        if tape.nodes[i].out is loss:
            end = i
            break
    if end is None:
        raise GradientError("loss was not recorded on this tape")

    pending = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(tape.nodes[:end + 1]):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        input_grads = node.adjoint(g)
        if node.op in _corrupt_ops:
            input_grads = tuple(None if ig is None else ig * 1.5 for ig in input_grads)
        for inp, ig in zip(node.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            ig = np.asarray(ig, dtype=inp.dtype).reshape(inp.shape)
            if inp._tape is tape:
                key = id(inp)
                pending[key] = ig if key not in pending else pending[key] + ig
            else:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               coords: Optional[Sequence[int]] = None) -> float:
    """
    Compare recorded adjoints of a scalar function with central differences

    Args:
        f: Deterministic function mapping x to a scalar Tensor
        x: Point of evaluation; evaluated in 64-bit
        eps: Finite-difference step
        coords: Optional flat indices to check (default: all)

    Returns:
        Worst relative error; absolute error where both magnitudes are below 1e-8
    """
    with precision(np.float64):
        point = Tensor(x.data, requires_grad=True, dtype=np.float64)
        with recording() as tape:
            y = f(point)
        backward(tape, y)
        analytic = np.zeros(point.shape) if point.grad is None else point.grad.reshape(point.shape)

        base = point.data.copy()

        def evaluate(values: np.ndarray) -> float:
            return f(Tensor(values, dtype=np.float64)).item()

        first, second = evaluate(base), evaluate(base)
        if first != second:
            raise GradientError("grad_check: function is not deterministic")

        flat = base.reshape(-1)
        indices = range(flat.size) if coords is None else coords
        worst = 0.0
        for i in indices:
            plus, minus = flat.copy(), flat.copy()
            plus[i] += eps
            minus[i] -= eps
            numeric = (evaluate(plus.reshape(base.shape)) - evaluate(minus.reshape(base.shape))) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            scale = max(abs(a), abs(numeric))
            err = abs(a - numeric) if scale < 1e-8 else abs(a - numeric) / scale
            worst = max(worst, err)
    return worst
