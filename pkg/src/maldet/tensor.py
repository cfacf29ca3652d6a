"""Shaped float64 arrays with reverse-mode gradients.

Implements exactly the operations the classifier needs: matrix multiply,
broadcast add/multiply, sigmoid/tanh/relu/log/clip, embedding-row gather,
sliding-window unfold, windowed max pooling, concatenation, reshape,
transpose, time-step selection, and scalar reductions. Each operation
records a backward closure on the output; :func:`backward` replays the
closures in exact reverse execution order and accumulates gradients
additively across fan-out.

Every array is float64 and every op output is checked for finiteness; a
NaN or Inf anywhere raises :class:`NumericError` at the op that produced
it, not later.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DisconnectedGraph, NumericError, ShapeMismatch, UnknownId

__all__ = [
    "Rng", "Tensor", "no_grad", "as_tensor", "backward",
    "matmul", "add", "mul", "sigmoid", "tanh", "relu", "log", "clip",
    "gather_rows", "unfold_windows", "max_pool_1d", "take_time",
    "concat", "reshape", "transpose", "mean", "sum", "init_uniform",
]

_builtin_sum = sum


# ---------------------------------------------------------------------------
# Deterministic RNG (splitmix64, counter based)
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _splitmix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer on uint64 arrays; multiplication wraps mod 2^64
    x = (x ^ (x >> np.uint64(30))) * np.uint64(_MIX1)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(_MIX2)
    return x ^ (x >> np.uint64(31))


class Rng:
    """Deterministic random stream: splitmix64 applied to seed + n*gamma.

    The i-th draw (1-based) is splitmix64(seed + i*0x9E3779B97F4A7C15 mod 2^64),
    so the stream is identical on every platform and can be generated in
    vectorized blocks without changing the values.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._drawn = 0

    def _raw(self, count: int) -> np.ndarray:
        idx = np.arange(self._drawn + 1, self._drawn + count + 1, dtype=np.uint64)
        self._drawn += count
        return _splitmix64(np.uint64(self.seed) + idx * np.uint64(_GAMMA))

    def next_u64(self) -> int:
        return int(self._raw(1)[0])

    def randbelow(self, k: int) -> int:
        """Integer in [0, k). Modulo bias is negligible for k << 2^64."""
        if k <= 0:
            raise ValueError("k must be positive")
        return self.next_u64() % k

    def random(self, shape: Sequence[int] | tuple = ()) -> np.ndarray | float:
        """Doubles in the open interval (0, 1)."""
        shape = tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = ((self._raw(n) >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
        return u.reshape(shape) if shape else float(u[0])

    def uniform(self, shape, low: float, high: float) -> np.ndarray:
        return low + (high - low) * self.random(tuple(shape))

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of arange(n)."""
        arr = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.next_u64() % (i + 1)
            arr[i], arr[j] = arr[j], arr[i]
        return arr

    def choose(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), via partial Fisher-Yates."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot choose {k} from {n}")
        arr = np.arange(n)
        for i in range(k):
            j = i + self.next_u64() % (n - i)
            arr[i], arr[j] = arr[j], arr[i]
        return arr[:k].copy()


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------

_seq_counter = itertools.count(1)
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, ctx: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {ctx}")


class Tensor:
    """Row-major float64 array, optionally tracked for reverse-mode gradients.

    Operations never mutate their inputs. ``grad`` is populated by
    :func:`backward` and holds the accumulated gradient of the last loss.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._seq = next(_seq_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, ctx: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=np.float64)
    _check_finite(arr, ctx)
    out.data = arr
    out.grad = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward_fn if track else None
    out._seq = next(_seq_counter)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _ensure_grad(t: Tensor) -> np.ndarray:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    return t.grad


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum the gradient over axes the forward broadcast added or stretched
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss w.r.t. every named parameter.

    Visits recorded ops in exact reverse execution order; fan-out gradients
    accumulate additively. Raises :class:`DisconnectedGraph` if any named
    parameter cannot be reached from the loss.
    """
    if loss.data.size != 1:
        raise ShapeMismatch(f"loss must be scalar, got shape {loss.data.shape}")
    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    missing = sorted(name for name, p in params.items() if id(p) not in seen)
    if missing:
        raise DisconnectedGraph("parameters unreachable from loss: " + ", ".join(missing))
    nodes.sort(key=lambda t: t._seq, reverse=True)
    for t in nodes:
        t.grad = None
    loss.grad = np.ones_like(loss.data)
    for t in nodes:
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()}


# ---------------------------------------------------------------------------
# Forward ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """a @ b for a of rank 2 or 3 (leading batch axis) and b of rank 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            if a.ndim == 2:
                _accum(b, a.data.T @ g)
            else:
                _accum(b, np.tensordot(a.data, g, axes=([0, 1], [0, 1])))

    return _make(out, (a, b), bwd, "matmul")


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"add: incompatible shapes {a.shape} and {b.shape}") from None
    out = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), bwd, "add")


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"mul: incompatible shapes {a.shape} and {b.shape}") from None
    out = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bwd, "mul")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), bwd, "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - out * out))

    return _make(out, (a,), bwd, "tanh")


def relu(a) -> Tensor:
    """max(0, x); subgradient at exactly 0 is defined as 0."""
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        _accum(a, g * (a.data > 0))

    return _make(out, (a,), bwd, "relu")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log: domain requires strictly positive values")
    out = np.log(a.data)

    def bwd(g):
        _accum(a, g / a.data)

    return _make(out, (a,), bwd, "log")


def clip(a, low: float, high: float) -> Tensor:
    """Clamp to [low, high]; gradient passes only through the interior."""
    a = as_tensor(a)
    out = np.clip(a.data, low, high)
    interior = (a.data > low) & (a.data < high)

    def bwd(g):
        _accum(a, g * interior)

    return _make(out, (a,), bwd, "clip")


def gather_rows(e, ids) -> Tensor:
    """Row lookup e[ids]; ids may have any shape. Gradient scatter-adds."""
    e = as_tensor(e)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise UnknownId("gather_rows: ids must be integers")
    if e.ndim != 2:
        raise ShapeMismatch(f"gather_rows: table must be rank 2, got {e.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= e.shape[0]):
        bad = int(ids.min()) if ids.min() < 0 else int(ids.max())
        raise UnknownId(f"gather_rows: id {bad} outside table with {e.shape[0]} rows")
    out = e.data[ids]

    def bwd(g):
        if e.requires_grad:
            np.add.at(_ensure_grad(e), ids, g)

    return _make(out, (e,), bwd, "gather_rows")


def _window_index(length: int, window: int, stride: int, op: str) -> np.ndarray:
    if window < 1 or stride < 1:
        raise ShapeMismatch(f"{op}: window and stride must be >= 1")
    if length < window:
        raise ShapeMismatch(f"{op}: window {window} exceeds length {length}")
    out_len = (length - window) // stride + 1
    return np.arange(out_len)[:, None] * stride + np.arange(window)[None, :]


def unfold_windows(a, window: int, stride: int = 1) -> Tensor:
    """Sliding windows over the time axis of (..., L, D) -> (..., L', window*D)."""
    a = as_tensor(a)
    if a.ndim not in (2, 3):
        raise ShapeMismatch(f"unfold_windows: rank 2 or 3 expected, got {a.shape}")
    length, depth = a.shape[-2], a.shape[-1]
    idx = _window_index(length, window, stride, "unfold_windows")
    win = a.data[..., idx, :]
    out = win.reshape(a.shape[:-2] + (idx.shape[0], window * depth))

    def bwd(g):
        if not a.requires_grad:
            return
        gw = g.reshape(a.shape[:-2] + (idx.shape[0], window, depth))
        ga = _ensure_grad(a)
        if a.ndim == 2:
            np.add.at(ga, (idx,), gw)
        else:
            np.add.at(ga, (slice(None), idx), gw)

    return _make(out, (a,), bwd, "unfold_windows")


def max_pool_1d(a, window: int, stride: int) -> Tensor:
    """Windowed max over the time axis of (..., L, F), per channel.

    Output length is floor((L - window) / stride) + 1. The gradient routes
    entirely to the argmax input position; ties go to the earliest index.
    """
    a = as_tensor(a)
    if a.ndim not in (2, 3):
        raise ShapeMismatch(f"max_pool_1d: rank 2 or 3 expected, got {a.shape}")
    length, channels = a.shape[-2], a.shape[-1]
    idx = _window_index(length, window, stride, "max_pool_1d")
    out_len = idx.shape[0]
    win = a.data[..., idx, :]                                    # (..., L', window, F)
    am = np.argmax(win, axis=-2)                                 # first max wins ties
    out = np.take_along_axis(win, am[..., None, :], axis=-2).squeeze(-2)
    src = (np.arange(out_len) * stride)[:, None] + am            # time index per output

    def bwd(g):
        if not a.requires_grad:
            return
        lead = a.shape[:-2]
        rows = int(np.prod(lead, dtype=np.int64)) * channels if lead else channels
        buf = np.zeros((rows, length))
        src2 = np.moveaxis(src, -1, -2).reshape(rows, out_len)
        g2 = np.moveaxis(g, -1, -2).reshape(rows, out_len)
        np.add.at(buf, (np.arange(rows)[:, None], src2), g2)
        ga = buf.reshape(lead + (channels, length))
        _accum(a, np.moveaxis(ga, -1, -2))

    return _make(out, (a,), bwd, "max_pool_1d")


def take_time(a, t: int) -> Tensor:
    """Select one time step: (..., L, D)[..., t, :] -> (..., D)."""
    a = as_tensor(a)
    if a.ndim < 2 or not -a.shape[-2] <= t < a.shape[-2]:
        raise ShapeMismatch(f"take_time: index {t} invalid for shape {a.shape}")
    out = a.data[..., t, :]

    def bwd(g):
        if a.requires_grad:
            ga = _ensure_grad(a)
            ga[..., t, :] += g

    return _make(out, (a,), bwd, "take_time")


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    """Concatenate along an existing axis."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeMismatch("concat: need at least one tensor")
    nd = ts[0].ndim
    ax = axis if axis >= 0 else axis + nd
    if not 0 <= ax < nd:
        raise ShapeMismatch(f"concat: axis {axis} invalid for rank {nd}")
    ref = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if t.ndim != nd or other[:ax] + other[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeMismatch(f"concat: shape {t.shape} incompatible with {ts[0].shape}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    sizes = [t.shape[ax] for t in ts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def bwd(g):
        sl = [slice(None)] * nd
        for t, s0, s1 in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl[ax] = slice(int(s0), int(s1))
                _accum(t, g[tuple(sl)])

    return _make(out, tuple(ts), bwd, "concat")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None

    def bwd(g):
        _accum(a, g.reshape(a.shape))

    return _make(out, (a,), bwd, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    out = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        _accum(a, g.transpose(inverse))

    return _make(out, (a,), bwd, "transpose")


def mean(a) -> Tensor:
    """Mean over all elements, as a scalar tensor."""
    a = as_tensor(a)
    out = np.asarray(a.data.mean())
    size = a.data.size

    def bwd(g):
        _accum(a, np.full(a.shape, float(g) / size))

    return _make(out, (a,), bwd, "mean")


def sum(a) -> Tensor:  # noqa: A001 - mirrors the op vocabulary, numpy-style
    """Sum over all elements, as a scalar tensor."""
    a = as_tensor(a)
    out = np.asarray(a.data.sum())

    def bwd(g):
        _accum(a, np.full(a.shape, float(g)))

    return _make(out, (a,), bwd, "sum")


def init_uniform(shape, limit: float, rng: Rng, requires_grad: bool = False) -> Tensor:
    """I.i.d. values in the open interval (-limit, +limit), deterministic per seed."""
    if limit <= 0:
        raise ValueError("limit must be positive")
    return Tensor(rng.uniform(tuple(shape), -limit, limit), requires_grad=requires_grad)
