"""Dense 64-bit numeric core: tensors, tape-based reverse-mode differentiation,
parameter stores, gradient checking, and the Adam step.

Every primitive runs eagerly on numpy float64 arrays and, when a tape is
active, records (op name, inputs, output, aux) so that the tape can be
replayed forward bit-exactly and swept backward.  The primitive set is
intentionally small: affine maps, elementwise activations, concatenation,
gather/scatter, broadcasting products, reductions, and a 3x3 sliding-window
patch extractor for the tiny mask head.  Reductions delegate to numpy's
summation, which is deterministic for a fixed shape; `slot_sum` additionally
fixes the accumulation order to ascending slot index so that appending
exact-zero padding slots never changes a result bit.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


class NumericError(ValueError):
    """Raised on shape mismatches, non-finite values, and misuse of the tape."""


class NumericOverflowError(NumericError):
    """Numeric state went bad (non-finite values, saturated rates): the
    signature of a diverging run rather than a programming error."""


def _as_array(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 array plus a gradient slot filled in by `backward`."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str | None = None):
        self.data = _as_array(data)
        self.grad: Array | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape})"

    # Arithmetic sugar; scalars and arrays are wrapped as constants.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _TapeSlot(threading.local):
    def __init__(self):
        self.tape: Tape | None = None


_ACTIVE = _TapeSlot()


class Node:
    __slots__ = ("op", "inputs", "output", "aux")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, aux):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.aux = aux


class Tape:
    """Records primitives in forward order.  Tapes are confined to one worker;
    a `with` block installs the tape for the current thread only."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        if _ACTIVE.tape is not None:
            raise NumericError("a tape is already active on this thread")
        _ACTIVE.tape = self
        return self

    def __exit__(self, *exc):
        _ACTIVE.tape = None
        return False

    def replay(self) -> None:
        """Re-execute every recorded primitive and verify the stored outputs
        are reproduced bit-exactly."""
        for node in self.nodes:
            out = _FORWARD[node.op](node.aux, *[t.data for t in node.inputs])
            if out.shape != node.output.data.shape or not np.array_equal(
                out, node.output.data, equal_nan=True
            ):
                raise NumericError(f"replay mismatch in op {node.op!r}")


def active_tape() -> Tape | None:
    return _ACTIVE.tape


def _run(op: str, inputs: tuple[Tensor, ...], aux=None) -> Tensor:
    out = Tensor(_FORWARD[op](aux, *[t.data for t in inputs]))
    tape = _ACTIVE.tape
    if tape is not None:
        tape.nodes.append(Node(op, inputs, out, aux))
    return out


_FORWARD: dict[str, Callable] = {}
_BACKWARD: dict[str, Callable] = {}


def _op(name: str):
    def deco(pair):
        fwd, bwd = pair()
        _FORWARD[name] = fwd
        _BACKWARD[name] = bwd
        return pair

    return deco


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive registry


@_op("add")
def _():
    def fwd(aux, a, b):
        return a + b

    def bwd(aux, g, out, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return fwd, bwd


@_op("sub")
def _():
    def fwd(aux, a, b):
        return a - b

    def bwd(aux, g, out, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return fwd, bwd


@_op("mul")
def _():
    def fwd(aux, a, b):
        return a * b

    def bwd(aux, g, out, a, b):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return fwd, bwd


@_op("div")
def _():
    def fwd(aux, a, b):
        return a / b

    def bwd(aux, g, out, a, b):
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

    return fwd, bwd


@_op("matmul")
def _():
    def fwd(aux, a, b):
        return a @ b

    def bwd(aux, g, out, a, b):
        return g @ b.T, a.T @ g

    return fwd, bwd


@_op("affine")
def _():
    # x (R, in), w (out, in), b (out,) -> x @ w.T + b
    def fwd(aux, x, w, b):
        return x @ w.T + b

    def bwd(aux, g, out, x, w, b):
        return g @ w, g.T @ x, g.sum(axis=0)

    return fwd, bwd


@_op("reshape")
def _():
    def fwd(shape, a):
        return a.reshape(shape)

    def bwd(shape, g, out, a):
        return (g.reshape(a.shape),)

    return fwd, bwd


@_op("broadcast_to")
def _():
    def fwd(shape, a):
        return np.broadcast_to(a, shape).copy()

    def bwd(shape, g, out, a):
        return (_unbroadcast(g, a.shape),)

    return fwd, bwd


@_op("concat")
def _():
    def fwd(axis, *parts):
        return np.concatenate(parts, axis=axis)

    def bwd(axis, g, out, *parts):
        sizes = [p.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=axis))

    return fwd, bwd


@_op("gather")
def _():
    # Row gather along axis 0; indices may repeat.
    def fwd(idx, a):
        return a[np.asarray(idx)]

    def bwd(idx, g, out, a):
        acc = np.zeros_like(a)
        np.add.at(acc, np.asarray(idx), g)
        return (acc,)

    return fwd, bwd


@_op("scatter_rows")
def _():
    # Place rows at unique indices of an otherwise-zero axis-0 extent.
    def fwd(aux, a):
        idx, size = aux
        out = np.zeros((size,) + a.shape[1:], dtype=a.dtype)
        out[np.asarray(idx)] = a
        return out

    def bwd(aux, g, out, a):
        idx, _ = aux
        return (g[np.asarray(idx)],)

    return fwd, bwd


@_op("sum")
def _():
    def fwd(aux, a):
        axis, keepdims = aux
        return np.sum(a, axis=axis, keepdims=keepdims, dtype=np.float64)

    def bwd(aux, g, out, a):
        axis, keepdims = aux
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return fwd, bwd


@_op("slot_sum")
def _():
    # Sequential sum over one axis in ascending slot order.  x + 0.0 is exact,
    # so trailing all-zero slots leave every bit of the result unchanged.
    def fwd(axis, a):
        a = np.moveaxis(a, axis, 0)
        if a.shape[0] == 0:
            return np.zeros(a.shape[1:], dtype=a.dtype)
        acc = a[0].copy()
        for j in range(1, a.shape[0]):
            acc += a[j]
        return acc

    def bwd(axis, g, out, a):
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return fwd, bwd


@_op("relu")
def _():
    def fwd(aux, a):
        return np.maximum(a, 0.0)

    def bwd(aux, g, out, a):
        return (g * (a > 0.0),)

    return fwd, bwd


@_op("sigmoid")
def _():
    def fwd(aux, a):
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ex = np.exp(a[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    def bwd(aux, g, out, a):
        return (g * out * (1.0 - out),)

    return fwd, bwd


@_op("tanh")
def _():
    def fwd(aux, a):
        return np.tanh(a)

    def bwd(aux, g, out, a):
        return (g * (1.0 - out * out),)

    return fwd, bwd


@_op("softplus")
def _():
    def fwd(aux, a):
        return np.logaddexp(0.0, a)

    def bwd(aux, g, out, a):
        return (g * _FORWARD["sigmoid"](None, a),)

    return fwd, bwd


@_op("exp")
def _():
    def fwd(aux, a):
        return np.exp(a)

    def bwd(aux, g, out, a):
        return (g * out,)

    return fwd, bwd


@_op("log")
def _():
    def fwd(aux, a):
        return np.log(a)

    def bwd(aux, g, out, a):
        return (g / a,)

    return fwd, bwd


@_op("softmax")
def _():
    # Along the last axis, shifted for stability.
    def fwd(aux, a):
        z = a - a.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def bwd(aux, g, out, a):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - dot),)

    return fwd, bwd


@_op("clip")
def _():
    def fwd(aux, a):
        lo, hi = aux
        return np.clip(a, lo, hi)

    def bwd(aux, g, out, a):
        lo, hi = aux
        return (g * ((a > lo) & (a < hi)),)

    return fwd, bwd


@_op("im2col3x3")
def _():
    # (B, C, G, G) -> (B, G*G, C*9) with zero padding 1; patch column order is
    # c*9 + (3*di + dj) for offsets di, dj in {0,1,2}.
    def fwd(aux, a):
        b, c, g, _ = a.shape
        padded = np.pad(a, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = np.empty((b, c, 9, g, g), dtype=a.dtype)
        for di in range(3):
            for dj in range(3):
                cols[:, :, 3 * di + dj] = padded[:, :, di : di + g, dj : dj + g]
        return cols.reshape(b, c * 9, g * g).transpose(0, 2, 1).copy()

    def bwd(aux, grad, out, a):
        b, c, g, _ = a.shape
        cols = grad.transpose(0, 2, 1).reshape(b, c, 9, g, g)
        acc = np.zeros((b, c, g + 2, g + 2), dtype=a.dtype)
        for di in range(3):
            for dj in range(3):
                acc[:, :, di : di + g, dj : dj + g] += cols[:, :, 3 * di + dj]
        return (acc[:, :, 1:-1, 1:-1],)

    return fwd, bwd


# ---------------------------------------------------------------------------
# public primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    return _run("add", (a, b))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _run("sub", (a, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _run("mul", (a, b))


def div(a: Tensor, b: Tensor) -> Tensor:
    return _run("div", (a, b))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise NumericError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    return _run("matmul", (a, b))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _run("reshape", (a,), tuple(shape))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _run("broadcast_to", (a,), tuple(shape))


def concat(parts: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(parts)
    return _run("concat", parts, axis)


def gather(a: Tensor, idx) -> Tensor:
    return _run("gather", (a,), np.asarray(idx, dtype=np.intp))


def scatter_rows(a: Tensor, idx, size: int) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    if len(np.unique(idx)) != len(idx):
        raise NumericError("scatter_rows requires unique indices")
    return _run("scatter_rows", (a,), (idx, size))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _run("sum", (a,), (axis, keepdims))


def slot_sum(a: Tensor, axis: int) -> Tensor:
    return _run("slot_sum", (a,), axis)


def relu(a: Tensor) -> Tensor:
    return _run("relu", (a,))


def sigmoid(a: Tensor) -> Tensor:
    return _run("sigmoid", (a,))


def tanh(a: Tensor) -> Tensor:
    return _run("tanh", (a,))


def softplus(a: Tensor) -> Tensor:
    return _run("softplus", (a,))


def exp(a: Tensor) -> Tensor:
    return _run("exp", (a,))


def log(a: Tensor) -> Tensor:
    return _run("log", (a,))


def softmax(a: Tensor) -> Tensor:
    return _run("softmax", (a,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    return _run("clip", (a,), (lo, hi))


def im2col3x3(a: Tensor) -> Tensor:
    if a.data.ndim != 4 or a.shape[2] != a.shape[3]:
        raise NumericError(f"im2col3x3 expects (B, C, G, G), got {a.shape}")
    return _run("im2col3x3", (a,))


_ACTIVATIONS = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softmax": softmax,
    "softplus": softplus,
}


def activate(kind: str, a: Tensor) -> Tensor:
    """Elementwise activation by name; softmax normalizes along the last axis."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise NumericError(f"unknown activation {kind!r}") from None
    return fn(a)


def linear(weight: Tensor, bias: Tensor, x: Tensor) -> Tensor:
    """Affine map on the last axis: x @ W^T + b for W of shape (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise NumericError(
            f"linear: input shape {x.shape} does not match weight shape {weight.shape}"
        )
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.data.ndim != 2 else x
    out = _run("affine", (flat, weight, bias))
    if x.data.ndim != 2:
        out = reshape(out, lead + (weight.shape[0],))
    return out


@_op("transpose2d")
def _():
    def fwd(aux, a):
        return a.T.copy()

    def bwd(aux, g, out, a):
        return (g.T.copy(),)

    return fwd, bwd


def _transpose(a: Tensor) -> Tensor:
    return _run("transpose2d", (a,))


@_op("swapaxes01")
def _():
    def fwd(aux, a):
        return np.swapaxes(a, 0, 1).copy()

    def bwd(aux, g, out, a):
        return (np.swapaxes(g, 0, 1).copy(),)

    return fwd, bwd


def swapaxes01(a: Tensor) -> Tensor:
    return _run("swapaxes01", (a,))


@_op("swapaxes12")
def _():
    def fwd(aux, a):
        return np.swapaxes(a, 1, 2).copy()

    def bwd(aux, g, out, a):
        return (np.swapaxes(g, 1, 2).copy(),)

    return fwd, bwd


def swapaxes12(a: Tensor) -> Tensor:
    return _run("swapaxes12", (a,))


# ---------------------------------------------------------------------------
# backward sweep


def backward(tape: Tape, output: Tensor, params: "ParamStore | None" = None):
    """Reverse sweep from a scalar output.  Fills `.grad` on every tensor that
    participates; when a ParamStore is given, returns {name: grad} with zeros
    for parameters the tape never touched."""
    if output.data.shape != ():
        raise NumericError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, Array] = {id(output): np.ones((), dtype=np.float64)}
    touched: dict[int, Tensor] = {id(output): output}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        in_grads = _BACKWARD[node.op](
            node.aux, g, node.output.data, *[t.data for t in node.inputs]
        )
        for t, ig in zip(node.inputs, in_grads):
            if id(t) in grads:
                grads[id(t)] = grads[id(t)] + ig
            else:
                grads[id(t)] = ig
                touched[id(t)] = t
    for key, t in touched.items():
        t.grad = grads[key]
    if params is not None:
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in params.items()
        }
    return None


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named parameter tensors with a lossless flat view for optimizers and
    finite-difference probing."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise NumericError(f"duplicate parameter name {name!r}")
        t = Tensor(data, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return self._params.values()

    @property
    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, t in self._params.items():
            out[name] = slice(start, start + t.size)
            start += t.size
        return out

    def flat_values(self) -> Array:
        if not self._params:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in self._params.values()])

    def set_flat(self, vec: Array):
        vec = _as_array(vec)
        if vec.shape != (self.num_values,):
            raise NumericError(
                f"flat vector length {vec.shape} does not match store size {self.num_values}"
            )
        start = 0
        for t in self._params.values():
            t.data = vec[start : start + t.size].reshape(t.data.shape).copy()
            start += t.size

    def flat_grads(self) -> Array:
        chunks = []
        for t in self._params.values():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            chunks.append(g.ravel())
        return np.concatenate(chunks) if chunks else np.zeros(0)

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, t in self._params.items():
            other.add(name, t.data.copy())
        return other

    def subset(self, keep) -> "ParamStore":
        """View over a subset of parameters sharing the same tensors, so
        perturbing the view perturbs the full model."""
        other = ParamStore()
        for name, t in self._params.items():
            if keep(name):
                other._params[name] = t
        return other


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Array:
    """Weights start uniform in +-1/sqrt(fan_in); biases start at zero."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(fn: Callable[[ParamStore], Tensor], params: ParamStore,
               epsilon: float = 1e-4) -> float:
    """Compare reverse-mode gradients of `fn(params)` (scalar) against central
    finite differences over every parameter entry; return the worst error
    |a - n| / max(1, |a|, |n|).  `fn` must be deterministic."""
    params.zero_grads()
    with Tape() as tape:
        out = fn(params)
    backward(tape, out, params)
    analytic = params.flat_grads()

    numeric = np.empty_like(analytic)
    i = 0
    for t in params.tensors():
        flat_view = t.data.reshape(-1)
        for k in range(t.size):
            saved = flat_view[k]
            flat_view[k] = saved + epsilon
            hi = fn(params).item()
            flat_view[k] = saved - epsilon
            lo = fn(params).item()
            flat_view[k] = saved
            numeric[i] = (hi - lo) / (2.0 * epsilon)
            i += 1

    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise NumericError("NaN or Inf encountered during gradient check")
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment accumulators plus the step counter."""

    def __init__(self, params: ParamStore):
        self.step = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def adam_step(params: ParamStore, grads: dict[str, Array], state: AdamState,
              lr: float, weight_decay: float = 0.0,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """One Adam update with decoupled weight decay, in place."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericOverflowError(
                f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
