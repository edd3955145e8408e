"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives needed by the two GNNs, the features, the output heads
and the rate loss are provided.  Binary elementwise ops accept equal shapes,
a scalar-shaped operand, or a channel vector matching the last axis; any
other broadcast has to go through :func:`broadcast_to` explicitly.

Recording happens only inside an active :class:`Tape` and only for ops that
touch a tensor with ``requires_grad``::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = sum_(w * w)
    grads = tape.backward(loss, wrt=[w])
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "TapeError",
    "NormState",
    "apply_primitive",
    "grad_check",
]

_ids = itertools.count(1)
_tape_stack: list["Tape"] = []


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return mul(self, reciprocal(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple]
    kind: str


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def __len__(self) -> int:
        return len(self.records)

    def record(self, kind, out, inputs, vjp):
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        self.records.append(_Record(out, tuple(inputs), vjp, kind))

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every leaf (or every tensor in ``wrt``).

        Leaves that the loss does not depend on get exact zero gradients.
        """
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True

        produced = {r.out.id for r in self.records}
        leaves: dict[int, Tensor] = {}
        for r in self.records:
            for t in r.inputs:
                if t.requires_grad and t.id not in produced:
                    leaves.setdefault(t.id, t)
        if wrt is not None:
            leaves = {t.id: t for t in wrt}

        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        for r in reversed(self.records):
            g = grads.get(r.out.id)
            if g is None:
                continue
            if r.out.id not in leaves:
                del grads[r.out.id]
            in_grads = r.vjp(g)
            for t, gi in zip(r.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.id in grads:
                    grads[t.id] = grads[t.id] + gi
                else:
                    grads[t.id] = gi
        return {
            i: (grads[i] if i in grads else np.zeros_like(t.data))
            for i, t in leaves.items()
        }


def _active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def _finish(kind: str, value: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{kind} produced non-finite values")
    out = Tensor(value)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(kind, out, inputs, vjp)
    return out


# -- binary ops -------------------------------------------------------------

def _binary_mode(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.data.size == 1 and b.ndim <= a.ndim:
        return "b_scalar"
    if a.data.size == 1 and a.ndim <= b.ndim:
        return "a_scalar"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "b_channel"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "a_channel"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}; use broadcast_to")


def _reduce_as(g: np.ndarray, mode: str, target: Tensor, side: str) -> np.ndarray:
    if mode == "same" or not mode.startswith(side):
        return g
    if mode.endswith("scalar"):
        return np.full(target.shape, g.sum())
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    mode = _binary_mode(a, b)
    return _finish(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_reduce_as(g, mode, a, "a"), _reduce_as(g, mode, b, "b")),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    mode = _binary_mode(a, b)
    return _finish(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_reduce_as(g, mode, a, "a"), _reduce_as(-g, mode, b, "b")),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    mode = _binary_mode(a, b)
    return _finish(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (
            _reduce_as(g * b.data, mode, a, "a") if a.requires_grad else None,
            _reduce_as(g * a.data, mode, b, "b") if b.requires_grad else None,
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _finish("scalar-mul", a.data * c, (a,), lambda g: (g * c,))


# -- matmuls ----------------------------------------------------------------

def linear(x: Tensor, w: Tensor) -> Tensor:
    """Apply ``w`` (C_out x C_in) along the last axis of ``x``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: x{x.shape} vs weight{w.shape}")

    def vjp(g):
        gx = g @ w.data if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        return gx, gw

    return _finish("matmul-last-axis", x.data @ w.data.T, (x, w), vjp)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the two trailing axes (leading axes equal)."""
    if a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _finish("bmm", a.data @ b.data, (a, b), vjp)


# -- reductions and structure ------------------------------------------------

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    def vjp(g):
        return (np.broadcast_to(g.reshape(kept_shape), x.shape).copy(),)

    return _finish("axis-sum", x.data.sum(axis=axes, keepdims=keepdims), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    def vjp(g):
        return (np.broadcast_to(g.reshape(kept_shape) / count, x.shape).copy(),)

    value = x.data.sum(axis=axes, keepdims=keepdims) / count
    return _finish("axis-mean", value, (x,), vjp)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    try:
        value = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    lead = len(shape) - x.ndim
    expanded = tuple(
        i for i in range(len(shape))
        if i < lead or (x.shape[i - lead] == 1 and shape[i] != 1)
    )

    def vjp(g):
        r = g.sum(axis=expanded, keepdims=True) if expanded else g
        if lead:
            r = r.reshape(r.shape[lead:])
        return (r.reshape(x.shape),)

    return _finish("broadcast", value, (x,), vjp)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        value = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _finish("reshape", value, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _finish(
        "transpose",
        np.transpose(x.data, axes),
        (x,),
        lambda g: (np.transpose(g, inverse),),
    )


def take(x: Tensor, index, axis: int) -> Tensor:
    """Basic-slice or integer-array selection along one axis."""
    axis = axis % x.ndim
    sel = [slice(None)] * x.ndim
    sel[axis] = index
    sel = tuple(sel)

    def vjp(g):
        out = np.zeros_like(x.data)
        np.add.at(out, sel, g)
        return (out,)

    return _finish("take", x.data[sel], (x,), vjp)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(t) for t in xs]
    ndim = xs[0].ndim
    axis = axis % ndim
    for t in xs[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != xs[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError(f"concat: {[t.shape for t in xs]} along axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _finish("concat-channel", np.concatenate([t.data for t in xs], axis=axis), xs, vjp)


# -- elementwise unary ---------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _finish("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _finish("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    return _finish("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        y = np.exp(x.data)
    return _finish("exp", y, (x,), lambda g: (g * y,))


def square(x: Tensor) -> Tensor:
    return _finish("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise DomainError("sqrt of negative value")
    y = np.sqrt(x.data)

    def vjp(g):
        if np.any(y == 0):
            raise DomainError("sqrt derivative undefined at 0")
        return (0.5 * g / y,)

    return _finish("sqrt", y, (x,), vjp)


def reciprocal(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data == 0):
        raise DomainError("reciprocal of zero")
    y = 1.0 / x.data
    return _finish("reciprocal", y, (x,), lambda g: (-g * y * y,))


def abs_(x: Tensor) -> Tensor:
    return _finish("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    keep = x.data >= floor
    return _finish(
        "clamp-min", np.where(keep, x.data, floor), (x,), lambda g: (g * keep,)
    )


def softmax(z: Tensor, tau: float = 1.0, axis: int = -1) -> Tensor:
    """Softmax of ``z / tau`` along ``axis``."""
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    s = z.data / tau
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)) / tau,)

    return _finish("softmax-with-temperature", p, (z,), vjp)


# -- normalization ------------------------------------------------------------

@dataclass
class NormState:
    """Running statistics of one batch-standardize site (per channel)."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int) -> "NormState":
        return cls(np.zeros(channels), np.ones(channels))


def batch_standardize(
    x: Tensor, state: NormState, training: bool, update_stats: bool = True
) -> Tensor:
    """Standardize each channel over the batch and all positions jointly.

    Pooling over positions keeps the op equivariant to any permutation of
    the position axes.  Inference uses the running statistics.
    """
    c = x.shape[-1]
    flat = x.data.reshape(-1, c)
    if training:
        mu = flat.mean(axis=0)
        centered = x.data - mu
        var = (centered.reshape(-1, c) ** 2).mean(axis=0)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = centered * inv
        if update_stats:
            m = state.momentum
            state.mean = m * state.mean + (1 - m) * mu
            state.var = m * state.var + (1 - m) * var

        def vjp(g):
            gf = g.reshape(-1, c)
            xf = xhat.reshape(-1, c)
            gx = inv * (gf - gf.mean(axis=0) - xf * (gf * xf).mean(axis=0))
            return (gx.reshape(x.shape),)

        return _finish("batch-standardize", xhat, (x,), vjp)

    inv = 1.0 / np.sqrt(state.var + state.eps)
    return _finish(
        "batch-standardize", (x.data - state.mean) * inv, (x,), lambda g: (g * inv,)
    )


_PRIMITIVES: dict[str, Callable] = {
    "matmul-last-axis": linear,
    "bmm": bmm,
    "add": add,
    "sub": sub,
    "elementwise-mul": mul,
    "scalar-mul": scale,
    "axis-sum": sum_,
    "axis-mean": mean,
    "broadcast": broadcast_to,
    "concat-channel": lambda *xs, axis=-1: concat(xs, axis=axis),
    "relu": relu,
    "tanh": tanh,
    "log": log,
    "exp": exp,
    "softmax-with-temperature": softmax,
    "square": square,
    "sqrt": sqrt,
    "reciprocal": reciprocal,
    "abs": abs_,
    "batch-standardize": batch_standardize,
    "reshape": reshape,
    "transpose": transpose,
    "take": take,
    "clamp-min": clamp_min,
}


def apply_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


def grad_check(
    scalar_fn: Callable[[Sequence[Tensor]], Tensor],
    point: Sequence[np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``scalar_fn`` receives a list of Tensors (one per array in ``point``) and
    must return a scalar Tensor.  The error per coordinate is
    ``|ad - fd| / max(1, |fd|)``.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-7, 1e-4]")
    base = [np.array(p, dtype=np.float64) for p in point]
    leaves = [Tensor(p.copy(), requires_grad=True) for p in base]
    with Tape() as tape:
        out = scalar_fn(leaves)
    grads = tape.backward(out, wrt=leaves)

    def value(arrays):
        v = float(scalar_fn([Tensor(a) for a in arrays]).data)
        if not np.isfinite(v):
            raise NonFiniteError("scalar_fn non-finite at perturbed point")
        return v

    worst = 0.0
    for i, p in enumerate(base):
        ad = grads[leaves[i].id]
        for idx in np.ndindex(p.shape):
            hi = [q.copy() for q in base]
            lo = [q.copy() for q in base]
            hi[i][idx] += eps
            lo[i][idx] -= eps
            fd = (value(hi) - value(lo)) / (2 * eps)
            worst = max(worst, abs(ad[idx] - fd) / max(1.0, abs(fd)))
    return worst
