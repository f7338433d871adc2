"""Dense float64 tensors with a dynamic reverse-mode tape and an Adam optimizer.

Every forward op records its parents and a closure mapping the output
gradient to parent gradients. The tape is rebuilt on each forward pass.
Leading batch axes are allowed so that many images can share one graph;
broadcasting is limited to the usual "shared weight / bias row" patterns.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "DimensionError",
    "NonFiniteError",
    "DegenerateRowError",
    "ContractError",
    "tensor",
    "parameter",
    "matmul",
    "add",
    "mul",
    "gelu",
    "masked_softmax",
    "layer_norm",
    "concat",
    "stack",
    "dropout",
    "backward",
    "AdamState",
    "adam_step",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class DegenerateRowError(ValueError):
    """A softmax row has no unmasked entry."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """A node on the tape.

    Leaves created with ``requires_grad=True`` and a ``name`` are the
    trainable parameters reported by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        backward_fn: BackwardFn | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value produced by op '{op}'")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{tag})"

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, name: str | None = None) -> Tensor:
    """Constant (non-trainable) tensor."""
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name: str) -> Tensor:
    """Trainable leaf addressed by ``name``."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, op: str, parents: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, op=op,
                  parents=parents if needs else (),
                  backward_fn=fn if needs else None)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, "add", (a, b), fn)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = float(b)

        def fn_const(g):
            return (g * c,)

        return _node(a.data * c, "scale", (a,), fn_const)
    b = _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, "mul", (a, b), fn)


def reciprocal(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        out = 1.0 / a.data
    return _node(out, "reciprocal", (a,), lambda g: (-g * out * out,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node(out, "log", (a,), lambda g: (g / a.data,))


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, "square", (a,), lambda g: (2.0 * g * a.data,))


def abs_(a: Tensor) -> Tensor:
    # np.sign(0) == 0 gives the zero subgradient at the kink
    return _node(np.abs(a.data), "abs", (a,), lambda g: (g * np.sign(a.data),))


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _node(out, "gelu", (x,), fn)


# reductions and shape ---------------------------------------------------

def sum_(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, "sum", (a,), fn)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _node(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)
    out = np.transpose(a.data, axes)
    return _node(out, "transpose", (a,), lambda g: (np.transpose(g, inv),))


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; backward scatters with accumulation."""
    out = a.data[index]

    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, dtype=np.float64), "take", (a,), fn)


def concat(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = [_as_tensor(t) for t in items]
    try:
        out = np.concatenate([t.data for t in items], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in items])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, "concat", tuple(items), fn)


def stack(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = [_as_tensor(t) for t in items]
    out = np.stack([t.data for t in items], axis=axis)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return _node(out, "stack", tuple(items), fn)


# linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading axes of either operand act as a batch."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, "matmul", (a, b), fn)


def masked_softmax(scores, mask=None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False get weight 0."""
    scores = _as_tensor(scores)
    x = scores.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(np.broadcast_to(mask, x.shape).any(axis=-1)):
            raise DegenerateRowError("softmax row is fully masked")
        x = np.where(mask, x, -np.inf)
    out = x - x.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)

    def fn(g):
        inner = np.einsum("...i,...i->...", g, out)[..., None]
        gx = g - inner
        gx *= out
        return (gx,)

    return _node(out, "masked_softmax", (scores,), fn)


LAYER_NORM_EPS = 1e-5


def layer_norm(x, gain, shift, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then apply gain and shift."""
    x, gain, shift = _as_tensor(x), _as_tensor(gain), _as_tensor(shift)
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm needs at least 2 features")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + shift.data

    def fn(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, shift.shape)

    return _node(out, "layer_norm", (x, gain, shift), fn)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _node(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


def custom(value, parents: Sequence[Tensor], fn: BackwardFn, op: str) -> Tensor:
    """Register a fused op whose gradient is supplied by the caller."""
    return _node(value, op, tuple(parents), fn)


# reverse pass -----------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor, leaves: Iterable[Tensor] | Mapping[str, Tensor] | None = None
             ) -> dict[str, np.ndarray]:
    """Gradients of scalar ``root`` with respect to named trainable leaves.

    ``leaves`` lists the parameters to report; any leaf not reachable from
    ``root`` receives an exact zero gradient. When omitted, every named
    trainable leaf found on the tape is reported.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64, copy=True)

    if leaves is None:
        leaves = [n for n in order if n._backward is None and n.requires_grad and n.name]
    elif isinstance(leaves, Mapping):
        leaves = list(leaves.values())
    result: dict[str, np.ndarray] = {}
    for leaf in leaves:
        if leaf.name in result:
            raise ContractError(f"duplicate parameter name {leaf.name!r}")
        g = grads.get(id(leaf))
        result[leaf.name] = np.zeros_like(leaf.data) if g is None else g.reshape(leaf.shape)
    return result


# optimizer --------------------------------------------------------------

class AdamState:
    """First/second moment estimates and step counter."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns a new parameter dict."""
    if set(grads) != set(params):
        missing = sorted(set(params) ^ set(grads))
        raise ContractError(f"gradient keys do not match parameters: {missing[:5]}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    updated = {}
    for name, w in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        updated[name] = w - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return updated
