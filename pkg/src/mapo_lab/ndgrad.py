"""Small dense-array engine with tape-based reverse-mode differentiation.

Everything is float64. Binary elementwise operations only broadcast a
0-d scalar against a tensor; any other shape coercion must be spelled out
with ``concat``/``slice``/``sum``.

Typical use::

    with Tape() as tape:
        w = tape.variable(np.array([1.0, -2.0]))
        loss = nd.sum(nd.square(w))
    grads = backward(loss)
    grads.of(w)   # array([ 2., -4.])
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "GradientMap",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "finite_difference_check",
    "primitive",
    "PRIMITIVES",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class DomainError(ValueError):
    """An operand lies outside the mathematical domain of the primitive."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape (missing, consumed, mixed)."""


class Tensor:
    """A float64 array, optionally attached to a :class:`Tape` node."""

    __slots__ = ("values", "node_id", "tape")
    __array_priority__ = 100.0

    def __init__(self, values, node_id: int | None = None, tape: "Tape | None" = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.node_id = node_id
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def __repr__(self) -> str:
        tag = "" if self.node_id is None else f", node_id={self.node_id}"
        return f"Tensor({self.values!r}{tag})"

    def __add__(self, other):
        return primitive("add", self, other)

    def __radd__(self, other):
        return primitive("add", other, self)

    def __sub__(self, other):
        return primitive("sub", self, other)

    def __rsub__(self, other):
        return primitive("sub", other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return primitive("scalar_mul", self, k=float(other))
        return primitive("mul", self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return primitive("scalar_mul", self, k=float(other))
        return primitive("mul", other, self)

    def __neg__(self):
        return primitive("scalar_mul", self, k=-1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return primitive("scalar_mul", self, k=1.0 / float(other))
        return primitive("mul", self, primitive("pow_const", other, p=-1.0))

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only constant exponents are supported")
        return primitive("pow_const", self, p=float(p))

    def __matmul__(self, other):
        return primitive("matmul", self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradientMap(dict):
    """Mapping ``node_id -> ndarray`` of d(loss)/d(parameter)."""

    def of(self, tensor: Tensor) -> np.ndarray:
        return self[tensor.node_id]


class Tape:
    """Append-only record of primitive applications.

    Each node stores the operand node ids and a closure mapping the
    output cotangent to operand cotangents. Nodes are appended in
    evaluation order, so the list is already topologically sorted.
    """

    def __init__(self):
        self.nodes: list[tuple[tuple[int | None, ...], Callable | None]] = []
        self.params: list[int] = []
        self.leaf_shapes: dict[int, tuple[int, ...]] = {}
        self.consumed = False

    def __enter__(self) -> "Tape":
        return self

    def __exit__(self, *exc) -> None:
        return None

    def variable(self, values) -> Tensor:
        """Register a trainable leaf and return it."""
        self._check_open()
        node_id = len(self.nodes)
        self.nodes.append(((), None))
        self.params.append(node_id)
        leaf = Tensor(np.array(values, dtype=np.float64), node_id, self)
        self.leaf_shapes[node_id] = leaf.shape
        return leaf

    def _check_open(self) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")

    def _record(self, operand_ids, values, vjp) -> Tensor:
        self._check_open()
        node_id = len(self.nodes)
        self.nodes.append((operand_ids, vjp))
        return Tensor(values, node_id, self)


# ---------------------------------------------------------------------------
# primitive forward rules and vector-Jacobian products
# ---------------------------------------------------------------------------


def _broadcast_pair(op, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting is supported)")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _add(xs, attrs):
    a, b = xs
    _broadcast_pair("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _sub(xs, attrs):
    a, b = xs
    _broadcast_pair("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _mul(xs, attrs):
    a, b = xs
    _broadcast_pair("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _scalar_mul(xs, attrs):
    (a,) = xs
    k = attrs["k"]
    return a * k, lambda g: (g * k,)


def _matmul(xs, attrs):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return a @ b, lambda g: (g @ b.T, a.T @ g)


def _reduce_shape(a, axis):
    if axis is None:
        return ()
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"reduction axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def _sum(xs, attrs):
    (a,) = xs
    axis = attrs.get("axis")
    ax = _reduce_shape(a, axis)
    if axis is None:
        return np.asarray(a.sum()), lambda g: (np.broadcast_to(g, a.shape).copy(),)
    return a.sum(axis=ax), lambda g: (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy(),)


def _mean(xs, attrs):
    (a,) = xs
    axis = attrs.get("axis")
    ax = _reduce_shape(a, axis)
    if a.size == 0:
        raise ShapeError("mean of an empty tensor")
    if axis is None:
        n = a.size
        return np.asarray(a.sum() / n), lambda g: (np.full(a.shape, g / n),)
    n = a.shape[ax]
    return a.sum(axis=ax) / n, lambda g: (np.broadcast_to(np.expand_dims(g / n, ax), a.shape).copy(),)


def _square(xs, attrs):
    (a,) = xs
    return a * a, lambda g: (2.0 * a * g,)


def _exp(xs, attrs):
    (a,) = xs
    out = np.exp(a)
    return out, lambda g: (g * out,)


def _log(xs, attrs):
    (a,) = xs
    if np.any(a <= 0) or np.any(np.isnan(a)):
        raise DomainError("log: operand must be strictly positive")
    return np.log(a), lambda g: (g / a,)


def _expm1(xs, attrs):
    (a,) = xs
    out = np.expm1(a)
    return out, lambda g: (g * (out + 1.0),)


def _stable_sigmoid(a: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _sigmoid(xs, attrs):
    (a,) = xs
    s = _stable_sigmoid(a)
    return s, lambda g: (g * s * (1.0 - s),)


def _softplus(xs, attrs):
    (a,) = xs
    out = np.logaddexp(0.0, a)
    return out, lambda g: (g * _stable_sigmoid(a),)


def _pow_const(xs, attrs):
    (a,) = xs
    p = attrs["p"]
    if not float(p).is_integer() and np.any(a < 0):
        raise DomainError(f"pow_const: negative base with non-integer exponent {p}")
    if p < 0 and np.any(a == 0):
        raise DomainError(f"pow_const: zero base with negative exponent {p}")
    out = np.power(a, p)
    return out, lambda g: (g * p * np.power(a, p - 1.0),)


def _concat(xs, attrs):
    axis = attrs.get("axis", 0)
    ref = xs[0]
    for x in xs[1:]:
        if x.ndim != ref.ndim or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(x.shape, ref.shape)) if i != axis % ref.ndim
        ):
            raise ShapeError(f"concat: shapes {ref.shape} and {x.shape} disagree off axis {axis}")
    out = np.concatenate(xs, axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=axis))


def _slice(xs, attrs):
    (a,) = xs
    axis = attrs.get("axis", 0)
    start, stop = attrs["start"], attrs["stop"]
    if not 0 <= start < stop <= a.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of shape {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def vjp(g):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return a[index], vjp


PRIMITIVES: dict[str, Callable] = {
    "add": _add,
    "sub": _sub,
    "mul": _mul,
    "scalar_mul": _scalar_mul,
    "matmul": _matmul,
    "sum": _sum,
    "mean": _mean,
    "square": _square,
    "exp": _exp,
    "log": _log,
    "expm1": _expm1,
    "sigmoid": _sigmoid,
    "softplus": _softplus,
    "pow_const": _pow_const,
    "concat": _concat,
    "slice": _slice,
}


def primitive(op_kind: str, *operands, **attrs) -> Tensor:
    """Apply a primitive, recording it when any operand lives on a tape."""
    try:
        rule = PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    tensors = [as_tensor(x) for x in operands]
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError("operands belong to different tapes")
            tape = t.tape
    out, vjp = rule([t.values for t in tensors], attrs)
    if tape is None:
        return Tensor(out)
    return tape._record(tuple(t.node_id for t in tensors), out, vjp)


def backward(loss: Tensor) -> GradientMap:
    """Reverse sweep from a scalar ``loss``; consumes the tape."""
    if loss.tape is None or loss.node_id is None:
        raise TapeError("backward() needs a loss computed under an active tape")
    if loss.values.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    tape._check_open()
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.values)}
    for node_id in range(loss.node_id, -1, -1):
        g = grads.get(node_id)
        if g is None:
            continue
        operand_ids, vjp = tape.nodes[node_id]
        if vjp is None:
            continue
        del grads[node_id]
        for op_id, og in zip(operand_ids, vjp(g)):
            if op_id is None:
                continue
            if op_id in grads:
                grads[op_id] = grads[op_id] + og
            else:
                grads[op_id] = og
    tape.consumed = True
    out = GradientMap()
    for pid in tape.params:
        g = grads.get(pid)
        out[pid] = np.zeros(tape.leaf_shapes[pid]) if g is None else np.asarray(g, dtype=np.float64)
    return out


def finite_difference_check(
    loss_fn: Callable[..., Tensor], params: Sequence[np.ndarray], step: float = 1e-5
) -> float:
    """Max relative error between taped gradients and central differences.

    ``loss_fn`` receives one Tensor per entry of ``params`` and must be
    deterministic. Relative error per coordinate is
    ``|analytic - central| / max(|analytic|, |central|, 1e-12)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]
    with Tape() as tape:
        leaves = [tape.variable(p) for p in params]
        loss = loss_fn(*leaves)
    if not isinstance(loss, Tensor) or loss.tape is None:
        analytic = [np.zeros_like(p) for p in params]
    else:
        gm = backward(loss)
        analytic = [gm.of(leaf) for leaf in leaves]

    def probe(i, flat_idx, delta):
        shifted = [p.copy() for p in params]
        shifted[i].reshape(-1)[flat_idx] += delta
        val = float(as_tensor(loss_fn(*[Tensor(p) for p in shifted])).values.reshape(()))
        if not math.isfinite(val):
            raise ValueError(f"non-finite loss when probing parameter {i} index {flat_idx}")
        return val

    worst = 0.0
    for i, p in enumerate(params):
        a_flat = np.asarray(analytic[i]).reshape(-1)
        for j in range(p.size):
            central = (probe(i, j, step) - probe(i, j, -step)) / (2.0 * step)
            a = float(a_flat[j])
            rel = abs(a - central) / max(abs(a), abs(central), 1e-12)
            worst = max(worst, rel)
    return worst


# functional spellings of the primitives


def add(a, b) -> Tensor:
    return primitive("add", a, b)


def sub(a, b) -> Tensor:
    return primitive("sub", a, b)


def mul(a, b) -> Tensor:
    return primitive("mul", a, b)


def scalar_mul(a, k: float) -> Tensor:
    return primitive("scalar_mul", a, k=float(k))


def matmul(a, b) -> Tensor:
    return primitive("matmul", a, b)


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    return primitive("sum", a, axis=axis)


def mean(a, axis: int | None = None) -> Tensor:
    return primitive("mean", a, axis=axis)


def square(a) -> Tensor:
    return primitive("square", a)


def exp(a) -> Tensor:
    return primitive("exp", a)


def log(a) -> Tensor:
    return primitive("log", a)


def expm1(a) -> Tensor:
    return primitive("expm1", a)


def sigmoid(a) -> Tensor:
    return primitive("sigmoid", a)


def softplus(a) -> Tensor:
    return primitive("softplus", a)


def pow_const(a, p: float) -> Tensor:
    return primitive("pow_const", a, p=float(p))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return primitive("concat", *tensors, axis=axis)


def slice_(a, start: int, stop: int, axis: int = 0) -> Tensor:
    return primitive("slice", a, start=start, stop=stop, axis=axis)
