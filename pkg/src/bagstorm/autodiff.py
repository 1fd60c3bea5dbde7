"""Tape-based reverse-mode differentiation over dense float64 arrays.

Every primitive is registered once with a forward rule and a vector-Jacobian
product.  A :class:`Tape` records each primitive application as a node
(op name, input ids, attributes, output value) in execution order, so the
node list is topologically sorted by construction and can be replayed.

Subgradient conventions: relu'(0) = 0, sign(0) = 0, d|v|_1/dv = sign(v),
and the gradient of the L2 norm at the origin is 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .errors import NumericError, ShapeError, UsageError

__all__ = [
    "Tape",
    "Var",
    "forward_eval",
    "finite_diff_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "tanh",
    "relu",
    "sigmoid",
    "softmax",
    "log_softmax",
    "mean",
    "sum",
    "mse",
    "l1_norm",
    "l2_norm",
    "reshape",
    "concat",
]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# --- primitive table -------------------------------------------------------
# forward(*values, **attrs) -> ndarray
# vjp(g, out, values, needs, **attrs) -> list of (ndarray | None)

def _check_add(a, b, **_):
    _broadcast_shape("add", a, b)


def _check_mul(a, b, **_):
    _broadcast_shape("mul", a, b)


def _check_sub(a, b, **_):
    _broadcast_shape("sub", a, b)


def _check_matmul(a, b, **_):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None


def _check_mse(a, b, **_):
    if a.shape != b.shape:
        raise ShapeError(f"mse: incompatible shapes {a.shape} and {b.shape}")


def _check_reshape(a, shape):
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}")


def _check_concat(*xs, axis):
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(
            p != q for i, (p, q) in enumerate(zip(ref, x.shape)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {x.shape}")


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _vjp_concat(g, out, vals, needs, axis):
    grads = []
    start = 0
    for v, need in zip(vals, needs):
        n = v.shape[axis]
        if need:
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + n)
            grads.append(g[tuple(idx)])
        else:
            grads.append(None)
        start += n
    return grads


def _expand_reduced(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def _l2_vjp(g, out, vals, needs):
    (a,) = vals
    if out == 0.0:
        return [np.zeros_like(a)]
    return [g * a / out]


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., list]
    check: Callable[..., None] | None = None


_PRIMITIVES: dict[str, Primitive] = {}


def _register(name, forward, vjp, check=None):
    _PRIMITIVES[name] = Primitive(name, forward, vjp, check)


_register(
    "add",
    lambda a, b: a + b,
    lambda g, out, v, n: [
        _unbroadcast(g, v[0].shape) if n[0] else None,
        _unbroadcast(g, v[1].shape) if n[1] else None,
    ],
    _check_add,
)
_register(
    "sub",
    lambda a, b: a - b,
    lambda g, out, v, n: [
        _unbroadcast(g, v[0].shape) if n[0] else None,
        _unbroadcast(-g, v[1].shape) if n[1] else None,
    ],
    _check_sub,
)
_register(
    "mul",
    lambda a, b: a * b,
    lambda g, out, v, n: [
        _unbroadcast(g * v[1], v[0].shape) if n[0] else None,
        _unbroadcast(g * v[0], v[1].shape) if n[1] else None,
    ],
    _check_mul,
)
_register(
    "scale",
    lambda a, factor: a * factor,
    lambda g, out, v, n, factor: [g * factor],
)
_register(
    "matmul",
    np.matmul,
    lambda g, out, v, n: [
        _unbroadcast(g @ _swap(v[1]), v[0].shape) if n[0] else None,
        _unbroadcast(_swap(v[0]) @ g, v[1].shape) if n[1] else None,
    ],
    _check_matmul,
)
_register("tanh", np.tanh, lambda g, out, v, n: [g * (1.0 - out * out)])
_register(
    "relu",
    lambda a: np.where(a > 0, a, 0.0),
    lambda g, out, v, n: [np.where(v[0] > 0, g, 0.0)],
)
_register(
    "sigmoid",
    lambda a: 0.5 * (np.tanh(0.5 * a) + 1.0),
    lambda g, out, v, n: [g * out * (1.0 - out)],
)
_register(
    "softmax",
    _softmax,
    lambda g, out, v, n: [out * (g - (g * out).sum(axis=-1, keepdims=True))],
)
_register(
    "log_softmax",
    _log_softmax,
    lambda g, out, v, n: [g - np.exp(out) * g.sum(axis=-1, keepdims=True)],
)
_register(
    "mean",
    lambda a, axis: np.asarray(a.mean(axis=axis)),
    lambda g, out, v, n, axis: [
        _expand_reduced(g, v[0].shape, axis)
        / (v[0].size if axis is None else v[0].shape[axis])
    ],
)
_register(
    "sum",
    lambda a, axis: np.asarray(a.sum(axis=axis)),
    lambda g, out, v, n, axis: [_expand_reduced(g, v[0].shape, axis).copy()],
)
_register(
    "mse",
    lambda a, b: np.asarray(np.mean((a - b) ** 2)),
    lambda g, out, v, n: [
        g * 2.0 * (v[0] - v[1]) / v[0].size if n[0] else None,
        g * 2.0 * (v[1] - v[0]) / v[0].size if n[1] else None,
    ],
    _check_mse,
)
_register(
    "l1_norm",
    lambda a: np.asarray(np.abs(a).sum()),
    lambda g, out, v, n: [g * np.sign(v[0])],
)
_register("l2_norm", lambda a: np.asarray(np.sqrt((a * a).sum())), _l2_vjp)
_register(
    "reshape",
    lambda a, shape: a.reshape(shape),
    lambda g, out, v, n, shape: [g.reshape(v[0].shape)],
    _check_reshape,
)
_register(
    "concat",
    lambda *xs, axis: np.concatenate(xs, axis=axis),
    _vjp_concat,
    _check_concat,
)


# --- tape ------------------------------------------------------------------

@dataclass
class Node:
    id: int
    op: str  # "leaf" for inputs
    inputs: tuple[int, ...]
    attrs: dict[str, Any]
    value: np.ndarray
    name: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


class Var:
    """Handle to one node of a tape; arithmetic records new nodes."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: Tape, node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def _lift(self, other) -> Var:
        if isinstance(other, Var):
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __rmatmul__(self, other):
        return matmul(self._lift(other), self)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    arr.flags.writeable = False
    return arr


class Tape:
    """Single-use record of one forward computation."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._names: dict[str, int] = {}

    def leaf(self, value, name: str | None = None) -> Var:
        arr = _as_array(value)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"leaf {name or len(self.nodes)} has non-finite values")
        if name is not None:
            if name in self._names:
                raise UsageError(f"duplicate leaf name {name!r}")
            self._names[name] = len(self.nodes)
        self.nodes.append(Node(len(self.nodes), "leaf", (), {}, arr, name))
        return Var(self, len(self.nodes) - 1)

    def constant(self, value) -> Var:
        return self.leaf(value)

    def __getitem__(self, name: str) -> Var:
        return Var(self, self._names[name])

    def apply(self, op: str, inputs: Sequence[Var], **attrs) -> Var:
        prim = _PRIMITIVES[op]
        for v in inputs:
            if v.tape is not self:
                raise UsageError(f"{op}: input belongs to a different tape")
        vals = [self.nodes[v.id].value for v in inputs]
        if prim.check is not None:
            prim.check(*vals, **attrs)
        # overflow is reported below as a NumericError, not a warning
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            out = np.asarray(prim.forward(*vals, **attrs), dtype=np.float64)
        node_id = len(self.nodes)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"node {node_id} ({op}) produced non-finite values")
        out.flags.writeable = False
        self.nodes.append(Node(node_id, op, tuple(v.id for v in inputs), attrs, out))
        return Var(self, node_id)

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the recorded leaves."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op == "leaf":
                values.append(node.value)
            else:
                args = [values[i] for i in node.inputs]
                out = _PRIMITIVES[node.op].forward(*args, **node.attrs)
                values.append(np.asarray(out, dtype=np.float64))
        return values

    def _resolve(self, key) -> int:
        if isinstance(key, Var):
            if key.tape is not self:
                raise UsageError("wanted leaf belongs to a different tape")
            node_id = key.id
        elif isinstance(key, str):
            if key not in self._names:
                raise UsageError(f"wanted leaf {key!r} is not on this tape")
            node_id = self._names[key]
        else:
            node_id = int(key)
        if not 0 <= node_id < len(self.nodes) or self.nodes[node_id].op != "leaf":
            raise UsageError(f"wanted leaf {key!r} is not a leaf of this tape")
        return node_id

    def backward(self, loss: Var, wanted: Sequence) -> dict:
        """Reverse sweep from a scalar ``loss``.

        Returns a mapping from each entry of ``wanted`` (a Var, leaf name or
        node id) to its gradient.  Leaves with no path to the loss get zeros.
        """
        if loss.tape is not self:
            raise UsageError("loss belongs to a different tape")
        if loss.value.size != 1:
            raise UsageError(f"loss must be scalar, got shape {loss.shape}")
        targets = {self._resolve(w): w for w in wanted}

        needs = np.zeros(loss.id + 1, dtype=bool)
        for node_id in targets:
            if node_id <= loss.id:
                needs[node_id] = True
        for node in self.nodes[: loss.id + 1]:
            if node.op != "leaf" and any(needs[i] for i in node.inputs):
                needs[node.id] = True

        grads: dict[int, np.ndarray] = {}
        if needs[loss.id]:
            grads[loss.id] = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads.get(node.id)
            if g is None or node.op == "leaf":
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            flags = [bool(needs[i]) for i in node.inputs]
            parts = _PRIMITIVES[node.op].vjp(g, node.value, vals, flags, **node.attrs)
            for i, part, flag in zip(node.inputs, parts, flags):
                if not flag or part is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + part
                else:
                    grads[i] = np.array(part, dtype=np.float64)

        out = {}
        for node_id, key in targets.items():
            g = grads.get(node_id)
            shape = self.nodes[node_id].shape
            out[key] = np.zeros(shape) if g is None else np.asarray(g).reshape(shape)
        return out


# --- functional front end ----------------------------------------------------

def add(a: Var, b: Var) -> Var:
    return a.tape.apply("add", [a, b])


def sub(a: Var, b: Var) -> Var:
    return a.tape.apply("sub", [a, b])


def mul(a: Var, b: Var) -> Var:
    return a.tape.apply("mul", [a, b])


def scale(a: Var, factor: float) -> Var:
    return a.tape.apply("scale", [a], factor=float(factor))


def matmul(a: Var, b: Var) -> Var:
    return a.tape.apply("matmul", [a, b])


def tanh(a: Var) -> Var:
    return a.tape.apply("tanh", [a])


def relu(a: Var) -> Var:
    return a.tape.apply("relu", [a])


def sigmoid(a: Var) -> Var:
    return a.tape.apply("sigmoid", [a])


def softmax(a: Var) -> Var:
    return a.tape.apply("softmax", [a])


def log_softmax(a: Var) -> Var:
    return a.tape.apply("log_softmax", [a])


def mean(a: Var, axis: int | None = None) -> Var:
    return a.tape.apply("mean", [a], axis=axis)


def sum(a: Var, axis: int | None = None) -> Var:  # noqa: A001
    return a.tape.apply("sum", [a], axis=axis)


def mse(a: Var, b: Var) -> Var:
    """Mean of squared differences (a scalar)."""
    return a.tape.apply("mse", [a, b])


def l1_norm(a: Var) -> Var:
    return a.tape.apply("l1_norm", [a])


def l2_norm(a: Var) -> Var:
    return a.tape.apply("l2_norm", [a])


def reshape(a: Var, shape: Sequence[int]) -> Var:
    return a.tape.apply("reshape", [a], shape=tuple(int(s) for s in shape))


def concat(xs: Sequence[Var], axis: int = 0) -> Var:
    if not xs:
        raise UsageError("concat: empty input list")
    return xs[0].tape.apply("concat", list(xs), axis=axis)


def forward_eval(
    fn: Callable[..., Var], leaves: Mapping[str, Any]
) -> tuple[Var, Tape]:
    """Run ``fn`` on named leaves recorded on a fresh tape.

    ``fn`` receives one :class:`Var` per leaf as keyword arguments.
    """
    tape = Tape()
    args = {name: tape.leaf(value, name=name) for name, value in leaves.items()}
    out = fn(**args)
    return out, tape


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function."""
    if not h > 0:
        raise UsageError(f"finite_diff_grad: step must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(x))
        flat[i] = orig - h
        lo = float(f(x))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"finite_diff_grad: non-finite value at coordinate {i}")
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad
