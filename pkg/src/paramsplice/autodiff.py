"""Dense float64 tensors and a reverse-mode differentiation tape.

Deliberately small: enough machinery to train little MLPs and to push
gradients end to end through the splicing pipeline. There is no
broadcasting beyond scalar-vs-tensor, no views, and no higher-order
derivatives. Every operation validates that its output is finite; a
NaN or Inf is an error, never a value that propagates silently.

A graph is single-use: build it, call :func:`backward` once, throw it
away. Training loops rebuild the tape every step.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class GraphError(RuntimeError):
    """Computation-graph protocol violation (non-scalar loss, repeated backward)."""


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op!r}")
    return arr


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function, safe for large |x|."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def stable_softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)) without overflow for large x."""
    return np.logaddexp(0.0, x)


class Tensor:
    """Immutable row-major float64 tensor."""

    __slots__ = ("_data",)

    def __init__(self, data) -> None:
        arr = np.array(data, dtype=np.float64, order="C")
        _check_finite(arr, "tensor construction")
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Takes ownership of a freshly computed array; callers must not
        # keep a writable reference.
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        t = cls.__new__(cls)
        t._data = arr
        return t

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return cls._wrap(np.zeros(shape, dtype=np.float64))

    @classmethod
    def ones(cls, shape) -> "Tensor":
        return cls._wrap(np.ones(shape, dtype=np.float64))

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(()))

    def reshape(self, shape) -> "Tensor":
        try:
            return Tensor._wrap(self._data.reshape(shape))
        except ValueError as err:
            raise ShapeError(f"cannot reshape {self.shape} to {tuple(shape)}") from err

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class DiffNode:
    """Node in a single-use reverse-mode computation graph.

    Values are computed eagerly on construction; adjoints are filled in
    by :func:`backward`. The graph must be acyclic, which holds by
    construction since parents always exist before their children.
    """

    __slots__ = ("value", "op", "parents", "_bwd", "_adjoint", "_backward_done")

    def __init__(
        self,
        value: Tensor,
        op: str = "leaf",
        parents: tuple["DiffNode", ...] = (),
        bwd: Callable[[np.ndarray], tuple] | None = None,
    ) -> None:
        self.value = value
        self.op = op
        self.parents = parents
        self._bwd = bwd
        self._adjoint: np.ndarray | None = None
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def adjoint(self) -> Tensor:
        if self._adjoint is None:
            return Tensor.zeros(self.value.shape)
        return Tensor._wrap(self._adjoint)

    # Sugar so model code reads like ordinary arithmetic.
    def __add__(self, other: "DiffNode") -> "DiffNode":
        return elementwise("add", self, other)

    def __sub__(self, other: "DiffNode") -> "DiffNode":
        return elementwise("sub", self, other)

    def __mul__(self, other):
        if isinstance(other, DiffNode):
            return elementwise("mul", self, other)
        return elementwise("scale", self, float(other))

    def __rmul__(self, other) -> "DiffNode":
        return elementwise("scale", self, float(other))

    def __truediv__(self, other: "DiffNode") -> "DiffNode":
        return elementwise("div", self, other)

    def __neg__(self) -> "DiffNode":
        return elementwise("neg", self)

    def __matmul__(self, other: "DiffNode") -> "DiffNode":
        return matmul(self, other)

    def abs(self) -> "DiffNode":
        return elementwise("abs", self)

    def exp(self) -> "DiffNode":
        return elementwise("exp", self)

    def log(self) -> "DiffNode":
        return elementwise("log", self)

    def relu(self) -> "DiffNode":
        return elementwise("relu", self)

    def sigmoid(self) -> "DiffNode":
        return elementwise("sigmoid", self)

    def softplus(self) -> "DiffNode":
        return elementwise("softplus", self)

    def sum(self) -> "DiffNode":
        return reduce("sum", self)

    def mean(self) -> "DiffNode":
        return reduce("mean", self)

    def reshape(self, shape) -> "DiffNode":
        return reshape(self, shape)

    def __repr__(self) -> str:
        return f"DiffNode(op={self.op!r}, shape={self.shape})"


def leaf(value) -> DiffNode:
    """Create a parentless node. Gradients accumulate on every leaf."""
    return DiffNode(as_tensor(value))


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Undo a scalar-vs-tensor broadcast: the scalar side receives the sum.
    if grad.shape == shape:
        return grad
    return np.array(grad.sum(), dtype=np.float64).reshape(shape)


def _binary(
    kind: str,
    a: DiffNode,
    b: DiffNode,
    fwd: Callable[[np.ndarray, np.ndarray], np.ndarray],
    bwd_a: Callable,
    bwd_b: Callable,
) -> DiffNode:
    if a.shape != b.shape and a.value.size != 1 and b.value.size != 1:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} are not equal "
                         "(only scalar-vs-tensor broadcast is allowed)")
    ad, bd = a.value.data, b.value.data
    out = Tensor._wrap(_check_finite(fwd(ad, bd), kind))
    od = out.data

    def bwd(g: np.ndarray) -> tuple:
        return (
            _reduce_to(bwd_a(g, ad, bd, od), ad.shape),
            _reduce_to(bwd_b(g, ad, bd, od), bd.shape),
        )

    return DiffNode(out, kind, (a, b), bwd)


def _unary(
    kind: str,
    a: DiffNode,
    fwd: Callable[[np.ndarray], np.ndarray],
    bwd_a: Callable,
) -> DiffNode:
    ad = a.value.data
    out = Tensor._wrap(_check_finite(fwd(ad), kind))
    od = out.data

    def bwd(g: np.ndarray) -> tuple:
        return (bwd_a(g, ad, od),)

    return DiffNode(out, kind, (a,), bwd)


def elementwise(kind: str, a: DiffNode, b=None) -> DiffNode:
    """Pointwise operation dispatcher.

    Binary kinds (``add``, ``sub``, ``mul``, ``div``) take two nodes of
    equal shape, or one node and one single-element node. ``scale`` (alias
    ``scale-by-constant``) takes a node and a Python float. The rest are
    unary. ``abs`` uses subgradient 0 at exactly 0; ``relu`` likewise.
    """
    if kind in ("scale", "scale-by-constant"):
        if not isinstance(b, (int, float)):
            raise TypeError("scale expects a Python number as its second argument")
        c = float(b)
        return _unary("scale", a, lambda x: x * c, lambda g, x, o: g * c)

    if kind in ("add", "sub", "mul", "div"):
        if not isinstance(b, DiffNode):
            raise TypeError(f"{kind} expects a second DiffNode operand")
        if kind == "add":
            return _binary(kind, a, b, np.add,
                           lambda g, x, y, o: g,
                           lambda g, x, y, o: g)
        if kind == "sub":
            return _binary(kind, a, b, np.subtract,
                           lambda g, x, y, o: g,
                           lambda g, x, y, o: -g)
        if kind == "mul":
            return _binary(kind, a, b, np.multiply,
                           lambda g, x, y, o: g * y,
                           lambda g, x, y, o: g * x)
        return _binary(kind, a, b, np.divide,
                       lambda g, x, y, o: g / y,
                       lambda g, x, y, o: -g * x / (y * y))

    if b is not None:
        raise TypeError(f"{kind} is unary but got a second operand")
    if kind == "neg":
        return _unary(kind, a, np.negative, lambda g, x, o: -g)
    if kind == "abs":
        return _unary(kind, a, np.abs, lambda g, x, o: g * np.sign(x))
    if kind == "exp":
        return _unary(kind, a, np.exp, lambda g, x, o: g * o)
    if kind == "log":
        return _unary(kind, a, np.log, lambda g, x, o: g / x)
    if kind == "relu":
        return _unary(kind, a, lambda x: np.maximum(x, 0.0),
                      lambda g, x, o: g * (x > 0.0))
    if kind == "sigmoid":
        return _unary(kind, a, stable_sigmoid, lambda g, x, o: g * o * (1.0 - o))
    if kind == "softplus":
        return _unary(kind, a, stable_softplus, lambda g, x, o: g * stable_sigmoid(x))
    raise ValueError(f"unknown elementwise kind {kind!r}")


def matmul(a: DiffNode, b: DiffNode) -> DiffNode:
    """Standard 2-D matrix product with the usual transpose backward rules."""
    ad, bd = a.value.data, b.value.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out = Tensor._wrap(_check_finite(ad @ bd, "matmul"))

    def bwd(g: np.ndarray) -> tuple:
        return (g @ bd.T, ad.T @ g)

    return DiffNode(out, "matmul", (a, b), bwd)


def reduce(kind: str, a: DiffNode) -> DiffNode:
    """Full reduction to a scalar node; backward broadcasts the adjoint."""
    ad = a.value.data
    if ad.size == 0:
        raise ShapeError(f"reduce {kind!r} of an empty tensor")
    if kind == "sum":
        out = Tensor._wrap(np.array(ad.sum()))
        bwd = lambda g: (np.full(ad.shape, float(g)),)  # noqa: E731
    elif kind == "mean":
        out = Tensor._wrap(np.array(ad.mean()))
        n = ad.size
        bwd = lambda g: (np.full(ad.shape, float(g) / n),)  # noqa: E731
    else:
        raise ValueError(f"unknown reduce kind {kind!r}")
    _check_finite(out.data, kind)
    return DiffNode(out, kind, (a,), bwd)


def reshape(a: DiffNode, shape) -> DiffNode:
    out = a.value.reshape(shape)
    src_shape = a.value.shape

    def bwd(g: np.ndarray) -> tuple:
        return (g.reshape(src_shape),)

    return DiffNode(out, "reshape", (a,), bwd)


def _topo_order(root: DiffNode) -> list[DiffNode]:
    order: list[DiffNode] = []
    seen: set[int] = set()
    stack: list[tuple[DiffNode, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            stack.append((parent, False))
    return order  # ancestors before descendants; root last


def backward(loss: DiffNode) -> dict[DiffNode, Tensor]:
    """Populate adjoints for every node reachable from a scalar loss.

    Returns a map from node to its gradient. A graph can be differentiated
    once; rebuild the tape for another pass.
    """
    if loss.value.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise GraphError("backward already ran on this graph; rebuild the tape")
    loss._backward_done = True

    order = _topo_order(loss)
    loss._adjoint = np.ones_like(loss.value.data)
    for node in reversed(order):
        g = node._adjoint
        if g is None or node._bwd is None:
            continue
        for parent, contrib in zip(node.parents, node._bwd(g)):
            if contrib is None:
                continue
            _check_finite(contrib, f"backward of {node.op!r}")
            if parent._adjoint is None:
                # Copy: backward rules may return the adjoint array itself.
                parent._adjoint = np.array(contrib, dtype=np.float64)
            else:
                parent._adjoint += contrib
    grads: dict[DiffNode, Tensor] = {}
    for node in order:
        if node._adjoint is not None:
            grads[node] = Tensor._wrap(node._adjoint)
    return grads


def grad_check(f: Callable[[DiffNode], DiffNode], x: Tensor, eps: float = 1e-5) -> float:
    """Compare the analytic gradient of a scalar function against central
    finite differences, returning max over coordinates of
    |analytic - numeric| / max(1, |numeric|).
    """
    lx = leaf(x)
    out = f(lx)
    if out.value.size != 1:
        raise GraphError("grad_check needs a scalar-valued function")
    grads = backward(out)
    analytic = grads[lx].data.ravel() if lx in grads else np.zeros(x.size)

    flat = x.data.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        hi = f(leaf(Tensor(bumped.reshape(x.shape)))).value.item()
        bumped[i] = flat[i] - eps
        lo = f(leaf(Tensor(bumped.reshape(x.shape)))).value.item()
        numeric[i] = (hi - lo) / (2.0 * eps)
    _check_finite(numeric, "grad_check finite differences")
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(rel.max()) if rel.size else 0.0
