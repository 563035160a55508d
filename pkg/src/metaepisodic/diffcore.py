"""Reverse-mode calculus over dense float64 vectors and matrices.

A small fixed-op tape: just enough operations to differentiate a residual
adapter with cosine-prototype cross-entropy, plus the linear-algebra pieces
the test oracles need. Every exported result is checked finite; a NaN or Inf
raises :class:`NumericError` naming the stage instead of propagating.
"""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np

__all__ = [
    "DimensionError",
    "NumericError",
    "Node",
    "DifferentiableObjective",
    "as_vector",
    "as_matrix",
    "constant",
    "segment",
    "reshape",
    "matmul",
    "matvec",
    "add_bias",
    "relu",
    "lincomb",
    "scale",
    "dot",
    "normalize_rows",
    "cosine_scores",
    "softmax_cross_entropy",
    "softmax",
    "backward",
    "evaluate",
    "gradient",
    "hvp",
]


class DimensionError(ValueError):
    """A shape or length precondition was violated."""


class NumericError(ArithmeticError):
    """A non-finite value appeared; the message names the offending stage."""


# Row norms below this cannot be normalized without overflow.
_TINY_NORM = float(np.sqrt(np.finfo(np.float64).tiny))


def _require_finite(value, stage: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{stage}: non-finite value")


def as_vector(values) -> np.ndarray:
    """Copy ``values`` into a finite 1-D float64 array."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {arr.shape}")
    _require_finite(arr, "vector construction")
    return arr


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Copy ``values`` into a finite 2-D float64 array, optionally checking shape."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {arr.shape}")
    if rows is not None and arr.shape[0] != rows:
        raise DimensionError(f"expected {rows} rows, got {arr.shape[0]}")
    if cols is not None and arr.shape[1] != cols:
        raise DimensionError(f"expected {cols} cols, got {arr.shape[1]}")
    _require_finite(arr, "matrix construction")
    return arr


class Node:
    """One value in the computation graph.

    ``parents`` pairs each input node with the vector-Jacobian product that
    maps this node's adjoint back to that input.
    """

    __slots__ = ("value", "parents", "grad")

    def __init__(self, value, parents=()):
        self.value = value
        self.parents = parents
        self.grad = None


def constant(value) -> Node:
    """Wrap an array as a graph node with no inputs."""
    return Node(np.asarray(value, dtype=np.float64))


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, parents, stage: str) -> Node:
    _require_finite(value, stage)
    return Node(value, parents)


def segment(x: Node, start: int, stop: int) -> Node:
    """Contiguous slice of a 1-D node."""
    n = x.value.shape[0]
    if not (0 <= start <= stop <= n):
        raise DimensionError(f"segment [{start}:{stop}] out of range for length {n}")

    def vjp(g, start=start, stop=stop, n=n):
        out = np.zeros(n)
        out[start:stop] = g
        return out

    return _make(x.value[start:stop].copy(), ((x, vjp),), "segment")


def reshape(x: Node, shape) -> Node:
    old = x.value.shape
    return _make(
        x.value.reshape(shape).copy(),
        ((x, lambda g, old=old: g.reshape(old)),),
        "reshape",
    )


def matmul(a, b) -> Node:
    """Matrix product of two 2-D nodes."""
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}"
        )
    out = a.value @ b.value
    parents = (
        (a, lambda g, bv=b.value: g @ bv.T),
        (b, lambda g, av=a.value: av.T @ g),
    )
    return _make(out, parents, "matmul")


def matvec(a, x: Node) -> Node:
    """Matrix-vector product; the matrix is a constant."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or x.value.ndim != 1 or a.shape[1] != x.value.shape[0]:
        raise DimensionError(f"matvec shape mismatch: {a.shape} @ {x.value.shape}")
    return _make(a @ x.value, ((x, lambda g, a=a: a.T @ g),), "matvec")


def add_bias(x: Node, b: Node) -> Node:
    """Add a 1-D bias to every row of a 2-D node."""
    if x.value.ndim != 2 or b.value.ndim != 1 or x.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"add_bias shape mismatch: {x.value.shape} + {b.value.shape}"
        )
    parents = ((x, lambda g: g), (b, lambda g: g.sum(axis=0)))
    return _make(x.value + b.value, parents, "add_bias")


def relu(x: Node) -> Node:
    mask = x.value > 0.0
    return _make(
        np.where(mask, x.value, 0.0),
        ((x, lambda g, mask=mask: g * mask),),
        "relu",
    )


def lincomb(ca: float, a: Node, cb: float, b: Node) -> Node:
    """``ca*a + cb*b`` with constant scalar coefficients."""
    if a.value.shape != b.value.shape:
        raise DimensionError(
            f"lincomb shape mismatch: {a.value.shape} vs {b.value.shape}"
        )
    parents = ((a, lambda g, ca=ca: ca * g), (b, lambda g, cb=cb: cb * g))
    return _make(ca * a.value + cb * b.value, parents, "lincomb")


def scale(c: float, x: Node) -> Node:
    return _make(c * x.value, ((x, lambda g, c=c: c * g),), "scale")


def dot(a: Node, b: Node) -> Node:
    """Inner product of two 1-D nodes; the result is a scalar node."""
    if a.value.ndim != 1 or b.value.ndim != 1 or a.value.shape != b.value.shape:
        raise DimensionError(
            f"dot shape mismatch: {a.value.shape} vs {b.value.shape}"
        )
    parents = (
        (a, lambda g, bv=b.value: g * bv),
        (b, lambda g, av=a.value: g * av),
    )
    return _make(float(a.value @ b.value), parents, "dot")


def normalize_rows(x: Node) -> Node:
    """Scale every row of a 2-D node to unit Euclidean norm."""
    norms = np.linalg.norm(x.value, axis=1)
    small = norms < _TINY_NORM
    if np.any(small):
        row = int(np.argmax(small))
        raise NumericError(f"normalize_rows: zero-norm row {row}")
    unit = x.value / norms[:, None]

    def vjp(g, unit=unit, norms=norms):
        return (g - unit * np.sum(unit * g, axis=1, keepdims=True)) / norms[:, None]

    return _make(unit, ((x, vjp),), "normalize_rows")


def cosine_scores(x: Node, prototypes, logit_scale: float) -> Node:
    """``logit_scale * x @ prototypes.T`` with constant prototype rows.

    With unit-norm inputs and prototypes each entry is a scaled cosine.
    """
    p = np.asarray(prototypes, dtype=np.float64)
    if x.value.ndim != 2 or p.ndim != 2 or x.value.shape[1] != p.shape[1]:
        raise DimensionError(
            f"cosine_scores shape mismatch: {x.value.shape} vs prototypes {p.shape}"
        )
    out = logit_scale * (x.value @ p.T)
    return _make(
        out, ((x, lambda g, p=p, s=logit_scale: s * (g @ p)),), "cosine_scores"
    )


def softmax(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain score matrix (not a graph op)."""
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Mean softmax cross-entropy of logit rows against integer labels."""
    y = np.asarray(labels, dtype=np.int64)
    z = logits.value
    if z.ndim != 2 or y.ndim != 1 or z.shape[0] != y.shape[0]:
        raise DimensionError(
            f"softmax_cross_entropy shape mismatch: logits {z.shape}, labels {y.shape}"
        )
    if y.size and (y.min() < 0 or y.max() >= z.shape[1]):
        raise DimensionError("softmax_cross_entropy: label out of range")
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1)) + z.max(axis=1)
    loss = float(np.mean(logsumexp - z[np.arange(n), y]))
    probs = softmax(z)

    def vjp(g, probs=probs, y=y, n=n):
        grad = probs.copy()
        grad[np.arange(n), y] -= 1.0
        return (g / n) * grad

    return _make(loss, ((logits, vjp),), "softmax_cross_entropy")


def backward(root: Node) -> None:
    """Accumulate adjoints of every node reachable from a scalar root."""
    if np.ndim(root.value) != 0:
        raise DimensionError("backward requires a scalar root")
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            stack.append((parent, False))

    root.grad = 1.0
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in node.parents:
            contribution = vjp(node.grad)
            if parent.grad is None:
                parent.grad = contribution
            else:
                parent.grad = parent.grad + contribution


@runtime_checkable
class DifferentiableObjective(Protocol):
    """Contract for losses the calculus can evaluate and differentiate.

    ``build`` assembles the loss graph from a flat parameter node and a batch
    and returns the scalar loss node plus the raw per-example score matrix
    (``None`` for objectives without a classification head). ``build`` must be
    pure: identical inputs produce identical outputs.
    """

    @property
    def param_length(self) -> int: ...

    def build(self, params: Node, batch) -> tuple[Node, np.ndarray | None]: ...


def _check_params(obj: DifferentiableObjective, theta: np.ndarray) -> np.ndarray:
    theta = as_vector(theta)
    if theta.shape[0] != obj.param_length:
        raise DimensionError(
            f"parameter length {theta.shape[0]} != objective's {obj.param_length}"
        )
    return theta


def evaluate(
    obj: DifferentiableObjective, theta, batch
) -> tuple[float, np.ndarray | None]:
    """Loss value and scores at ``theta`` without differentiation."""
    theta = _check_params(obj, theta)
    loss, scores = obj.build(Node(theta), batch)
    _require_finite(loss.value, "loss")
    return float(loss.value), scores


def gradient(obj: DifferentiableObjective, theta, batch) -> np.ndarray:
    """Gradient of the batch loss with respect to the flat parameters."""
    theta = _check_params(obj, theta)
    leaf = Node(theta)
    loss, _ = obj.build(leaf, batch)
    _require_finite(loss.value, "loss")
    backward(loss)
    if leaf.grad is None:
        return np.zeros_like(theta)
    grad = np.asarray(leaf.grad, dtype=np.float64)
    _require_finite(grad, "gradient")
    return grad


def hvp(obj: DifferentiableObjective, theta, batch, v) -> np.ndarray:
    """Hessian-vector product by central differences of the gradient.

    Uses step ``h = cbrt(machine eps) * (1 + max|theta|)`` along the unit
    direction of ``v`` and rescales by ``|v|``. A zero ``v`` returns an exact
    zero vector.
    """
    theta = _check_params(obj, theta)
    v = as_vector(v)
    if v.shape[0] == 0:
        raise DimensionError("hvp: zero-length direction")
    if v.shape != theta.shape:
        raise DimensionError(
            f"hvp: direction length {v.shape[0]} != parameter length {theta.shape[0]}"
        )
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        return np.zeros_like(theta)
    h = float(np.cbrt(np.finfo(np.float64).eps)) * (1.0 + float(np.abs(theta).max()))
    unit = v / norm
    g_plus = gradient(obj, theta + h * unit, batch)
    g_minus = gradient(obj, theta - h * unit, batch)
    return (g_plus - g_minus) * (norm / (2.0 * h))
