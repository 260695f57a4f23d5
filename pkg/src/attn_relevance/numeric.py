"""Dense float64 arithmetic with a small reverse-mode tape.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Differentiable
computations are recorded on a :class:`GradTape` as a Wengert list of
:class:`Node` objects; :meth:`GradTape.gradients` walks the list backwards and
:meth:`GradTape.replay` re-runs it forwards (optionally with some node values
overridden).

Batched operations broadcast over leading axes exactly like ``numpy.matmul``.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, OracleFailure, RejectedInput

DTYPE = np.float64


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    arr = np.array(x, dtype=DTYPE)
    check_finite(arr, name)
    return arr


def check_finite(arr: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains NaN or infinity")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product with an optional shared leading (heads) extent.

    ``a`` is ``[..., m, k]`` and ``b`` is ``[..., k, n]``; leading extents
    broadcast.
    """
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim < 2 or b.ndim < 2:
        raise RejectedInput(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise RejectedInput(f"inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise RejectedInput(f"batch extents do not broadcast: {a.shape} @ {b.shape}") from exc
    return check_finite(a @ b, "matmul result")


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(t) -> np.ndarray:
    """Softmax over the last axis, max-subtracted for stability."""
    t = np.asarray(t, dtype=DTYPE)
    if t.ndim == 0 or t.shape[-1] == 0:
        raise RejectedInput("softmax_rows needs a non-empty last axis")
    check_finite(t, "softmax input")
    return _softmax(t)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class Node:
    """One recorded value on a tape."""

    __slots__ = ("tape", "index", "op", "value", "parents", "forward", "backward")

    def __init__(self, tape, index, op, value, parents, forward, backward):
        self.tape = tape
        self.index = index
        self.op = op
        self.value = value
        self.parents = parents
        self.forward = forward
        self.backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(_lift(self.tape, other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return mm(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Node(#{self.index} {self.op} {self.value.shape})"


class GradTape:
    """Single-writer record of a forward computation.

    ``watched`` maps names to nodes whose gradients callers care about (the
    attention maps); ``output`` is the node that :func:`grad_of` selects from.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.watched: dict[str, Node] = {}
        self.output: Node | None = None

    def leaf(self, value, op: str = "leaf") -> Node:
        value = np.array(value, dtype=DTYPE)
        node = Node(self, len(self.nodes), op, value, (), None, None)
        self.nodes.append(node)
        return node

    def apply(self, op: str, forward: Callable, backward: Callable, *parents: Node) -> Node:
        value = forward(*(p.value for p in parents))
        check_finite(value, f"result of {op}")
        node = Node(self, len(self.nodes), op, value, parents, forward, backward)
        self.nodes.append(node)
        return node

    def watch(self, name: str, node: Node) -> Node:
        self.watched[name] = node
        return node

    def gradients(self, output: Node, seed: np.ndarray) -> list[np.ndarray | None]:
        """Reverse sweep; returns d(<seed, output>)/d(node) for every node.

        Entries are ``None`` for nodes the output does not depend on.
        """
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[output.index] = np.asarray(seed, dtype=DTYPE)
        for node in reversed(self.nodes[: output.index + 1]):
            g = grads[node.index]
            if g is None or not node.parents:
                continue
            parent_grads = node.backward(g, node.value, *(p.value for p in node.parents))
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                if grads[parent.index] is None:
                    grads[parent.index] = pg
                else:
                    grads[parent.index] = grads[parent.index] + pg
        return grads

    def replay(self, overrides: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Re-evaluate every node in order.

        Without overrides this reproduces the recorded values exactly.  An
        override replaces a node's value and everything downstream is
        recomputed from it.
        """
        overrides = overrides or {}
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.index in overrides:
                values.append(np.asarray(overrides[node.index], dtype=DTYPE))
            elif not node.parents:
                values.append(node.value)
            else:
                values.append(node.forward(*(values[p.index] for p in node.parents)))
        return values


def _lift(tape: GradTape, x) -> Node:
    return x if isinstance(x, Node) else tape.leaf(x, op="const")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# differentiable operations
# ---------------------------------------------------------------------------


def add(a, b) -> Node:
    tape = (a if isinstance(a, Node) else b).tape
    a, b = _lift(tape, a), _lift(tape, b)
    return tape.apply(
        "add",
        np.add,
        lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
        a,
        b,
    )


def mul(a, b) -> Node:
    tape = (a if isinstance(a, Node) else b).tape
    a, b = _lift(tape, a), _lift(tape, b)
    return tape.apply(
        "mul",
        np.multiply,
        lambda g, out, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        a,
        b,
    )


def scale(a: Node, c: float) -> Node:
    return a.tape.apply("scale", lambda x: x * c, lambda g, out, x: (g * c,), a)


def mm(a, b) -> Node:
    tape = (a if isinstance(a, Node) else b).tape
    a, b = _lift(tape, a), _lift(tape, b)
    if a.shape[-1] != b.shape[-2]:
        raise RejectedInput(f"inner extents differ: {a.shape} @ {b.shape}")

    def backward(g, out, x, y):
        gx = g @ np.swapaxes(y, -1, -2)
        gy = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

    return tape.apply("matmul", np.matmul, backward, a, b)


def softmax(a: Node) -> Node:
    def backward(g, y, x):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return a.tape.apply("softmax", _softmax, backward, a)


def tanh(a: Node) -> Node:
    return a.tape.apply("tanh", np.tanh, lambda g, y, x: (g * (1.0 - y * y),), a)


def sigmoid(a: Node) -> Node:
    def forward(x):
        return 0.5 * (np.tanh(0.5 * x) + 1.0)

    return a.tape.apply("sigmoid", forward, lambda g, y, x: (g * y * (1.0 - y),), a)


def reshape(a: Node, shape: Sequence[int]) -> Node:
    shape = tuple(shape)
    return a.tape.apply(
        "reshape", lambda x: x.reshape(shape), lambda g, out, x: (g.reshape(x.shape),), a
    )


def transpose(a: Node, axes: Sequence[int]) -> Node:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return a.tape.apply(
        "transpose",
        lambda x: np.transpose(x, axes),
        lambda g, out, x: (np.transpose(g, inverse),),
        a,
    )


def gather(table: Node, ids: np.ndarray) -> Node:
    """Row lookup ``table[ids]`` (embedding)."""
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g, out, t):
        gt = np.zeros_like(t)
        np.add.at(gt, ids, g)
        return (gt,)

    return table.tape.apply("gather", lambda t: t[ids], backward, table)


def getitem(a: Node, idx) -> Node:
    def backward(g, out, x):
        gx = np.zeros_like(x)
        np.add.at(gx, idx, g)
        return (gx,)

    return a.tape.apply("getitem", lambda x: x[idx], backward, a)


def concat(nodes: Sequence[Node], axis: int) -> Node:
    tape = nodes[0].tape
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def backward(g, out, *xs):
        return tuple(np.split(g, splits, axis=axis))

    return tape.apply("concat", lambda *xs: np.concatenate(xs, axis=axis), backward, *nodes)


def total(a: Node) -> Node:
    return a.tape.apply(
        "sum", lambda x: np.array(x.sum()), lambda g, out, x: (np.broadcast_to(g, x.shape).copy(),), a
    )


def cross_entropy(logits: Node, labels: np.ndarray, weights: np.ndarray | None = None) -> Node:
    """Mean softmax cross-entropy over all leading positions.

    ``logits`` is ``[..., c]`` and ``labels`` holds integer classes of shape
    ``logits.shape[:-1]``.  ``weights`` (same shape as ``labels``) rescales each
    position; the mean divides by the weight total.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if weights is None:
        weights = np.ones(labels.shape, dtype=DTYPE)
    denom = float(weights.sum())
    onehot = np.zeros(logits.shape, dtype=DTYPE)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)

    def forward(x):
        z = x - x.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        return np.array(-(weights * (logp * onehot).sum(axis=-1)).sum() / denom)

    def backward(g, out, x):
        p = _softmax(x)
        return (g * (p - onehot) * (weights / denom)[..., None],)

    return logits.tape.apply("cross_entropy", forward, backward, logits)


# ---------------------------------------------------------------------------
# gradient extraction
# ---------------------------------------------------------------------------


def grad_of(tape: GradTape, output_index, names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Gradient of one selected output entry w.r.t. the watched nodes.

    ``output_index`` indexes ``tape.output.value``; it may be an int, a tuple,
    or a tuple of index arrays (one selected entry per batch row, summed).
    Watched nodes the selection does not depend on get an all-zero gradient.
    """
    if tape.output is None:
        raise RejectedInput("tape has no registered output")
    out = tape.output.value
    seed = np.zeros_like(out)
    try:
        np.add.at(seed, output_index, 1.0)
    except (IndexError, TypeError) as exc:
        raise RejectedInput(f"output index {output_index!r} out of range for {out.shape}") from exc
    grads = tape.gradients(tape.output, seed)
    names = list(tape.watched) if names is None else list(names)
    result = {}
    for name in names:
        node = tape.watched[name]
        g = grads[node.index]
        result[name] = np.zeros_like(node.value) if g is None else g
    return result


def finite_diff(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = float(f(x))
        flat[k] = orig - h
        down = float(f(x))
        flat[k] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise OracleFailure(f"f is not finite around element {k}")
        gflat[k] = (up - down) / (2.0 * h)
    return grad
