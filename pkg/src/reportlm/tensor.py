"""Dense float64 tensors with reverse-mode automatic differentiation.

Only what the models in this package need is supported: 2-D matrix products,
elementwise maps, row/column slicing, concatenation, row gathers and a few
fused losses.  Broadcasting is limited to scalar-with-tensor and equal shapes;
row-vector biases go through :func:`add_bias` explicitly.

Every tensor records the operation that produced it together with a global
construction counter.  :meth:`Tensor.backward` collects the ancestors of the
output and visits them once each in reverse construction order, which is a
valid reverse topological order because parents are always built first.
"""

from __future__ import annotations

import contextlib
import itertools
from collections import Counter

import numpy as np

from .exceptions import ShapeError, ValidationError

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "diagnostics",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "add_bias",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "sum",
    "mean",
    "concat",
    "take_rows",
    "segment_max",
    "dropout",
    "lstm_cell",
    "softmax",
    "softmax_cross_entropy",
    "binary_cross_entropy",
]

_counter = itertools.count()
_grad_enabled = True

#: Counts of numerically degenerate events (overflowing ``exp``, ``log`` of a
#: non-positive value).  Such events return IEEE infinities/NaNs instead of
#: raising, and are tallied here for later inspection.
diagnostics: Counter = Counter()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array that can take part in a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_order", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._order = next(_counter)
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        """A constant tensor sharing this tensor's values."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    # -- backward ------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tracked ancestor."""
        if not self.requires_grad:
            raise ValidationError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without an explicit gradient needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._order in nodes:
                continue
            nodes[node._order] = node
            for parent in node._parents:
                if parent.requires_grad and parent._order not in nodes:
                    stack.append(parent)

        # intermediate grads from an earlier backward over the same graph would double count
        for node in nodes.values():
            if node._backward is not None:
                node.grad = None
        _accumulate(self, grad)
        for order in sorted(nodes, reverse=True):
            node = nodes[order]
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# graph helpers
# ---------------------------------------------------------------------------

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _accumulate(t: Tensor, g, fresh=False) -> None:
    # grads stored on a tensor are always owned, so later in-place adds are safe;
    # ``fresh`` marks a temporary nobody else references, which can be adopted
    if t.grad is None:
        t.grad = g if fresh and g.shape == t.shape else np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _scatter(t: Tensor, key, g) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad[key] += g


def _make(data, parents, backward) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0 or t.data.size == 1 and t.data.ndim <= 1


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are neither equal nor scalar-with-tensor")


def _reduce_to(g, t: Tensor):
    """Sum a gradient back down to the shape of a scalar operand."""
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "add")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to(g, a))
        if b.requires_grad:
            _accumulate(b, _reduce_to(g, b))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to(g, a))
        if b.requires_grad:
            _accumulate(b, _reduce_to(-g, b), fresh=True)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to(g * b.data, a), fresh=True)
        if b.requires_grad:
            _accumulate(b, _reduce_to(g * a.data, b), fresh=True)

    return _make(a.data * b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _accumulate(a, -g, fresh=True)

    return _make(-a.data, (a,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T, fresh=True)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g, fresh=True)

    return _make(a.data @ b.data, (a, b), backward)


def add_bias(x, bias) -> Tensor:
    """Add a length-n bias vector to every row of an m-by-n tensor."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if x.ndim != 2 or bias.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: bias {bias.shape} does not match rows of {x.shape}")

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0), fresh=True)

    return _make(x.data + bias.data, (x, bias), backward)


def _sigmoid(z):
    # tanh form never overflows
    return 0.5 * np.tanh(0.5 * z) + 0.5


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = _sigmoid(x.data)

    def backward(g):
        _accumulate(x, g * out * (1.0 - out), fresh=True)

    return _make(out, (x,), backward)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        _accumulate(x, g * (1.0 - out * out), fresh=True)

    return _make(out, (x,), backward)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask, fresh=True)

    return _make(np.where(mask, x.data, 0.0), (x,), backward)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    overflow = int(np.isinf(out).sum())
    if overflow:
        diagnostics["exp_overflow"] += overflow

    def backward(g):
        _accumulate(x, g * out, fresh=True)

    return _make(out, (x,), backward)


def log(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    bad = int((x.data <= 0).sum())
    if bad:
        diagnostics["log_domain"] += bad

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            _accumulate(x, g / x.data)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and structural ops
# ---------------------------------------------------------------------------

def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)

    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum()), (x,), backward)


def mean(x) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size

    def backward(g):
        _accumulate(x, np.broadcast_to(g / n, x.shape))

    return _make(np.asarray(x.data.mean()), (x,), backward)


def _getitem(x: Tensor, key) -> Tensor:
    out = x.data[key]

    def backward(g):
        _scatter(x, key, g)

    return _make(out, (x,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValidationError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} along axis {axis}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(index)])

    return _make(out, tuple(tensors), backward)


def take_rows(table, indices) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    table = _as_tensor(table)
    indices = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-D table, got {table.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ValidationError(f"take_rows: index out of range for table with {table.shape[0]} rows")

    def backward(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, indices, g)

    return _make(table.data[indices], (table,), backward)


def segment_max(x, segments) -> Tensor:
    """Column-wise max over groups of rows; ``segments`` is a list of row-index arrays."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"segment_max needs a 2-D tensor, got {x.shape}")
    rows = []
    out = np.empty((len(segments), x.shape[1]))
    cols = np.arange(x.shape[1])
    for i, seg in enumerate(segments):
        seg = np.asarray(seg, dtype=np.int64)
        if seg.size == 0:
            raise ValidationError(f"segment_max: segment {i} is empty")
        arg = seg[np.argmax(x.data[seg], axis=0)]
        rows.append(arg)
        out[i] = x.data[arg, cols]

    def backward(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        for i, arg in enumerate(rows):
            np.add.at(x.grad, (arg, cols), g[i])

    return _make(out, (x,), backward)


def dropout(x, rate, training=True, rng=None) -> Tensor:
    """Inverted dropout; the identity at inference time or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate must lie in [0, 1), got {rate}")
    x = _as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValidationError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(g):
        _accumulate(x, g * keep, fresh=True)

    return _make(x.data * keep, (x,), backward)


def lstm_cell(z, c_prev):
    """Fused LSTM gate update; returns ``(h, c)``.

    ``z`` holds the packed pre-activations ``[i | f | g | o]`` (``B x 4H``).
    Computes ``c = sigmoid(f) * c_prev + sigmoid(i) * tanh(g)`` and
    ``h = sigmoid(o) * tanh(c)`` with one hand-derived backward instead of a
    dozen primitive nodes.  ``nn.lstm_step`` composes the same update from
    primitives and serves as its cross-check.
    """
    z, c_prev = _as_tensor(z), _as_tensor(c_prev)
    if z.ndim != 2 or z.shape[1] % 4 or c_prev.shape != (z.shape[0], z.shape[1] // 4):
        raise ShapeError(f"lstm_cell: pre-activations {z.shape} incompatible with cell state {c_prev.shape}")
    H = c_prev.shape[1]
    act = _sigmoid(z.data)
    i, f, o = act[:, :H], act[:, H:2 * H], act[:, 3 * H:]
    g = np.tanh(z.data[:, 2 * H:3 * H])
    c = f * c_prev.data + i * g
    tc = np.tanh(c)
    h = o * tc
    packed = _make(np.concatenate([h, c], axis=1), (z, c_prev), None)
    if packed.requires_grad:
        def backward(grad):
            dh, dc = grad[:, :H], grad[:, H:]
            dc = dc + dh * o * (1.0 - tc * tc)
            if z.requires_grad:
                dz = np.empty_like(z.data)
                dz[:, :H] = dc * g * i * (1.0 - i)
                dz[:, H:2 * H] = dc * c_prev.data * f * (1.0 - f)
                dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
                dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
                _accumulate(z, dz, fresh=True)
            if c_prev.requires_grad:
                _accumulate(c_prev, dc * f, fresh=True)

        packed._backward = backward
    return packed[:, :H], packed[:, H:]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def softmax(z, axis=-1):
    """Numerically stable softmax of a plain array."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, targets, weights=None) -> Tensor:
    """Weighted mean over rows of ``-log softmax(logits)[target]``.

    ``weights`` (one non-negative value per row, default all ones) doubles as a
    padding mask: rows with weight 0 contribute neither loss nor gradient.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy needs batch x classes logits, got {logits.shape}")
    n, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise ShapeError(f"{targets.shape[0]} targets for {n} logit rows")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != n:
        raise ShapeError(f"{w.shape[0]} weights for {n} logit rows")
    bad = np.flatnonzero((targets < 0) | (targets >= v))
    if bad.size:
        row = int(bad[0])
        raise IndexError(f"target index {int(targets[row])} out of range [0, {v}) at row {row}")
    total = w.sum()
    if total <= 0:
        raise ValidationError("softmax_cross_entropy: all rows have zero weight")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    nll = logsumexp - shifted[rows, targets]
    loss = float((w * nll).sum() / total)

    def backward(g):
        probs = np.exp(shifted - logsumexp[:, None])
        probs[rows, targets] -= 1.0
        _accumulate(logits, probs * (w / total)[:, None] * g, fresh=True)

    return _make(np.asarray(loss), (logits,), backward)


def binary_cross_entropy(probabilities, targets, eps=1e-12, pos_weight=None) -> Tensor:
    """Mean over all cells of ``-[y log p + (1 - y) log(1 - p)]``.

    Probabilities are clamped to ``[eps, 1 - eps]``; clamped cells pass no
    gradient.  ``pos_weight`` optionally scales the positive term per column.
    """
    p = _as_tensor(probabilities)
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if y.shape != p.shape:
        raise ShapeError(f"binary_cross_entropy: targets {y.shape} vs probabilities {p.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValidationError("binary_cross_entropy targets must be 0 or 1")
    pw = np.ones(p.shape[-1] if p.ndim else 1) if pos_weight is None else np.asarray(pos_weight, dtype=np.float64)
    clamped = np.clip(p.data, eps, 1.0 - eps)
    inside = (p.data >= eps) & (p.data <= 1.0 - eps)
    n = p.data.size
    cell = -(pw * y * np.log(clamped) + (1.0 - y) * np.log1p(-clamped))
    loss = float(cell.sum() / n)

    def backward(g):
        d = (-(pw * y) / clamped + (1.0 - y) / (1.0 - clamped)) / n
        _accumulate(p, g * d * inside, fresh=True)

    return _make(np.asarray(loss), (p,), backward)
