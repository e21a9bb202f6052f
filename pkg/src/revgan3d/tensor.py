"""Dense tensors and a reverse-mode gradient tape.

Every differentiable op computes its forward value eagerly with numpy and,
when gradients are being recorded, appends a :class:`Node` to the active
:class:`Tape`.  ``backward`` walks the tape in reverse and consumes it.

Each node declares the activation buffers it keeps alive for its backward
rule together with a retain policy.  The tape's :class:`ActivationLedger`
sums the distinct ``Stored`` buffers, which is how the memory reports are
produced.
"""
from __future__ import annotations

import enum
import itertools
import os
import threading
from contextlib import contextmanager

import numpy as np

from .errors import NumericFault, ShapeError, TapeStateError

DEFAULT_DTYPE = np.float32


class Retain(enum.Enum):
    STORED = "stored"
    RECOMPUTABLE = "recomputable"


_op_counter = itertools.count()
_debug = os.environ.get("REVGAN3D_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Toggle NaN/Inf checks after every op."""
    global _debug
    _debug = bool(flag)


def debug_enabled() -> bool:
    return _debug


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.tapes = []
        self.default_tape = None
        self.shadow = None
        self.last_op = None


_state = _State()


def last_op_id():
    """Id of the most recently executed op on this thread (for diagnostics)."""
    return _state.last_op


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def enable_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = True
    try:
        yield
    finally:
        _state.grad_enabled = prev


def grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def shadow_ledger(ledger):
    """Account ops run without recording as ``Recomputable`` entries of `ledger`."""
    prev = _state.shadow
    _state.shadow = ledger
    try:
        yield
    finally:
        _state.shadow = prev


class ActivationLedger:
    """Byte account of the activation buffers a tape keeps for backward.

    Buffers are deduplicated by identity, so an array saved by two nodes is
    counted once.  ``stored_bytes`` is the live total, ``peak_bytes`` the
    maximum seen, including transient working sets reported through
    :meth:`transient`.
    """

    def __init__(self):
        self.stored_bytes = 0
        self.peak_bytes = 0
        self.per_node = {}
        self._live = {}

    def retain(self, op_id, arrays, policy):
        added = 0
        if policy is Retain.STORED:
            for a in arrays:
                entry = self._live.get(id(a))
                if entry is None:
                    self._live[id(a)] = [a, 1]
                    added += a.nbytes
                else:
                    entry[1] += 1
        self.per_node[op_id] = (policy, added)
        self.stored_bytes += added
        self.peak_bytes = max(self.peak_bytes, self.stored_bytes)

    def release(self, arrays):
        for a in arrays:
            entry = self._live.get(id(a))
            if entry is None:
                continue
            entry[1] -= 1
            if entry[1] == 0:
                del self._live[id(a)]
                self.stored_bytes -= a.nbytes

    def transient(self, nbytes):
        self.peak_bytes = max(self.peak_bytes, self.stored_bytes + int(nbytes))

    def bytes_by_policy(self):
        totals = {p: 0 for p in Retain}
        for policy, nbytes in self.per_node.values():
            totals[policy] += nbytes
        return totals

    def count(self, policy):
        return sum(1 for p, _ in self.per_node.values() if p is policy)


class Node:
    __slots__ = ("op", "op_id", "tape", "parents", "backward_fn", "saved", "policy", "out_shape")

    def __init__(self, op, op_id, tape, parents, backward_fn, saved, policy, out_shape):
        self.op = op
        self.op_id = op_id
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.saved = saved
        self.policy = policy
        self.out_shape = out_shape

    def __repr__(self):
        return f"Node({self.op_id}, {self.policy.value})"


class Tape:
    """Ordered record of executed ops; single use.

    Use as a context manager to make it the active tape for the current
    thread.  Outside any ``with Tape()`` block ops record onto a per-thread
    default tape that is replaced once consumed.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False
        self.ledger = ActivationLedger()

    def record(self, op, op_id, parents, backward_fn, saved, policy, out_shape):
        if self.consumed:
            raise TapeStateError(f"cannot record {op_id}: tape already consumed by backward()")
        node = Node(op, op_id, self, parents, backward_fn, tuple(saved), policy, out_shape)
        self.nodes.append(node)
        self.ledger.retain(op_id, node.saved, policy)
        return node

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False


def current_tape() -> Tape:
    if _state.tapes:
        return _state.tapes[-1]
    tape = _state.default_tape
    if tape is None or tape.consumed:
        tape = _state.default_tape = Tape()
    return tape


class Tensor:
    """N-dimensional float array that can participate in the gradient tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def backward(self, grad=None):
        backward(self, grad)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean(self)

    def abs(self):
        return abs_(self)


def record_op(op, data, parents, backward_fn, saved=(), policy=Retain.STORED):
    """Wrap `data` as the output of `op`, recording a tape node if needed.

    `backward_fn` maps the output gradient to a tuple of input gradients
    aligned with `parents` (``None`` where no gradient flows).
    """
    op_id = f"{op}#{next(_op_counter)}"
    _state.last_op = op_id
    if _debug and not np.all(np.isfinite(data)):
        raise NumericFault(f"{op_id} produced non-finite values", op_id)
    out = Tensor(data)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = current_tape().record(op, op_id, tuple(parents), backward_fn, saved,
                                         policy, data.shape)
    elif _state.shadow is not None:
        _state.shadow.retain(op_id, (), Retain.RECOMPUTABLE)
    return out


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` and consume the tape.

    `grad` seeds a vector-Jacobian product for non-scalar outputs.
    """
    node = loss.node
    if node is None:
        raise TapeStateError("tensor has no recorded history; nothing to differentiate")
    tape = node.tape
    if tape.consumed:
        raise TapeStateError("tape already consumed by an earlier backward()")
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
    else:
        seed = np.asarray(grad, dtype=loss.dtype)
        if seed.shape != loss.shape:
            raise ShapeError(f"seed gradient shape {seed.shape} != output shape {loss.shape}")

    grads = {node: seed}
    for n in reversed(tape.nodes):
        g = grads.pop(n, None)
        if g is not None:
            _state.last_op = n.op_id
            for p, pg in zip(n.parents, n.backward_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p.node is None:
                    if pg.shape != p.shape:
                        raise ShapeError(f"{n.op_id}: gradient shape {pg.shape} != {p.shape}")
                    pg = pg.astype(p.dtype, copy=False)
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                elif p.node.tape is not tape:
                    raise TapeStateError(
                        f"{n.op_id} consumes a tensor recorded on another tape; detach() it")
                else:
                    prev = grads.get(p.node)
                    grads[p.node] = pg if prev is None else prev + pg
        tape.ledger.release(n.saved)
        n.backward_fn = None
        n.saved = ()
    tape.consumed = True
    tape.nodes = []


# ---------------------------------------------------------------------------
# pointwise and reduction ops


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return record_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return record_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    x, y = a.data, b.data
    return record_op("mul", x * y, (a, b), lambda g: (g * y, g * x), saved=(x, y))


def neg(a: Tensor) -> Tensor:
    return record_op("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return record_op("scale", a.data * a.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),))


def shift(a: Tensor, c: float) -> Tensor:
    return record_op("shift", a.data + a.dtype.type(c), (a,), lambda g: (g,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return record_op("square", x * x, (a,), lambda g: (2 * g * x,), saved=(x,))


def abs_(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    x = a.data
    return record_op("abs", np.abs(x), (a,), lambda g: (g * np.sign(x),), saved=(x,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return record_op("tanh", y, (a,), lambda g: (g * (1 - y * y),), saved=(y,))


def relu(a: Tensor) -> Tensor:
    x = a.data
    return record_op("relu", np.maximum(x, 0), (a,), lambda g: (g * (x > 0),), saved=(x,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    s = x.dtype.type(slope)
    out = np.where(x > 0, x, x * s)
    return record_op("leaky_relu", out, (a,), lambda g: (np.where(x > 0, g, g * s),),
                     saved=(x,))


def sum_(a: Tensor) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return record_op("sum", out, (a,), lambda g: (np.full(shape, g, dtype=g.dtype),))


def mean(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("mean of an empty tensor")
    shape, n = a.shape, a.size
    out = np.asarray(a.data.mean(), dtype=a.dtype)
    return record_op("mean", out, (a,), lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record_op("concat", np.concatenate([t.data for t in tensors], axis=axis),
                     tensors, backward_fn)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` along `axis` (a view of the input buffer)."""
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape, dtype = a.shape, a.dtype

    def backward_fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return record_op("narrow", a.data[index], (a,), backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))
