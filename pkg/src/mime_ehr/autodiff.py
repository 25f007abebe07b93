"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

A :class:`Tape` records every primitive operation in execution order (a
Wengert list).  Calling :meth:`Tape.backward` on a scalar output sweeps the
list in reverse and accumulates an adjoint for every node that can influence
a parameter leaf.  The primitive set is deliberately small: matmul/affine,
broadcast add/sub/mul, the usual activations, row gather/scatter, segment
sums, reductions, and numerically fused cross-entropy losses.

Everything is float64.  A tape is confined to a single forward/backward pass
on one thread; parameters live outside the tape as plain ndarrays keyed by
name, so independent runs can proceed in parallel without sharing state.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import expit, logsumexp

Array = np.ndarray


class GradientCheckError(RuntimeError):
    """Raised when a finite-difference probe hits a non-finite loss."""


def _as_value(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Node:
    """One slot of the tape: a value, an adjoint, and links to its inputs."""

    __slots__ = ("tape", "value", "grad", "parents", "needs_grad", "name",
                 "_backward", "_recompute")

    def __init__(self, tape, value, parents=(), needs_grad=False, name=""):
        self.tape = tape
        self.value = value
        self.grad = None
        self.parents = parents
        self.needs_grad = needs_grad
        self.name = name
        self._backward = None
        self._recompute = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or "node"
        return f"Node({label}, shape={self.value.shape})"


class Tape:
    """Ordered record of primitive ops; creation order is topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, name: str = "", needs_grad: bool = True) -> Node:
        node = Node(self, _as_value(value), (), needs_grad, name)
        self.nodes.append(node)
        return node

    def constant(self, value, name: str = "") -> Node:
        return self.leaf(value, name=name, needs_grad=False)

    def op(self, value: Array, parents: tuple, backward: Callable,
           recompute: Callable, name: str = "") -> Node:
        needs = any(p.needs_grad for p in parents)
        node = Node(self, value, parents, needs, name)
        if needs:
            node._backward = backward
        node._recompute = recompute
        self.nodes.append(node)
        return node

    def backward(self, out: Node) -> None:
        """Seed the adjoint of a scalar output and sweep the tape in reverse."""
        if out.value.shape != ():
            raise ValueError(f"backward needs a scalar output, got shape {out.value.shape}")
        out.grad = np.array(1.0)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)

    def replay_matches(self) -> bool:
        """Recompute every op from its recorded inputs; True iff all values
        reproduce bit-for-bit.  Only valid while leaf values are unchanged."""
        for node in self.nodes:
            if node._recompute is not None:
                if not np.array_equal(node._recompute(), node.value):
                    return False
        return True

    def gradients(self, params: Iterable[str]) -> dict[str, Array]:
        """Collect adjoints of named leaves; untouched parameters get zeros."""
        grads = {}
        by_name = {n.name: n for n in self.nodes if n.name and not n.parents}
        for name in params:
            node = by_name[name]
            grads[name] = np.zeros_like(node.value) if node.grad is None else node.grad
        return grads


def _accum(node: Node, g: Array) -> None:
    if not node.needs_grad:
        return
    node.grad = g if node.grad is None else node.grad + g


def _wrap(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        return x
    return tape.constant(x)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    raise TypeError("at least one argument must be a tape Node")


def _unbroadcast(g: Array, shape: tuple) -> Array:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _scatter_add_rows(out: Array, idx: Array, g: Array) -> None:
    # bincount per column beats np.add.at for the small widths used here
    n = out.shape[0]
    if g.ndim == 1:
        out += np.bincount(idx, weights=g, minlength=n)
        return
    for j in range(g.shape[1]):
        out[:, j] += np.bincount(idx, weights=g[:, j], minlength=n)


# ---------------------------------------------------------------------------
# primitive ops

def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _wrap(tape, a), _wrap(tape, b)
    av, bv = a.value, b.value
    value = np.matmul(av, bv)

    def backward(g):
        if av.ndim == 2 and bv.ndim == 2:
            _accum(a, g @ bv.T)
            _accum(b, av.T @ g)
        elif av.ndim == 2 and bv.ndim == 1:
            _accum(a, np.outer(g, bv))
            _accum(b, av.T @ g)
        elif av.ndim == 1 and bv.ndim == 2:
            _accum(a, bv @ g)
            _accum(b, np.outer(av, g))
        else:  # 1-D dot
            _accum(a, g * bv)
            _accum(b, g * av)

    return tape.op(value, (a, b), backward, lambda: np.matmul(a.value, b.value), "matmul")


def linear(x, w, b=None) -> Node:
    """Affine map ``x @ w.T + b`` with ``w`` stored as (out_dim, in_dim)."""
    tape = _tape_of(x, w)
    x, w = _wrap(tape, x), _wrap(tape, w)
    xv, wv = x.value, w.value
    value = xv @ wv.T
    if b is not None:
        b = _wrap(tape, b)
        value = value + b.value

    def backward(g):
        if xv.ndim == 2:
            _accum(x, g @ wv)
            _accum(w, g.T @ xv)
            if b is not None:
                _accum(b, g.sum(axis=0))
        else:
            _accum(x, g @ wv)
            _accum(w, np.outer(g, xv))
            if b is not None:
                _accum(b, g)

    def recompute():
        v = x.value @ w.value.T
        return v + b.value if b is not None else v

    parents = (x, w) if b is None else (x, w, b)
    return tape.op(value, parents, backward, recompute, "linear")


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _wrap(tape, a), _wrap(tape, b)
    value = a.value + b.value

    def backward(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    return tape.op(value, (a, b), backward, lambda: a.value + b.value, "add")


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _wrap(tape, a), _wrap(tape, b)
    value = a.value - b.value

    def backward(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(-g, b.value.shape))

    return tape.op(value, (a, b), backward, lambda: a.value - b.value, "sub")


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _wrap(tape, a), _wrap(tape, b)
    value = a.value * b.value

    def backward(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    return tape.op(value, (a, b), backward, lambda: a.value * b.value, "mul")


def scale_shift(x: Node, scale: float, shift: float = 0.0) -> Node:
    value = scale * x.value + shift

    def backward(g):
        _accum(x, scale * g)

    return x.tape.op(value, (x,), backward, lambda: scale * x.value + shift, "scale_shift")


def relu(x: Node) -> Node:
    value = np.maximum(x.value, 0.0)

    def backward(g):
        _accum(x, g * (x.value > 0.0))

    return x.tape.op(value, (x,), backward, lambda: np.maximum(x.value, 0.0), "relu")


def sigmoid(x: Node) -> Node:
    value = expit(x.value)

    def backward(g):
        _accum(x, g * value * (1.0 - value))

    return x.tape.op(value, (x,), backward, lambda: expit(x.value), "sigmoid")


def tanh(x: Node) -> Node:
    value = np.tanh(x.value)

    def backward(g):
        _accum(x, g * (1.0 - value * value))

    return x.tape.op(value, (x,), backward, lambda: np.tanh(x.value), "tanh")


def identity(x: Node) -> Node:
    def backward(g):
        _accum(x, g)

    return x.tape.op(x.value, (x,), backward, lambda: x.value, "identity")


ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "identity": identity}


def activation(kind: str, x: Node) -> Node:
    """Apply one of sigmoid / tanh / relu / identity as a tape op."""
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}") from None


def gather_rows(table: Node, idx) -> Node:
    """Select rows ``table[idx]``; the backward pass scatter-adds into the table."""
    idx = np.asarray(idx, dtype=np.intp)
    value = table.value[idx]

    def backward(g):
        if table.needs_grad:
            contrib = np.zeros_like(table.value)
            _scatter_add_rows(contrib, idx, g)
            _accum(table, contrib)

    return table.tape.op(value, (table,), backward, lambda: table.value[idx], "gather")


def segment_sum(x: Node, seg_ids, num_segments: int) -> Node:
    """Sum rows of ``x`` into ``num_segments`` buckets given per-row bucket ids."""
    seg_ids = np.asarray(seg_ids, dtype=np.intp)

    def compute(xv):
        if xv.ndim == 1:
            return np.bincount(seg_ids, weights=xv, minlength=num_segments)
        out = np.empty((num_segments, xv.shape[1]))
        for j in range(xv.shape[1]):
            out[:, j] = np.bincount(seg_ids, weights=xv[:, j], minlength=num_segments)
        return out

    value = compute(x.value)

    def backward(g):
        _accum(x, g[seg_ids])

    return x.tape.op(value, (x,), backward, lambda: compute(x.value), "segment_sum")


def pad_zero_row(x: Node) -> Node:
    """Append one all-zero row (used as a gather target for padding indices)."""
    value = np.concatenate([x.value, np.zeros((1, x.value.shape[1]))], axis=0)

    def backward(g):
        _accum(x, g[:-1])

    def recompute():
        return np.concatenate([x.value, np.zeros((1, x.value.shape[1]))], axis=0)

    return x.tape.op(value, (x,), backward, recompute, "pad_zero_row")


def reduce_sum(x: Node, axis=None) -> Node:
    value = x.value.sum(axis=axis)

    def backward(g):
        if axis is None:
            _accum(x, np.full(x.value.shape, g))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.value.shape))

    return x.tape.op(value, (x,), backward, lambda: x.value.sum(axis=axis), "reduce_sum")


def reduce_mean(x: Node, axis=None) -> Node:
    n = x.value.size if axis is None else x.value.shape[axis]
    return scale_shift(reduce_sum(x, axis=axis), 1.0 / n)


def softmax_ce(logits: Node, targets) -> Node:
    """Cross-entropy of softmax(logits) against target distributions.

    ``targets`` is a constant array whose rows sum to 1 (one-hot for
    single-label targets).  Uses log-sum-exp internally, so huge logits are
    safe.  (N, C) logits give the (N,) vector of row losses; 1-D logits give
    a scalar.
    """
    targets = _as_value(targets)
    lv = logits.value

    def compute(lv):
        if lv.ndim == 1:
            return logsumexp(lv) - (targets * lv).sum()
        lse = logsumexp(lv, axis=1)
        return lse - (targets * lv).sum(axis=1)

    value = compute(lv)
    if lv.ndim == 1:
        sm = np.exp(lv - logsumexp(lv))
    else:
        sm = np.exp(lv - logsumexp(lv, axis=1)[:, None])

    def backward(g):
        _accum(logits, (sm - targets) * (g if lv.ndim == 1 else g[:, None]))

    return logits.tape.op(value, (logits,), backward, lambda: compute(logits.value), "softmax_ce")


def sigmoid_ce(logits: Node, targets) -> Node:
    """Multi-label binary cross-entropy of sigmoid(logits) against 0/1 targets.

    Stable formulation ``max(x,0) - x*y + log1p(exp(-|x|))``.  2-D logits are
    summed over the label axis, giving one loss per row; 1-D logits give one
    loss per element.
    """
    targets = _as_value(targets)
    lv = logits.value

    def compute(lv):
        per = np.maximum(lv, 0.0) - lv * targets + np.log1p(np.exp(-np.abs(lv)))
        return per.sum(axis=1) if lv.ndim == 2 else per

    value = compute(lv)

    def backward(g):
        delta = expit(lv) - targets
        _accum(logits, delta * g[:, None] if lv.ndim == 2 else delta * g)

    return logits.tape.op(value, (logits,), backward, lambda: compute(logits.value), "sigmoid_ce")


# ---------------------------------------------------------------------------
# plain-array helpers (no tape involvement)

def softmax(x: Array, axis: int = -1) -> Array:
    """Numerically stable softmax (max subtraction before exponentiation)."""
    x = _as_value(x)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def onehot(idx, n: int) -> Array:
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((idx.shape[0], n))
    out[np.arange(idx.shape[0]), idx] = 1.0
    return out


# ---------------------------------------------------------------------------
# finite-difference gradient checking

LossBuilder = Callable[[Tape, dict[str, Node]], Node]


def _eval_loss(loss_builder: LossBuilder, params: Mapping[str, Array]) -> float:
    tape = Tape()
    leaves = {name: tape.leaf(val, name) for name, val in params.items()}
    return float(loss_builder(tape, leaves).value)


def grad_check_report(loss_builder: LossBuilder, params: Mapping[str, Array],
                      eps: float = 1e-5) -> dict[str, float]:
    """Max relative error between tape gradients and central differences,
    reported per parameter name.

    ``loss_builder(tape, leaves) -> scalar Node`` must be deterministic.  The
    relative error of one entry is ``|g_tape - g_fd| / max(1e-8, |g_tape| +
    |g_fd|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    tape = Tape()
    leaves = {name: tape.leaf(val, name) for name, val in params.items()}
    loss = loss_builder(tape, leaves)
    if not np.isfinite(loss.value):
        raise GradientCheckError("loss is non-finite at the unperturbed point")
    tape.backward(loss)
    tape_grads = tape.gradients(params.keys())

    report = {}
    work = {name: np.array(val, dtype=np.float64) for name, val in params.items()}
    for name, base in work.items():
        flat = base.reshape(-1)
        g_tape = tape_grads[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = _eval_loss(loss_builder, work)
            flat[i] = orig - eps
            down = _eval_loss(loss_builder, work)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise GradientCheckError(f"non-finite loss while perturbing {name}[{i}]")
            g_fd = (up - down) / (2.0 * eps)
            err = abs(g_tape[i] - g_fd) / max(1e-8, abs(g_tape[i]) + abs(g_fd))
            worst = max(worst, err)
        report[name] = worst
    return report


def grad_check(loss_builder: LossBuilder, params: Mapping[str, Array],
               eps: float = 1e-5) -> float:
    """Max relative error over every entry of every parameter."""
    report = grad_check_report(loss_builder, params, eps)
    return max(report.values()) if report else 0.0
