"""Reverse-mode autodiff over NumPy arrays.

Provides exactly the primitives a small decoder-only language model and its
losses need. Every operation appended to a :class:`Tape` records a closure
that knows how to push gradients to its inputs; ``backward`` walks the tape
once, in reverse execution order.

Training runs in float32; gradient verification runs in float64 because
central differences are unreliable in single precision. Pass ``tape=None``
to any op for a forward-only (no recording) evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .errors import ContractError, EmptyLossError, ShapeMismatchError

IGNORE_INDEX = -100

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class TensorNode:
    """A shape-carrying array with an optional gradient slot.

    Leaves (parameters, inputs) are created directly; op outputs are created
    by the ops with ``is_leaf=False``. Gradients on leaves accumulate across
    backward calls until :func:`reset_grads`; gradients on non-leaves are
    owned by the tape and cleared at the start of each backward pass.
    """

    __slots__ = ("values", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None,
                 is_leaf: bool = True):
        self.values = np.asarray(values)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.is_leaf = is_leaf
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.values.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        tag = f" name={self.name!r}" if self.name else ""
        return f"TensorNode(shape={self.values.shape}, rg={self.requires_grad}{tag})"


@dataclass
class _TapeOp:
    out: TensorNode
    push_grads: Callable[[np.ndarray], None]


@dataclass
class Tape:
    """Ordered record of executed ops; inputs always precede their consumers."""

    _ops: list[_TapeOp] = field(default_factory=list)

    def record(self, out: TensorNode, push_grads: Callable[[np.ndarray], None]) -> None:
        self._ops.append(_TapeOp(out, push_grads))

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, loss: TensorNode) -> None:
        backward(loss, self)


def backward(loss: TensorNode, tape: Tape) -> None:
    """Populate gradients of every requires-grad ancestor of ``loss``.

    Repeated calls on the same tape accumulate into leaf gradients (each call
    contributes one full gradient); use :func:`reset_grads` between steps.
    """
    if loss.values.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.values.shape}")
    if not loss.requires_grad:
        return  # constant loss: nothing depends on parameters
    # non-leaf grads belong to this pass only
    for op in tape._ops:
        if not op.out.is_leaf:
            op.out.grad = None
    loss.accumulate_grad(np.ones((), dtype=loss.values.dtype))
    for op in reversed(tape._ops):
        g = op.out.grad
        if g is None:
            continue
        op.push_grads(g)


def reset_grads(nodes) -> None:
    """Clear gradient slots; accepts an iterable of nodes or a name->node map."""
    if isinstance(nodes, dict):
        nodes = nodes.values()
    for n in nodes:
        n.grad = None


def _result(values, *inputs, name=None) -> TensorNode:
    rg = any(i.requires_grad for i in inputs)
    return TensorNode(values, requires_grad=rg, is_leaf=False, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of NumPy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a: TensorNode, b: TensorNode, tape: Tape | None = None) -> TensorNode:
    """Elementwise sum with NumPy broadcasting."""
    try:
        values = a.values + b.values
    except ValueError as e:
        raise ShapeMismatchError(f"add: {a.shape} + {b.shape}") from e
    out = _result(values, a, b)
    if tape is not None and out.requires_grad:
        def push(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g, b.shape))
        tape.record(out, push)
    return out


def matmul(a: TensorNode, b: TensorNode, tape: Tape | None = None) -> TensorNode:
    """Matrix product; stacked (batched) operands must share leading dims."""
    va, vb = a.values, b.values
    if va.ndim < 2 or vb.ndim < 2 or va.shape[-1] != vb.shape[-2] or va.shape[:-2] != vb.shape[:-2]:
        raise ShapeMismatchError(f"matmul: {va.shape} @ {vb.shape}")
    out = _result(va @ vb, a, b)
    if tape is not None and out.requires_grad:
        def push(g):
            if a.requires_grad:
                a.accumulate_grad(g @ np.swapaxes(vb, -1, -2))
            if b.requires_grad:
                b.accumulate_grad(np.swapaxes(va, -1, -2) @ g)
        tape.record(out, push)
    return out


def scale(x: TensorNode, c: float, tape: Tape | None = None) -> TensorNode:
    """Multiply by a python-float constant (used for the ascent factor)."""
    out = _result(x.values * x.values.dtype.type(c), x)
    if tape is not None and out.requires_grad:
        def push(g):
            x.accumulate_grad(g * x.values.dtype.type(c))
        tape.record(out, push)
    return out


def sum_all(x: TensorNode, tape: Tape | None = None) -> TensorNode:
    """Sum of all elements, as a scalar node."""
    out = _result(x.values.sum(), x)
    if tape is not None and out.requires_grad:
        def push(g):
            x.accumulate_grad(np.broadcast_to(g, x.shape))
        tape.record(out, push)
    return out


def reshape(x: TensorNode, shape, tape: Tape | None = None) -> TensorNode:
    try:
        values = x.values.reshape(shape)
    except ValueError as e:
        raise ShapeMismatchError(f"reshape: {x.shape} -> {tuple(shape)}") from e
    out = _result(values, x)
    if tape is not None and out.requires_grad:
        old = x.shape
        def push(g):
            x.accumulate_grad(g.reshape(old))
        tape.record(out, push)
    return out


def transpose(x: TensorNode, axes, tape: Tape | None = None) -> TensorNode:
    axes = tuple(axes)
    out = _result(np.transpose(x.values, axes), x)
    if tape is not None and out.requires_grad:
        inverse = tuple(np.argsort(axes))
        def push(g):
            x.accumulate_grad(np.transpose(g, inverse))
        tape.record(out, push)
    return out


def slice_lastdim(x: TensorNode, start: int, stop: int, tape: Tape | None = None) -> TensorNode:
    """Contiguous slice along the last axis (splits fused QKV projections)."""
    if not (0 <= start < stop <= x.shape[-1]):
        raise ShapeMismatchError(f"slice_lastdim: [{start}:{stop}] on last dim {x.shape[-1]}")
    out = _result(np.ascontiguousarray(x.values[..., start:stop]), x)
    if tape is not None and out.requires_grad:
        def push(g):
            buf = np.zeros_like(x.values)
            buf[..., start:stop] = g
            x.accumulate_grad(buf)
        tape.record(out, push)
    return out


def embedding(table: TensorNode, ids: np.ndarray, tape: Tape | None = None) -> TensorNode:
    """Row gather: out[..., :] = table[ids[...], :]. Backward scatter-adds."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding ids out of range [0, {table.shape[0]}): min={ids.min()}, max={ids.max()}"
        )
    out = _result(table.values[ids], table)
    if tape is not None and out.requires_grad:
        flat_ids = ids.reshape(-1)
        def push(g):
            buf = np.zeros_like(table.values)
            np.add.at(buf, flat_ids, g.reshape(-1, table.shape[-1]))
            table.accumulate_grad(buf)
        tape.record(out, push)
    return out


def layer_norm(x: TensorNode, gain: TensorNode, bias: TensorNode, eps: float,
               tape: Tape | None = None) -> TensorNode:
    """Zero-mean unit-variance normalization over the last axis, then affine."""
    d = x.shape[-1] if x.values.ndim else 0
    if d == 0:
        raise ShapeMismatchError("layer_norm: last dimension must be positive")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatchError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must both be ({d},)"
        )
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    v = x.values
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + v.dtype.type(eps))
    xhat = xc * inv
    out = _result(xhat * gain.values + bias.values, x, gain, bias)
    if tape is not None and out.requires_grad:
        def push(g):
            if gain.requires_grad:
                gain.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
            if bias.requires_grad:
                bias.accumulate_grad(g.reshape(-1, d).sum(axis=0))
            if x.requires_grad:
                dxhat = g * gain.values
                mean_d = dxhat.mean(axis=-1, keepdims=True)
                mean_dx = (dxhat * xhat).mean(axis=-1, keepdims=True)
                x.accumulate_grad(inv * (dxhat - mean_d - xhat * mean_dx))
        tape.record(out, push)
    return out


def gelu(x: TensorNode, tape: Tape | None = None) -> TensorNode:
    """GELU, tanh approximation (GPT-2 convention)."""
    v = x.values
    inner = _GELU_C * (v + _GELU_A * v**3)
    th = np.tanh(inner)
    out = _result(0.5 * v * (1.0 + th), x)
    if tape is not None and out.requires_grad:
        def push(g):
            sech2 = 1.0 - th * th
            d = 0.5 * (1.0 + th) + 0.5 * v * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
            x.accumulate_grad(g * d)
        tape.record(out, push)
    return out


def _softmax_rows(v: np.ndarray) -> np.ndarray:
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_lastdim(x: TensorNode, tape: Tape | None = None) -> TensorNode:
    """Row softmax over the last axis, computed with max subtraction."""
    if x.values.ndim == 0 or x.shape[-1] < 1:
        raise ShapeMismatchError(f"softmax_lastdim: need a non-empty last axis, got {x.shape}")
    y = _softmax_rows(x.values)
    out = _result(y, x)
    if tape is not None and out.requires_grad:
        def push(g):
            x.accumulate_grad(y * (g - (g * y).sum(axis=-1, keepdims=True)))
        tape.record(out, push)
    return out


def cross_entropy_masked(logits: TensorNode, labels: np.ndarray,
                         tape: Tape | None = None,
                         ignore_index: int = IGNORE_INDEX) -> TensorNode:
    """Mean negative log-softmax probability of the labeled token.

    ``logits`` is (T, V); ``labels`` is (T,) with ``ignore_index`` marking
    positions excluded from both the sum and the count.
    """
    labels = np.asarray(labels)
    v = logits.values
    if v.ndim != 2 or labels.shape != (v.shape[0],):
        raise ShapeMismatchError(
            f"cross_entropy_masked: logits {v.shape} vs labels {labels.shape}"
        )
    t, vocab = v.shape
    mask = labels != ignore_index
    count = int(mask.sum())
    if count == 0:
        raise EmptyLossError("cross_entropy_masked: every label is masked")
    picked = labels[mask]
    if picked.min() < 0 or picked.max() >= vocab:
        raise IndexError(
            f"cross_entropy_masked: labels outside [0, {vocab}): "
            f"min={picked.min()}, max={picked.max()}"
        )
    m = v.max(axis=-1, keepdims=True)
    z = v - m
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.nonzero(mask)[0]
    nll = lse[rows] - z[rows, picked]
    out = _result(np.asarray(nll.sum() / count, dtype=v.dtype), logits)
    if tape is not None and out.requires_grad:
        def push(g):
            gl = _softmax_rows(v)
            gl[rows, picked] -= 1.0
            gl[~mask] = 0.0
            logits.accumulate_grad(gl * (g / v.dtype.type(count)))
        tape.record(out, push)
    return out


def causal_attention(q: TensorNode, k: TensorNode, v: TensorNode,
                     tape: Tape | None = None) -> TensorNode:
    """Scaled dot-product attention with a strict causal mask.

    q/k/v are (batch, heads, time, head_dim). Dispatches to the active kernel
    backend (see :mod:`seqforget.kernels`).
    """
    if not (q.shape == k.shape == v.shape) or q.values.ndim != 4:
        raise ShapeMismatchError(
            f"causal_attention: q {q.shape}, k {k.shape}, v {v.shape} must be equal 4-D"
        )
    out_vals, weights = kernels.attention_forward(q.values, k.values, v.values)
    out = _result(out_vals, q, k, v)
    if tape is not None and out.requires_grad:
        def push(g):
            dq, dk, dv = kernels.attention_backward(g, q.values, k.values, v.values, weights)
            if q.requires_grad:
                q.accumulate_grad(dq)
            if k.requires_grad:
                k.accumulate_grad(dk)
            if v.requires_grad:
                v.accumulate_grad(dv)
        tape.record(out, push)
    return out


# ---------------------------------------------------------------------------
# Numeric verification
# ---------------------------------------------------------------------------


@dataclass
class FDEntry:
    name: str
    max_rel_err: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float


@dataclass
class FDReport:
    entries: list[FDEntry]
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def worst(self) -> FDEntry:
        return max(self.entries, key=lambda e: e.max_rel_err)


def finite_difference_check(f: Callable[[Tape | None], TensorNode],
                            params: dict[str, TensorNode],
                            h: float = 1e-5,
                            tol: float = 1e-5,
                            denom_floor: float = 1e-4) -> FDReport:
    """Compare backward() gradients against central finite differences.

    ``f(tape)`` must deterministically evaluate the scalar loss, recording on
    ``tape`` when given one. Relative error uses ``max(|a|, |n|, denom_floor)``
    as denominator so near-zero gradients are compared on an absolute scale.
    Run on float64 parameters; float32 makes the difference quotient noise
    exceed any sane tolerance.
    """
    if h <= 0:
        raise ContractError(f"finite_difference_check: h must be positive, got {h}")
    reset_grads(params)
    tape = Tape()
    loss = f(tape)
    backward(loss, tape)
    analytic = {}
    for name, p in params.items():
        analytic[name] = np.zeros_like(p.values) if p.grad is None else p.grad.copy()

    entries = []
    for name, p in params.items():
        w = p.values
        worst = (0.0, (0,) * w.ndim, 0.0, 0.0)
        it = np.nditer(w, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = w[idx]
            w[idx] = orig + h
            f_plus = float(f(None).values)
            w[idx] = orig - h
            f_minus = float(f(None).values)
            w[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[name][idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), denom_floor)
            if rel > worst[0]:
                worst = (rel, idx, a, numeric)
        entries.append(FDEntry(name, worst[0], worst[1], worst[2], worst[3]))
    max_rel = max((e.max_rel_err for e in entries), default=0.0)
    return FDReport(entries=entries, max_rel_err=max_rel, tol=tol)
