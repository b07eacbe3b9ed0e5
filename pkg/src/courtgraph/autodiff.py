"""Dense float64 tensors with a reverse-mode differentiation tape.

The tape is dynamic: every forward pass records the operations it executes
and `Tape.backward` replays them in exact reverse order. Parameters (tensors
created with ``parameter``) accumulate gradients with ``+=`` so that a weight
reused at many graph positions in one pass receives the sum of all its local
contributions. Binary elementwise ops require equal shapes; only a 0-d scalar
tensor may broadcast against a non-scalar operand. Shape problems raise
``ShapeError`` immediately instead of broadcasting silently.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class DomainError(ValueError):
    """Operand values fall outside an operation's numeric domain."""


class ContractError(RuntimeError):
    """An operation was invoked outside its allowed mode or context."""


_active_tape: "Tape | None" = None

# Profiling hook: running total of bytes allocated for tensor values.
# Reset/read via alloc_counter(); always cheap to maintain.
_alloc_bytes: int = 0


def reset_alloc_counter() -> None:
    global _alloc_bytes
    _alloc_bytes = 0


def alloc_bytes() -> int:
    return _alloc_bytes


class Tensor:
    """A shape-carrying float64 array, optionally tracked on the active tape."""

    __slots__ = ("values", "grad", "requires_grad", "node_index", "tape", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        global _alloc_bytes
        arr = np.asarray(values, dtype=np.float64)
        self.values = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node_index: int | None = None
        self.tape: "Tape | None" = None
        self.name = name
        _alloc_bytes += arr.nbytes

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.values.shape}{tag})"

    # Operator sugar; scalar Python numbers become 0-d constant tensors.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(values) -> Tensor:
    return Tensor(values)


def parameter(values, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.ndim(x) == 0:
        return Tensor(np.float64(x))
    raise TypeError(f"cannot use {type(x).__name__} as a tensor operand")


@dataclass
class _TapeNode:
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Recorded forward pass; supports repeated deterministic backward sweeps."""

    def __init__(self):
        self._nodes: list[_TapeNode] = []
        self._prev: "Tape | None" = None

    def __enter__(self) -> "Tape":
        global _active_tape
        self._prev = _active_tape
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _active_tape
        _active_tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        out.node_index = len(self._nodes)
        out.tape = self
        self._nodes.append(_TapeNode(inputs, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(param) into every recorded parameter's .grad.

        Adjoint accumulation is never in-place, so repeated calls over the
        same tape are bitwise reproducible.
        """
        if loss.values.shape != ():
            raise ContractError(f"loss must be a scalar tensor, got shape {loss.values.shape}")
        if loss.tape is not self or loss.node_index is None:
            raise ContractError("loss was not recorded on this tape")
        adjoints: list[np.ndarray | None] = [None] * len(self._nodes)
        leaf_grads: dict[int, np.ndarray] = {}
        leaf_refs: dict[int, Tensor] = {}
        adjoints[loss.node_index] = np.ones((), dtype=np.float64)
        for idx in range(loss.node_index, -1, -1):
            g = adjoints[idx]
            adjoints[idx] = None
            if g is None:
                continue
            node = self._nodes[idx]
            for t, gin in zip(node.inputs, node.backward(g)):
                if gin is None:
                    continue
                if t.tape is self and t.node_index is not None:
                    prev = adjoints[t.node_index]
                    adjoints[t.node_index] = gin if prev is None else prev + gin
                elif t.requires_grad:
                    prev = leaf_grads.get(id(t))
                    leaf_grads[id(t)] = gin if prev is None else prev + gin
                    leaf_refs[id(t)] = t
        for key, total in leaf_grads.items():
            leaf_refs[key].grad += total


class no_tape:
    """Context manager disabling recording (inference / evaluation mode)."""

    def __enter__(self):
        global _active_tape
        self._prev = _active_tape
        _active_tape = None
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = self._prev


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or (t.tape is tape and t.node_index is not None)


def _make(values: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(values)
    tape = _active_tape
    if tape is not None and any(_tracked(t, tape) for t in inputs):
        tape._record(out, inputs, backward)
    return out


# ---------------------------------------------------------------------------
# elementwise and scalar-broadcast binary ops


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only 0-d scalars broadcast)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Collapse a broadcast gradient back onto a 0-d scalar operand.
    if shape == () and g.shape != ():
        return np.sum(g)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)
    return _make(a.values + b.values, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")
    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)
    return _make(a.values - b.values, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    va, vb = a.values, b.values
    def backward(g):
        return _reduce_to(g * vb, a.shape), _reduce_to(g * va, b.shape)
    return _make(va * vb, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        return (-g,)
    return _make(-a.values, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.values)
    def backward(g):
        return (g * y * (1.0 - y),)
    return _make(y, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)
    def backward(g):
        return (g * (1.0 - y * y),)
    return _make(y, (a,), backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.values)
    def backward(g):
        return (g * y,)
    return _make(y, (a,), backward)


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0.0):
        raise DomainError("log requires strictly positive values")
    va = a.values
    def backward(g):
        return (g / va,)
    return _make(np.log(va), (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Hard clip; gradient passes only where the input lies inside [lo, hi]."""
    va = a.values
    mask = (va >= lo) & (va <= hi)
    def backward(g):
        return (g * mask,)
    return _make(np.clip(va, lo, hi), (a,), backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the first operand receives the gradient."""
    if a.shape != b.shape:
        raise ShapeError(f"maximum: shapes {a.shape} and {b.shape} differ")
    mask = a.values >= b.values
    def backward(g):
        return g * mask, g * ~mask
    return _make(np.maximum(a.values, b.values), (a, b), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    va, vb = a.values, b.values
    if va.ndim != 2 or vb.ndim != 2:
        raise ShapeError(f"matmul requires 2-d operands, got {va.shape} @ {vb.shape}")
    if va.shape[1] != vb.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {va.shape} @ {vb.shape}")
    def backward(g):
        return g @ vb.T, va.T @ g
    return _make(va @ vb, (a, b), backward)


def add_bias(m: Tensor, b: Tensor) -> Tensor:
    """Add a length-k bias vector to every row of an (n, k) matrix."""
    vm, vb = m.values, b.values
    if vm.ndim != 2 or vb.shape != (vm.shape[1],):
        raise ShapeError(f"add_bias: matrix {vm.shape} needs bias ({vm.shape[1]},), got {vb.shape}")
    def backward(g):
        return g, g.sum(axis=0)
    return _make(vm + vb, (m, b), backward)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    va = a.values
    if axis is not None and not -va.ndim <= axis < va.ndim:
        raise ShapeError(f"sum axis {axis} out of range for shape {va.shape}")
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, va.shape),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, va.shape),)
    return _make(va.sum(axis=axis, keepdims=keepdims), (a,), backward)


def logsumexp(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max-shifted log-sum-exp along one axis; stable for large magnitudes."""
    va = a.values
    if not -va.ndim <= axis < va.ndim:
        raise ShapeError(f"logsumexp axis {axis} out of range for shape {va.shape}")
    m = np.max(va, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(va - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    def backward(g):
        ge = g if keepdims else np.expand_dims(g, axis)
        return (ge * soft,)
    return _make(out, (a,), backward)


def softmax(a: Tensor, axis: int) -> Tensor:
    va = a.values
    m = np.max(va, axis=axis, keepdims=True)
    e = np.exp(va - m)
    y = e / e.sum(axis=axis, keepdims=True)
    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)
    return _make(y, (a,), backward)


def log_softmax(a: Tensor, axis: int) -> Tensor:
    va = a.values
    m = np.max(va, axis=axis, keepdims=True)
    shifted = va - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)
    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# structural ops


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    vals = [t.values for t in tensors]
    ndim = vals[0].ndim
    for v in vals[1:]:
        if v.ndim != ndim or any(
            v.shape[d] != vals[0].shape[d] for d in range(ndim) if d != axis % ndim
        ):
            raise ShapeError(f"concat: incompatible shapes {[v.shape for v in vals]} on axis {axis}")
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    def backward(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(vals))
        )
    return _make(np.concatenate(vals, axis=axis), tuple(tensors), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    va = a.values
    if start < 0 or start + length > va.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] exceeds axis {axis} of {va.shape}")
    idx = [slice(None)] * va.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    def backward(g):
        full = np.zeros_like(va)
        full[idx] = g
        return (full,)
    return _make(va[idx], (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    va = a.values
    def backward(g):
        return (g.reshape(va.shape),)
    return _make(va.reshape(shape), (a,), backward)


def repeat_rows(a: Tensor, repeats: int) -> Tensor:
    """Repeat each row of an (n, k) matrix `repeats` times consecutively."""
    va = a.values
    if va.ndim != 2:
        raise ShapeError(f"repeat_rows requires a matrix, got shape {va.shape}")
    n, k = va.shape
    def backward(g):
        return (g.reshape(n, repeats, k).sum(axis=1),)
    return _make(np.repeat(va, repeats, axis=0), (a,), backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows by index; duplicate indices accumulate gradient."""
    va = a.values
    idx = np.asarray(indices, dtype=np.intp)
    if va.ndim != 2:
        raise ShapeError(f"gather_rows requires a matrix, got shape {va.shape}")
    def backward(g):
        full = np.zeros_like(va)
        np.add.at(full, idx, g)
        return (full,)
    return _make(va[idx], (a,), backward)


def backward(loss: Tensor) -> None:
    """Run the active (or recording) tape backward from a scalar loss."""
    if loss.tape is None:
        raise ContractError("loss is not attached to any tape")
    loss.tape.backward(loss)


# ---------------------------------------------------------------------------
# Adam optimizer


@dataclass
class OptimizerState:
    """Bias-corrected first/second moment state for a named parameter set."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: OptimizerState) -> None:
    """One Adam update over `params`; moment buffers keyed like the params."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for key in sorted(params):
        p = params[key]
        g = p.grad
        if g is None:
            raise ContractError(f"parameter {key!r} has no gradient buffer")
        m = state.m.setdefault(key, np.zeros_like(p.values))
        v = state.v.setdefault(key, np.zeros_like(p.values))
        if m.shape != p.values.shape:
            raise ShapeError(f"moment shape {m.shape} mismatches parameter {p.values.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.values = p.values - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def stable_key_seed(key: str) -> int:
    """Platform-stable 64-bit entropy derived from a registry key string."""
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
