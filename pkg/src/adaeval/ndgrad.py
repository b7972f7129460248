"""Minimal reverse-mode autodiff over dense float64 numpy buffers.

The op set is exactly what the gated recurrent model composes: matmul, add
(broadcast over the leading batch dimension only), hadamard, concat, slice,
sigmoid, tanh, softmax, log, mean, square, scalar_mul, cross_entropy. Every
op records a node on the active :class:`Tape` when any input requires
gradients; :func:`backward` replays the tape in reverse, accumulating
vector-Jacobian products additively across fan-out.

Tapes are per-forward: build one under ``with Tape():``, call ``backward``
once, throw it away. Gradient correctness of every rule is checked against
central finite differences by :func:`grad_check`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

_LOG_FLOOR = 1e-30


class ShapeError(ValueError):
    """Operand dimensions do not conform for the requested op."""


class TapeError(RuntimeError):
    """Tape misuse: backward without a tape, on a cleared tape, or twice."""


class Tape:
    """Ordered record of op nodes, entered as a context manager.

    Node order is topological by construction (an op can only consume
    already-built arrays). A tape supports exactly one backward pass.
    """

    def __init__(self):
        self.nodes: list[tuple[DiffArray, Callable[[np.ndarray], None]]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()
        self.consumed = False


_tape_stack: list[Tape] = []


def _active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


class DiffArray:
    """Dense float64 array plus a lazily allocated gradient buffer."""

    __slots__ = ("values", "_grad", "requires_grad", "tape", "node_id")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self._grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.tape: Tape | None = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def __repr__(self) -> str:
        return f"DiffArray(shape={self.values.shape}, requires_grad={self.requires_grad})"


def array(values, requires_grad: bool = False) -> DiffArray:
    """Leaf array (typically a parameter when requires_grad=True)."""
    return DiffArray(values, requires_grad=requires_grad)


def constant(values) -> DiffArray:
    """Leaf array that never takes gradients (data, masks, noise)."""
    return DiffArray(values, requires_grad=False)


def _accum(arr: DiffArray, g: np.ndarray) -> None:
    if arr.requires_grad:
        if arr._grad is None:
            arr._grad = np.zeros_like(arr.values)
        arr._grad += g


def record_op(out_values: np.ndarray,
              inputs: Sequence[DiffArray],
              vjp: Callable[[np.ndarray], None]) -> DiffArray:
    """Wrap op output, recording `vjp` on the active tape if needed.

    `vjp` receives the output cotangent and must _accum into the inputs.
    This is the extension point used by the straight-through estimator.
    """
    out = DiffArray(out_values)
    tape = _active_tape()
    if tape is not None and any(a.requires_grad for a in inputs):
        out.requires_grad = True
        out.tape = tape
        out.node_id = len(tape.nodes)
        tape.nodes.append((out, vjp))
    return out


# ---------------------------------------------------------------------------
# primitive forward set
# ---------------------------------------------------------------------------

def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} @ {b.shape} do not conform")
    av, bv = a.values, b.values

    def vjp(g):
        _accum(a, g @ bv.T)
        _accum(b, av.T @ g)

    return record_op(av @ bv, (a, b), vjp)


def add(a: DiffArray, b: DiffArray) -> DiffArray:
    """a + b; b may omit a's leading batch dimension (bias broadcast)."""
    if a.shape == b.shape:
        broadcast = False
    elif a.values.ndim == b.values.ndim + 1 and a.shape[1:] == b.shape:
        broadcast = True
    else:
        raise ShapeError(f"add: shapes {a.shape} + {b.shape} do not conform")

    def vjp(g):
        _accum(a, g)
        _accum(b, g.sum(axis=0) if broadcast else g)

    return record_op(a.values + b.values, (a, b), vjp)


def hadamard(a: DiffArray, b: DiffArray) -> DiffArray:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shapes {a.shape} * {b.shape} differ")
    av, bv = a.values, b.values

    def vjp(g):
        _accum(a, g * bv)
        _accum(b, g * av)

    return record_op(av * bv, (a, b), vjp)


def concat(a: DiffArray, b: DiffArray, axis: int) -> DiffArray:
    if a.values.ndim != b.values.ndim:
        raise ShapeError(f"concat: ranks {a.shape} vs {b.shape} differ")
    for ax in range(a.values.ndim):
        if ax != axis % a.values.ndim and a.shape[ax] != b.shape[ax]:
            raise ShapeError(f"concat: shapes {a.shape} vs {b.shape} differ off axis {axis}")
    split = a.shape[axis]

    def vjp(g):
        ga, gb = np.split(g, [split], axis=axis)
        _accum(a, ga)
        _accum(b, gb)

    return record_op(np.concatenate([a.values, b.values], axis=axis), (a, b), vjp)


def slice_axis(a: DiffArray, axis: int, start: int, end: int) -> DiffArray:
    axis = axis % a.values.ndim
    dim = a.shape[axis]
    if not (0 <= start < end <= dim):
        raise IndexError(f"slice_axis: [{start}:{end}] out of range for axis {axis} of {a.shape}")
    index = tuple(slice(start, end) if ax == axis else slice(None)
                  for ax in range(a.values.ndim))

    def vjp(g):
        if a.requires_grad:
            buf = np.zeros_like(a.values)
            buf[index] = g
            _accum(a, buf)

    return record_op(a.values[index].copy(), (a,), vjp)


def sigmoid(a: DiffArray) -> DiffArray:
    x = a.values
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)

    def vjp(g):
        _accum(a, g * s * (1.0 - s))

    return record_op(s, (a,), vjp)


def tanh(a: DiffArray) -> DiffArray:
    t = np.tanh(a.values)

    def vjp(g):
        _accum(a, g * (1.0 - t * t))

    return record_op(t, (a,), vjp)


def softmax(a: DiffArray, axis: int = -1) -> DiffArray:
    z = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        _accum(a, (g - (g * s).sum(axis=axis, keepdims=True)) * s)

    return record_op(s, (a,), vjp)


def log(a: DiffArray) -> DiffArray:
    clipped = np.maximum(a.values, _LOG_FLOOR)

    def vjp(g):
        _accum(a, g / clipped)

    return record_op(np.log(clipped), (a,), vjp)


def mean(a: DiffArray) -> DiffArray:
    n = a.values.size

    def vjp(g):
        _accum(a, np.full_like(a.values, float(g) / n))

    return record_op(np.asarray(a.values.mean()), (a,), vjp)


def square(a: DiffArray) -> DiffArray:
    av = a.values

    def vjp(g):
        _accum(a, g * 2.0 * av)

    return record_op(av * av, (a,), vjp)


def scalar_mul(a: DiffArray, s: float) -> DiffArray:
    s = float(s)

    def vjp(g):
        _accum(a, g * s)

    return record_op(a.values * s, (a,), vjp)


def cross_entropy(logits: DiffArray, one_hot: DiffArray) -> DiffArray:
    """Mean softmax cross-entropy; rows of one_hot must each sum to 1."""
    if logits.shape != one_hot.shape:
        raise ShapeError(f"cross_entropy: shapes {logits.shape} vs {one_hot.shape} differ")
    z = np.atleast_2d(logits.values)
    y = np.atleast_2d(one_hot.values)
    if not np.allclose(y.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("cross_entropy: each one_hot row must sum to 1")
    rows = z.shape[0]
    m = z.max(axis=1, keepdims=True)
    logz = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    losses = (logz.ravel() - (y * z).sum(axis=1))
    probs = np.exp(z - logz)

    def vjp(g):
        scale = float(g) / rows
        gl = scale * (probs - y)
        gy = scale * -z
        _accum(logits, gl.reshape(logits.shape))
        _accum(one_hot, gy.reshape(one_hot.shape))

    return record_op(np.asarray(losses.mean()), (logits, one_hot), vjp)


# ---------------------------------------------------------------------------
# backward & verification
# ---------------------------------------------------------------------------

def backward(root: DiffArray) -> None:
    """Reverse sweep from a scalar root; fills .grad of reachable leaves."""
    if root.values.ndim != 0:
        raise TapeError(f"backward: root must be scalar, got shape {root.shape}")
    tape = root.tape
    if tape is None or not tape.nodes:
        raise TapeError("backward: root is not recorded on a (nonempty) tape")
    if tape.consumed:
        raise TapeError("backward: tape already consumed; rebuild the tape")
    tape.consumed = True
    root._grad = np.ones_like(root.values)
    for out, vjp in reversed(tape.nodes):
        if out._grad is not None:
            vjp(out._grad)


def grad_check(f: Callable[[], DiffArray],
               params: Sequence[DiffArray],
               eps: float = 1e-5,
               order: int = 2) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must be deterministic (freeze any sampling) and build its graph from
    `params`. Error per entry: |a - d| / max(|a|, |d|, 1e-8).

    order=2 is the plain two-point central difference. order=4 is the
    symmetric five-point stencil, for deep compositions whose smallest
    gradient entries sit near the 1e-8 denominator floor: there the
    two-point rule's double-precision cancellation noise (~ulp(f)/eps)
    alone exceeds a 1e-4 relative error, so a higher-order stencil at a
    larger eps is the only way to measure the gradient at all.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    if order not in (2, 4):
        raise ValueError(f"grad_check: order must be 2 or 4, got {order}")
    for p in params:
        p.zero_grad()
    with Tape():
        out = f()
        backward(out)
    analytic = [p.grad.copy() for p in params]

    def value_at(flat, i, delta):
        keep = flat[i]
        flat[i] = keep + delta
        v = float(f().values)
        flat[i] = keep
        return v

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.values.ravel()
        for i in range(flat.size):
            if order == 2:
                diff = (value_at(flat, i, eps) - value_at(flat, i, -eps)) / (2.0 * eps)
            else:
                diff = (-value_at(flat, i, 2 * eps) + 8.0 * value_at(flat, i, eps)
                        - 8.0 * value_at(flat, i, -eps) + value_at(flat, i, -2 * eps)
                        ) / (12.0 * eps)
            a = ga.ravel()[i]
            err = abs(a - diff) / max(abs(a), abs(diff), 1e-8)
            worst = max(worst, err)
    return worst
