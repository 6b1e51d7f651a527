"""Dense tensors with tape-based reverse-mode differentiation.

Operations execute eagerly on numpy arrays and, when a `Tape` is active
and an input requires gradients, append a backward rule to the tape.
Replaying the tape in reverse accumulates gradients in a fixed order, so
repeated runs on the same inputs are bit-identical at a given precision.

Only the shapes the completion network needs are supported: rank 0..2,
no broadcasting (use `tile_rows` to expand explicitly).
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from . import _kernels


class DimensionError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


_local = threading.local()

_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf detection on every op output (off by default)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def active_tape():
    """The innermost open Tape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float array plus an optional gradient accumulator.

    `data` is held as float64 (the testing precision) unless the caller
    passes a float32 array or an explicit dtype. The constructor does not
    copy float arrays it is handed.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _accumulate(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Add `g` into t.grad; the first contribution becomes the accumulator.

    `own=True` promises g was freshly computed for this call, letting the
    first touch adopt the buffer instead of copying it.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if own else np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _grad_buffer(t: Tensor) -> np.ndarray:
    """t.grad, allocated if needed, for backward rules that write slices."""
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    return t.grad


def _result(data: np.ndarray, *parents: Tensor) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    if _debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value in op output")
    return out


def _record(out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
    """Append a backward rule for `out` to the active tape, if recording."""
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape._nodes.append((out, backward))


class Tape:
    """Ordered record of one forward pass, replayed in reverse for gradients.

    A tape and the tensors recorded on it form a single-owner unit; do not
    share one tape across threads. Use as a context manager:

        with Tape() as tape:
            loss = f(x)
        tape.backward(loss)
    """

    def __init__(self):
        self._nodes = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tapes closed out of order"
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, root: Tensor, seed=1.0) -> None:
        """Seed root's gradient and replay all recorded rules in reverse.

        `seed` may be a scalar (root must then be scalar-valued) or an
        array matching root's shape.
        """
        if np.isscalar(seed):
            if root.data.size != 1:
                raise DimensionError(
                    f"backward needs a scalar root, got shape {root.data.shape}")
            seed_arr = np.full_like(root.data, seed)
        else:
            seed_arr = np.asarray(seed, dtype=root.data.dtype)
            if seed_arr.shape != root.data.shape:
                raise DimensionError(
                    f"seed shape {seed_arr.shape} != root shape {root.data.shape}")
        if not root.requires_grad:
            return
        _accumulate(root, seed_arr)
        for out, rule in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue
            rule(g)
            # each output feeds exactly one recorded rule; all fan-in into
            # its grad happened earlier in the replay, so release it now
            out.grad = None


# ---------------------------------------------------------------------------
# Operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = _result(a.data @ b.data, a, b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T, own=True)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g, own=True)

    _record(out, backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add: shapes {a.data.shape} and {b.data.shape} differ")
    out = _result(a.data + b.data, a, b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    _record(out, backward)
    return out


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = _result(x.data * s, x)

    def backward(g):
        _accumulate(x, g * s, own=True)

    _record(out, backward)
    return out


def relu(x: Tensor) -> Tensor:
    out = _result(np.maximum(x.data, 0), x)

    def backward(g):
        _accumulate(x, g * (x.data > 0), own=True)

    _record(out, backward)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; stable for all finite inputs."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = _result(y, x)

    def backward(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        _accumulate(x, y * (g - inner), own=True)

    _record(out, backward)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each row to zero mean / unit variance, then apply gain and bias."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    if x.data.ndim != 2:
        raise DimensionError(f"layer_norm expects a matrix, got shape {x.data.shape}")
    c = x.data.shape[1]
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise DimensionError(
            f"layer_norm: gain/bias shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match row width {c}")
    out_data, xhat, inv = _kernels.layer_norm_fwd(x.data, gain.data, bias.data, eps)
    out = _result(out_data, x, gain, bias)

    def backward(g):
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0), own=True)
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=0), own=True)
        if x.requires_grad:
            _accumulate(x, _kernels.layer_norm_bwd(g, xhat, inv, gain.data), own=True)

    _record(out, backward)
    return out


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.data.shape}")
    out = _result(np.ascontiguousarray(x.data.T), x)

    def backward(g):
        _accumulate(x, g.T)

    _record(out, backward)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError(
            f"reshape: {x.data.shape} has {x.data.size} elements, target {shape} "
            f"has {int(np.prod(shape))}")
    out = _result(x.data.reshape(shape), x)

    def backward(g):
        _accumulate(x, g.reshape(x.data.shape))

    _record(out, backward)
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat_rows: need at least one part")
    widths = {p.data.shape[1:] for p in parts}
    if len(widths) != 1:
        raise DimensionError(
            f"concat_rows: trailing dims differ: {[p.data.shape for p in parts]}")
    out = _result(np.concatenate([p.data for p in parts], axis=0), *parts)
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _grad_buffer(p)[...] += g[lo:hi]

    _record(out, backward)
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat_cols: need at least one part")
    heights = {p.data.shape[0] for p in parts}
    if len(heights) != 1 or any(p.data.ndim != 2 for p in parts):
        raise DimensionError(
            f"concat_cols: row counts differ: {[p.data.shape for p in parts]}")
    out = _result(np.concatenate([p.data for p in parts], axis=1), *parts)
    offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _grad_buffer(p)[...] += g[:, lo:hi]

    _record(out, backward)
    return out


def row_slice(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start < stop <= x.data.shape[0]):
        raise DimensionError(
            f"row_slice: [{start}:{stop}] invalid for shape {x.data.shape}")
    out = _result(x.data[start:stop], x)

    def backward(g):
        if x.requires_grad:
            _grad_buffer(x)[start:stop] += g

    _record(out, backward)
    return out


def col_slice(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start < stop <= x.data.shape[1]):
        raise DimensionError(
            f"col_slice: [{start}:{stop}] invalid for shape {x.data.shape}")
    out = _result(np.ascontiguousarray(x.data[:, start:stop]), x)

    def backward(g):
        if x.requires_grad:
            _grad_buffer(x)[:, start:stop] += g

    _record(out, backward)
    return out


def tile_rows(x: Tensor, reps: int) -> Tensor:
    """Repeat each row `reps` times consecutively (m*reps rows out)."""
    reps = int(reps)
    if reps < 1:
        raise DimensionError(f"tile_rows: reps must be >= 1, got {reps}")
    if x.data.ndim != 2:
        raise DimensionError(f"tile_rows expects a matrix, got shape {x.data.shape}")
    m, c = x.data.shape
    out = _result(np.repeat(x.data, reps, axis=0), x)

    def backward(g):
        _accumulate(x, g.reshape(m, reps, c).sum(axis=1), own=True)

    _record(out, backward)
    return out


def max_over_rows(x: Tensor) -> Tensor:
    """Column-wise max over rows; gradient routes to the first max row."""
    return max_over_segments(x, 1)


def max_over_segments(x: Tensor, segments: int) -> Tensor:
    """Column-wise max over each of `segments` equal row blocks."""
    if x.data.ndim != 2:
        raise DimensionError(f"max_over_segments expects a matrix, got shape {x.data.shape}")
    rows, cols = x.data.shape
    if segments < 1 or rows % segments != 0:
        raise DimensionError(
            f"max_over_segments: {segments} segments do not divide {rows} rows")
    length = rows // segments
    blocks = x.data.reshape(segments, length, cols)
    idx = blocks.argmax(axis=1)                      # (segments, cols)
    out = _result(blocks.max(axis=1), x)

    def backward(g):
        if x.requires_grad:
            buf = _grad_buffer(x).reshape(segments, length, cols)
            seg = np.arange(segments)[:, None]
            col = np.arange(cols)[None, :]
            np.add.at(buf, (seg, idx, col), g)

    _record(out, backward)
    return out


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = _result(np.asarray(x.data.sum(), dtype=x.data.dtype), x)

    def backward(g):
        _accumulate(x, np.full_like(x.data, float(g)))

    _record(out, backward)
    return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b with b a rank-1 bias; one tape node."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise DimensionError(
            f"affine: incompatible shapes {x.data.shape} and {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise DimensionError(
            f"affine: bias shape {b.data.shape} does not match output width {w.data.shape[1]}")
    out = _result(x.data @ w.data + b.data, x, w, b)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g @ w.data.T, own=True)
        if w.requires_grad:
            _accumulate(w, x.data.T @ g, own=True)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0), own=True)

    _record(out, backward)
    return out


def grad_check(f, x: Tensor, step: float = 1e-5) -> float:
    """Compare analytic and central finite-difference gradients of f at x.

    f must map x to a scalar Tensor. Returns the max over coordinates of
    |analytic - numeric| / max(1, |analytic|). x.data is perturbed in
    place and restored.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    was_tracked = x.requires_grad
    x.requires_grad = True
    x.grad = np.zeros_like(x.data)
    try:
        with Tape() as tape:
            y = f(x)
            if y.data.size != 1:
                raise DimensionError(
                    f"grad_check needs a scalar-valued f, got shape {y.data.shape}")
            tape.backward(y)
        analytic = x.grad.reshape(-1).copy()

        flat = x.data.reshape(-1)
        numeric = np.empty(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(x).data)
            flat[i] = orig - step
            fm = float(f(x).data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * step)
    finally:
        x.requires_grad = was_tracked
        if not was_tracked:
            x.grad = None
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0
