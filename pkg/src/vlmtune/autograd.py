"""Dense tensors on numpy buffers with reverse-mode automatic differentiation.

Differentiable operations record nodes on the active gradient tape;
``backward`` replays the tape in reverse and accumulates gradients into every
tensor that requires them. Training runs in float32; float64 exists for
finite-difference gradient checking. Kernels are plain numpy with fixed
reduction order, so identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DegenerateBatchError, ShapeMismatchError, StaleTapeError

DEFAULT_DTYPE = np.float32

# Additive mask value for attention; large enough that exp() underflows to 0
# after max-subtraction, small enough to stay finite in float32.
MASK_VALUE = -1e9


class Tensor:
    """A dense n-dimensional array with an optional gradient buffer.

    ``trainable`` marks leaf tensors the optimizer may update; it also decides
    whether ``backward`` accumulates a gradient here. Tensors produced by
    operations are non-leaf and receive gradients whenever any input does.
    """

    __slots__ = ("data", "grad", "trainable", "name", "_rg", "_leaf", "_tape")

    def __init__(self, data, trainable: bool = False, name: Optional[str] = None,
                 dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.trainable = trainable
        self.name = name
        self._rg = False  # set per-op while a tape is active
        self._leaf = True
        self._tape: Optional[GradTape] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def requires_grad(self) -> bool:
        """Leaves require grad iff trainable; non-leaves iff any input did."""
        return self.trainable if self._leaf else self._rg

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.data.shape}, dtype={self.data.dtype}, trainable={self.trainable})"

    # Operator sugar; scalars are folded in via scale/shift.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return shift(self, -float(other))

    def __matmul__(self, other):
        return matmul(self, other)


class GradTape:
    """Ordered record of executed differentiable operations.

    Use as a context manager around the forward pass, then call
    ``backward(loss)``. The tape is cleared by the backward pass; replaying
    it twice raises :class:`StaleTapeError`.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, Callable]] = []
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)


_TAPE_STACK: list[GradTape] = []


def _active_tape() -> Optional[GradTape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
    """Attach a backward rule to the active tape, if recording is on."""
    tape = _active_tape()
    if tape is None:
        return
    if not any(t.requires_grad() for t in inputs):
        return
    out._rg = True
    out._leaf = False
    out._tape = tape
    tape._nodes.append((out, tuple(inputs), backward_fn))


def _accumulate(t: Tensor, g: np.ndarray):
    if g is None or not t.requires_grad():
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor):
    """Replay the tape that produced ``loss`` in reverse, filling gradients.

    Every tensor reachable from the loss that requires a gradient receives
    one; leaves with ``trainable=False`` are skipped. The tape is cleared
    afterwards, so a second call without a fresh forward pass fails.
    """
    tape = loss._tape
    if tape is None:
        raise StaleTapeError("loss was not produced under an active gradient tape")
    if tape._consumed:
        raise StaleTapeError("gradient tape already replayed; run a fresh forward pass")
    if loss.data.size != 1:
        raise ShapeMismatchError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, inputs, fn in reversed(tape._nodes):
        if out.grad is None:
            continue
        grads = fn(out.grad)
        for inp, g in zip(inputs, grads):
            _accumulate(inp, g)
    tape._nodes.clear()
    tape._consumed = True


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    need_a, need_b = a.requires_grad(), b.requires_grad()

    def bwd(g):
        return (_unbroadcast(g, a.data.shape) if need_a else None,
                _unbroadcast(g, b.data.shape) if need_b else None)

    _record(out, (a, b), bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    need_a, need_b = a.requires_grad(), b.requires_grad()

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape) if need_a else None,
                _unbroadcast(g * a.data, b.data.shape) if need_b else None)

    _record(out, (a, b), bwd)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s)
    _record(out, (a,), lambda g: (g * s,))
    return out


def shift(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data + s)
    _record(out, (a,), lambda g: (g,))
    return out


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))
    _record(out, (a,), lambda g: (np.transpose(g, inv),))
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.data.shape
    out = Tensor(a.data.reshape(shape))
    _record(out, (a,), lambda g: (g.reshape(old),))
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [t.data for t in tensors]
    out = Tensor(np.concatenate(parts, axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    needs = [t.requires_grad() for t in tensors]

    def bwd(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i, t in enumerate(tensors):
            if not needs[i]:
                grads.append(None)
                continue
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return grads

    _record(out, tuple(tensors), bwd)
    return out


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    slicer = [slice(None)] * a.data.ndim
    slicer[axis] = slice(start, stop)
    slicer = tuple(slicer)
    out = Tensor(a.data[slicer])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[slicer] = g
        return (full,)

    _record(out, (a,), bwd)
    return out


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype))
    _record(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))
    return out


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading axes.

    Backward follows the standard rules dA = dC.Bᵀ and dB = Aᵀ.dC, with the
    transpose taken over the last two axes.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatchError(
            f"matmul needs matrices, got shapes {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatchError(
            f"matmul inner dimensions disagree: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data @ b.data)
    need_a, need_b = a.requires_grad(), b.requires_grad()

    def bwd(g):
        ga = gb = None
        if need_a:
            ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        if need_b:
            gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return (ga, gb)

    _record(out, (a, b), bwd)
    return out


# ---------------------------------------------------------------------------
# Nonlinearities and normalization
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    _record(out, (x,), bwd)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU with the tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * xd * (1.0 + t))

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * xd ** 2)
        dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * dinner
        return (g * dx,)

    _record(out, (x,), bwd)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xd = x.data
    mean = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    out = Tensor(xhat * gain.data + bias.data)
    need_x = x.requires_grad()
    need_g = gain.requires_grad()
    need_b = bias.requires_grad()
    lead = tuple(range(xd.ndim - 1))

    def bwd(g):
        gx = gg = gb = None
        gxhat = g * gain.data
        if need_x:
            m1 = gxhat.mean(axis=-1, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (gxhat - m1 - xhat * m2)
        if need_g:
            gg = (g * xhat).sum(axis=lead)
        if need_b:
            gb = g.sum(axis=lead)
        return (gx, gg, gb)

    _record(out, (x, gain, bias), bwd)
    return out


# ---------------------------------------------------------------------------
# Embedding and loss
# ---------------------------------------------------------------------------

def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; gradients accumulate additively per row."""
    idx = np.asarray(ids, dtype=np.int64)
    vocab = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise IndexError(f"token id out of range for vocabulary of size {vocab}")
    out = Tensor(table.data[idx])

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    _record(out, (table,), bwd)
    return out


def lm_cross_entropy(logits: Tensor, targets, ignore_mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``logits``.

    ``logits`` is [L, V]; ``targets`` is a length-L vector of token ids.
    Positions where ``ignore_mask`` is True are excluded from the mean.
    Raises :class:`DegenerateBatchError` when every position is masked.
    """
    tgt = np.asarray(targets, dtype=np.int64)
    ld = logits.data
    if ld.ndim != 2 or tgt.shape != (ld.shape[0],):
        raise ShapeMismatchError(
            f"expected logits [L, V] with L targets, got {ld.shape} and {tgt.shape}")
    vocab = ld.shape[1]
    if tgt.size and (tgt.min() < 0 or tgt.max() >= vocab):
        raise IndexError(f"target id out of range for vocabulary of size {vocab}")
    if ignore_mask is None:
        keep = np.ones(tgt.shape[0], dtype=bool)
    else:
        keep = ~np.asarray(ignore_mask, dtype=bool)
    n = int(keep.sum())
    if n == 0:
        raise DegenerateBatchError("all positions masked out of the loss")

    m = ld.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(ld - m).sum(axis=-1))
    nll = lse - ld[np.arange(tgt.shape[0]), tgt]
    loss_val = nll[keep].sum() / n
    out = Tensor(np.asarray(loss_val, dtype=ld.dtype))

    def bwd(g):
        probs = np.exp(ld - lse[:, None])
        probs[np.arange(tgt.shape[0]), tgt] -= 1.0
        probs[~keep] = 0.0
        return (probs * (g / n),)

    _record(out, (logits,), bwd)
    return out


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Truncated normal at two standard deviations, via rejection sampling."""
    vals = rng.normal(0.0, std, size=shape)
    bad = np.abs(vals) > 2.0 * std
    while bad.any():
        vals[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(vals) > 2.0 * std
    return vals.astype(dtype)
