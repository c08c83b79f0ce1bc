"""Dense float64 tensors with a reverse-mode tape.

Every operation in this module appends a :class:`Record` to the active
:class:`Tape` (if any). :func:`backward` replays the tape in reverse,
accumulating adjoints into ``Tensor.grad``. Records are also the unit of the
op-count instrumentation used to audit what runs at inference time.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from triplenet import kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Tensor:
    """An ndarray plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(_wrap(other), _wrap(-1.0)))

    def __neg__(self):
        return mul(self, _wrap(-1.0))


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass
class Record:
    op: str
    inputs: tuple
    output: Tensor
    backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]
    scope: str = ""


@dataclass
class Tape:
    """Ordered log of executed operations.

    Use as a context manager; nested tapes each receive every record.
    """

    records: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _state().tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state().tapes.remove(self)

    def op_counts(self, by_scope: bool = False) -> dict:
        counts: dict = {}
        for r in self.records:
            key = (r.scope, r.op) if by_scope else r.op
            counts[key] = counts.get(key, 0) + 1
        return counts

    def scopes(self) -> list:
        return [r.scope for r in self.records]


class _State(threading.local):
    def __init__(self):
        self.tapes: list = []
        self.scope: list = []


_STATE = _State()


def _state() -> _State:
    return _STATE


@contextmanager
def scope(label: str):
    """Tag records created inside the block with ``label`` (joined by '/')."""
    _STATE.scope.append(label)
    try:
        yield
    finally:
        _STATE.scope.pop()


def current_scope() -> str:
    return "/".join(_STATE.scope)


def _record(op: str, inputs: tuple, out: Tensor, back) -> Tensor:
    out.requires_grad = any(t.requires_grad for t in inputs)
    tapes = _STATE.tapes
    if tapes:
        rec = Record(op, inputs, out, back if out.requires_grad else None, current_scope())
        for tp in tapes:
            tp.records.append(rec)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` of all requires-grad tensors on ``tape`` reachable from ``loss``.

    Leaves that were used on the tape but do not influence ``loss`` receive
    an all-zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    produced = {id(rec.output) for rec in tape.records}
    for rec in tape.records:
        rec.output.grad = None
        for t in rec.inputs:
            if t.requires_grad and id(t) not in produced:
                t.grad = np.zeros_like(t.data)
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None or rec.backward is None:
            continue
        grads = rec.backward(g)
        for t, gi in zip(rec.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.array(gi, dtype=np.float64)
            else:
                t.grad += gi


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _record("add", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    return _record("mul", (a, b), out,
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.array(x.data.sum()))
    return _record("sum", (x,), out, lambda g: (np.broadcast_to(g, x.shape),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(np.array(x.data.mean()))
    return _record("mean", (x,), out, lambda g: (np.broadcast_to(g / n, x.shape),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    out = Tensor(x.data.transpose(axes))
    return _record("permute", (x,), out, lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if not xs:
        raise ValueError("concat needs at least one tensor")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ValueError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)
    out = Tensor(np.concatenate([t.data for t in xs], axis=axis))

    def back(g):
        idx = [slice(None)] * g.ndim
        res = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            res.append(g[tuple(idx)])
        return res

    return _record("concat", tuple(xs), out, back)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along C, in argument order."""
    for t in xs:
        if t.ndim != 4:
            raise ValueError(f"concat_channels expects NCHW tensors, got shape {t.shape}")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ValueError(f"concat_channels: N/H/W mismatch between {xs[0].shape} and {t.shape}")
    return concat(xs, axis=1)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))
    return _record("relu", (x,), out, lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Tensor(s)
    return _record("sigmoid", (x,), out, lambda g: (g * s * (1.0 - s),))


def softmax_over_channels(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p)
    return _record("softmax", (x,), out,
                   lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),))


def log_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# Convolution, resampling, pooling, normalization
# ---------------------------------------------------------------------------

@dataclass
class ConvParams:
    weight: Tensor  # (out, in, kh, kw)
    bias: Tensor  # (out,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        o, _, kh, kw = self.weight.shape
        if kh < 1 or kw < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid conv geometry: kernel {self.weight.shape}, "
                             f"stride {self.stride}, padding {self.padding}")
        if self.bias.shape != (o,):
            raise ValueError(f"bias shape {self.bias.shape} does not match {o} output channels")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation with bias over an NCHW input, via im2col + matmul."""
    w = p.weight
    o, ci, kh, kw = w.shape
    if x.ndim != 4 or x.shape[1] != ci:
        raise ValueError(f"conv2d: input shape {x.shape} incompatible with kernel shape {w.shape}")
    n, _, h, wd = x.shape
    s, pad = p.stride, p.padding
    ho, wo = conv_output_size(h, kh, s, pad), conv_output_size(wd, kw, s, pad)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: input shape {x.shape} too small for kernel shape {w.shape} "
                         f"with stride {s}, padding {pad}")
    cols = kernels.im2col(x.data, kh, kw, s, pad)
    wmat = w.data.reshape(o, -1)
    y = cols @ wmat.T
    y += p.bias.data
    out = Tensor(y.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(w.shape)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            gx = kernels.col2im(np.ascontiguousarray(g2 @ wmat), n, ci, h, wd, kh, kw, s, pad)
        return gx, gw, gb

    return _record("conv2d", (x, w, p.bias), out, back)


def _interp_matrix(out_n: int, in_n: int) -> np.ndarray:
    """Row i holds the half-pixel-center linear weights for output index i."""
    scale = in_n / out_n
    src = np.clip((np.arange(out_n) + 0.5) * scale - 0.5, 0.0, in_n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_n - 1)
    frac = src - lo
    m = np.zeros((out_n, in_n))
    rows = np.arange(out_n)
    m[rows, lo] += 1.0 - frac
    m[rows, hi] += frac
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: output size must be positive, got {out_h}x{out_w}")
    _, _, h, w = x.shape
    ry = _interp_matrix(out_h, h)
    rx = _interp_matrix(out_w, w)
    out = Tensor(np.matmul(np.matmul(ry, x.data), rx.T))
    return _record("resize", (x,), out, lambda g: (np.matmul(np.matmul(ry.T, g), rx),))


def global_average_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True))
    return _record("gap", (x,), out,
                   lambda g: (np.broadcast_to(g / (h * w), x.shape),))


@dataclass
class BatchNormState:
    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray


def batch_norm(x: Tensor, st: BatchNormState, train: bool) -> Tensor:
    """Per-channel normalization; ``train`` uses batch stats and updates running stats.

    Batch variance is floored at ``BN_EPS`` rather than offset by it, so in
    train mode the output variance equals ``scale**2`` exactly for any channel
    whose variance exceeds the floor.
    """
    gamma = st.scale.data.reshape(1, -1, 1, 1)
    beta = st.shift.data.reshape(1, -1, 1, 1)
    if not train:
        inv = 1.0 / np.sqrt(np.maximum(st.running_var, BN_EPS)).reshape(1, -1, 1, 1)
        xhat = (x.data - st.running_mean.reshape(1, -1, 1, 1)) * inv
        out = Tensor(xhat * gamma + beta)

        def back_eval(g):
            return g * gamma * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _record("batch_norm", (x, st.scale, st.shift), out, back_eval)

    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    floored = var <= BN_EPS
    v = np.maximum(var, BN_EPS)
    inv = 1.0 / np.sqrt(v)
    xhat = xc * inv
    out = Tensor(xhat * gamma + beta)
    unbiased = var.reshape(-1) * (m / (m - 1) if m > 1 else 1.0)
    st.running_mean *= 1.0 - BN_MOMENTUM
    st.running_mean += BN_MOMENTUM * mu.reshape(-1)
    st.running_var *= 1.0 - BN_MOMENTUM
    st.running_var += BN_MOMENTUM * unbiased

    def back_train(g):
        gxhat = g * gamma
        mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        # floored channels: variance is a constant, only the mean path remains
        mean_gx = np.where(floored, 0.0, mean_gx)
        gx = inv * (gxhat - mean_g - xhat * mean_gx)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _record("batch_norm", (x, st.scale, st.shift), out, back_train)


# ---------------------------------------------------------------------------
# Loss primitives
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray, weights: np.ndarray, axis: int) -> Tensor:
    """Weighted sum of softmax cross-entropies along ``axis``.

    ``labels`` and ``weights`` have the shape of ``logits`` with ``axis``
    removed. Entries with zero weight may carry any label.
    """
    x = logits.data
    ax = axis % x.ndim
    lsm = log_softmax(x, ax)
    lab = np.expand_dims(np.where(weights != 0, labels, 0).astype(np.int64), ax)
    picked = np.take_along_axis(lsm, lab, axis=ax).squeeze(ax)
    out = Tensor(np.array(-(weights * picked).sum()))

    def back(g):
        p = np.exp(lsm)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, lab, 1.0, axis=ax)
        return (float(g) * np.expand_dims(weights, ax) * (p - onehot),)

    return _record("cross_entropy", (logits,), out, back)


def smooth_l1(pred: Tensor, target: np.ndarray, weights: np.ndarray) -> Tensor:
    """Sum of ``weights * smoothL1(pred - target)``; ``weights`` broadcasts to ``pred``."""
    d = pred.data - target
    ad = np.abs(d)
    small = ad < 1.0
    val = np.where(small, 0.5 * d * d, ad - 0.5)
    out = Tensor(np.array((weights * val).sum()))
    return _record("smooth_l1", (pred,), out,
                   lambda g: (float(g) * weights * np.where(small, d, np.sign(d)),))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class SGD:
    """Momentum SGD: ``v = momentum * v + grad (+ wd * p); p -= lr * v``."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"parameter {p.name or p.shape} has no gradient")
        for p, v in zip(self.params, self.velocity):
            g = p.grad if not self.weight_decay else p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v
            p.grad = None


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float, state: SGD | None = None) -> SGD:
    """One momentum-SGD update; pass the returned state back in for the next step."""
    if state is None:
        state = SGD(params, momentum)
    state.momentum = momentum
    state.step(lr)
    return state
