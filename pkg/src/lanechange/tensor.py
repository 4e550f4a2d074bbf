"""Dense tensor ops for the lane-change networks, with a reverse-mode tape.

Feature maps are channel-first (C x H x W); every op also accepts a leading
batch dimension.  Values are numpy arrays wrapped in :class:`Tensor`.  A
tensor that carries a :class:`Tape` has its producing op recorded, so
``backprop`` can walk the tape backwards and return parameter gradients.

Storage is float32 by default; ops keep the dtype of their inputs, so feeding
float64 arrays gives the full 64-bit mode used by :func:`grad_check`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

LOG_CLAMP = 1e-7

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible with the op."""


class ContractError(RuntimeError):
    """A precondition of backprop or an optimizer step was violated."""


class Tensor:
    """An immutable numpy array plus the tape (if any) that tracks it."""

    __slots__ = ("data", "tape", "id")

    def __init__(self, data, tape: Tape | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float32)
        self.tape = tape
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, tracked={self.tape is not None})"


class TapeEntry(NamedTuple):
    kind: str
    inputs: tuple[int, ...]
    needs: tuple[bool, ...]
    output: int
    saved: tuple


@dataclass
class Tape:
    """Ordered record of forward ops.  Single owner; not thread safe."""

    entries: list[TapeEntry] = field(default_factory=list)
    # name -> (tensor id, array); holding ids rather than tensors avoids a
    # tensor <-> tape reference cycle that would pin every saved activation
    watched: dict[str, tuple[int, np.ndarray]] = field(default_factory=dict)

    def watch(self, name: str, array: np.ndarray) -> Tensor:
        if name in self.watched:
            raise ValueError(f"parameter {name!r} is already watched")
        t = Tensor(array, self)
        self.watched[name] = (t.id, t.data)
        return t

    def record(self, kind: str, inputs: tuple[Tensor, ...], output: Tensor, saved: tuple) -> None:
        self.entries.append(
            TapeEntry(kind, tuple(t.id for t in inputs), tuple(t.tape is not None for t in inputs), output.id, saved)
        )

    def kinks(self) -> list[np.ndarray]:
        """Activation patterns of every piecewise-linear op (relu masks, pool argmaxes)."""
        out = []
        for e in self.entries:
            if e.kind == "relu":
                out.append(e.saved[0])
            elif e.kind == "maxpool_2x2_ceil":
                out.append(e.saved[0])
        return out


_BACKWARD: dict[str, Callable] = {}


def _backward(kind: str):
    def register(fn):
        _BACKWARD[kind] = fn
        return fn

    return register


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _emit(kind: str, inputs: tuple[Tensor, ...], out: np.ndarray, saved: tuple) -> Tensor:
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if len(tapes) > 1:
        raise ContractError(f"{kind}: inputs are recorded on different tapes")
    tape = next(iter(tapes.values()), None)
    result = Tensor(out, tape)
    if tape is not None:
        tape.record(kind, inputs, result, saved)
    return result


# ---------------------------------------------------------------------------
# convolution


def conv2d_same(x, kernels, bias) -> Tensor:
    """3x3 stride-1 convolution with one pixel of zero padding.

    ``x`` is C x H x W or N x C x H x W, ``kernels`` K x C x 3 x 3, ``bias`` K.
    The output keeps the spatial size of the input.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    xd, w, b = x.data, kernels.data, bias.data
    unbatched = xd.ndim == 3
    if unbatched:
        xd = xd[None]
    if xd.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d_same: bad ranks input {x.shape}, kernels {kernels.shape}")
    if xd.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d_same: input has {xd.shape[1]} channels, kernels expect {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d_same: bias shape {b.shape} does not match {w.shape[0]} kernels")
    n, c, h, wd = xd.shape
    k = w.shape[0]
    cols = _im2col(xd)  # n x (c*9) x (h*w)
    wmat = w.reshape(k, c * 9)
    out = np.matmul(wmat, cols)
    out += b[:, None]
    out = out.reshape(n, k, h, wd)
    return _emit("conv2d_same", (x, kernels, bias), out[0] if unbatched else out, (cols, wmat, xd.shape, unbatched))


def _im2col(xd: np.ndarray) -> np.ndarray:
    n, c, h, w = xd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 3, 3, h, w), dtype=xd.dtype)
    for di in range(3):
        for dj in range(3):
            cols[:, :, di, dj] = xp[:, :, di : di + h, dj : dj + w]
    return cols.reshape(n, c * 9, h * w)


@_backward("conv2d_same")
def _conv_back(dy, saved, needs):
    cols, wmat, (n, c, h, w), unbatched = saved
    k = wmat.shape[0]
    dy = dy.reshape(n, k, h * w)
    dx = None
    if needs[0]:
        dcols = np.matmul(wmat.T, dy).reshape(n, c, 3, 3, h, w)
        dxp = np.zeros((n, c, h + 2, w + 2), dtype=dy.dtype)
        for di in range(3):
            for dj in range(3):
                dxp[:, :, di : di + h, dj : dj + w] += dcols[:, :, di, dj]
        dx = dxp[:, :, 1:-1, 1:-1]
        if unbatched:
            dx = dx[0]
    dw = None
    if needs[1]:
        dw = np.zeros((k, c * 9), dtype=dy.dtype)
        for i in range(n):
            dw += dy[i] @ cols[i].T
        dw = dw.reshape(k, c, 3, 3)
    db = dy.sum(axis=(0, 2), dtype=np.float64).astype(dy.dtype) if needs[2] else None
    return dx, dw, db


# ---------------------------------------------------------------------------
# elementwise and pooling


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _emit("relu", (x,), np.maximum(x.data, 0), (mask,))


@_backward("relu")
def _relu_back(dy, saved, needs):
    return (dy * saved[0],)


def maxpool_2x2_ceil(x) -> Tensor:
    """2x2 stride-2 max pooling; odd trailing rows/columns form truncated windows."""
    x = as_tensor(x)
    xd = x.data
    if xd.ndim < 2 or xd.shape[-1] < 1 or xd.shape[-2] < 1:
        raise ShapeError(f"maxpool_2x2_ceil: bad input shape {x.shape}")
    lead = xd.shape[:-2]
    h, w = xd.shape[-2:]
    h2, w2 = -(-h // 2), -(-w // 2)
    padded = np.full(lead + (2 * h2, 2 * w2), -np.inf, dtype=xd.dtype)
    padded[..., :h, :w] = xd
    nl = len(lead)
    axes = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3)
    win = padded.reshape(lead + (h2, 2, w2, 2)).transpose(axes).reshape(lead + (h2, w2, 4))
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return _emit("maxpool_2x2_ceil", (x,), out, (idx, (h, w)))


@_backward("maxpool_2x2_ceil")
def _pool_back(dy, saved, needs):
    idx, (h, w) = saved
    lead = idx.shape[:-2]
    h2, w2 = idx.shape[-2:]
    win = np.zeros(lead + (h2, w2, 4), dtype=dy.dtype)
    np.put_along_axis(win, idx[..., None], dy[..., None], axis=-1)
    nl = len(lead)
    axes = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3)
    full = win.reshape(lead + (h2, w2, 2, 2)).transpose(axes).reshape(lead + (2 * h2, 2 * w2))
    return (full[..., :h, :w],)


def global_avg_pool(x) -> Tensor:
    """Mean over the two trailing spatial axes: C x H x W -> C."""
    x = as_tensor(x)
    if x.data.ndim < 3:
        raise ShapeError(f"global_avg_pool: expected C x H x W, got {x.shape}")
    # mean taken around the first pixel so a constant map comes back exactly
    ref = x.data[..., :1, :1].astype(np.float64)
    out = (ref[..., 0, 0] + (x.data - ref).mean(axis=(-2, -1))).astype(x.dtype)
    return _emit("global_avg_pool", (x,), out, (x.shape,))


@_backward("global_avg_pool")
def _gap_back(dy, saved, needs):
    (shape,) = saved
    scale = 1.0 / (shape[-1] * shape[-2])
    return (np.broadcast_to((dy * scale)[..., None, None], shape).copy(),)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit("add", (a, b), a.data + b.data, ())


@_backward("add")
def _add_back(dy, saved, needs):
    return dy, dy


def pad_channels(x, channels: int) -> Tensor:
    """Append all-zero channels (axis -3) until ``x`` has ``channels`` channels."""
    x = as_tensor(x)
    c = x.shape[-3]
    if channels < c:
        raise ShapeError(f"pad_channels: cannot shrink {c} channels to {channels}")
    if channels == c:
        return _emit("pad_channels", (x,), x.data, (c,))
    pad = [(0, 0)] * x.data.ndim
    pad[-3] = (0, channels - c)
    return _emit("pad_channels", (x,), np.pad(x.data, pad), (c,))


@_backward("pad_channels")
def _pad_back(dy, saved, needs):
    (c,) = saved
    return (dy[..., :c, :, :],)


# ---------------------------------------------------------------------------
# vector ops


def dense(x, weights, bias) -> Tensor:
    """``weights @ x + bias`` for x of length N (or a batch B x N)."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if x.data.ndim not in (1, 2) or weights.data.ndim != 2:
        raise ShapeError(f"dense: bad ranks input {x.shape}, weights {weights.shape}")
    if x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"dense: input length {x.shape[-1]} != weight columns {weights.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({weights.shape[0]},)")
    out = x.data @ weights.data.T + bias.data
    return _emit("dense", (x, weights, bias), out, (x.data, weights.data))


@_backward("dense")
def _dense_back(dy, saved, needs):
    xd, w = saved
    dx = dy @ w if needs[0] else None
    if xd.ndim == 1:
        dw = np.outer(dy, xd)
        db = dy
    else:
        dw = dy.T @ xd
        db = dy.sum(axis=0, dtype=np.float64).astype(dy.dtype)
    return dx, dw, db


def concat(a, b) -> Tensor:
    """Join two vectors end to end (batched vectors join along the last axis)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or a.data.ndim != b.data.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat: need two rank-1 tensors, got {a.shape} and {b.shape}")
    out = np.concatenate([a.data, b.data.astype(a.dtype, copy=False)], axis=-1)
    return _emit("concat", (a, b), out, (a.shape[-1],))


@_backward("concat")
def _concat_back(dy, saved, needs):
    (n,) = saved
    return dy[..., :n], dy[..., n:]


def softmax(logits) -> Tensor:
    z = as_tensor(logits)
    e = np.exp(z.data - z.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return _emit("softmax", (z,), y, (y,))


@_backward("softmax")
def _softmax_back(dy, saved, needs):
    (y,) = saved
    return (y * (dy - (dy * y).sum(axis=-1, keepdims=True)),)


def cross_entropy(label, probs) -> Tensor:
    """``-sum(label * log(probs))`` with probs clamped to [1e-7, 1]; batches are averaged."""
    label, probs = as_tensor(label), as_tensor(probs)
    if label.shape != probs.shape:
        raise ShapeError(f"cross_entropy: label {label.shape} vs probs {probs.shape}")
    p = np.clip(probs.data, LOG_CLAMP, 1.0)
    per = -(label.data * np.log(p)).sum(axis=-1, dtype=np.float64)
    n = per.size
    loss = np.asarray(per.mean(), dtype=probs.dtype)
    return _emit("cross_entropy", (label, probs), loss, (label.data, p, probs.data, n))


@_backward("cross_entropy")
def _ce_back(dy, saved, needs):
    y, p, raw, n = saved
    inside = (raw >= LOG_CLAMP) & (raw <= 1.0)
    dp = np.where(inside, -y / p, 0.0) * (dy / n)
    return None, dp.astype(raw.dtype)


def softmax_cross_entropy(logits, label) -> Tensor:
    """Fused softmax + cross entropy, mean over the batch.

    The gradient with respect to the logits is ``(probs - label) / batch``.
    """
    z, label = as_tensor(logits), as_tensor(label)
    if z.shape != label.shape:
        raise ShapeError(f"softmax_cross_entropy: logits {z.shape} vs label {label.shape}")
    e = np.exp(z.data - z.data.max(axis=-1, keepdims=True))
    probs = e / e.sum(axis=-1, keepdims=True)
    per = -(label.data * np.log(np.clip(probs, LOG_CLAMP, 1.0))).sum(axis=-1, dtype=np.float64)
    loss = np.asarray(per.mean(), dtype=z.dtype)
    return _emit("softmax_cross_entropy", (z, label), loss, (probs, label.data, per.size))


@_backward("softmax_cross_entropy")
def _sce_back(dy, saved, needs):
    probs, y, n = saved
    return ((probs - y) * (dy / n)).astype(probs.dtype), None


# ---------------------------------------------------------------------------
# reverse mode


def backprop(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of the scalar ``loss`` for every watched parameter.

    Parameters the loss does not depend on get zero gradients.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ContractError(f"backprop: loss must be a scalar, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ContractError("backprop: loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        dy = grads.pop(entry.output, None)
        if dy is None:
            continue
        in_grads = _BACKWARD[entry.kind](dy, entry.saved, entry.needs)
        for tid, need, g in zip(entry.inputs, entry.needs, in_grads):
            if not need or g is None:
                continue
            if tid in grads:
                grads[tid] = grads[tid] + g
            else:
                grads[tid] = g
    return {name: grads[tid] if tid in grads else np.zeros_like(arr) for name, (tid, arr) in tape.watched.items()}


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    checked: int
    skipped: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    fragment: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    step: float = 1e-4,
    tolerance: float = 1e-6,
    abs_floor: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backprop gradients of ``fragment`` with central differences.

    ``fragment`` maps watched parameter tensors to a scalar loss tensor; any
    inputs it needs are closed over.  Everything runs in float64.  A
    coordinate whose perturbation flips a relu mask or a pooling argmax sits
    on a kink of the loss and is skipped.  Relative error is
    ``|a - n| / max(|a|, |n|, abs_floor)``.  ``max_coords`` caps the number of
    coordinates sampled per parameter.
    """
    p64 = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def run(values):
        tape = Tape()
        watched = {k: tape.watch(k, v) for k, v in values.items()}
        loss = fragment(watched)
        return tape, loss

    tape, loss = run(p64)
    analytic = backprop(tape, loss)
    rng = np.random.default_rng(seed)

    per_param: dict[str, float] = {}
    checked = skipped = 0
    for name in sorted(p64):
        arr = p64[name]
        coords = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            coords = np.sort(rng.choice(arr.size, size=max_coords, replace=False))
        worst = 0.0
        flat = arr.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            tp, lp = run(p64)
            flat[i] = orig - step
            tm, lm = run(p64)
            flat[i] = orig
            if not _same_kinks(tp, tm):
                skipped += 1
                continue
            numeric = (float(lp.data) - float(lm.data)) / (2 * step)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            worst = max(worst, rel)
            checked += 1
        per_param[name] = worst
    return GradCheckReport(max(per_param.values(), default=0.0), per_param, checked, skipped, tolerance)


def _same_kinks(a: Tape, b: Tape) -> bool:
    ka, kb = a.kinks(), b.kinks()
    return len(ka) == len(kb) and all(np.array_equal(x, y) for x, y in zip(ka, kb))
