"""A small reverse-mode differentiation core over dense 2-D numpy arrays.

Operations executed while a :class:`Tape` is active are recorded on it when any
input requires a gradient; :func:`backward` replays the record in reverse.
Outside a tape every operation is a plain numpy computation, which is what
inference uses.

A tape can be replayed once. Calling :func:`backward` a second time on the same
tape raises ``RuntimeError``; gradients of leaves accumulate across different
tapes until cleared (:func:`adam_step` clears them).
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()


def dtype_for(precision: int):
    if precision == 32:
        return np.float32
    if precision == 64:
        return np.float64
    raise ValueError(f"precision must be 32 or 64, got {precision}")


class Tensor:
    """A 2-D array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ValueError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ValueError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


class Parameter(Tensor):
    """Trainable tensor with a stable name and Adam moment buffers."""

    __slots__ = ("name", "exp_avg", "exp_avg_sq", "step")

    def __init__(self, data, name="", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.exp_avg = np.zeros_like(self.data)
        self.exp_avg_sq = np.zeros_like(self.data)
        self.step = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class _Record:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest, the innermost one records.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.records)


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, inputs, backward) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.records.append(_Record(out, tuple(inputs), backward))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss``."""
    if loss.shape != (1, 1):
        raise ValueError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if tape.consumed:
        raise RuntimeError("this tape has already been replayed; run the forward pass again")
    if not tape.records or not any(r.output is loss for r in reversed(tape.records)):
        raise ValueError("loss was not produced on this tape")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                t.grad += gi
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


# --------------------------------------------------------------------------
# operators

def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with ``b`` broadcast over rows.

    The forward product is taken one row at a time (a stacked matmul) so that
    each output row is bit-identical regardless of its position or of the
    other rows; a plain gemm rounds edge tiles differently.
    """
    if x.shape[1] != w.shape[0] or b.shape != (1, w.shape[1]):
        raise ValueError(f"affine shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    xd, wd = x.data, w.data

    def grad(g):
        return (g @ wd.T if x.requires_grad else None,
                xd.T @ g if w.requires_grad else None,
                g.sum(axis=0, keepdims=True) if b.requires_grad else None)

    return _record(np.matmul(xd[:, None, :], wd)[:, 0, :] + b.data, (x, w, b), grad)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                   lambda g: (g * mask,))


@dataclass
class BatchNormState:
    """Running statistics of a batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, width, dtype=np.float64):
        return cls(np.zeros((1, width), dtype=dtype), np.ones((1, width), dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool) -> Tensor:
    """Column-wise batch normalisation.

    Training mode normalises with the biased batch variance and folds the batch
    mean and unbiased variance into the running statistics; evaluation mode
    uses the running statistics and leaves them untouched.
    """
    m, d = x.shape
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise ValueError(f"batch_norm parameter shapes must be (1, {d})")
    xd = x.data
    gd = gamma.data
    if training:
        if m < 2:
            raise ValueError("batch_norm in training mode needs at least 2 rows")
        mu = xd.mean(axis=0, keepdims=True)
        centered = xd - mu
        var = (centered * centered).mean(axis=0, keepdims=True)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = centered * inv
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean + mom * mu).astype(
            state.running_mean.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * var * (m / (m - 1))).astype(
            state.running_var.dtype)

        def grad(g):
            gxhat = g * gd
            gx = None
            if x.requires_grad:
                gx = (inv / m) * (m * gxhat - gxhat.sum(axis=0, keepdims=True)
                                  - xhat * (gxhat * xhat).sum(axis=0, keepdims=True))
            return (gx,
                    (g * xhat).sum(axis=0, keepdims=True) if gamma.requires_grad else None,
                    g.sum(axis=0, keepdims=True) if beta.requires_grad else None)
    else:
        inv = (1.0 / np.sqrt(state.running_var + state.eps)).astype(xd.dtype)
        xhat = (xd - state.running_mean.astype(xd.dtype)) * inv

        def grad(g):
            return (g * gd * inv if x.requires_grad else None,
                    (g * xhat).sum(axis=0, keepdims=True) if gamma.requires_grad else None,
                    g.sum(axis=0, keepdims=True) if beta.requires_grad else None)

    return _record(xhat * gd + beta.data, (x, gamma, beta), grad)


def concat_columns(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"row counts differ: {a.shape} vs {b.shape}")
    k = a.shape[1]
    return _record(np.concatenate([a.data, b.data], axis=1), (a, b),
                   lambda g: (g[:, :k], g[:, k:]))


def segment_sum(x: Tensor, segments, num_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``num_segments`` buckets (``segments`` non-decreasing).

    Within a segment each column is summed in sorted order, so reordering rows
    inside a segment or adding other segments leaves the result bit-identical.
    """
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape != (x.shape[0],):
        raise ValueError(f"need one segment id per row, got {seg.shape} for {x.shape}")
    if len(seg) and (seg.min() < 0 or seg.max() >= num_segments):
        raise ValueError(f"segment id outside 0..{num_segments - 1}")
    if np.any(np.diff(seg) < 0):
        raise ValueError("segment ids must be non-decreasing")
    out = np.zeros((num_segments, x.shape[1]), dtype=x.dtype)
    if len(seg):
        starts = np.flatnonzero(np.r_[True, seg[1:] != seg[:-1]])
        cols = x.data.T
        order = np.lexsort((cols, np.broadcast_to(seg, cols.shape)))
        canon = np.take_along_axis(cols, order, axis=1).T
        out[seg[starts]] = np.add.reduceat(canon, starts, axis=0)
    return _record(out, (x,), lambda g: (g[seg],))


def gather_neighbors_sum(x: Tensor, batch) -> Tensor:
    """``out[v] = sum of x[w] over neighbours w of v`` for a :class:`Batch`.

    Each node's contributions are added in sorted order per column, so the
    result depends only on the multiset of neighbour rows. Node relabelling and
    batch composition therefore leave every output row bit-identical.
    """
    n = batch.num_nodes
    if n != x.shape[0]:
        raise ValueError(f"batch has {n} nodes but x has {x.shape[0]} rows")
    table = batch.neighbor_table()
    padded = np.concatenate([x.data, np.zeros((1, x.shape[1]), x.dtype)])
    vals = np.sort(padded[table].transpose(0, 2, 1), axis=2)
    # sequential accumulation: padding zeros are exact no-ops wherever they land
    out = np.zeros_like(x.data)
    for j in range(vals.shape[2]):
        out += vals[:, :, j]
    a = batch.adjacency(x.dtype)
    return _record(out, (x,), lambda g: (np.asarray(a.T @ g),))


def softmax_cross_entropy(scores: Tensor, labels) -> Tensor:
    """Per-row ``-s[y] + logsumexp(s)`` as an ``(m, 1)`` tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    m, c = scores.shape
    if labels.shape != (m,):
        raise ValueError(f"need {m} labels, got shape {labels.shape}")
    if m and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label outside 0..{c - 1}")
    s = scores.data
    shifted = s - s.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(m)
    loss = lse - shifted[rows, labels][:, None]

    def grad(g):
        p = np.exp(shifted - lse)
        p[rows, labels] -= 1
        return (p * g,)

    return _record(loss, (scores,), grad)


def mse_rowwise(pred: Tensor, target) -> Tensor:
    """Per-row mean of squared differences as an ``(m, 1)`` tensor."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} target {t.shape}")
    diff = pred.data - t
    c = pred.shape[1]
    return _record((diff * diff).sum(axis=1, keepdims=True) / c, (pred,),
                   lambda g: (g * (2.0 / c) * diff,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(x.data.sum().reshape(1, 1), (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape = x.shape
    n = shape[0] * shape[1]
    return _record(x.data.mean().reshape(1, 1), (x,),
                   lambda g: (np.broadcast_to(g / n, shape).copy(),))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(x.data * x.dtype.type(c), (x,), lambda g: (g * c,))


# --------------------------------------------------------------------------
# optimisation and initialisation

def glorot_uniform(rng: np.random.Generator, d_in: int, d_out: int, dtype=np.float64):
    limit = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_in, d_out)).astype(dtype)


def adam_step(params: Iterable[Parameter], lr: float, betas=(0.9, 0.999), eps=1e-8) -> None:
    """One bias-corrected Adam update; clears the gradients afterwards."""
    b1, b2 = betas
    for p in params:
        g = p.grad
        p.step += 1
        p.exp_avg *= b1
        p.exp_avg += (1 - b1) * g
        p.exp_avg_sq *= b2
        p.exp_avg_sq += (1 - b2) * g * g
        m_hat = p.exp_avg / (1 - b1 ** p.step)
        v_hat = p.exp_avg_sq / (1 - b2 ** p.step)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
        g[...] = 0


# --------------------------------------------------------------------------
# checkpoints
#
# A checkpoint is an uncompressed numpy ``.npz`` archive. Every entry except
# ``__meta__`` is a float64 array keyed by its stable name (parameter and
# batch-norm buffer names, e.g. ``layer0.combine.lin1.weight``); ``__meta__``
# is a 0-d unicode array holding a JSON object with the model configuration.

class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    payload = {name: np.asarray(a, dtype=np.float64) for name, a in arrays.items()}
    if "__meta__" in payload:
        raise ValueError("'__meta__' is reserved")
    payload["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files if k != "__meta__"}
            meta = json.loads(str(z["__meta__"]))
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    return arrays, meta
