"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable primitive writes one record onto the active :class:`Tape`.
``Tape.backward`` walks the records in exact reverse order and accumulates
gradients additively, so a tensor consumed twice receives the sum of both
contributions. Tapes are thread-local: independent tapes may run in parallel
threads, but a single tape must stay on one thread.

Broadcasting is deliberately narrow: the second operand of :func:`add` may be a
suffix of the first operand's shape (bias-add, positional tables), and
:func:`scale` multiplies by a Python scalar. Nothing else broadcasts.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "reshape",
    "transpose",
    "silu",
    "layer_norm",
    "softmax",
    "log_softmax",
    "mean_axis",
    "sum_all",
    "gather_rows",
    "insert_mask_tokens",
    "mse_masked",
    "nll_loss",
]


class Tensor:
    """Dense array with an optional gradient buffer.

    ``data`` is a C-contiguous numpy array, so the flat row-major buffer is
    ``data.ravel()``. ``grad`` is populated by :meth:`Tape.backward` on tensors
    that have ``requires_grad`` set and were reached from the loss.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class _Record:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; operations executed inside the ``with`` block are
    recorded when at least one input requires a gradient::

        with Tape() as tape:
            loss = sum_all(x)
        tape.backward(loss)
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _local.stack
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: tapes must be exited in LIFO order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        if self._consumed:
            raise RuntimeError("cannot record onto a tape after backward(); call reset() first")
        self.records.append(_Record(out, inputs, backward_fn))

    def reset(self) -> None:
        self.records = []
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise RuntimeError("backward() already ran on this tape; call reset() before reuse")
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {loss.shape}")
        produced = {id(r.out) for r in self.records}
        if id(loss) not in produced:
            raise ValueError("loss was not produced on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            input_grads = rec.backward_fn(g)
            for inp, ig in zip(rec.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads[key].astype(leaf.data.dtype, copy=False)
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``."""
    tape.backward(loss)


def _track(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.record(out, tuple(inputs), backward_fn)
        else:
            out.requires_grad = False
    return out


def _sum_to_suffix(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    nb = len(b.shape)
    if nb > len(a.shape) or a.shape[len(a.shape) - nb:] != b.shape:
        raise ValueError(f"{op}: shape {b.shape} is not a suffix of {a.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """``a + b`` where ``b.shape`` equals ``a.shape`` or a suffix of it."""
    _check_suffix(a, b, "add")
    return _track(a.data + b.data, (a, b), lambda g: (g, _sum_to_suffix(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _track(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shaped tensors."""
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _track(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _track(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a 2-D weight shared across ``a``'s leading axes, or has the
    same leading axes as ``a``.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dimensions differ ({a.shape} @ {b.shape})")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = np.matmul(ad.reshape(-1, ad.shape[-1]).T, g.reshape(-1, g.shape[-1]))
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _track(np.matmul(ad, bd), (a, b), grad_fn)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _track(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _track(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: Tensor) -> Tensor:
    """Elementwise ``x * sigmoid(x)``."""
    xd = x.data
    s = _sigmoid(xd)
    return _track(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply ``gamma * xhat + beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: affine params must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gamma.data

    def grad_fn(g):
        ggamma = _sum_to_suffix(g * xhat, (d,)) if gamma.requires_grad else None
        gbeta = _sum_to_suffix(g, (d,)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _track(xhat * gd + beta.data, (x, gamma, beta), grad_fn)


def softmax(x: Tensor) -> Tensor:
    """Last-axis softmax with max subtraction."""
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _track(p, (x,), grad_fn)


def log_softmax(x: Tensor) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _track(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def mean_axis(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    shape = x.shape

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / x.data.dtype.type(n),)

    return _track(x.data.mean(axis=axis), (x,), grad_fn)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _track(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g, dtype=x.data.dtype),))


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis 1: ``x[b, idx[b, j], :]`` for ``x`` of shape (B, P, D)."""
    idx = np.asarray(idx, dtype=np.intp)
    if x.data.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ValueError(f"gather_rows: expected (B,P,D) and (B,V) index, got {x.shape} and {idx.shape}")
    out = np.take_along_axis(x.data, idx[:, :, None], axis=1)
    shape = x.shape

    def grad_fn(g):
        gx = np.zeros(shape, dtype=g.dtype)
        rows = np.arange(shape[0])[:, None]
        # indices are distinct per row, so plain assignment is an exact scatter
        gx[rows, idx] = g
        return (gx,)

    return _track(out, (x,), grad_fn)


def insert_mask_tokens(visible: Tensor, token: Tensor, restore: np.ndarray) -> Tensor:
    """Append one copy of ``token`` per masked slot, then reorder by ``restore``.

    ``visible`` has shape (B, V, D); ``restore`` has shape (B, P) and maps each
    original patch position to its slot in the visible-then-masked sequence.
    """
    restore = np.asarray(restore, dtype=np.intp)
    b, v, d = visible.shape
    if token.shape != (d,) or restore.ndim != 2 or restore.shape[0] != b:
        raise ValueError(f"insert_mask_tokens: bad shapes {visible.shape}, {token.shape}, {restore.shape}")
    p = restore.shape[1]
    filler = np.broadcast_to(token.data, (b, p - v, d))
    seq = np.concatenate([visible.data, filler], axis=1)
    out = np.take_along_axis(seq, restore[:, :, None], axis=1)

    def grad_fn(g):
        gseq = np.zeros((b, p, d), dtype=g.dtype)
        gseq[np.arange(b)[:, None], restore] = g
        return gseq[:, :v], gseq[:, v:].sum(axis=(0, 1))

    return _track(out, (visible, token), grad_fn)


def mse_masked(pred: Tensor, target: Tensor | np.ndarray, masked_idx) -> Tensor:
    """Mean squared error over masked rows only.

    ``pred`` is (P, d) with a 1-D index set, or (B, P, d) with a (B, M) index
    array; the mean is taken over every masked element across the batch.
    Unmasked rows receive exactly zero gradient.
    """
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    if tgt.shape != pred.shape:
        raise ValueError(f"mse_masked: pred {pred.shape} vs target {tgt.shape}")
    idx = np.asarray(masked_idx, dtype=np.intp)
    batched = pred.data.ndim == 3
    if idx.size == 0:
        raise ValueError("mse_masked: masked index set is empty")
    p = pred.shape[-2]
    if idx.min() < 0 or idx.max() >= p:
        raise ValueError(f"mse_masked: masked index out of range for {p} rows")
    if batched:
        if idx.ndim != 2 or idx.shape[0] != pred.shape[0]:
            raise ValueError("mse_masked: batched pred needs a (B, M) index array")
        rows = np.arange(pred.shape[0])[:, None]
        diff = pred.data[rows, idx] - tgt[rows, idx]
    else:
        idx = idx.reshape(-1)
        diff = pred.data[idx] - tgt[idx]
    n = diff.size
    value = np.asarray((diff * diff).sum() / n, dtype=pred.data.dtype)
    shape = pred.shape

    def grad_fn(g):
        gp = np.zeros(shape, dtype=diff.dtype)
        if batched:
            gp[rows, idx] = (2.0 / n) * g * diff
        else:
            np.add.at(gp, idx, (2.0 / n) * g * diff)
        return (gp,)

    return _track(value, (pred,), grad_fn)


def nll_loss(log_probs: Tensor, labels: Iterable[int]) -> Tensor:
    """Batch mean of ``-log_probs[i, labels[i]]``."""
    lab = np.asarray(list(labels) if not isinstance(labels, np.ndarray) else labels, dtype=np.intp)
    bsz, c = log_probs.shape
    if lab.shape != (bsz,):
        raise ValueError(f"nll_loss: expected {bsz} labels, got shape {lab.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise ValueError(f"nll_loss: label out of range [0, {c})")
    rows = np.arange(bsz)
    value = np.asarray(-log_probs.data[rows, lab].mean(), dtype=log_probs.data.dtype)

    def grad_fn(g):
        gl = np.zeros(log_probs.shape, dtype=log_probs.data.dtype)
        gl[rows, lab] = -g / bsz
        return (gl,)

    return _track(value, (log_probs,), grad_fn)
