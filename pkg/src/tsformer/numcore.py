"""Minimal reverse-mode differentiation over numpy arrays.

Only the operations the Tsformer needs are provided.  Values are float64
arrays; operations accept optional leading batch dimensions so a whole
minibatch of windows can go through one call.

Gradients are recorded on an explicit :class:`Tape`.  Operations executed
while no tape is active are not recorded, which makes inference cheap::

    with Tape() as tape:
        loss = mse_loss(linear(x, w, b), y)
    backward(loss, tape)
    w.grad
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DegenerateMaskError",
    "tensor",
    "matmul",
    "add",
    "scale",
    "transpose",
    "reshape",
    "take_rows",
    "masked_softmax",
    "elu",
    "linear",
    "layer_norm",
    "dropout",
    "mse_loss",
    "sum_all",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateMaskError(ValueError):
    """A mask row leaves no position to attend."""


class Tensor:
    """Real n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    A tape becomes active inside a ``with`` block.  Tapes are thread-local,
    so independent threads may each run their own.
    """

    _local = threading.local()

    def __init__(self):
        self.records: list[_Record] = []

    @classmethod
    def current(cls) -> "Tape | None":
        stack = getattr(cls._local, "stack", None)
        return stack[-1] if stack else None

    def __enter__(self) -> "Tape":
        if not hasattr(Tape._local, "stack"):
            Tape._local.stack = []
        Tape._local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)


def _record(inputs: Sequence[Tensor], output: Tensor, grad_fn: Callable) -> Tensor:
    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.records.append(_Record(tuple(inputs), output, grad_fn))
    return output


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record((a, b), out, grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}") from None
    out = Tensor(data)

    def grad_fn(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _record((a, b), out, grad_fn)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant."""
    x = _as_tensor(x)
    out = Tensor(x.data * c)
    return _record((x,), out, lambda g: (g * c,))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(x.data, axes))
    return _record((x,), out, lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from None
    out = Tensor(data)
    return _record((x,), out, lambda g: (g.reshape(x.shape),))


def take_rows(x: Tensor, start: int, stop: int | None = None) -> Tensor:
    """Slice ``x[..., start:stop, :]`` (the time axis)."""
    x = _as_tensor(x)
    out = Tensor(x.data[..., start:stop, :])

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[..., start:stop, :] = g
        return (full,)

    return _record((x,), out, grad_fn)


def masked_softmax(scores: Tensor, mask) -> Tensor:
    """Row-wise softmax of ``scores + mask`` over the last axis.

    ``mask`` holds 0 (attend) or -inf (ignore) and broadcasts against the
    scores.  Masked entries of the result are exactly zero.
    """
    scores = _as_tensor(scores)
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    try:
        allowed = np.broadcast_to(mask == 0.0, scores.shape)
    except ValueError:
        raise ShapeError(f"mask shape {mask.shape} does not fit scores {scores.shape}") from None
    if not np.all((mask == 0.0) | np.isneginf(mask)):
        raise ValueError("mask entries must be 0 or -inf")
    if not np.all(allowed.any(axis=-1)):
        raise DegenerateMaskError("mask has a row with every position set to -inf")

    shifted = np.where(allowed, scores.data, -np.inf)
    row_max = shifted.max(axis=-1, keepdims=True)
    exps = np.where(allowed, np.exp(np.where(allowed, scores.data - row_max, 0.0)), 0.0)
    probs = exps / exps.sum(axis=-1, keepdims=True)
    out = Tensor(probs)

    def grad_fn(g):
        inner = (g * probs).sum(axis=-1, keepdims=True)
        return (probs * (g - inner),)

    return _record((scores,), out, grad_fn)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    """Exponential linear unit: ``x`` if positive else ``alpha*(exp(x)-1)``."""
    if alpha <= 0:
        raise ValueError("elu alpha must be positive")
    x = _as_tensor(x)
    neg = x.data <= 0
    expx = np.exp(np.minimum(x.data, 0.0))
    out = Tensor(np.where(neg, alpha * (expx - 1.0), x.data))
    return _record((x,), out, lambda g: (g * np.where(neg, alpha * expx, 1.0),))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with the bias broadcast across rows."""
    w = _as_tensor(w)
    b = _as_tensor(b)
    if b.data.ndim != 1 or w.data.ndim != 2 or b.shape[0] != w.shape[1]:
        raise ShapeError(f"linear weight {w.shape} and bias {b.shape} disagree")
    return add(matmul(x, w), b)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each row over the last axis, then scale and shift."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm params {gamma.shape}/{beta.shape} do not match width {d}")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = Tensor(xhat * gamma.data + beta.data)

    def grad_fn(g):
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = inv_std * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _record((x, gamma, beta), out, grad_fn)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity when not training or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    out = Tensor(x.data * keep)
    return _record((x,), out, lambda g: (g * keep,))


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences, as a scalar tensor."""
    pred = _as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    out = Tensor(np.array(np.mean(diff**2)))
    n = diff.size
    return _record((pred,), out, lambda g: (g * 2.0 * diff / n,))


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.array(x.data.sum()))
    return _record((x,), out, lambda g: (np.broadcast_to(g, x.shape).copy(),))


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

    Gradients add up across fan-out.  Leaf buffers are accumulated into, so
    call :meth:`Tensor.zero_grad` between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = set()
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        produced.add(id(rec.output))
        g = pending.pop(id(rec.output), None)
        if g is None:
            continue
        rec.output.grad = g
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            pending[key] = pending[key] + gi if key in pending else gi
            leaves[key] = inp
    for key, g in pending.items():
        if key in produced or key not in leaves:
            continue
        leaf = leaves[key]
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-6,
) -> float:
    """Largest relative disagreement between backward() and central differences.

    ``fn(*inputs)`` must return a scalar tensor.  The relative error of one
    entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ValueError("epsilon must lie in [1e-7, 1e-4]")
    inputs = list(inputs)
    flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    backward(out, tape)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(fn(*inputs).data)
            flat[i] = orig - epsilon
            f_minus = float(fn(*inputs).data)
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(a_flat[i] - num) / max(abs(a_flat[i]), abs(num), 1e-8)
            worst = max(worst, err)
    for t, flag in zip(inputs, flags):
        t.requires_grad = flag
        t.grad = None
    return worst
