"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape` (entered with a
``with`` block) whenever at least one input requires a gradient. Outside a
tape nothing is recorded, which is how inference runs.

    with Tape() as tape:
        loss = cross_entropy_logits(matmul(x, w), targets)
    backward(tape, loss)   # w.grad is now populated

Broadcasting is limited to bias addition and the row-wise operations.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels

# Additive stand-in for -inf on masked attention keys and span logits.
MASK_VALUE = -1e30


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_state = threading.local()


def _stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()
        self.consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, op, inputs, output, backward_fn) -> None:
        self.nodes.append(Node(op, tuple(inputs), output, backward_fn))
        self._produced.add(id(output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def __len__(self) -> int:
        return len(self.nodes)


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{op}: non-finite values in output")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward_fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(.) through ``tape`` into every reachable leaf's ``grad``.

    Leaf gradients accumulate, so callers zero them between optimizer steps.
    """
    if loss.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ContractError("loss was not produced on this tape")
    if tape.consumed:
        raise ContractError("tape has already been replayed")
    tape.consumed = True
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for t, tg in zip(node.inputs, node.backward(g)):
            if tg is None or not t.requires_grad:
                continue
            if tape.produced(t):
                key = id(t)
                if key in pending:
                    pending[key] = pending[key] + tg
                else:
                    pending[key] = tg
            elif t.grad is None:
                t.grad = np.array(tg, dtype=np.float64, copy=True)
            else:
                t.grad += tg


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading (batch) dimensions must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def grad(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result("matmul", ad @ bd, (a, b), grad)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x`` (weight is in×out)."""
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.shape} does not match {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, weight.shape[0])
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    wd = weight.data

    def grad(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(lead + (wd.shape[0],)) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("linear", out.reshape(lead + (wd.shape[1],)), inputs, grad)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    if bias.data.ndim != 1 or x.shape[-1:] != bias.shape:
        raise DimensionError(f"add_bias: bias {bias.shape} does not match trailing axis of {x.shape}")
    return _result("add_bias", x.data + bias.data, (x, bias),
                   lambda g: (g, g.reshape(-1, bias.shape[0]).sum(axis=0)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    return _result("scale", x.data * c, (x,), lambda g: (g * c,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, g.item()),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from exc
    return _result("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _result("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inverse),))


def take_last(x: Tensor, index: int) -> Tensor:
    """``x[..., index]``."""
    shape = x.shape

    def grad(g):
        full = np.zeros(shape)
        full[..., index] = g
        return (full,)

    return _result("take_last", np.ascontiguousarray(x.data[..., index]), (x,), grad)


def take_first(x: Tensor, index: int) -> Tensor:
    """``x[index]`` along the leading axis."""
    shape = x.shape

    def grad(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _result("take_first", np.ascontiguousarray(x.data[index]), (x,), grad)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {table.shape[0]})")
    rows, width = table.shape

    def grad(g):
        full = np.zeros((rows, width))
        np.add.at(full, ids.reshape(-1), g.reshape(-1, width))
        return (full,)

    return _result("embedding", table.data[ids], (table,), grad)


def gather_rows(x: Tensor, index) -> Tensor:
    """Select rows of a 2-D tensor."""
    index = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2:
        raise DimensionError(f"gather_rows: expected a 2-D tensor, got {x.shape}")
    shape = x.shape

    def grad(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result("gather_rows", x.data[index], (x,), grad)


def masked_fill(x: Tensor, keep, value: float = MASK_VALUE) -> Tensor:
    """Replace entries where ``keep`` is false by a constant (no gradient flows there)."""
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
    return _result("masked_fill", np.where(keep, x.data, value), (x,), lambda g: (np.where(keep, g, 0.0),))


def softmax_rows(x: Tensor, key_mask=None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``key_mask`` (broadcastable boolean, true = attend) pushes masked entries
    to :data:`MASK_VALUE` before normalizing.
    """
    if x.data.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_rows: need a last axis of size >= 1, got {x.shape}")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax_rows: non-finite input")
    shape = x.shape
    z = x.data if key_mask is None else np.where(key_mask, x.data, MASK_VALUE)
    y = kernels.softmax_forward(np.ascontiguousarray(z.reshape(-1, shape[-1])))

    def grad(g):
        return (kernels.softmax_backward(y, np.ascontiguousarray(g.reshape(y.shape))).reshape(shape),)

    return _result("softmax_rows", y.reshape(shape), (x,), grad)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs input {x.shape}")
    shape = x.shape
    y, xhat, rstd = kernels.layer_norm_forward(np.ascontiguousarray(x.data.reshape(-1, h)), gain.data, bias.data, eps)
    gd = gain.data

    def grad(g):
        dx, dg, db = kernels.layer_norm_backward(np.ascontiguousarray(g.reshape(-1, h)), xhat, rstd, gd)
        return dx.reshape(shape), dg, db

    return _result("layer_norm", y.reshape(shape), (x, gain, bias), grad)


def gelu(x: Tensor, approximate: bool = False) -> Tensor:
    """Gaussian error linear unit.

    The default is the exact form ``x * Phi(x)``; ``approximate=True`` selects
    the tanh approximation. The two differ by up to ~5e-4 in value.
    """
    xd = x.data

    def grad(g):
        return (kernels.gelu_backward(xd, g, approximate),)

    return _result("gelu", kernels.gelu_forward(xd, approximate), (x,), grad)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity (and no tape node) when ``p == 0``."""
    if p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ContractError("dropout with p > 0 needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy_logits: expected (batch, classes), got {logits.shape}")
    b, n = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != b:
        raise DimensionError(f"cross_entropy_logits: {targets.shape[0]} targets for {b} rows")
    if b == 0:
        raise DimensionError("cross_entropy_logits: empty batch")
    if targets.min() < 0 or targets.max() >= n:
        raise IndexError(f"cross_entropy_logits: target out of range [0, {n})")
    if not np.isfinite(logits.data).all():
        raise NumericError("cross_entropy_logits: non-finite logits")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    nll = lse - z[rows, targets]
    loss = max(float(nll.mean()), 0.0)

    def grad(g):
        probs = np.exp(z - lse[:, None])
        probs[rows, targets] -= 1.0
        return (probs * (g.item() / b),)

    return _result("cross_entropy", np.array(loss), (logits,), grad)
