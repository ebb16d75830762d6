"""Dense 4-D tensors with tape-based reverse-mode differentiation.

Every value flowing through the detector is a ``Tensor`` of shape
``(n, c, h, w)`` holding float64 data. Differentiable operations record
themselves on the active :class:`Tape`; :func:`backward` replays the tape in
reverse and deposits gradients on tensors created with ``requires_grad=True``.

Usage::

    with Tape() as tape:
        loss = tsum(mul(w, w))
    tape.backward(loss)
"""

from __future__ import annotations

import os
import struct
import threading
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

MAGIC = b"MSPT"

_DEBUG = os.environ.get("MSP_DEBUG", "") not in ("", "0")
_TAPES = threading.local()  # per-thread stack of active tapes


def _tape_stack() -> list["Tape"]:
    if not hasattr(_TAPES, "stack"):
        _TAPES.stack = []
    return _TAPES.stack


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf while debug checks are on."""


def set_debug(flag: bool) -> None:
    """Toggle the per-op NaN/Inf check."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


def _check_finite(arr: np.ndarray, what: str) -> None:
    if _DEBUG and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    """A float64 array of rank 4 with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tracked", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"Tensor must be 4-D (n, c, h, w), got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        # True when the value depends on at least one trainable tensor.
        self._tracked = self.requires_grad
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)


def zeros(*shape: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(*shape: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def scalar(value: float) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), float(value)))


class _Record:
    __slots__ = ("inputs", "output", "backward_fn", "name")

    def __init__(self, inputs, output, backward_fn, name):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.name = name


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the block that touch a
    trainable tensor are recorded. A tape can run backward once; call
    :meth:`reset` to reuse it.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._used = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        self.records.clear()
        self._used = False

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward_fn, name: str) -> None:
        self.records.append(_Record(tuple(inputs), output, backward_fn, name))

    def backward(self, loss: Tensor) -> None:
        if loss.shape != (1, 1, 1, 1):
            raise ValueError(f"backward needs a scalar (1,1,1,1) loss, got {loss.shape}")
        if self._used:
            raise RuntimeError("tape already consumed by backward(); call reset() first")
        if not self.records:
            raise RuntimeError("backward on an empty tape")
        self._used = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            gout = grads.pop(id(rec.output), None)
            if gout is None:
                continue
            in_grads = rec.backward_fn(gout)
            for t, g in zip(rec.inputs, in_grads):
                if g is None or not t._tracked:
                    continue
                _check_finite(g, f"backward of {rec.name}")
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        # Leaves left in the map are trainable tensors (or untouched inputs).
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad and id(t) in grads:
                    g = grads.pop(id(t))
                    t.grad = g.copy() if t.grad is None else t.grad + g
        if loss.requires_grad and id(loss) in grads:
            loss.grad = grads.pop(id(loss))


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Run reverse mode on ``tape`` (default: the tape that produced ``loss``)."""
    tape = tape or loss._tape or active_tape()
    if tape is None:
        raise RuntimeError("no tape: run the forward pass inside `with Tape():`")
    tape.backward(loss)


def make_op(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Iterable[np.ndarray | None]],
    name: str,
) -> Tensor:
    """Wrap ``out_data`` in a Tensor and record it if any input is tracked."""
    _check_finite(out_data, name)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t._tracked for t in inputs):
        out._tracked = True
        out._tape = tape
        tape.record(inputs, out, backward_fn, name)
    return out


# ---------------------------------------------------------------------------
# elementary ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return make_op(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements as a (1,1,1,1) tensor."""
    shape = a.shape

    def bwd(g):
        return (np.full(shape, g.reshape(-1)[0]),)

    return make_op(np.array(a.data.sum()).reshape(1, 1, 1, 1), (a,), bwd, "sum")


def add_scalars(*terms: Tensor, weights: Sequence[float] | None = None) -> Tensor:
    """Weighted sum of scalar tensors."""
    weights = [1.0] * len(terms) if weights is None else [float(w) for w in weights]
    for t in terms:
        if t.shape != (1, 1, 1, 1):
            raise ValueError(f"add_scalars expects scalars, got {t.shape}")
    total = sum(w * t.data for w, t in zip(weights, terms))

    def bwd(g):
        return tuple(g * w for w in weights)

    return make_op(np.asarray(total).reshape(1, 1, 1, 1), terms, bwd, "add_scalars")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN visible instead of clamping it to zero
    return make_op(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# parameters and optimisation


class ModelParams(OrderedDict):
    """Name -> trainable Tensor. Names are unique by construction."""

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        tensor._tracked = True
        tensor.name = name
        self[name] = tensor
        return tensor

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.items():
            arr = np.asarray(arrays[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


class SGD:
    """Momentum SGD: ``v <- m*v - lr*(g + wd*p); p <- p + v``."""

    def __init__(self, params: ModelParams, momentum: float = 0.9, weight_decay: float = 0.0):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = params
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient")
        for name, p in self.params.items():
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v -= lr * g
            p.data = p.data + v
            p.grad = None


def sgd_step(params: ModelParams, lr: float, momentum: float = 0.9, state: SGD | None = None) -> SGD:
    """One momentum-SGD update; pass the returned state back in for the next step."""
    if state is None:
        state = SGD(params, momentum=momentum)
    state.step(lr)
    return state


# ---------------------------------------------------------------------------
# binary container


def write_mspt(fh, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_mspt(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(dims)) if rank else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError("truncated MSPT payload")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


def save_tensor(path, t: Tensor | np.ndarray) -> None:
    arr = t.data if isinstance(t, Tensor) else t
    with open(path, "wb") as fh:
        write_mspt(fh, arr)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        arr = read_mspt(fh)
    if arr.ndim != 4:
        arr = arr.reshape((1,) * (4 - arr.ndim) + arr.shape)
    return Tensor(arr)
