"""Tensor value type and the gradient tape.

A ``Tensor`` wraps a numpy array. Primitive ops (see ``crosspath.ops``) record
themselves on the innermost active ``Tape``; ``Tape.backward`` replays the
record in reverse and accumulates gradients by summation into ``.grad``.
Outside a tape nothing is recorded, which is how inference runs.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when a primitive op produces NaN or Inf."""

    def __init__(self, op: str, scope: str):
        self.op = op
        self.scope = scope
        where = f" in {scope}" if scope else ""
        super().__init__(f"non-finite values produced by {op}{where}")


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar for the few elementwise ops the engine exposes
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)


class _Entry:
    __slots__ = ("out", "inputs", "backward", "op")

    def __init__(self, out, inputs, backward, op):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.op = op


class Tape:
    """Ordered record of executed primitive ops.

    Use as a context manager around the forward pass, then call
    ``backward(loss)``. ``clear()`` (or a fresh tape) between minibatches.
    """

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable, op: str) -> None:
        self.entries.append(_Entry(out, tuple(inputs), backward, op))

    def clear(self) -> None:
        self.entries.clear()

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.size != 1:
                raise ShapeError(f"backward needs a scalar or an explicit grad, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        # intermediates get fresh grads; leaves (parameters, inputs) accumulate
        produced = {id(e.out) for e in self.entries}
        for e in self.entries:
            for t in e.inputs:
                if id(t) in produced:
                    t.grad = None
            e.out.grad = None
        _accumulate(loss, grad)
        for e in reversed(self.entries):
            g = e.out.grad
            if g is None:
                continue
            in_grads = e.backward(g)
            for t, gi in zip(e.inputs, in_grads):
                if gi is not None and t.requires_grad:
                    _accumulate(t, gi)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


# --- name scopes: used to say *where* a numerical failure happened ---------

def _scope_stack() -> list[str]:
    stack = getattr(_state, "scopes", None)
    if stack is None:
        stack = _state.scopes = []
    return stack


@contextlib.contextmanager
def name_scope(name: str) -> Iterator[None]:
    stack = _scope_stack()
    stack.append(name)
    try:
        yield
    finally:
        stack.pop()


def current_scope() -> str:
    return "/".join(_scope_stack())


_check_finite = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf checking after every op. Returns the previous setting."""
    global _check_finite
    prev = _check_finite
    _check_finite = enabled
    return prev


def finite_checks_enabled() -> bool:
    return _check_finite


def emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op result, check it, and record it on the active tape."""
    if _check_finite and data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NonFiniteError(op, current_scope())
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = active_tape()
        if tape is not None:
            tape.record(out, inputs, backward, op)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
