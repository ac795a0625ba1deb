"""Tensor container and the reverse-mode gradient tape.

Operations in :mod:`uts.numerics.ops` record themselves on the innermost
active :class:`GradTape` whenever one of their inputs is tracked (a watched
parameter or the output of an earlier recorded node).  ``backward`` replays
the recorded nodes in reverse order.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_local = threading.local()


class Tensor:
    """Dense float64 array with a name, used for feature maps and parameters."""

    __slots__ = ("data", "name", "__weakref__")

    def __init__(self, data, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise ValueError("zero-size tensors are not supported")
        self.data = arr
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradTape:
    """Records executed operations so gradients can be replayed backward.

    Use as a context manager::

        with GradTape(params) as tape:
            loss = model_loss(...)
        grads = backward(tape, loss)
    """

    parameters: list[Tensor] = field(default_factory=list)
    nodes: list[Node] = field(default_factory=list)

    def __post_init__(self):
        self.parameters = list(self.parameters)
        self._tracked: set[int] = {id(p) for p in self.parameters}

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if id(t) not in self._tracked:
                self.parameters.append(t)
                self._tracked.add(id(t))

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def record(self, op: str, inputs, output: Tensor, backward_fn) -> None:
        self.nodes.append(Node(op, tuple(inputs), output, backward_fn))
        self._tracked.add(id(output))

    def __enter__(self) -> "GradTape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)


def _tape_stack() -> list[GradTape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record(op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> Tensor:
    """Attach ``output`` to the active tape if any input is tracked."""
    tape = active_tape()
    if tape is not None and any(tape.is_tracked(t) for t in inputs):
        tape.record(op, inputs, output, backward_fn)
    return output


def backward(tape: GradTape, loss: Tensor) -> list[np.ndarray]:
    """Return one gradient array per ``tape.parameters`` entry.

    Parameters the loss does not depend on receive zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        in_grads = node.backward(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not tape.is_tracked(t):
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    out = []
    for p in tape.parameters:
        g = grads.get(id(p))
        out.append(np.zeros_like(p.data) if g is None else np.asarray(g).reshape(p.shape))
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], p, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``p``, coordinate by coordinate."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(base))
        flat[i] = orig - h
        f_minus = float(f(base))
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(base.shape)
