"""Float64 tensors with taped reverse-mode differentiation.

Tape lifecycle is single-use: open a ``Tape`` as a context manager around the
forward pass, call ``tape.backward(loss)`` exactly once, then build a fresh
tape for the next step.  Ops executed while no tape is open run as plain
numpy forward passes (inference mode) and record nothing.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "GradError",
    "ShapeError",
    "NonFiniteError",
    "active_tape",
]


class GradError(RuntimeError):
    """Misuse of the tape/backward machinery."""


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf; the step must abort, not propagate."""


class Tensor:
    """Dense float64 array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        # asarray with order="C" keeps 0-d shapes (ascontiguousarray would
        # promote scalars to 1-d).
        arr = np.asarray(data, dtype=np.float64, order="C")
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor constructed from non-finite values")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.shape}"
            )
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Arithmetic dunders are attached by symseg.grad.ops at import time.


class _Node:
    """One executed op: output, inputs, and the local backward rule."""

    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(
        self,
        out: Tensor,
        inputs: Sequence[Tensor],
        backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]],
    ):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of executed ops, replayed in reverse for gradients.

    Execution order is a topological order of the graph, so the reversed
    record visits every node exactly once after all of its consumers;
    gradients therefore accumulate additively across fan-out before being
    propagated further back.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, node: _Node) -> None:
        if self._spent:
            raise GradError("tape already consumed; re-run the forward pass")
        self._nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Populate .grad of every requires_grad tensor reachable from loss."""
        if self._spent:
            raise GradError("backward called twice; re-run the forward pass on a new tape")
        if loss.size != 1:
            raise GradError(f"backward requires a scalar loss, got shape {loss.shape}")
        self._spent = True
        loss.accumulate_grad(np.ones_like(loss.data))
        for node in reversed(self._nodes):
            out_grad = node.out.grad
            if out_grad is None:
                continue
            grads = node.backward_fn(out_grad)
            for t, g in zip(node.inputs, grads):
                if g is not None and t.requires_grad:
                    t.accumulate_grad(g)
        self._nodes.clear()
