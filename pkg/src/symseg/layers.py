"""Thin layer wrappers holding parameters for the grad ops.

Parameters are Tensors with requires_grad=True; running statistics are
Tensors without.  ``named_parameters``/``named_buffers`` walk instance
attributes in definition order, which fixes the optimizer and checkpoint
ordering deterministically.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .grad import Tensor
from .grad import ops


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    """Uniform in [-a, a] with a = sqrt(1/fan_in)."""
    a = math.sqrt(1.0 / max(1, fan_in))
    return Tensor(rng.uniform(-a, a, size=shape), requires_grad=True)


class Layer:
    """Base class providing recursive parameter/buffer discovery."""

    def _walk(self, want_grad: bool, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad == want_grad:
                    yield prefix + name, value
            elif isinstance(value, Layer):
                yield from value._walk(want_grad, f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        yield from item._walk(want_grad, f"{prefix}{name}{i}.")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self._walk(True, prefix)

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self._walk(False, prefix)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()


class Conv2d(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 padding: int = 0, bias: bool = True):
        fan_in = in_ch * kernel * kernel
        self.weight = uniform_init(rng, (out_ch, in_ch, kernel, kernel), fan_in)
        self.bias = uniform_init(rng, (out_ch,), fan_in) if bias else None
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True):
        self.weight = uniform_init(rng, (in_features, out_features), in_features)
        self.bias = uniform_init(rng, (out_features,), in_features) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ops.matmul(x, self.weight)
        if self.bias is not None:
            out = ops.add(out, self.bias)
        return out


class BatchNorm2d(Layer):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta,
                              self.running_mean, self.running_var,
                              training=training, momentum=self.momentum, eps=self.eps)


class LSTMCell(Layer):
    """LSTM cell with optional output projection.

    When ``cell_size != hidden_size`` the raw cell output o*tanh(c) of width
    cell_size is projected to hidden_size; with equal sizes the cell is the
    canonical one and no projection parameter exists.
    """

    def __init__(self, input_size: int, hidden_size: int, cell_size: int,
                 rng: np.random.Generator):
        self.wx = uniform_init(rng, (input_size, 4 * cell_size), input_size)
        self.wh = uniform_init(rng, (hidden_size, 4 * cell_size), hidden_size)
        self.b = Tensor(np.zeros(4 * cell_size), requires_grad=True)
        self.proj = (uniform_init(rng, (cell_size, hidden_size), cell_size)
                     if cell_size != hidden_size else None)
        self.hidden_size = hidden_size
        self.cell_size = cell_size

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        h_raw, c_new = ops.lstm_step(x, h, c, self.wx, self.wh, self.b)
        h_new = ops.matmul(h_raw, self.proj) if self.proj is not None else h_raw
        return h_new, c_new

    def zero_state(self, batch: int) -> tuple[Tensor, Tensor]:
        return (Tensor(np.zeros((batch, self.hidden_size))),
                Tensor(np.zeros((batch, self.cell_size))))


class StackedLSTM(Layer):
    """Layered LSTM; layer l consumes layer l-1's hidden output."""

    def __init__(self, input_size: int, hidden_size: int, cell_size: int,
                 num_layers: int, rng: np.random.Generator):
        self.cells = [
            LSTMCell(input_size if i == 0 else hidden_size, hidden_size, cell_size, rng)
            for i in range(num_layers)
        ]

    def zero_state(self, batch: int) -> list[tuple[Tensor, Tensor]]:
        return [cell.zero_state(batch) for cell in self.cells]

    def __call__(self, x: Tensor, state: list[tuple[Tensor, Tensor]]
                 ) -> tuple[Tensor, list[tuple[Tensor, Tensor]]]:
        new_state = []
        inp = x
        for cell, (h, c) in zip(self.cells, state):
            h_new, c_new = cell(inp, h, c)
            new_state.append((h_new, c_new))
            inp = h_new
        return inp, new_state
