"""Discrete sender/receiver channel between backbone features and the mask.

The sender summarizes the feature map, walks a stacked LSTM for a fixed
number of steps, and emits one symbol per step.  During training each
categorical choice is relaxed with Gumbel-Softmax noise so the whole path
stays differentiable; at inference the argmax symbol is taken and the pass
is fully deterministic.  The receiver embeds the symbols (relaxed vectors
in training, exact one-hots at inference), runs its own LSTM, and produces
a conditioning vector that the fusion head broadcasts over the image and
combines with the feature map into the final mask probabilities.

Symbol id 0 is reserved for the start token and is never emitted: the
sender's vocabulary head scores only the content symbols 1..N_V-1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO

import numpy as np

from .grad import ShapeError, Tensor
from .grad import ops
from .layers import BatchNorm2d, Conv2d, Layer, Linear, StackedLSTM

PROB_FLOOR = 1e-12

START_TOKEN = 0


@dataclass(frozen=True)
class Vocabulary:
    """Integer symbol ids 0..size-1 with id 0 reserved as the start token."""

    size: int

    def __post_init__(self):
        if self.size < 2:
            raise ValueError("vocabulary needs at least 2 symbols (start + 1 content)")

    @property
    def n_content(self) -> int:
        return self.size - 1


@dataclass
class Sentence:
    """Fixed-length symbol sequence for one image.

    ``relaxed`` is present only for train-mode output: one simplex vector of
    length N_V per position (entry 0, the start token, carries no mass).
    """

    ids: list[int]
    relaxed: np.ndarray | None = None


@dataclass
class ChannelConfig:
    n_words: int = 10
    vocab_size: int = 64
    hidden_size: int = 64
    cell_size: int = 64
    num_lstm_layers: int = 2
    temperature: float = 1.0
    straight_through: bool = False
    embed_dim: int = 32
    receiver_channels: int = 4
    sender_input: str = "pool"  # "pool" or "flatten"

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.n_words < 1:
            raise ValueError("sentence length must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.sender_input not in ("pool", "flatten"):
            raise ValueError(f"unknown sender_input mode {self.sender_input!r}")
        for name in ("hidden_size", "cell_size", "num_lstm_layers", "embed_dim",
                     "receiver_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def sample_gumbel(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Standard Gumbel(0,1) draws."""
    return rng.gumbel(size=shape)


def gumbel_softmax(p: Tensor, tau: float, g: Tensor) -> Tensor:
    """softmax((log p + g) / tau) with p clamped at PROB_FLOOR before the log.

    ``p`` holds simplex vectors on the last axis; ``g`` are Gumbel(0,1) draws
    of the same shape.  Differentiable w.r.t. ``p``; for fixed ``g`` the
    argmax is invariant to ``tau``.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    if p.shape != g.shape:
        raise ShapeError(f"p shape {p.shape} != gumbel noise shape {g.shape}")
    z = ops.add(ops.log(ops.clamp_min(p, PROB_FLOOR)), g)
    return ops.softmax(ops.div(z, Tensor(float(tau))), axis=-1)


class Message:
    """Batched channel output: per-image symbol ids plus, in train mode, the
    relaxed per-step simplex tensors the receiver consumes."""

    def __init__(self, ids: np.ndarray, relaxed_steps: list[Tensor] | None,
                 vocab: Vocabulary, mode: str):
        self.ids = ids                      # [batch, n_words] ints in [1, N_V)
        self.relaxed_steps = relaxed_steps  # train: n_words tensors [batch, N_V-1]
        self.vocab = vocab
        self.mode = mode

    def sentences(self) -> list[Sentence]:
        out = []
        for b in range(self.ids.shape[0]):
            relaxed = None
            if self.relaxed_steps is not None:
                rows = [step.data[b] for step in self.relaxed_steps]
                relaxed = np.concatenate(
                    [np.zeros((len(rows), 1)), np.stack(rows)], axis=1
                )
            out.append(Sentence(ids=[int(i) for i in self.ids[b]], relaxed=relaxed))
        return out


class Sender(Layer):
    """Feature map -> symbol sequence."""

    def __init__(self, config: ChannelConfig, feature_channels: int,
                 input_size: tuple[int, int], rng: np.random.Generator):
        config.validate()
        self.config = config
        self.vocab = Vocabulary(config.vocab_size)
        h, w = input_size
        in_features = (feature_channels if config.sender_input == "pool"
                       else feature_channels * h * w)
        self.feat_proj = Linear(in_features, config.embed_dim, rng)
        # Row 0 embeds the start token; rows 1.. embed content symbols.
        self.embed = Linear(config.vocab_size, config.embed_dim, rng, bias=False)
        self.lstm = StackedLSTM(config.embed_dim, config.hidden_size,
                                config.cell_size, config.num_lstm_layers, rng)
        self.vocab_out = Linear(config.hidden_size, self.vocab.n_content, rng)

    def _summarize(self, x: Tensor) -> Tensor:
        if self.config.sender_input == "pool":
            return ops.global_avg_pool(x)
        n = x.shape[0]
        return ops.reshape(x, (n, -1))

    def _content_embedding(self) -> Tensor:
        # [N_V-1, embed] slice of the embedding table for content symbols
        return ops.slice_axis(self.embed.weight, 0, 1, self.config.vocab_size)

    def __call__(self, x: Tensor, mode: str, tau: float | None = None,
                 rng: np.random.Generator | None = None) -> tuple[Message, Tensor]:
        cfg = self.config
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown sender mode {mode!r}")
        if mode == "train" and rng is None:
            raise ValueError("train mode requires a seeded rng for Gumbel draws")
        if tau is None:
            tau = cfg.temperature
        n = x.shape[0]

        state = self.lstm.zero_state(n)
        # Priming step: the projected feature summary is the first LSTM input.
        _, state = self.lstm(self.feat_proj(self._summarize(x)), state)
        # Step 0 consumes the start-token embedding.
        start = ops.slice_axis(self.embed.weight, 0, START_TOKEN, START_TOKEN + 1)
        inp = ops.concat([start] * n, axis=0) if n > 1 else start
        content_embed = self._content_embedding()

        ids = np.zeros((n, cfg.n_words), dtype=np.int64)
        relaxed_steps: list[Tensor] | None = [] if mode == "train" else None
        h_top = None
        for step in range(cfg.n_words):
            h_top, state = self.lstm(inp, state)
            p = ops.softmax(self.vocab_out(h_top), axis=-1)   # [n, N_V-1]
            if mode == "train":
                g = Tensor(sample_gumbel(rng, p.shape))
                y = gumbel_softmax(p, tau, g)
                step_ids = y.data.argmax(axis=-1)
                if cfg.straight_through:
                    hard = np.zeros_like(y.data)
                    hard[np.arange(n), step_ids] = 1.0
                    y = ops.add(y, Tensor(hard - y.data))
                relaxed_steps.append(y)
                inp = ops.matmul(y, content_embed)
            else:
                step_ids = p.data.argmax(axis=-1)
                onehot = np.zeros((n, self.vocab.n_content))
                onehot[np.arange(n), step_ids] = 1.0
                inp = ops.matmul(Tensor(onehot), content_embed)
            ids[:, step] = step_ids + 1  # shift past the reserved start token
        return Message(ids, relaxed_steps, self.vocab, mode), h_top


class Receiver(Layer):
    """Symbol sequence -> conditioning vector."""

    def __init__(self, config: ChannelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.vocab = Vocabulary(config.vocab_size)
        self.embed = Linear(self.vocab.n_content, config.embed_dim, rng, bias=False)
        self.lstm = StackedLSTM(config.embed_dim, config.hidden_size,
                                config.cell_size, config.num_lstm_layers, rng)
        self.out = Linear(config.hidden_size, config.receiver_channels, rng)

    def __call__(self, message: Message) -> Tensor:
        cfg = self.config
        n, n_words = message.ids.shape
        if n_words != cfg.n_words:
            raise ShapeError(
                f"sentence length {n_words} != configured {cfg.n_words}"
            )
        state = self.lstm.zero_state(n)
        h_top = None
        for step in range(n_words):
            if message.relaxed_steps is not None:
                sym = message.relaxed_steps[step]
            else:
                onehot = np.zeros((n, self.vocab.n_content))
                onehot[np.arange(n), message.ids[:, step] - 1] = 1.0
                sym = Tensor(onehot)
            h_top, state = self.lstm(self.embed(sym), state)
        return self.out(h_top)


class FusionHead(Layer):
    """Concat(x, broadcast x') -> 1x1 conv -> batch norm -> sigmoid."""

    def __init__(self, feature_channels: int, receiver_channels: int,
                 rng: np.random.Generator):
        self.conv = Conv2d(feature_channels + receiver_channels, 1, 1, rng,
                           padding=0, bias=False)
        self.bn = BatchNorm2d(1)

    def __call__(self, x: Tensor, x_prime: Tensor, training: bool) -> Tensor:
        if x.shape[0] != x_prime.shape[0]:
            raise ShapeError(
                f"batch sizes disagree: x {x.shape[0]} vs x' {x_prime.shape[0]}"
            )
        n, _, h, w = x.shape
        spread = ops.broadcast_spatial(x_prime, h, w)
        fused = ops.concat([x, spread], axis=1)
        return ops.sigmoid(self.bn(self.conv(fused), training))


# ---------------------------------------------------------------------------
# sentence serialization (JSONL, one record per image)

def write_sentences(fp: IO[str], records: list[dict]) -> None:
    """Each record: {sample_id, slice_index, ids, mode}."""
    for rec in records:
        fp.write(json.dumps(
            {"sample_id": rec["sample_id"],
             "slice_index": rec["slice_index"],
             "ids": list(map(int, rec["ids"])),
             "mode": rec["mode"]}
        ))
        fp.write("\n")


def read_sentences(fp: IO[str]) -> list[dict]:
    records = []
    for lineno, line in enumerate(fp, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValueError(f"bad JSONL at line {lineno}: {e}") from None
        for key in ("sample_id", "slice_index", "ids"):
            if key not in obj:
                raise ValueError(f"sentence record at line {lineno} missing {key!r}")
        records.append(obj)
    return records
