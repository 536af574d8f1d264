"""Full segmentation model (backbone + channel + fusion) and checkpoint I/O.

Checkpoint layout: magic ``SUNET1``, a little-endian u64 entry count, then a
manifest of (length-prefixed UTF-8 name, u64 ndim, u64 dims, u64 absolute
byte offset) per entry, followed by raw little-endian float64 payloads.
Model configuration rides along as scalar entries under the ``meta.``
prefix so a checkpoint is self-describing.
"""

from __future__ import annotations

import struct

import numpy as np

from .backbone import Backbone, BackboneConfig
from .channel import ChannelConfig, FusionHead, Message, Receiver, Sender
from .grad import Tensor
from .grad import ops
from .layers import Conv2d, Layer

MAGIC = b"SUNET1"


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


class SegmentationModel(Layer):
    """Backbone -> sender -> receiver -> fusion; or backbone-only when ablated.

    The ablated variant drops the symbol channel entirely and maps the
    feature tensor through a 1x1 convolution and a sigmoid.
    """

    def __init__(self, backbone_cfg: BackboneConfig,
                 channel_cfg: ChannelConfig | None,
                 seed: int):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
        self.backbone = Backbone(backbone_cfg, rng)
        self.backbone_cfg = backbone_cfg
        self.channel_cfg = channel_cfg
        if channel_cfg is not None:
            channel_cfg.validate()
            self.sender = Sender(channel_cfg, backbone_cfg.feature_channels,
                                 backbone_cfg.input_size, rng)
            self.receiver = Receiver(channel_cfg, rng)
            self.fusion = FusionHead(backbone_cfg.feature_channels,
                                     channel_cfg.receiver_channels, rng)
        else:
            self.head = Conv2d(backbone_cfg.feature_channels, 1, 1, rng,
                               padding=0, bias=True)

    @property
    def ablated(self) -> bool:
        return self.channel_cfg is None

    def forward(self, images: Tensor, mode: str, tau: float | None = None,
                rng: np.random.Generator | None = None
                ) -> tuple[Tensor, Message | None]:
        """Return (mask probabilities [N,1,H,W], message or None if ablated)."""
        training = mode == "train"
        x = self.backbone(images, training)
        if self.ablated:
            return ops.sigmoid(self.head(x)), None
        message, _ = self.sender(x, mode, tau=tau, rng=rng)
        x_prime = self.receiver(message)
        prob = self.fusion(x, x_prime, training)
        return prob, message

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {}
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b.data
        return state

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise CheckpointError(
                f"state mismatch: missing {missing[:4]}, unexpected {extra[:4]}"
            )
        for name, arr in own.items():
            src = state[name]
            if src.shape != arr.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: {src.shape} vs {arr.shape}"
                )
            arr[...] = src


# ---------------------------------------------------------------------------
# checkpoint encoding

def _meta_entries(model: SegmentationModel) -> dict[str, float]:
    b = model.backbone_cfg
    meta = {
        "meta.version": 1.0,
        "meta.ablated": float(model.ablated),
        "meta.backbone.in_channels": float(b.in_channels),
        "meta.backbone.base_channels": float(b.base_channels),
        "meta.backbone.depth": float(b.depth),
        "meta.backbone.feature_channels": float(b.feature_channels),
        "meta.backbone.input_h": float(b.input_size[0]),
        "meta.backbone.input_w": float(b.input_size[1]),
    }
    c = model.channel_cfg
    if c is not None:
        meta.update({
            "meta.channel.n_words": float(c.n_words),
            "meta.channel.vocab_size": float(c.vocab_size),
            "meta.channel.hidden_size": float(c.hidden_size),
            "meta.channel.cell_size": float(c.cell_size),
            "meta.channel.num_lstm_layers": float(c.num_lstm_layers),
            "meta.channel.temperature": float(c.temperature),
            "meta.channel.straight_through": float(c.straight_through),
            "meta.channel.embed_dim": float(c.embed_dim),
            "meta.channel.receiver_channels": float(c.receiver_channels),
            "meta.channel.sender_flatten": float(c.sender_input == "flatten"),
        })
    return meta


def save_checkpoint(path: str, model: SegmentationModel,
                    state: dict[str, np.ndarray] | None = None) -> None:
    entries: dict[str, np.ndarray] = {
        name: np.asarray(value) for name, value in _meta_entries(model).items()
    }
    entries.update(state if state is not None else model.state_arrays())

    manifest_size = 6 + 8
    for name, arr in entries.items():
        manifest_size += 8 + len(name.encode()) + 8 + 8 * arr.ndim + 8

    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<Q", len(entries))
    offset = manifest_size
    payloads = []
    for name, arr in entries.items():
        enc = name.encode()
        blob += struct.pack("<Q", len(enc)) + enc
        blob += struct.pack("<Q", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<Q", dim)
        blob += struct.pack("<Q", offset)
        payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        payloads.append(payload)
        offset += len(payload)
    for payload in payloads:
        blob += payload
    with open(path, "wb") as fp:
        fp.write(blob)


def read_checkpoint_entries(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fp:
        raw = fp.read()
    if raw[:6] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:6]!r}")
    pos = 6

    def take_u64() -> int:
        nonlocal pos
        if pos + 8 > len(raw):
            raise CheckpointError(f"{path}: truncated manifest at byte {pos}")
        value = struct.unpack_from("<Q", raw, pos)[0]
        pos += 8
        return value

    count = take_u64()
    entries: dict[str, np.ndarray] = {}
    specs = []
    for _ in range(count):
        name_len = take_u64()
        if pos + name_len > len(raw):
            raise CheckpointError(f"{path}: truncated name at byte {pos}")
        name = raw[pos:pos + name_len].decode()
        pos += name_len
        ndim = take_u64()
        shape = tuple(take_u64() for _ in range(ndim))
        offset = take_u64()
        specs.append((name, shape, offset))
    for name, shape, offset in specs:
        nbytes = 8 * int(np.prod(shape)) if shape else 8
        if offset + nbytes > len(raw):
            raise CheckpointError(
                f"{path}: payload for {name!r} overruns file "
                f"(offset {offset}, {nbytes} bytes, file {len(raw)})"
            )
        arr = np.frombuffer(raw, dtype="<f8", count=max(1, int(np.prod(shape))),
                            offset=offset).reshape(shape).astype(np.float64)
        entries[name] = arr
    return entries


def load_checkpoint(path: str) -> SegmentationModel:
    entries = read_checkpoint_entries(path)

    def meta(key: str) -> float:
        full = f"meta.{key}"
        if full not in entries:
            raise CheckpointError(f"{path}: missing metadata entry {full!r}")
        return float(entries[full].reshape(()))

    backbone_cfg = BackboneConfig(
        in_channels=int(meta("backbone.in_channels")),
        base_channels=int(meta("backbone.base_channels")),
        depth=int(meta("backbone.depth")),
        feature_channels=int(meta("backbone.feature_channels")),
        input_size=(int(meta("backbone.input_h")), int(meta("backbone.input_w"))),
    )
    channel_cfg = None
    if not bool(meta("ablated")):
        channel_cfg = ChannelConfig(
            n_words=int(meta("channel.n_words")),
            vocab_size=int(meta("channel.vocab_size")),
            hidden_size=int(meta("channel.hidden_size")),
            cell_size=int(meta("channel.cell_size")),
            num_lstm_layers=int(meta("channel.num_lstm_layers")),
            temperature=float(meta("channel.temperature")),
            straight_through=bool(meta("channel.straight_through")),
            embed_dim=int(meta("channel.embed_dim")),
            receiver_channels=int(meta("channel.receiver_channels")),
            sender_input="flatten" if meta("channel.sender_flatten") else "pool",
        )
    model = SegmentationModel(backbone_cfg, channel_cfg, seed=0)
    state = {k: v for k, v in entries.items() if not k.startswith("meta.")}
    model.load_state(state)
    return model
