"""End-to-end co-training of backbone and channel, plus metrics.

Seeding: the train config seed derives independent substreams for model
init, batch shuffling, and Gumbel draws, so a (seed, dataset, config)
triple reproduces bit-identical epoch reports.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np
from scipy import ndimage

from .channel import Message
from .grad import NonFiniteError, ShapeError, Tape, Tensor
from .grad import ops
from .model import SegmentationModel


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"        # "adam" or "sgd"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    loss: str = "dice"             # "dice" or "bce"
    tau_anneal_rate: float = 0.0   # tau_t = max(tau_min, tau0 * exp(-rate * epoch))
    tau_min: float = 0.5
    checkpoint_every: int = 0      # 0 disables periodic checkpoints
    val_fraction: float = 0.2

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("dice", "bce"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    val_dsc: float
    tau: float


class TrainAbort(RuntimeError):
    """Raised when a non-finite loss stops training; carries diagnostics."""

    def __init__(self, epoch: int, tau: float, lr: float, cause: str):
        super().__init__(
            f"non-finite value at epoch {epoch} (tau={tau}, lr={lr}): {cause}"
        )
        self.epoch = epoch
        self.tau = tau
        self.lr = lr


# ---------------------------------------------------------------------------
# losses and metrics

DICE_EPS = 1.0


def dice_loss(pred: Tensor, target: Tensor) -> Tensor:
    """1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps), averaged over batch."""
    if pred.shape != target.shape:
        raise ShapeError(f"dice_loss: pred {pred.shape} != target {target.shape}")
    tvals = target.data
    if not np.isin(tvals, (0.0, 1.0)).all():
        raise ValueError("dice_loss target must be binary")
    axes = tuple(range(1, pred.ndim))
    inter = ops.sum_(ops.mul(pred, target), axis=axes)
    sums = ops.add(ops.sum_(pred, axis=axes), ops.sum_(target, axis=axes))
    dice = ops.div(ops.add(ops.mul(inter, Tensor(2.0)), Tensor(DICE_EPS)),
                   ops.add(sums, Tensor(DICE_EPS)))
    return ops.mean(ops.sub(Tensor(1.0), dice))


def bce_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Pixel-mean binary cross entropy with probability clamping."""
    if pred.shape != target.shape:
        raise ShapeError(f"bce_loss: pred {pred.shape} != target {target.shape}")
    p = ops.clamp_min(pred, 1e-7)
    q = ops.clamp_min(ops.sub(Tensor(1.0), pred), 1e-7)
    ll = ops.add(ops.mul(target, ops.log(p)),
                 ops.mul(ops.sub(Tensor(1.0), target), ops.log(q)))
    return ops.neg(ops.mean(ll))


def dsc(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Dice similarity 2|A∩B|/(|A|+|B|); both-empty pairs score 1.0."""
    a = np.asarray(mask_a).astype(bool)
    b = np.asarray(mask_b).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"dsc: shapes {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


_EIGHT_CONN = np.ones((3, 3), dtype=int)


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Keep only the largest 8-connected foreground component.

    Size ties resolve to the component whose label comes first in scan
    order.  An all-background mask is returned unchanged.
    """
    m = np.asarray(mask).astype(bool)
    labels, count = ndimage.label(m, structure=_EIGHT_CONN)
    if count == 0:
        return np.zeros_like(m)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == sizes.argmax()


def predict(model: SegmentationModel, images: np.ndarray
            ) -> tuple[np.ndarray, Message | None, np.ndarray]:
    """Deterministic inference: probabilities, thresholded (>0.5) masks with
    single-component post-processing, and the emitted message."""
    prob, message = model.forward(Tensor(images), mode="infer")
    probs = prob.data
    masks = np.zeros(probs.shape, dtype=bool)
    for i in range(probs.shape[0]):
        masks[i, 0] = largest_component(probs[i, 0] > 0.5)
    return masks, message, probs


# ---------------------------------------------------------------------------
# optimizers

class SGD:
    def __init__(self, params: list[tuple[str, Tensor]], lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for _, p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()


class Adam:
    def __init__(self, params: list[tuple[str, Tensor]], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in params]
        self.v = [np.zeros_like(p.data) for _, p in params]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for i, (_, p) in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * p.grad
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * p.grad ** 2
            p.data -= self.lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()


def make_optimizer(model: SegmentationModel, cfg: TrainConfig):
    params = list(model.named_parameters())
    if cfg.optimizer == "adam":
        return Adam(params, cfg.learning_rate, cfg.adam_betas, cfg.adam_eps)
    return SGD(params, cfg.learning_rate)


# ---------------------------------------------------------------------------
# training loop

def tau_schedule(cfg: TrainConfig, tau0: float, epoch: int) -> float:
    if cfg.tau_anneal_rate <= 0:
        return tau0
    return max(cfg.tau_min, tau0 * math.exp(-cfg.tau_anneal_rate * epoch))


def _stack_images(samples) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])[:, None, :, :]
    masks = np.stack([s.mask.astype(np.float64) for s in samples])[:, None, :, :]
    return images, masks


def evaluate_dsc(model: SegmentationModel, samples, batch_size: int = 8) -> float:
    """Mean DSC of post-processed predictions against ground truth."""
    scores = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images, masks = _stack_images(chunk)
        pred_masks, _, _ = predict(model, images)
        for i in range(len(chunk)):
            scores.append(dsc(pred_masks[i, 0], masks[i, 0] > 0.5))
    return float(np.mean(scores))


def train(model: SegmentationModel, train_samples, val_samples,
          cfg: TrainConfig, checkpoint_hook=None) -> list[EpochReport]:
    """Co-train the full model; keeps and restores the best-validation state.

    ``checkpoint_hook(epoch, model)`` is invoked every ``checkpoint_every``
    epochs when configured.  Returns one report per epoch.
    """
    cfg.validate()
    loss_fn = dice_loss if cfg.loss == "dice" else bce_loss
    opt = make_optimizer(model, cfg)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    gumbel_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    images, masks = _stack_images(train_samples)
    n = len(train_samples)
    tau0 = model.channel_cfg.temperature if model.channel_cfg is not None else 1.0

    reports: list[EpochReport] = []
    best_dsc = -1.0
    best_state: dict[str, np.ndarray] | None = None
    for epoch in range(cfg.epochs):
        tau = tau_schedule(cfg, tau0, epoch)
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                with Tape() as tape:
                    prob, _ = model.forward(Tensor(images[idx]), mode="train",
                                            tau=tau, rng=gumbel_rng)
                    loss = loss_fn(prob, Tensor(masks[idx]))
                tape.backward(loss)
            except NonFiniteError as e:
                raise TrainAbort(epoch, tau, cfg.learning_rate, str(e)) from e
            losses.append(loss.item())
            opt.step()
            opt.zero_grad()
        val_dsc = evaluate_dsc(model, val_samples, cfg.batch_size) if val_samples else 0.0
        reports.append(EpochReport(epoch, float(np.mean(losses)), val_dsc, tau))
        if val_dsc > best_dsc:
            best_dsc = val_dsc
            best_state = model.snapshot()
        if checkpoint_hook is not None and cfg.checkpoint_every > 0 \
                and (epoch + 1) % cfg.checkpoint_every == 0:
            checkpoint_hook(epoch, model)
    if best_state is not None:
        model.load_state(best_state)
    return reports


def write_epoch_reports(path: str, reports: list[EpochReport]) -> None:
    with open(path, "w") as fp:
        fp.write("epoch,train_loss,val_dsc,tau\n")
        for r in reports:
            fp.write(f"{r.epoch},{r.train_loss!r},{r.val_dsc!r},{r.tau!r}\n")
