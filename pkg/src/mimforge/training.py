"""Masked-token pretraining and classification fine-tuning loops."""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field, replace
from typing import Callable, TextIO

import numpy as np

from ._io import FormatError, atomic_write, check_magic, pack_tensor, pack_u32, read_exact, read_tensor, read_u32
from .data import UNKNOWN, Dataset, augment
from .model import (
    ModelState,
    classify,
    embed_batch,
    encoder_forward,
    mim_logits,
    resize_position_embeddings,
)
from .patches import blockwise_mask, default_min_block, patchify_batch
from .resample import resize_images
from .seeding import derive_seed
from .tensor import backward, cross_entropy_from_logits
from .tokenizer import Codebook, encode_batch

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "TrainingError",
    "cosine_lr",
    "adam_step",
    "init_optimizer",
    "pretrain_step",
    "finetune_step",
    "run_pretrain",
    "run_finetune",
    "finetune_split",
    "switched_image_size",
    "save_optimizer",
    "load_optimizer",
]

RESOLUTION_RATIO = 384 / 224
OPT_MAGIC = b"MIMO"
OPT_VERSION = 1


class TrainingError(RuntimeError):
    """Raised on non-finite gradients or invalid training requests."""


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.05
    total_steps: int = 2000
    warmup_steps: int | None = None  # None -> 5% of total_steps
    batch_size: int = 16
    mask_ratio: float = 0.4
    min_block: int | None = None  # None -> max(1, d // 12)
    max_aspect: float = 3.33
    augment: bool = True
    pretrain_crop: bool = False  # random resized crop during pretraining
    rng_seed: int = 0
    finetune_epochs: int = 50
    finetune_lr: float = 3e-3
    finetune_resolution_switch_step: float = 0.8

    def __post_init__(self) -> None:
        if not self.base_lr > 0:
            raise ValueError("base_lr must be > 0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0 <= self.warmup < self.total_steps:
            raise ValueError("warmup_steps must satisfy 0 <= warmup < total_steps")
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.finetune_resolution_switch_step <= 1:
            raise ValueError("finetune_resolution_switch_step must lie in (0, 1]")

    @property
    def warmup(self) -> int:
        if self.warmup_steps is None:
            return int(0.05 * self.total_steps)
        return self.warmup_steps


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_optimizer(state: ModelState) -> OptimizerState:
    return OptimizerState(
        {n: np.zeros_like(p.data) for n, p in state.params.items()},
        {n: np.zeros_like(p.data) for n, p in state.params.items()},
        0,
    )


def cosine_lr(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``base_lr``, then half-cosine decay to zero at ``total_steps``."""
    total, warm = config.total_steps, config.warmup
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warm:
        return config.base_lr * step / warm
    progress = (step - warm) / (total - warm)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adam_step(state: ModelState, opt: OptimizerState, lr: float, config: TrainConfig) -> None:
    """Bias-corrected Adam with decoupled weight decay, applied in place.

    Parameters without a gradient are treated as having a zero gradient.
    """
    b1, b2 = config.beta1, config.beta2
    for name, p in state.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    opt.step += 1
    t = opt.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in state.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = opt.m.get(name)
        if m is None or m.shape != p.data.shape:
            m = opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        data = p.data
        data -= lr * config.weight_decay * data
        data -= lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


# -- step functions ---------------------------------------------------------------------
@dataclass
class StepMetrics:
    loss: float
    acc: float
    lr: float


def sample_masks(batch: int, grid: tuple[int, int], config: TrainConfig, seed: int) -> np.ndarray:
    d = grid[0] * grid[1]
    masks = np.zeros((batch, d), dtype=bool)
    min_block = config.min_block if config.min_block is not None else default_min_block(d)
    for i in range(batch):
        plan = blockwise_mask(
            grid, config.mask_ratio, min_block, config.max_aspect, rng_seed=derive_seed(seed, "mask", i)
        )
        masks[i, plan.indices()] = True
    return masks


def pretrain_step(
    images: np.ndarray,
    codebook: Codebook,
    state: ModelState,
    opt: OptimizerState,
    config: TrainConfig,
    masks: np.ndarray | None = None,
    lr: float | None = None,
) -> StepMetrics:
    """One masked-token prediction update on a batch of (B, H, W, C) images.

    Targets are the frozen codebook's tokens of the uncorrupted images. Masks
    default to blockwise plans seeded from (rng_seed, step).
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise TrainingError("pretrain_step needs a non-empty batch")
    cfg = state.config
    targets = encode_batch(images, codebook)
    if masks is None:
        masks = sample_masks(len(images), cfg.grid, config, derive_seed(config.rng_seed, "pretrain", opt.step))
    if lr is None:
        lr = cosine_lr(min(opt.step, config.total_steps), config)
    state.zero_grad()
    patches = patchify_batch(images, cfg.patch_size)
    hidden = encoder_forward(embed_batch(patches, masks, state), state)
    logits = mim_logits(hidden, masks, state)
    wanted = targets[masks]
    loss = cross_entropy_from_logits(logits, wanted)
    backward(loss)
    acc = float(np.mean(logits.data.argmax(axis=1) == wanted))
    loss_value = float(loss.data[0])
    if not math.isfinite(loss_value):
        raise TrainingError("non-finite pretraining loss")
    adam_step(state, opt, lr, config)
    return StepMetrics(loss_value, acc, lr)


def finetune_step(
    images: np.ndarray,
    labels: np.ndarray,
    state: ModelState,
    opt: OptimizerState,
    config: TrainConfig,
    lr: float,
) -> StepMetrics:
    """One supervised update: embed without masking, encode, pool, classify."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = state.config.num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range [0, {k})")
    state.zero_grad()
    patches = patchify_batch(images, state.config.patch_size)
    logits = classify(encoder_forward(embed_batch(patches, None, state), state), state)
    loss = cross_entropy_from_logits(logits, labels)
    backward(loss)
    acc = float(np.mean(logits.data.argmax(axis=1) == labels))
    loss_value = float(loss.data[0])
    if not math.isfinite(loss_value):
        raise TrainingError("non-finite fine-tuning loss")
    adam_step(state, opt, lr, config)
    return StepMetrics(loss_value, acc, lr)


# -- loops ------------------------------------------------------------------------
def log_line(step: int, m: StepMetrics) -> str:
    return f"{step}\t{m.lr!r}\t{m.loss!r}\t{m.acc!r}\n"


def _batch_indices(n: int, batch_size: int, step: int, seed: int, domain: str) -> np.ndarray:
    per_epoch = max(1, math.ceil(n / batch_size))
    epoch, j = divmod(step, per_epoch)
    perm = np.random.default_rng(derive_seed(seed, domain, "perm", epoch)).permutation(n)
    return perm[j * batch_size : (j + 1) * batch_size]


def _augmented(images: np.ndarray, seed: int, enabled: bool, crop: bool = True) -> np.ndarray:
    out = np.asarray(images, dtype=np.float64)
    if not enabled:
        return out
    kwargs = {} if crop else {"crop_scale": (1.0, 1.0)}
    return np.stack(
        [augment(img, np.random.default_rng(derive_seed(seed, "augment", i)), **kwargs) for i, img in enumerate(out)]
    )


def run_pretrain(
    images: np.ndarray,
    codebook: Codebook,
    state: ModelState,
    opt: OptimizerState,
    config: TrainConfig,
    stop_step: int | None = None,
    log: TextIO | None = None,
    on_step: Callable[[int, StepMetrics], None] | None = None,
) -> list[StepMetrics]:
    """Run pretraining from ``opt.step`` up to ``stop_step`` (default: total_steps).

    Batch composition, augmentation and masks depend only on (rng_seed, step),
    so a run resumed from a saved model/optimizer state continues exactly.
    """
    images = np.asarray(images)
    stop = config.total_steps if stop_step is None else min(stop_step, config.total_steps)
    per_epoch = max(1, math.ceil(len(images) / config.batch_size))
    history = []
    while opt.step < stop:
        step = opt.step
        idx = _batch_indices(len(images), config.batch_size, step, config.rng_seed, "pretrain")
        batch = _augmented(
            images[idx], derive_seed(config.rng_seed, "pretrain", step), config.augment, config.pretrain_crop
        )
        m = pretrain_step(batch, codebook, state, opt, config)
        history.append(m)
        if log is not None:
            log.write(log_line(step, m))
            if (step + 1) % per_epoch == 0:
                log.flush()
        if on_step is not None:
            on_step(step, m)
    if log is not None:
        log.flush()
    return history


def switched_image_size(image_size: int, patch_size: int) -> int:
    """Fine-tuning resolution after the switch: 384/224 of the base, rounded to a patch multiple."""
    return max(patch_size, int(round(image_size * RESOLUTION_RATIO / patch_size)) * patch_size)


def finetune_split(dataset: Dataset, ood: Dataset | None = None, ood_class: bool = False) -> Dataset:
    """Labelled training split: UNKNOWN images dropped, or relabelled as class K when ``ood_class``."""
    known = dataset.known()
    if not ood_class:
        return known
    extra = [dataset.subset(np.flatnonzero(dataset.labels == UNKNOWN))]
    if ood is not None:
        extra.append(ood.subset(np.flatnonzero(ood.labels == UNKNOWN)))
    out = known
    for e in extra:
        relabelled = Dataset(e.images, np.full(len(e), dataset.num_classes), e.provenance, dataset.num_classes)
        out = out.concat(relabelled)
    return out


@dataclass
class FinetuneHistory:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_acc: list[float] = field(default_factory=list)
    image_size: list[int] = field(default_factory=list)


def run_finetune(
    dataset: Dataset,
    state: ModelState,
    config: TrainConfig,
    log: TextIO | None = None,
) -> tuple[ModelState, FinetuneHistory]:
    """Fine-tune for ``finetune_epochs``, switching resolution for the final epochs.

    At epoch ``round(switch * epochs)`` the position embeddings are
    interpolated onto the larger grid and images are resized to match; the
    optimizer moments for the position embeddings restart from zero.
    """
    n = len(dataset)
    if n == 0:
        raise TrainingError("fine-tuning dataset is empty")
    labels = dataset.labels
    if labels.min() < 0:
        raise TrainingError("fine-tuning split contains UNKNOWN labels; use finetune_split")
    epochs = config.finetune_epochs
    per_epoch = math.ceil(n / config.batch_size)
    total = epochs * per_epoch
    schedule = replace(config, base_lr=config.finetune_lr, total_steps=total, warmup_steps=int(0.05 * total))
    switch_epoch = epochs if config.finetune_resolution_switch_step >= 1 else int(
        round(config.finetune_resolution_switch_step * epochs)
    )
    opt = init_optimizer(state)
    history = FinetuneHistory()
    size = state.config.image_size
    for epoch in range(epochs):
        if epoch == switch_epoch:
            size = switched_image_size(state.config.image_size, state.config.patch_size)
            state = resize_position_embeddings(state, size)
            opt.m.pop("pos_embed", None)
            opt.v.pop("pos_embed", None)
        losses, accs = [], []
        for j in range(per_epoch):
            step = epoch * per_epoch + j
            idx = _batch_indices(n, config.batch_size, step, config.rng_seed, "finetune")
            batch = _augmented(dataset.images[idx], derive_seed(config.rng_seed, "finetune", step), config.augment)
            batch = resize_images(batch, size)
            m = finetune_step(batch, labels[idx], state, opt, config, cosine_lr(step, schedule))
            losses.append(m.loss * len(idx))
            accs.append(m.acc * len(idx))
            if log is not None:
                log.write(log_line(step, m))
        if log is not None:
            log.flush()
        history.epoch_loss.append(sum(losses) / n)
        history.epoch_acc.append(sum(accs) / n)
        history.image_size.append(size)
    return state, history


# -- optimizer persistence --------------------------------------------------------------
def optimizer_to_bytes(opt: OptimizerState, names: list[str]) -> bytes:
    parts = [OPT_MAGIC, pack_u32(OPT_VERSION, len(names)), int(opt.step).to_bytes(8, "little")]
    for n in names:
        parts.append(pack_tensor(opt.m[n]))
        parts.append(pack_tensor(opt.v[n]))
    return b"".join(parts)


def optimizer_from_bytes(payload: bytes, names: list[str]) -> OptimizerState:
    fh = io.BytesIO(payload)
    check_magic(fh, OPT_MAGIC)
    version, count = read_u32(fh, 2)
    if version != OPT_VERSION or count != len(names):
        raise FormatError(f"optimizer file does not match model ({count} tensors, version {version})")
    step = int.from_bytes(read_exact(fh, 8), "little")
    opt = OptimizerState(step=step)
    for n in names:
        opt.m[n] = read_tensor(fh)
        opt.v[n] = read_tensor(fh)
    return opt


def save_optimizer(opt: OptimizerState, names: list[str], path: str | os.PathLike) -> None:
    atomic_write(path, optimizer_to_bytes(opt, names))


def load_optimizer(path: str | os.PathLike, names: list[str]) -> OptimizerState:
    with open(path, "rb") as fh:
        return optimizer_from_bytes(fh.read(), names)
