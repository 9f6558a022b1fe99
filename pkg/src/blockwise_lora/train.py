"""Adapter training with instance repeats and prior-preservation (regularization) batches."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .adapters import Adapter
from .autodiff import AdamW, backward
from .data import InstanceStream, TrainDataset
from .diffusion import NoiseSchedule, ddpm_loss
from .errors import ConfigError, ContractError, StateError
from .sampler import SamplerConfig, sample
from .unet import UNet, fingerprint

log = logging.getLogger(__name__)

# step budget of the full-scale identity runs; the desk default is 2000
LONG_RUN_STEPS = 11000


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 2
    learning_rate: float = 1e-3
    prior_weight: float = 1.0
    weight_decay: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.prior_weight < 0:
            raise ConfigError(f"prior_weight must be >= 0, got {self.prior_weight}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass
class TrainResult:
    adapter: Adapter
    losses: list[float]
    optimizer: AdamW
    base_fingerprint: str
    seconds: float


def build_reg_images(model: UNet, class_caption: str, count: int, sampler_config: SamplerConfig | None = None,
                     seeds: Sequence[int] | None = None, batch: int = 8) -> tuple[np.ndarray, list[str]]:
    """``count`` base-model samples of ``class_caption``, one seed each (default seeds 0..count-1)."""
    if model.attached:
        raise StateError("build_reg_images: detach all adapters first; regularization images come from the base model")
    cfg = sampler_config or SamplerConfig()
    seeds = list(range(count)) if seeds is None else list(seeds)
    if len(seeds) != count:
        raise ContractError(f"build_reg_images: {len(seeds)} seeds for {count} images")
    res = model.config.image_size
    if count == 0:
        return np.zeros((0, model.config.in_channels, res, res), dtype=model.dtype), []
    chunks = [sample(model, (), class_caption, "", cfg, seeds=seeds[i:i + batch]) for i in range(0, count, batch)]
    images = np.concatenate(chunks).astype(model.dtype)
    return images, [class_caption] * count


def train_adapter(model: UNet, adapter: Adapter, dataset: TrainDataset, config: TrainConfig,
                  schedule: NoiseSchedule | None = None,
                  progress: Callable[[int, float], None] | None = None) -> TrainResult:
    """Optimize only ``adapter``'s factors; every step sees an instance batch plus (if any) a regularization batch.

    loss = L_instance + prior_weight * L_reg. Raises StateError if the base
    parameters change.
    """
    config.validate()
    if not any(a is adapter for a, _ in model.attached):
        raise ContractError(f"adapter {adapter.name!r} must be injected into/attached to the model before training")
    if dataset.image_size != model.config.image_size:
        raise ContractError(f"dataset image size {dataset.image_size} != model image size {model.config.image_size}")
    schedule = schedule or NoiseSchedule(model.config.num_train_timesteps)
    before = fingerprint(model)
    for p in model.parameters():
        p.set_trainable(False)
    for other, _ in model.attached:
        other.set_trainable(other is adapter)
    params = adapter.parameters()
    opt = AdamW(lr=config.learning_rate, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    stream = InstanceStream(len(dataset.instance_images), dataset.repeats, np.random.default_rng(config.seed + 1))
    n_reg = len(dataset.reg_images)
    inst_conds = model.encoder.encode(dataset.instance_captions).embeddings
    reg_conds = model.encoder.encode(dataset.reg_captions).embeddings if n_reg else None
    dtype = model.dtype
    losses: list[float] = []
    start = time.perf_counter()
    for step in range(config.steps):
        idx = stream.take(config.batch_size)
        x0 = dataset.instance_images[idx]
        cond = inst_conds[idx]
        weights = [1.0 / config.batch_size] * config.batch_size
        if n_reg and config.prior_weight > 0:
            ridx = rng.integers(0, n_reg, size=config.batch_size)
            x0 = np.concatenate([x0, dataset.reg_images[ridx]])
            cond = np.concatenate([cond, reg_conds[ridx]])
            weights += [config.prior_weight / config.batch_size] * config.batch_size
        loss = ddpm_loss(model, x0.astype(dtype, copy=False), cond, schedule, rng, weights=weights)
        grads = backward(loss)
        if params:
            opt.step(params, grads)
        losses.append(loss.item())
        if progress is not None:
            progress(step, losses[-1])
    after = fingerprint(model)
    if after != before:
        raise StateError("train_adapter: base model parameters changed during adapter training")
    elapsed = time.perf_counter() - start
    log.info("trained %s for %d steps in %.1fs", adapter.name, config.steps, elapsed)
    return TrainResult(adapter, losses, opt, before, elapsed)


def pretrain_base(model: UNet, images: np.ndarray, captions: Sequence[str], steps: int, batch_size: int = 8,
                  learning_rate: float = 5e-4, seed: int = 0, uncond_prob: float = 0.1,
                  schedule: NoiseSchedule | None = None) -> list[float]:
    """Full-parameter DDPM training of the base model on a generic corpus.

    Stands in for a pre-trained base. The condition encoder stays frozen;
    ``uncond_prob`` of captions are dropped so the model learns the
    unconditional branch used by classifier-free guidance.
    """
    if model.attached:
        raise StateError("pretrain_base: detach adapters first")
    schedule = schedule or NoiseSchedule(model.config.num_train_timesteps)
    params = [p for p in model.parameters() if not p.name.startswith("shared.cond")]
    for p in model.parameters():
        p.set_trainable(False)
    for p in params:
        p.set_trainable(True)
    opt = AdamW(lr=learning_rate, weight_decay=0.0)
    rng = np.random.default_rng(seed)
    conds = model.encoder.encode(list(captions)).embeddings
    null = model.encoder.encode([""]).embeddings[0]
    losses = []
    try:
        for _ in range(steps):
            idx = rng.integers(0, len(images), size=batch_size)
            cond = conds[idx].copy()
            cond[rng.uniform(size=batch_size) < uncond_prob] = null
            # cosine decay keeps the short schedule stable
            opt.lr = learning_rate * 0.5 * (1 + np.cos(np.pi * len(losses) / max(steps, 1)))
            loss = ddpm_loss(model, images[idx].astype(model.dtype, copy=False), cond, schedule, rng)
            opt.step(params, backward(loss))
            losses.append(loss.item())
    finally:
        for p in params:
            p.set_trainable(False)
    return losses
