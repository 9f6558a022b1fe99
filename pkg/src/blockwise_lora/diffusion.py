"""DDPM forward process and the ε-prediction objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor
from .errors import ConfigError, ContractError, NumericError


@dataclass
class NoiseSchedule:
    """Linear betas over ``T`` steps, indexed 0..T-1."""

    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    betas: np.ndarray = field(init=False, repr=False)
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("NoiseSchedule.T must be >= 1")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError("betas must satisfy 0 < beta_start <= beta_end < 1")
        self.betas = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    @property
    def sigmas(self) -> np.ndarray:
        """Equivalent VE noise levels sqrt((1 - ᾱ_t) / ᾱ_t), increasing in t."""
        return np.sqrt((1.0 - self.alpha_bars) / self.alpha_bars)

    def sigma_to_t(self, sigma) -> np.ndarray:
        """Fractional timestep for a noise level, by interpolation in log-sigma (clamped to the schedule)."""
        log_sigmas = np.log(self.sigmas)
        s = np.log(np.maximum(np.asarray(sigma, dtype=np.float64), 1e-12))
        return np.interp(s, log_sigmas, np.arange(self.T, dtype=np.float64))

    def add_noise(self, x0: np.ndarray, t: np.ndarray, eps: np.ndarray) -> np.ndarray:
        ab = self.alpha_bars[np.asarray(t, dtype=np.int64)].reshape(-1, *([1] * (x0.ndim - 1)))
        return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype, copy=False)

    def recover_x0(self, x_t: np.ndarray, t: np.ndarray, eps: np.ndarray) -> np.ndarray:
        ab = self.alpha_bars[np.asarray(t, dtype=np.int64)].reshape(-1, *([1] * (x_t.ndim - 1)))
        return (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


class NoisePredictor(Protocol):
    def predict_noise(self, x_t, t, cond) -> Tensor: ...


def sample_training_noise(rng: np.random.Generator, shape: Sequence[int], T: int, dtype=np.float32,
                          stratified: bool = True):
    """Draw (t, eps) for one batch: t uniform over the T schedule steps, then eps ~ N(0, I).

    With ``stratified`` the n rows take the n equal slices of [0, 1) in random
    order before scaling to T. Every t is still marginally uniform, but the
    batch mean loss has lower variance than with independent draws.
    """
    n = shape[0]
    if stratified and n > 1:
        u = (rng.permutation(n) + rng.uniform(size=n)) / n
        t = np.minimum((u * T).astype(np.int64), T - 1)
    else:
        t = rng.integers(0, T, size=n)
    eps = rng.standard_normal(tuple(shape)).astype(dtype)
    return t, eps


def ddpm_loss(model: NoisePredictor, x0: np.ndarray, captions, schedule: NoiseSchedule,
              rng: np.random.Generator, weights: Sequence[float] | None = None) -> Tensor:
    """MSE between the drawn noise and the model's prediction at a random timestep.

    ``captions`` is either a list of strings (encoded with the model's
    condition encoder) or precomputed conditioning. ``weights`` gives a
    per-row weight (sum_i w_i * mse_i) instead of the plain batch mean.
    """
    x0 = np.asarray(x0)
    if x0.ndim != 4:
        raise ContractError(f"ddpm_loss: x0 must be (B, C, H, W), got {x0.shape}")
    if x0.size and (x0.min() < -1.0 - 1e-6 or x0.max() > 1.0 + 1e-6):
        raise ContractError("ddpm_loss: x0 must lie in [-1, 1]")
    t, eps = sample_training_noise(rng, x0.shape, schedule.T, x0.dtype)
    x_t = schedule.add_noise(x0, t, eps)
    cond = captions
    if captions is not None and len(captions) and isinstance(captions[0], str):
        cond = model.encoder.encode(list(captions))
    pred = model.predict_noise(Tensor(x_t), t, cond)
    loss = ops.mse(pred, Tensor(eps), weights=weights)
    if not np.isfinite(loss.data).all():
        raise NumericError(f"ddpm_loss: non-finite loss at timesteps {t.tolist()}")
    return loss
