"""DPM-Solver++(2M) on a Karras sigma schedule with classifier-free guidance."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .adapters import Adapter, activated
from .autodiff.tensor import Tensor
from .diffusion import NoiseSchedule
from .errors import ConfigError, ContractError, NumericError, ShapeError
from .unet import UNet

Denoiser = Callable[[np.ndarray, float], np.ndarray]


@dataclass
class SamplerConfig:
    steps: int = 25
    cfg_scale: float = 7.0
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    seed: int = 0
    resolution: int | None = None

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.cfg_scale < 0:
            raise ConfigError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError("sigmas must satisfy 0 < sigma_min < sigma_max")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SamplerConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown sampler keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


def karras_sigmas(n: int, sigma_min: float = 0.002, sigma_max: float = 80.0, rho: float = 7.0) -> np.ndarray:
    """n noise levels from sigma_max down to sigma_min, rho-warped, plus a terminal 0."""
    if n < 2:
        raise ContractError(f"karras_sigmas: n must be >= 2, got {n}")
    ramp = np.linspace(0.0, 1.0, n)
    lo, hi = sigma_min ** (1.0 / rho), sigma_max ** (1.0 / rho)
    sigmas = (hi + ramp * (lo - hi)) ** rho
    sigmas[0], sigmas[-1] = sigma_max, sigma_min
    return np.append(sigmas, 0.0)


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, scale: float) -> np.ndarray:
    eps_cond, eps_uncond = np.asarray(eps_cond), np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(f"cfg_combine: shape mismatch {eps_cond.shape} vs {eps_uncond.shape}")
    if scale == 1.0:
        return eps_cond.copy()
    if scale == 0.0:
        return eps_uncond.copy()
    return eps_uncond + scale * (eps_cond - eps_uncond)


def dpmpp_2m(denoise: Denoiser, x: np.ndarray, sigmas: Sequence[float],
             callback: Callable[[int, np.ndarray, float], None] | None = None) -> np.ndarray:
    """Deterministic DPM-Solver++(2M).

    Works in t = -log(sigma) with the data prediction D(x, sigma). The first
    step, and a final step to sigma = 0, are first order.
    """
    sigmas = [float(s) for s in sigmas]
    old_denoised = None
    h_last = None
    for i in range(len(sigmas) - 1):
        s, s_next = sigmas[i], sigmas[i + 1]
        denoised = denoise(x, s)
        if s_next == 0.0:
            x = denoised
        else:
            t, t_next = -math.log(s), -math.log(s_next)
            h = t_next - t
            if old_denoised is None:
                d = denoised
            else:
                r = h_last / h
                d = (1.0 + 1.0 / (2.0 * r)) * denoised - (1.0 / (2.0 * r)) * old_denoised
            x = (s_next / s) * x - math.expm1(-h) * d
            h_last = h
        if not np.isfinite(x).all():
            raise NumericError(f"sampler: non-finite state after step {i}")
        old_denoised = denoised
        if callback is not None:
            callback(i, x, s_next)
    return x


def eps_denoiser(model: UNet, schedule: NoiseSchedule, cond, uncond, cfg_scale: float) -> Denoiser:
    """D(x, sigma) for an ε-model trained on the DDPM schedule, with CFG on ε."""
    batch = cond.embeddings.shape[0]
    both = np.concatenate([cond.embeddings, uncond.embeddings], axis=0)

    def denoise(x: np.ndarray, sigma: float) -> np.ndarray:
        c_in = 1.0 / math.sqrt(sigma * sigma + 1.0)
        t = float(schedule.sigma_to_t(sigma))
        xin = (x * c_in).astype(model.dtype)
        if cfg_scale == 1.0:
            eps = model.predict_noise(Tensor(xin), np.full(batch, t), cond.embeddings).data
        else:
            out = model.predict_noise(Tensor(np.concatenate([xin, xin])), np.full(2 * batch, t), both).data
            eps = cfg_combine(out[:batch], out[batch:], cfg_scale)
        return (x - sigma * eps).astype(x.dtype, copy=False)

    return denoise


def initial_noise(seeds: Sequence[int], shape: tuple[int, int, int], sigma: float, dtype) -> np.ndarray:
    return np.stack([np.random.default_rng(s).standard_normal(shape) for s in seeds]).astype(dtype) * dtype.type(sigma)


def sample(model: UNet, adapters: Sequence[tuple[Adapter, float]] = (), prompt: str = "",
           negative_prompt: str = "", config: SamplerConfig | None = None,
           seeds: Sequence[int] | None = None, schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Generate images in [-1, 1], shape (len(seeds), C, H, W).

    ``seeds`` defaults to ``[config.seed]``; each image's starting noise comes
    from its own seed, so results do not depend on batch composition.
    """
    config = config or SamplerConfig()
    config.validate()
    res = config.resolution or model.config.image_size
    if res != model.config.image_size:
        raise ContractError(f"resolution {res} does not match the model's image_size {model.config.image_size}")
    seeds = [config.seed] if seeds is None else list(seeds)
    schedule = schedule or NoiseSchedule(model.config.num_train_timesteps)
    if config.steps == 1:
        sigmas = np.array([config.sigma_max, 0.0])
    else:
        sigmas = karras_sigmas(config.steps, config.sigma_min, config.sigma_max, config.rho)
    with activated(model, adapters):
        cond = model.encoder.encode([prompt] * len(seeds))
        uncond = model.encoder.encode([negative_prompt] * len(seeds))
        x = initial_noise(seeds, (model.config.in_channels, res, res), sigmas[0], model.dtype)
        x = dpmpp_2m(eps_denoiser(model, schedule, cond, uncond, config.cfg_scale), x, sigmas)
    return np.clip(x, -1.0, 1.0)


# --------------------------------------------------------------------------- PNG I/O


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(C, H, W) in [-1, 1] -> (H, W, C) uint8 by a linear map."""
    img = np.clip((np.asarray(image, dtype=np.float64) + 1.0) * 127.5, 0, 255)
    return np.rint(img).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(pixels: np.ndarray, dtype=np.float32) -> np.ndarray:
    return (pixels.astype(np.float64).transpose(2, 0, 1) / 127.5 - 1.0).astype(dtype)


def save_png(path: str | Path, image: np.ndarray, sidecar: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")
    if sidecar is not None:
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load_png(path: str | Path, dtype=np.float32) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")), dtype)


def sidecar_record(config: SamplerConfig, adapters: Sequence[tuple[Adapter, float]], prompt: str,
                   negative_prompt: str, seed: int) -> dict:
    return {
        "sampler": {**config.to_dict(), "seed": seed, "name": "dpmpp_2m_karras"},
        "prompt": prompt,
        "negative_prompt": negative_prompt,
        "adapters": [{"name": a.name, "strength": w, "ranks": a.policy.to_dict()["ranks"]} for a, w in adapters],
        "seed": seed,
    }
