"""Block-wise LoRA/LoCon adapters for a miniature conditional diffusion U-Net, in numpy."""

__version__ = "0.1.0"

from .adapters import (Adapter, BlockRankPolicy, activated, adapted_forward, attach, detach, detach_all,
                       effective_delta, filter_blocks, inject, merge)
from .container import load_adapter, load_model, save_adapter, save_model
from .diffusion import NoiseSchedule, ddpm_loss
from .errors import (BlockLoraError, CompatibilityError, ConfigError, ContractError, DeterminismError,
                     FormatError, NumericError, ShapeError, StateError)
from .metrics import StyleReference, identity_score, style_score
from .sampler import SamplerConfig, cfg_combine, dpmpp_2m, karras_sigmas, sample
from .train import TrainConfig, build_reg_images, pretrain_base, train_adapter
from .unet import BlockId, UNet, UNetConfig, build_unet, fingerprint, list_adaptable_layers

__all__ = [
    "Adapter", "BlockId", "BlockLoraError", "BlockRankPolicy", "CompatibilityError", "ConfigError",
    "ContractError", "DeterminismError", "FormatError", "NoiseSchedule", "NumericError", "SamplerConfig",
    "ShapeError", "StateError", "StyleReference", "TrainConfig", "UNet", "UNetConfig", "activated",
    "adapted_forward", "attach", "build_reg_images", "build_unet", "cfg_combine", "ddpm_loss", "detach",
    "detach_all", "dpmpp_2m", "effective_delta", "filter_blocks", "fingerprint", "identity_score", "inject",
    "karras_sigmas", "list_adaptable_layers", "load_adapter", "load_model", "merge", "pretrain_base",
    "sample", "save_adapter", "save_model", "style_score", "train_adapter",
]
