"""The end-to-end desk experiment: pre-train a base, train ID and style adapters, run the combination study."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adapters import Adapter, BlockRankPolicy, detach, inject
from .container import save_adapter, save_model
from .data import (ID_CLASS, ID_TRIGGER, STYLE_CLASS, STYLE_TRIGGER, generic_corpus, identity_dataset,
                   style_dataset, style_images, synthetic_vocabulary)
from .metrics import StyleReference
from .sampler import SamplerConfig
from .studies import UPPER, FidelityReport, run_combination_study
from .train import TrainConfig, build_reg_images, pretrain_base, train_adapter
from .unet import UNet, UNetConfig, build_unet

log = logging.getLogger(__name__)

STYLE_REFERENCE_SEED = 999


@dataclass
class DeskConfig:
    unet: UNetConfig = field(default_factory=lambda: UNetConfig(base_channels=16))
    model_seed: int = 0
    corpus_size: int = 256
    pretrain_steps: int = 2000
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 8
    reg_count: int = 50
    instance_count: int = 8
    rank: int = 4
    train: TrainConfig = field(default_factory=TrainConfig)
    train_style_full: bool = True
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seeds: list[int] = field(default_factory=lambda: list(range(8)))
    prompt: str = f"{ID_TRIGGER}, {STYLE_TRIGGER}, {ID_CLASS}"
    style_reference_count: int = 16

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DeskResult:
    model: UNet
    adapters: dict[str, Adapter]
    losses: dict[str, list[float]]
    report: FidelityReport
    paths: dict[str, Path]
    seconds: dict[str, float]


def run_desk_experiment(out_dir: str | Path, config: DeskConfig | None = None) -> DeskResult:
    cfg = config or DeskConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seconds: dict[str, float] = {}
    losses: dict[str, list[float]] = {}

    clock = time.perf_counter()
    model = build_unet(cfg.unet, seed=cfg.model_seed, vocabulary=synthetic_vocabulary())
    images, captions = generic_corpus(cfg.corpus_size, cfg.unet.image_size, seed=cfg.model_seed)
    losses["pretrain"] = pretrain_base(model, images, captions, cfg.pretrain_steps, batch_size=cfg.pretrain_batch,
                                       learning_rate=cfg.pretrain_lr, seed=cfg.model_seed)
    save_model(model, out / "base.bwla", {"desk_config": cfg.to_dict()})
    seconds["pretrain"] = time.perf_counter() - clock

    clock = time.perf_counter()
    id_set, template = identity_dataset(cfg.instance_count, cfg.unet.image_size, seed=0)
    st_set = style_dataset(cfg.instance_count, cfg.unet.image_size, seed=0)
    id_set = id_set.with_regularization(*build_reg_images(model, ID_CLASS, cfg.reg_count, cfg.sampler))
    reg_seeds = range(cfg.reg_count, 2 * cfg.reg_count)
    st_set = st_set.with_regularization(*build_reg_images(model, STYLE_CLASS, cfg.reg_count, cfg.sampler, reg_seeds))
    seconds["regularization"] = time.perf_counter() - clock

    plans = [("id", BlockRankPolicy.full(cfg.rank), id_set, 1),
             ("style_blockwise", BlockRankPolicy.only(UPPER.blocks, cfg.rank), st_set, 2)]
    if cfg.train_style_full:
        plans.append(("style_full", BlockRankPolicy.full(cfg.rank), st_set, 3))
    adapters: dict[str, Adapter] = {}
    for name, policy, dataset, seed in plans:
        clock = time.perf_counter()
        adapter = inject(model, policy, seed=seed, name=name, trigger_token=dataset.trigger)
        try:
            result = train_adapter(model, adapter, dataset, TrainConfig(**{**asdict(cfg.train), "seed": seed}))
        finally:
            detach(model, adapter)
        adapters[name] = adapter
        losses[name] = result.losses
        save_adapter(adapter, out / f"{name}.bwla", {"desk_config": cfg.to_dict(), "train_seed": seed})
        seconds[name] = time.perf_counter() - clock
        log.info("%s: first20 %.4f last20 %.4f (%.0fs)", name, np.mean(result.losses[:20]),
                 np.mean(result.losses[-20:]), seconds[name])

    clock = time.perf_counter()
    ref_images, _ = style_images(cfg.style_reference_count, cfg.unet.image_size, seed=STYLE_REFERENCE_SEED)
    report = run_combination_study(model, adapters["id"], adapters.get("style_full"), adapters["style_blockwise"],
                                   cfg.prompt, cfg.seeds, template, StyleReference(ref_images),
                                   sampler_config=cfg.sampler)
    seconds["study"] = time.perf_counter() - clock
    report.extra["losses"] = {k: {"first20": float(np.mean(v[:20])), "last20": float(np.mean(v[-20:]))}
                              for k, v in losses.items() if k != "pretrain"}
    report.extra["seconds"] = {k: round(v, 1) for k, v in seconds.items()}
    paths = report.write(out)
    (out / "losses.json").write_text(json.dumps(losses))
    return DeskResult(model, adapters, losses, report, paths, seconds)
