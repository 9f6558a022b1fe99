"""Combination study and block-group ablation, scored with the identity/style metrics."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .adapters import Adapter, BlockRankPolicy, detach, filter_blocks, inject
from .data import IdentityTemplate, TrainDataset
from .errors import ContractError
from .metrics import StyleReference, identity_score
from .sampler import SamplerConfig, from_uint8, sample, save_png, to_uint8
from .train import TrainConfig, train_adapter
from .unet import ALL_BLOCKS, BlockId, UNet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BlockGroup:
    name: str
    blocks: frozenset

    def __post_init__(self):
        object.__setattr__(self, "blocks", frozenset(BlockId.parse(b) if isinstance(b, str) else b for b in self.blocks))

    def to_dict(self) -> dict:
        return {"name": self.name, "blocks": [b.name for b in sorted(self.blocks)]}


UPPER = BlockGroup("upper", frozenset({BlockId.IN0, BlockId.OUT3}))
MIDDLE = BlockGroup("middle", frozenset({BlockId.IN1, BlockId.OUT2}))
BOTTOM = BlockGroup("bottom", frozenset({BlockId.IN2, BlockId.OUT1}))
DEFAULT_GROUPS = (UPPER, MIDDLE, BOTTOM)


def check_disjoint(groups: Sequence[BlockGroup]) -> None:
    seen: dict[BlockId, str] = {}
    names = set()
    for g in groups:
        if g.name in names:
            raise ContractError(f"duplicate block group name {g.name!r}")
        names.add(g.name)
        for b in g.blocks:
            if b in seen:
                raise ContractError(f"block groups {seen[b]!r} and {g.name!r} overlap at {b.name}")
            seen[b] = g.name


def adapter_digest(adapter: Adapter) -> str:
    """Content hash of an adapter's factors, for report provenance."""
    h = hashlib.sha256(adapter.name.encode())
    for p in adapter.parameters():
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return h.hexdigest()[:32]


def check_trained(adapter: Adapter) -> None:
    if not adapter.layers:
        return
    if all(not np.any(la.B.data) for la in adapter.layers):
        raise ContractError(f"adapter {adapter.name!r} is untrained (every B factor is zero)")


@dataclass
class Cell:
    name: str
    adapters: list  # [(Adapter, strength)]

    def provenance(self) -> list[dict]:
        return [{
            "name": a.name,
            "strength": float(w),
            "ranks": a.policy.to_dict()["ranks"],
            "digest": adapter_digest(a),
        } for a, w in self.adapters]


@dataclass
class CellResult:
    name: str
    adapters: list[dict]
    seeds: list[int]
    identity: list[float]
    style: list[float]
    images: np.ndarray = field(repr=False)

    @property
    def identity_mean(self) -> float:
        return float(np.mean(self.identity))

    @property
    def style_mean(self) -> float:
        return float(np.mean(self.style))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "adapters": self.adapters,
            "seeds": self.seeds,
            "identity_mean": self.identity_mean,
            "style_mean": self.style_mean,
            "per_image": [{"seed": s, "identity_score": i, "style_score": t}
                          for s, i, t in zip(self.seeds, self.identity, self.style)],
        }


@dataclass
class FidelityReport:
    study: str
    cells: list[CellResult]
    prompt: str
    negative_prompt: str
    sampler: dict
    extra: dict = field(default_factory=dict)

    def cell(self, name: str) -> CellResult:
        for c in self.cells:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "study": self.study,
            "prompt": self.prompt,
            "negative_prompt": self.negative_prompt,
            "sampler": self.sampler,
            "cells": [c.to_dict() for c in self.cells],
            **self.extra,
        }

    def ranking(self, key: str = "identity_mean") -> list[str]:
        return [c.name for c in sorted(self.cells, key=lambda c: -getattr(c, key))]

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        """``<study>.json``, one ``<study>_<cell>.png`` row per cell, and ``<study>.png`` with all rows stacked."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        rows = []
        for c in self.cells:
            row = np.concatenate(list(c.images), axis=2)
            rows.append(row)
            paths[c.name] = save_png(out / f"{self.study}_{c.name}.png", row)
        paths["grid"] = save_png(out / f"{self.study}.png", np.concatenate(rows, axis=1))
        paths["report"] = out / f"{self.study}.json"
        paths["report"].write_text(json.dumps(self.to_dict(), indent=2))
        return paths


def _quantize(images: np.ndarray) -> np.ndarray:
    # score what the PNG holds, so scores survive a save/load round trip
    return np.stack([from_uint8(to_uint8(im), np.float64) for im in images])


def run_cells(model: UNet, cells: Sequence[Cell], prompt: str, seeds: Sequence[int],
              template: IdentityTemplate, style_reference: StyleReference, study: str = "study",
              negative_prompt: str = "", sampler_config: SamplerConfig | None = None) -> FidelityReport:
    sampler_config = sampler_config or SamplerConfig()
    names = [c.name for c in cells]
    if len(set(names)) != len(names):
        raise ContractError(f"cell names must be unique, got {names}")
    results = []
    for c in cells:
        images = _quantize(sample(model, c.adapters, prompt, negative_prompt, sampler_config, seeds=seeds))
        ids = [identity_score(im, template) for im in images]
        sts = [style_reference.score(im) for im in images]
        results.append(CellResult(c.name, c.provenance(), [int(s) for s in seeds], ids, sts, images))
        log.info("%s/%s: identity %.3f style %.3f", study, c.name, results[-1].identity_mean, results[-1].style_mean)
    return FidelityReport(study, results, prompt, negative_prompt, sampler_config.to_dict())


def combination_cells(id_adapter: Adapter, style_full: Adapter | None, style_blockwise: Adapter,
                      id_blockwise: Adapter | None = None, baselines: bool = True) -> list[Cell]:
    """The three ID/style pairings plus, optionally, single-adapter baselines.

    When ``id_blockwise`` is omitted it is derived from ``id_adapter`` by
    masking out the style adapter's blocks at inference time.
    """
    if id_blockwise is None:
        keep = [b for b in ALL_BLOCKS if b not in style_blockwise.blocks]
        id_blockwise = filter_blocks(id_adapter, keep, name=f"{id_adapter.name}_blockwise")
    cells = []
    if style_full is not None:
        cells.append(Cell("id_full+style_full", [(id_adapter, 1.0), (style_full, 1.0)]))
    cells.append(Cell("id_full+style_blockwise", [(id_adapter, 1.0), (style_blockwise, 1.0)]))
    cells.append(Cell("id_blockwise+style_blockwise", [(id_blockwise, 1.0), (style_blockwise, 1.0)]))
    if baselines:
        cells.append(Cell("id_only", [(id_adapter, 1.0)]))
        cells.append(Cell("style_only", [(style_blockwise, 1.0)]))
    return cells


def run_combination_study(model: UNet, id_adapter: Adapter, style_full: Adapter | None, style_blockwise: Adapter,
                          prompt: str, seeds: Sequence[int], template: IdentityTemplate,
                          style_reference: StyleReference, id_blockwise: Adapter | None = None,
                          sampler_config: SamplerConfig | None = None, negative_prompt: str = "",
                          baselines: bool = True, study: str = "combination") -> FidelityReport:
    """Generate ``len(seeds)`` images per cell with the paired adapters active and score them.

    ``id_full+style_blockwise`` is the recommended pairing; which cell scores
    best is recorded in the report, not asserted.
    """
    for a in (id_adapter, style_full, style_blockwise, id_blockwise):
        if a is not None:
            check_trained(a)
    cells = combination_cells(id_adapter, style_full, style_blockwise, id_blockwise, baselines)
    report = run_cells(model, cells, prompt, seeds, template, style_reference, study, negative_prompt, sampler_config)
    report.extra["ranking"] = {"identity": report.ranking("identity_mean"), "style": report.ranking("style_mean")}
    return report


def run_block_group_ablation(model: UNet, id_adapter: Adapter, dataset: TrainDataset,
                             groups: Iterable[BlockGroup] = DEFAULT_GROUPS, train_config: TrainConfig | None = None,
                             rank: int = 4, kind: str = "locon", prompt: str = "", seeds: Sequence[int] = range(8),
                             template: IdentityTemplate | None = None, style_reference: StyleReference | None = None,
                             sampler_config: SamplerConfig | None = None, seed: int = 0,
                             study: str = "blocks") -> tuple[FidelityReport, dict[str, Adapter]]:
    """Train one fresh style adapter per group (nonzero rank only there) and score it next to ``id_adapter``."""
    groups = list(groups)
    check_disjoint(groups)
    if template is None or style_reference is None:
        raise ContractError("block-group ablation needs an identity template and a style reference set")
    check_trained(id_adapter)
    train_config = train_config or TrainConfig()
    trained: dict[str, Adapter] = {}
    for i, g in enumerate(groups):
        policy = BlockRankPolicy.only(g.blocks, rank, kind)
        adapter = inject(model, policy, seed=seed + i, name=f"style_{g.name}", trigger_token=dataset.trigger)
        try:
            train_adapter(model, adapter, dataset, train_config)
        finally:
            detach(model, adapter)
        trained[g.name] = adapter
    cells = [Cell(g.name, [(id_adapter, 1.0), (trained[g.name], 1.0)]) for g in groups]
    report = run_cells(model, cells, prompt, seeds, template, style_reference, study, "", sampler_config)
    report.extra["groups"] = [g.to_dict() for g in groups]
    return report, trained
