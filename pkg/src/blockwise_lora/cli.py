"""``bwla``: dataset prep, training, generation, adapter tooling and the two studies.

Every path argument is resolved against ``--workdir``. Failures print one
JSON line on stderr, ``{"error": <code>, "exit": <status>, "message": ...}``.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .adapters import BlockRankPolicy, detach, filter_blocks, inject, merge
from .config import AdapterRef, ExperimentConfig
from .container import load_adapter, load_model, read_file, save_adapter, save_model
from .data import (ID_CLASS, ID_TRIGGER, STYLE_CLASS, STYLE_TRIGGER, generic_corpus, identity_dataset,
                   identity_template, load_dataset, save_dataset, style_dataset, style_images,
                   synthetic_vocabulary)
from .errors import BlockLoraError, ConfigError, ContractError
from .metrics import StyleReference
from .sampler import SamplerConfig, sample, save_png, sidecar_record
from .studies import DEFAULT_GROUPS, BlockGroup, run_block_group_ablation, run_combination_study
from .train import TrainConfig, build_reg_images, pretrain_base, train_adapter
from .unet import UNet, UNetConfig, build_unet, fingerprint, parse_blocks

log = logging.getLogger("blockwise_lora")

STYLE_REFERENCE_SEED = 999


class UsageError(ContractError):
    code = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- helpers


class Context:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.workdir = Path(args.workdir)
        self.config = ExperimentConfig.load(self.path(args.config)) if getattr(args, "config", None) else ExperimentConfig()

    def path(self, p: str | os.PathLike) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.workdir / p

    def existing(self, p: str | os.PathLike) -> Path:
        full = self.path(p)
        if not full.exists():
            raise ContractError(f"no such file: {full}")
        return full

    def output(self, p: str | os.PathLike) -> Path:
        full = self.path(p)
        full.parent.mkdir(parents=True, exist_ok=True)
        return full


def _seeds(text: str | None, count: int | None, seed: int) -> list[int]:
    if text:
        try:
            return [int(s) for s in text.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"--seeds must be comma-separated integers, got {text!r}") from None
    return list(range(seed, seed + (count or 1)))


def _sampler_config(ctx: Context) -> SamplerConfig:
    a = ctx.args
    cfg = SamplerConfig.from_dict(ctx.config.sampler.to_dict())
    # study-blocks spends --steps on training and takes --sample-steps for the sampler
    steps = a.sample_steps if hasattr(a, "sample_steps") else getattr(a, "steps", None)
    if steps is not None:
        cfg.steps = steps
    if getattr(a, "cfg", None) is not None:
        cfg.cfg_scale = a.cfg
    cfg.seed = a.seed
    cfg.validate()
    return cfg


def _train_config(ctx: Context) -> TrainConfig:
    a = ctx.args
    cfg = TrainConfig.from_dict(ctx.config.train.to_dict())
    for flag, key in (("steps", "steps"), ("batch_size", "batch_size"), ("lr", "learning_rate"),
                      ("prior_weight", "prior_weight")):
        value = getattr(a, flag, None)
        if value is not None:
            setattr(cfg, key, value)
    cfg.seed = a.seed
    cfg.validate()
    return cfg


def _policy(ctx: Context) -> BlockRankPolicy:
    a = ctx.args
    policy = ctx.config.policy if a.config else BlockRankPolicy.full(a.rank or 4, a.kind or "locon")
    if a.blocks:
        policy = BlockRankPolicy.only(parse_blocks(a.blocks), a.rank or 4, a.kind or policy.kind)
    elif a.rank is not None or a.kind is not None:
        rank = a.rank if a.rank is not None else max(policy.ranks.values())
        policy = BlockRankPolicy({b: (rank if r else 0) for b, r in policy.ranks.items()}, kind=a.kind or policy.kind)
    return policy


def _adapters(ctx: Context, refs: Sequence[str]) -> list:
    out = []
    for ref in list(ctx.config.adapters) + [AdapterRef.parse(r) for r in refs or []]:
        out.append((load_adapter(ctx.existing(ref.path)), ref.strength))
    return out


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


# --------------------------------------------------------------------------- subcommands


def cmd_init_model(ctx: Context) -> int:
    a = ctx.args
    cfg = UNetConfig.from_dict(ctx.config.model.to_dict())
    if a.base_channels is not None:
        cfg.base_channels = a.base_channels
        cfg.validate()
    model = build_unet(cfg, seed=a.seed, vocabulary=synthetic_vocabulary())
    losses = []
    if a.pretrain_steps:
        images, captions = generic_corpus(a.corpus_size, cfg.image_size, seed=a.seed)
        losses = pretrain_base(model, images, captions, a.pretrain_steps, batch_size=a.batch_size,
                               learning_rate=a.lr, seed=a.seed)
    out = ctx.output(a.out)
    provenance = {"command": "init-model", "seed": a.seed, "pretrain_steps": a.pretrain_steps,
                  "corpus_size": a.corpus_size, "batch_size": a.batch_size, "learning_rate": a.lr}
    save_model(model, out, provenance)
    _emit({"model": str(out), "fingerprint": fingerprint(model), "parameters": sum(p.data.size for p in model.parameters()),
           "final_loss": float(np.mean(losses[-20:])) if losses else None})
    return 0


def cmd_make_dataset(ctx: Context) -> int:
    a = ctx.args
    if a.kind == "identity":
        dataset, _ = identity_dataset(a.count, a.size, seed=a.seed, repeats=a.repeats)
    else:
        dataset = style_dataset(a.count, a.size, seed=a.seed, repeats=a.repeats, style=a.style)
    out = save_dataset(dataset, ctx.output(a.out))
    _write_json(out / "dataset.json", {"kind": a.kind, "count": a.count, "size": a.size, "seed": a.seed,
                                       "repeats": a.repeats, "style": a.style, "trigger": dataset.trigger})
    _emit({"dataset": str(out), "images": a.count, "trigger": dataset.trigger})
    return 0


def cmd_make_reg(ctx: Context) -> int:
    a = ctx.args
    model = load_model(ctx.existing(a.model))
    root = ctx.existing(a.dataset)
    dataset = load_dataset(root)
    caption = a.caption or (ID_CLASS if dataset.trigger == ID_TRIGGER else STYLE_CLASS)
    cfg = _sampler_config(ctx)
    seeds = list(range(a.seed, a.seed + a.count))
    images, captions = build_reg_images(model, caption, a.count, cfg, seeds)
    save_dataset(dataset.with_regularization(images, captions), root)
    _write_json(root / "reg.json", {"caption": caption, "count": a.count, "seeds": seeds, "sampler": cfg.to_dict(),
                                    "model_fingerprint": fingerprint(model)})
    _emit({"dataset": str(root), "reg_images": a.count, "caption": caption})
    return 0


def cmd_train(ctx: Context) -> int:
    a = ctx.args
    model = load_model(ctx.existing(a.model))
    dataset = load_dataset(ctx.existing(a.dataset or ctx.config.dataset or ""), repeats=a.repeats)
    cfg = _train_config(ctx)
    policy = _policy(ctx)
    name = a.name or Path(a.out).stem
    adapter = inject(model, policy, seed=a.seed, name=name, trigger_token=dataset.trigger)
    result = train_adapter(model, adapter, dataset, cfg)
    detach(model, adapter)
    resolved = ExperimentConfig(model=model.config, policy=policy, train=cfg, dataset=str(a.dataset))
    out = ctx.output(a.out)
    save_adapter(adapter, out, {"command": "train", "config": resolved.to_dict(), "seed": a.seed})
    _write_json(out.with_suffix(".losses.json"), {"losses": result.losses, "config": resolved.to_dict()})
    _emit({"adapter": str(out), "steps": cfg.steps, "first20": float(np.mean(result.losses[:20])) if result.losses else None,
           "last20": float(np.mean(result.losses[-20:])) if result.losses else None, "seconds": round(result.seconds, 2)})
    return 0


def cmd_generate(ctx: Context) -> int:
    a = ctx.args
    model = load_model(ctx.existing(a.model))
    adapters = _adapters(ctx, a.adapter)
    cfg = _sampler_config(ctx)
    prompt = a.prompt if a.prompt is not None else ctx.config.prompt
    negative = a.negative_prompt if a.negative_prompt is not None else ctx.config.negative_prompt
    seeds = _seeds(a.seeds, a.num, a.seed)
    images = sample(model, adapters, prompt, negative, cfg, seeds=seeds)
    out_dir = ctx.path(a.out)
    written = []
    for seed, image in zip(seeds, images):
        record = sidecar_record(cfg, adapters, prompt, negative, seed)
        written.append(str(save_png(out_dir / f"{a.prefix}_{seed:05d}.png", image, record)))
    _emit({"images": written})
    return 0


def _describe(path: Path) -> dict:
    meta, tensors = read_file(path)
    if meta.get("kind") == "base-model":
        return {"name": meta.get("name"), "kind": "base-model", "fingerprint": meta.get("fingerprint"),
                "parameters": int(sum(t[2].size for t in tensors)), "unet_config": meta.get("unet_config")}
    from .container import adapter_from_container

    adapter = adapter_from_container(meta, tensors)
    return {
        "name": adapter.name,
        "kind": adapter.policy.kind,
        "trigger_token": adapter.trigger_token,
        "ranks": adapter.policy.to_dict()["ranks"],
        "alpha": adapter.policy.to_dict()["alpha"],
        "parameters": adapter.parameter_count(),
        "fingerprint": adapter.base_model_fingerprint,
    }


def cmd_inspect(ctx: Context) -> int:
    info = _describe(ctx.existing(ctx.args.file))
    if ctx.args.json:
        _emit(info)
        return 0
    print(f"name: {info['name']}")
    print(f"kind: {info['kind']}")
    if info["kind"] != "base-model":
        print(f"trigger: {info['trigger_token']}")
        for block, rank in info["ranks"].items():
            print(f"  {block:<5} rank={rank} alpha={info['alpha'][block]:g}")
    print(f"parameters: {info['parameters']}")
    print(f"fingerprint: {info['fingerprint']}")
    return 0


def cmd_filter(ctx: Context) -> int:
    a = ctx.args
    adapter = load_adapter(ctx.existing(a.adapter))
    kept = filter_blocks(adapter, parse_blocks(a.keep), name=a.name)
    out = ctx.output(a.out)
    save_adapter(kept, out, {"command": "filter", "source": str(a.adapter), "keep": a.keep})
    _emit({"adapter": str(out), "blocks": sorted(b.name for b in kept.blocks), "parameters": kept.parameter_count()})
    return 0


def cmd_merge(ctx: Context) -> int:
    a = ctx.args
    model = load_model(ctx.existing(a.model))
    adapter = load_adapter(ctx.existing(a.adapter))
    merged = merge(model, adapter, a.strength)
    out = ctx.output(a.out)
    save_model(merged, out, {"command": "merge", "base": fingerprint(model), "adapter": adapter.name,
                             "strength": a.strength})
    _emit({"model": str(out), "fingerprint": fingerprint(merged)})
    return 0


def _study_inputs(ctx: Context, model: UNet):
    template = identity_template(model.config.image_size)
    ref_images, _ = style_images(ctx.args.style_refs, model.config.image_size, seed=STYLE_REFERENCE_SEED,
                                 style=ctx.args.style)
    return template, StyleReference(ref_images)


def cmd_study_combination(ctx: Context) -> int:
    a = ctx.args
    model = load_model(ctx.existing(a.model))
    template, ref = _study_inputs(ctx, model)
    id_adapter = load_adapter(ctx.existing(a.id_adapter))
    style_full = load_adapter(ctx.existing(a.style_full)) if a.style_full else None
    style_block = load_adapter(ctx.existing(a.style_blockwise))
    id_block = load_adapter(ctx.existing(a.id_blockwise)) if a.id_blockwise else None
    seeds = _seeds(a.seeds, a.num, a.seed)
    report = run_combination_study(model, id_adapter, style_full, style_block, a.prompt, seeds, template, ref,
                                   id_blockwise=id_block, sampler_config=_sampler_config(ctx), study=a.study)
    report.extra["command"] = {"argv": ctx.args.argv, "seed": a.seed}
    paths = report.write(ctx.path(a.out))
    _emit({"report": str(paths["report"]), "grid": str(paths["grid"]),
           "cells": {c.name: {"identity": c.identity_mean, "style": c.style_mean} for c in report.cells}})
    return 0


def _parse_groups(text: str | None) -> list[BlockGroup]:
    """``upper=IN0,OUT3;middle=IN1,OUT2`` or None for the three default groups."""
    if not text:
        return list(DEFAULT_GROUPS)
    groups = []
    for part in text.split(";"):
        name, sep, blocks = part.partition("=")
        if not sep:
            raise UsageError(f"group {part!r} must look like name=BLOCK,BLOCK")
        groups.append(BlockGroup(name.strip(), frozenset(parse_blocks(blocks) if blocks.strip() else [])))
    return groups


def cmd_study_blocks(ctx: Context) -> int:
    a = ctx.args
    model = load_model(ctx.existing(a.model))
    template, ref = _study_inputs(ctx, model)
    id_adapter = load_adapter(ctx.existing(a.id_adapter))
    dataset = load_dataset(ctx.existing(a.dataset), repeats=a.repeats)
    seeds = _seeds(a.seeds, a.num, a.seed)
    report, trained = run_block_group_ablation(
        model, id_adapter, dataset, _parse_groups(a.groups), _train_config(ctx), rank=a.rank or 4,
        kind=a.kind or "locon", prompt=a.prompt, seeds=seeds, template=template, style_reference=ref,
        sampler_config=_sampler_config(ctx), seed=a.seed, study=a.study)
    out = ctx.path(a.out)
    for name, adapter in trained.items():
        save_adapter(adapter, ctx.output(out / f"{a.study}_{name}.bwla"), {"command": "study-blocks", "group": name})
    report.extra["command"] = {"argv": ctx.args.argv, "seed": a.seed}
    paths = report.write(out)
    _emit({"report": str(paths["report"]), "grid": str(paths["grid"]),
           "cells": {c.name: {"identity": c.identity_mean, "style": c.style_mean} for c in report.cells}})
    return 0


# --------------------------------------------------------------------------- parser


def _add_sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, help="sampler steps (default 25)")
    p.add_argument("--cfg", type=float, help="classifier-free guidance scale (default 7.0)")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, help="training steps (desk default 2000)")
    p.add_argument("--batch-size", type=int, help="instance batch size (default 2)")
    p.add_argument("--lr", type=float, help="AdamW learning rate (default 1e-3)")
    p.add_argument("--prior-weight", type=float, help="weight of the regularization loss (default 1.0)")
    p.add_argument("--repeats", type=int, default=25, help="repeats per instance image (default 25)")
    p.add_argument("--rank", type=int, help="rank for every active block (default 4)")
    p.add_argument("--kind", choices=("lora", "locon"), help="adapter kind (default locon)")


def _add_study_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--prompt", default=f"{ID_TRIGGER}, {STYLE_TRIGGER}, {ID_CLASS}", help="prompt for every cell")
    p.add_argument("--seeds", help="comma-separated seed list (overrides --num)")
    p.add_argument("--num", type=int, default=8, help="seeds per cell, counted from --seed (default 8)")
    p.add_argument("--style", default="sunset", help="style of the held-out reference set (default sunset)")
    p.add_argument("--style-refs", type=int, default=16, help="size of the held-out style reference set")
    p.add_argument("--study", help="study name used in output file names")
    p.add_argument("--out", default="study", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bwla", description="Block-wise LoRA/LoCon for a miniature diffusion U-Net.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--workdir", default=".", help="directory every relative path is resolved against")
    common.add_argument("--seed", type=int, default=0, help="seed governing all randomness (default 0)")
    common.add_argument("--config", help="ExperimentConfig JSON; flags override its scalar fields")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init-model", parents=[common], help="build (and optionally pre-train) a base model")
    p.add_argument("--out", default="base.bwla", help="output model file")
    p.add_argument("--base-channels", type=int, help="override UNetConfig.base_channels")
    p.add_argument("--pretrain-steps", type=int, default=0, help="full-model steps on the generic corpus")
    p.add_argument("--corpus-size", type=int, default=256, help="generic corpus size")
    p.add_argument("--batch-size", type=int, default=8, help="pre-training batch size")
    p.add_argument("--lr", type=float, default=1e-3, help="pre-training learning rate")
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("make-dataset", parents=[common], help="write a synthetic identity or style dataset")
    p.add_argument("--kind", choices=("identity", "style"), required=True, help="which synthetic set")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--count", type=int, default=8, help="instance images")
    p.add_argument("--size", type=int, default=32, help="image size in pixels")
    p.add_argument("--repeats", type=int, default=25, help="repeats recorded in dataset.json")
    p.add_argument("--style", default="sunset", help="style transform for --kind style")
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("make-reg", parents=[common], help="add base-model regularization images to a dataset")
    p.add_argument("--model", required=True, help="base model file")
    p.add_argument("--dataset", required=True, help="dataset directory (reg/ is rewritten)")
    p.add_argument("--caption", help="class caption (default: class of the dataset's trigger)")
    p.add_argument("--count", type=int, default=50, help="number of regularization images (default 50)")
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_make_reg)

    p = sub.add_parser("train", parents=[common], help="train an adapter on a dataset")
    p.add_argument("--model", required=True, help="base model file")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--out", required=True, help="output adapter file")
    p.add_argument("--name", help="adapter name (default: output file stem)")
    p.add_argument("--blocks", help="comma-separated blocks with nonzero rank, e.g. IN0,OUT3 (default all)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[common], help="sample images with adapters active")
    p.add_argument("--model", required=True, help="base model file")
    p.add_argument("--adapter", action="append", default=[], help="adapter file, optionally path:strength; repeatable")
    p.add_argument("--prompt", help="caption")
    p.add_argument("--negative-prompt", help="negative caption (default empty)")
    p.add_argument("--seeds", help="comma-separated seed list (overrides --num)")
    p.add_argument("--num", type=int, default=1, help="images, seeded from --seed upwards")
    p.add_argument("--out", default="images", help="output directory")
    p.add_argument("--prefix", default="sample", help="file name prefix")
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("inspect", parents=[common], help="print an adapter's or model's header")
    p.add_argument("file", help="adapter or model file")
    p.add_argument("--json", action="store_true", help="print one JSON object instead of text")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("filter", parents=[common], help="keep only some blocks of an adapter")
    p.add_argument("adapter", help="adapter file")
    p.add_argument("--keep", required=True, help="comma-separated blocks to keep, e.g. IN0,OUT3")
    p.add_argument("--out", required=True, help="output adapter file")
    p.add_argument("--name", help="name of the filtered adapter")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("merge", parents=[common], help="fold an adapter into the base weights")
    p.add_argument("--model", required=True, help="base model file")
    p.add_argument("--adapter", required=True, help="adapter file")
    p.add_argument("--strength", type=float, default=1.0, help="adapter strength (default 1.0)")
    p.add_argument("--out", required=True, help="output model file")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("study-combination", parents=[common], help="score ID/style adapter pairings")
    p.add_argument("--model", required=True, help="base model file")
    p.add_argument("--id-adapter", required=True, help="full-block identity adapter")
    p.add_argument("--style-full", help="full-block style adapter (optional cell)")
    p.add_argument("--style-blockwise", required=True, help="block-wise style adapter")
    p.add_argument("--id-blockwise", help="block-wise identity adapter (default: ID adapter with style blocks masked)")
    _add_study_flags(p)
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_study_combination, study_default="combination")

    p = sub.add_parser("study-blocks", parents=[common], help="train and score one style adapter per block group")
    p.add_argument("--model", required=True, help="base model file")
    p.add_argument("--id-adapter", required=True, help="trained identity adapter")
    p.add_argument("--dataset", required=True, help="style dataset directory")
    p.add_argument("--groups", help="custom groups name=B,B;name=B (default upper, middle, bottom)")
    _add_study_flags(p)
    _add_train_flags(p)
    p.add_argument("--sample-steps", type=int, dest="sample_steps", help="sampler steps (default 25)")
    p.add_argument("--cfg", type=float, help="classifier-free guidance scale (default 7.0)")
    p.set_defaults(func=cmd_study_blocks, study_default="blocks")
    return parser


@contextlib.contextmanager
def _thread_limit():
    threads = os.environ.get("BWLA_THREADS")
    if not threads:
        yield
        return
    try:
        n = int(threads)
    except ValueError:
        raise UsageError(f"BWLA_THREADS must be an integer, got {threads!r}") from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        args.argv = argv
        if getattr(args, "study", "unset") is None:
            args.study = args.study_default
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        with _thread_limit():
            return args.func(Context(args))
    except BlockLoraError as exc:
        print(json.dumps({"error": exc.code, "exit": exc.exit_status, "message": str(exc)}), file=sys.stderr)
        return exc.exit_status
    except (OSError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": "io", "exit": 1, "message": str(exc)}), file=sys.stderr)
        return 1


def run() -> None:
    """Console-script entry point."""
    sys.exit(main())


if __name__ == "__main__":
    run()
