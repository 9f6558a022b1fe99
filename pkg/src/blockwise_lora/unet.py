"""A miniature conditional denoising U-Net addressed by named blocks.

Layout (default config, 32x32 input)::

    IN0 (32) -> IN1 (16) -> IN2 (8) -> IN3 (4) -> MID (4)
    OUT0 (4) -> OUT1 (8) -> OUT2 (16) -> OUT3 (32)

IN blocks downsample after their resblocks (IN3 does not); OUT blocks
concatenate the skip of the paired IN block (OUTj <- IN(3-j)) at entry and
upsample after their resblocks (OUT3 does not). Time and condition
embeddings live under the ``shared.`` prefix and are never adapted.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from functools import total_ordering
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Parameter, Tensor
from .errors import ConfigError, ContractError, ShapeError


@total_ordering
class BlockId(Enum):
    IN0 = 0
    IN1 = 1
    IN2 = 2
    IN3 = 3
    MID = 4
    OUT0 = 5
    OUT1 = 6
    OUT2 = 7
    OUT3 = 8

    def __lt__(self, other):
        if not isinstance(other, BlockId):
            return NotImplemented
        return self.value < other.value

    @classmethod
    def parse(cls, name: str) -> "BlockId":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ConfigError(f"unknown block {name!r}; expected one of {[b.name for b in cls]}") from None

    @classmethod
    def from_path(cls, path: str) -> "BlockId | None":
        head = path.split(".", 1)[0]
        return cls.__members__.get(head)


ALL_BLOCKS: tuple[BlockId, ...] = tuple(BlockId)
IN_BLOCKS = (BlockId.IN0, BlockId.IN1, BlockId.IN2, BlockId.IN3)
OUT_BLOCKS = (BlockId.OUT0, BlockId.OUT1, BlockId.OUT2, BlockId.OUT3)
SHARED_PREFIX = "shared"


def skip_partner(block: BlockId) -> BlockId:
    """INi <-> OUT(3-i)."""
    if block in IN_BLOCKS:
        return OUT_BLOCKS[3 - block.value]
    if block in OUT_BLOCKS:
        return IN_BLOCKS[3 - (block.value - BlockId.OUT0.value)]
    raise ContractError("MID has no skip partner")


def parse_blocks(spec: str | Sequence[str]) -> list[BlockId]:
    if isinstance(spec, str):
        spec = [s for s in spec.split(",") if s.strip()]
    return sorted({BlockId.parse(s) for s in spec})


@dataclass
class UNetConfig:
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 32
    channel_multipliers: list[int] = field(default_factory=lambda: [1, 2, 4, 4])
    resblocks_per_block: int = 2
    attention_blocks: list[str] = field(default_factory=lambda: ["IN1", "IN2", "MID", "OUT1", "OUT2"])
    cond_dim: int = 64
    time_embed_dim: int = 128
    max_tokens: int = 16
    num_train_timesteps: int = 1000
    head_dim: int = 32
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma_data: float = 0.5
    precondition: bool = True

    def validate(self) -> None:
        if len(self.channel_multipliers) != 4:
            raise ConfigError(f"channel_multipliers must have length 4, got {len(self.channel_multipliers)}")
        if self.image_size <= 0 or self.image_size % 8:
            raise ConfigError(f"image_size must be divisible by 2^3 = 8, got {self.image_size}")
        if self.base_channels < 1 or any(m < 1 for m in self.channel_multipliers):
            raise ConfigError("channel counts must be positive")
        if self.resblocks_per_block < 1:
            raise ConfigError("resblocks_per_block must be >= 1")
        for name in self.attention_blocks:
            BlockId.parse(name)
        if self.cond_dim < 1 or self.time_embed_dim < 2 or self.max_tokens < 1:
            raise ConfigError("cond_dim, time_embed_dim and max_tokens must be positive")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError("betas must satisfy 0 < beta_start <= beta_end < 1")
        if self.sigma_data <= 0:
            raise ConfigError(f"sigma_data must be positive, got {self.sigma_data}")

    @property
    def attention_set(self) -> frozenset[BlockId]:
        return frozenset(BlockId.parse(b) for b in self.attention_blocks)

    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "UNetConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown UNetConfig keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class LayerEntry:
    path: str
    block: BlockId
    kind: str  # "attention-linear" | "conv"
    weight_shape: tuple[int, ...]


# --------------------------------------------------------------------------- layers


class Module:
    """Ordered container of parameters and child modules."""

    def __init__(self, path: str):
        self.path = path
        self._params: dict[str, Parameter] = {}
        self._children: dict[str, Module] = {}

    def param(self, key: str, data: np.ndarray) -> Parameter:
        p = Parameter(data, name=f"{self.path}.{key}", trainable=False)
        self._params[key] = p
        return p

    def child(self, key: str, module: "Module") -> "Module":
        self._children[key] = module
        return module

    def parameters(self) -> Iterator[Parameter]:
        yield from self._params.values()
        for c in self._children.values():
            yield from c.parameters()

    def modules(self) -> Iterator["Module"]:
        yield self
        for c in self._children.values():
            yield from c.modules()


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...], dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    kind = "attention-linear"

    def __init__(self, path: str, d_in: int, d_out: int, rng, dtype, bias: bool = True, adaptable: bool = False):
        super().__init__(path)
        self.weight = self.param("weight", _uniform(rng, d_in, (d_out, d_in), dtype))
        self.bias = self.param("bias", _uniform(rng, d_in, (d_out,), dtype)) if bias else None
        self.adaptable = adaptable
        self.adapters: list = []  # (LayerAdapter, strength)

    def base_forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.base_forward(x)
        for la, strength in self.adapters:
            if strength != 0.0:
                h = ops.add(h, la.apply(x, strength, self))
        return h


class Conv2d(Module):
    kind = "conv"

    def __init__(self, path, c_in, c_out, k, rng, dtype, stride=1, padding=None, adaptable=False):
        super().__init__(path)
        fan_in = c_in * k * k
        self.weight = self.param("weight", _uniform(rng, fan_in, (c_out, c_in, k, k), dtype))
        self.bias = self.param("bias", _uniform(rng, fan_in, (c_out,), dtype))
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.adaptable = adaptable
        self.adapters: list = []

    def base_forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.base_forward(x)
        for la, strength in self.adapters:
            if strength != 0.0:
                h = ops.add(h, la.apply(x, strength, self))
        return h


class GroupNorm(Module):
    def __init__(self, path, channels, dtype, groups=8):
        super().__init__(path)
        self.groups = math.gcd(groups, channels)
        self.gamma = self.param("gamma", np.ones(channels, dtype=dtype))
        self.beta = self.param("beta", np.zeros(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.groups, self.gamma, self.beta)


class ResBlock(Module):
    def __init__(self, path, c_in, c_out, time_dim, rng, dtype):
        super().__init__(path)
        self.norm1 = self.child("norm1", GroupNorm(f"{path}.norm1", c_in, dtype))
        self.conv1 = self.child("conv1", Conv2d(f"{path}.conv1", c_in, c_out, 3, rng, dtype, adaptable=True))
        self.emb_proj = self.child("emb_proj", Linear(f"{path}.emb_proj", time_dim, c_out, rng, dtype))
        self.norm2 = self.child("norm2", GroupNorm(f"{path}.norm2", c_out, dtype))
        self.conv2 = self.child("conv2", Conv2d(f"{path}.conv2", c_out, c_out, 3, rng, dtype, adaptable=True))
        self.skip = None
        if c_in != c_out:
            self.skip = self.child("skip", Conv2d(f"{path}.skip", c_in, c_out, 1, rng, dtype))

    def __call__(self, x: Tensor, temb_act: Tensor) -> Tensor:
        h = self.conv1(ops.silu(self.norm1(x)))
        h = ops.add_channel(h, self.emb_proj(temb_act))
        h = self.conv2(ops.silu(self.norm2(h)))
        shortcut = self.skip(x) if self.skip is not None else x
        return ops.add(shortcut, h)


class MultiHeadAttention(Module):
    def __init__(self, path, dim, context_dim, head_dim, rng, dtype):
        super().__init__(path)
        self.heads = dim // head_dim if dim >= head_dim and dim % head_dim == 0 else 1
        self.to_q = self.child("to_q", Linear(f"{path}.to_q", dim, dim, rng, dtype, bias=False, adaptable=True))
        self.to_k = self.child("to_k", Linear(f"{path}.to_k", context_dim, dim, rng, dtype, bias=False, adaptable=True))
        self.to_v = self.child("to_v", Linear(f"{path}.to_v", context_dim, dim, rng, dtype, bias=False, adaptable=True))
        self.to_out = self.child("to_out", Linear(f"{path}.to_out", dim, dim, rng, dtype, bias=True, adaptable=True))

    def _split(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        h = self.heads
        if h == 1:
            return x
        return ops.reshape(ops.transpose(ops.reshape(x, (b, n, h, c // h)), (0, 2, 1, 3)), (b * h, n, c // h))

    def _merge(self, x: Tensor, b: int) -> Tensor:
        h = self.heads
        if h == 1:
            return x
        bh, n, d = x.shape
        return ops.reshape(ops.transpose(ops.reshape(x, (b, h, n, d)), (0, 2, 1, 3)), (b, n, h * d))

    def __call__(self, x: Tensor, context: Tensor) -> Tensor:
        b = x.shape[0]
        q = self._split(self.to_q(x))
        k = self._split(self.to_k(context))
        v = self._split(self.to_v(context))
        return self.to_out(self._merge(ops.attention(q, k, v), b))


class AttentionBlock(Module):
    """Group-norm, self-attention over pixels, then cross-attention onto the condition tokens."""

    def __init__(self, path, channels, cond_dim, head_dim, rng, dtype):
        super().__init__(path)
        self.norm = self.child("norm", GroupNorm(f"{path}.norm", channels, dtype))
        self.self_attn = self.child("self", MultiHeadAttention(f"{path}.self", channels, channels, head_dim, rng, dtype))
        self.cross_attn = self.child("cross", MultiHeadAttention(f"{path}.cross", channels, cond_dim, head_dim, rng, dtype))

    def __call__(self, h: Tensor, context: Tensor) -> Tensor:
        b, c, hh, ww = h.shape
        tokens = ops.transpose(ops.reshape(self.norm(h), (b, c, hh * ww)), (0, 2, 1))
        s = self.self_attn(tokens, tokens)
        x = self.cross_attn(ops.add(tokens, s), context)
        delta = ops.add(s, x)
        delta = ops.reshape(ops.transpose(delta, (0, 2, 1)), (b, c, hh, ww))
        return ops.add(h, delta)


class UNetBlock(Module):
    def __init__(self, block: BlockId, c_in: int, c_out: int, config: UNetConfig, rng, dtype,
                 skip_channels: int = 0, sampling: str | None = None):
        super().__init__(block.name)
        self.block = block
        self.skip_channels = skip_channels
        self.conv_in = self.norm_out = self.conv_out = None
        if block is BlockId.IN0:
            self.conv_in = self.child("conv_in", Conv2d("IN0.conv_in", config.in_channels, c_in, 3, rng, dtype))
        self.res = []
        for i in range(config.resblocks_per_block):
            cin = c_in + skip_channels if i == 0 else c_out
            self.res.append(self.child(f"res{i}", ResBlock(f"{block.name}.res{i}", cin, c_out, config.time_embed_dim, rng, dtype)))
        self.attn = None
        if block in config.attention_set:
            self.attn = self.child("attn", AttentionBlock(f"{block.name}.attn", c_out, config.cond_dim, config.head_dim, rng, dtype))
        self.sampling = sampling
        self.down = self.up = None
        if sampling == "down":
            self.down = self.child("down", Conv2d(f"{block.name}.down", c_out, c_out, 3, rng, dtype, stride=2, padding=1, adaptable=True))
        elif sampling == "up":
            self.up = self.child("up", Conv2d(f"{block.name}.up", c_out, c_out, 3, rng, dtype, adaptable=True))
        if block is BlockId.OUT3:
            self.norm_out = self.child("norm_out", GroupNorm("OUT3.norm_out", c_out, dtype))
            self.conv_out = self.child("conv_out", Conv2d("OUT3.conv_out", c_out, config.in_channels, 3, rng, dtype))
        self.out_channels = c_out

    def __call__(self, h: Tensor, temb_act: Tensor, context: Tensor, skip: Tensor | None = None):
        """Returns (output, skip_feature). skip_feature is the pre-downsample map of IN blocks."""
        if self.conv_in is not None:
            h = self.conv_in(h)
        if self.skip_channels:
            if skip is None or skip.shape[1] != self.skip_channels:
                raise ShapeError(f"{self.block.name}: expected skip with {self.skip_channels} channels")
            h = ops.concat([h, skip], axis=1)
        for i, res in enumerate(self.res):
            h = res(h, temb_act)
            if i == 0 and self.attn is not None:
                h = self.attn(h, context)
        feature = h
        if self.down is not None:
            h = self.down(h)
        if self.up is not None:
            h = self.up(ops.upsample_nearest(h, 2))
        if self.conv_out is not None:
            h = self.conv_out(ops.silu(self.norm_out(h)))
        return h, feature


# --------------------------------------------------------------------------- conditioning


class Conditioning(NamedTuple):
    embeddings: np.ndarray  # (B, max_tokens, cond_dim)
    unconditional: np.ndarray  # (B,) bool
    lengths: np.ndarray  # (B,) non-padding token count


UNK = "<unk>"


def tokenize(caption: str) -> list[str]:
    """Tag captions: split on commas, trim whitespace, drop empties."""
    return [tok.strip() for tok in caption.split(",") if tok.strip()]


class ConditionEncoder(Module):
    """Frozen token-embedding table standing in for a text encoder."""

    def __init__(self, vocabulary: Sequence[str], cond_dim: int, max_tokens: int, rng, dtype):
        super().__init__(f"{SHARED_PREFIX}.cond")
        vocab = [UNK] + [t for t in dict.fromkeys(vocabulary) if t != UNK]
        self.vocabulary = {tok: i for i, tok in enumerate(vocab)}
        self.max_tokens = max_tokens
        self.embedding = self.param("embedding", rng.standard_normal((len(vocab), cond_dim)).astype(dtype))
        self.null = self.param("null", rng.standard_normal(cond_dim).astype(dtype))

    def token_ids(self, caption: str) -> list[int]:
        return [self.vocabulary.get(tok, 0) for tok in tokenize(caption)][: self.max_tokens]

    def encode(self, captions: Sequence[str]) -> Conditioning:
        table = self.embedding.data
        dim = table.shape[1]
        out = np.zeros((len(captions), self.max_tokens, dim), dtype=table.dtype)
        uncond = np.zeros(len(captions), dtype=bool)
        lengths = np.zeros(len(captions), dtype=np.int64)
        for i, caption in enumerate(captions):
            ids = self.token_ids(caption)
            if not ids:
                out[i] = self.null.data
                uncond[i] = True
                continue
            out[i, : len(ids)] = table[ids]
            lengths[i] = len(ids)
        return Conditioning(out, uncond, lengths)


# --------------------------------------------------------------------------- model


class UNet(Module):
    def __init__(self, config: UNetConfig, seed: int, vocabulary: Sequence[str], dtype=np.float32):
        super().__init__("")
        config.validate()
        self.config = config
        self.seed = seed
        dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        ch = config.channels()
        base = config.base_channels
        self.time_lin1 = self.child("time1", Linear(f"{SHARED_PREFIX}.time.lin1", base, config.time_embed_dim, rng, dtype))
        self.time_lin2 = self.child("time2", Linear(f"{SHARED_PREFIX}.time.lin2", config.time_embed_dim, config.time_embed_dim, rng, dtype))
        self.encoder = self.child("cond", ConditionEncoder(vocabulary, config.cond_dim, config.max_tokens, rng, dtype))

        self.blocks: dict[BlockId, UNetBlock] = {}
        prev = ch[0]
        for i, b in enumerate(IN_BLOCKS):
            blk = UNetBlock(b, prev, ch[i], config, rng, dtype, sampling="down" if i < 3 else None)
            self.blocks[b] = self.child(b.name, blk)
            prev = ch[i]
        self.blocks[BlockId.MID] = self.child("MID", UNetBlock(BlockId.MID, prev, ch[3], config, rng, dtype))
        prev = ch[3]
        for j, b in enumerate(OUT_BLOCKS):
            skip_ch = ch[3 - j]
            blk = UNetBlock(b, prev, ch[3 - j], config, rng, dtype, skip_channels=skip_ch, sampling="up" if j < 3 else None)
            self.blocks[b] = self.child(b.name, blk)
            prev = ch[3 - j]
        self.attached: list = []  # (Adapter, strength) in attach order
        betas = np.linspace(config.beta_start, config.beta_end, config.num_train_timesteps, dtype=np.float64)
        alpha_bars = np.cumprod(1.0 - betas)
        self._log_sigmas = 0.5 * np.log((1.0 - alpha_bars) / alpha_bars)

    # -- introspection -----------------------------------------------------
    @property
    def dtype(self) -> np.dtype:
        return self.encoder.embedding.dtype

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def layer(self, path: str) -> Linear | Conv2d:
        index = self.__dict__.get("_layer_index")
        if index is None:
            index = {m.path: m for m in self.modules() if isinstance(m, (Linear, Conv2d))}
            self._layer_index = index
        try:
            return index[path]
        except KeyError:
            raise ContractError(f"no layer at path {path!r}") from None

    def adaptable_modules(self) -> Iterator[Linear | Conv2d]:
        for m in self.modules():
            if isinstance(m, (Linear, Conv2d)) and m.adaptable:
                yield m

    def spatial_sizes(self) -> dict[BlockId, int]:
        s = self.config.image_size
        sizes = {}
        for i, b in enumerate(IN_BLOCKS):
            sizes[b] = s >> i
        sizes[BlockId.MID] = s >> 3
        for j, b in enumerate(OUT_BLOCKS):
            sizes[b] = s >> (3 - j)
        return sizes

    # -- forward -------------------------------------------------------------
    def time_features(self, t) -> Tensor:
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        emb = ops.timestep_embedding(t, self.config.base_channels, dtype=self.dtype)
        return ops.silu(self.time_lin2(ops.silu(self.time_lin1(emb))))

    def _check_inputs(self, x: Tensor, t, context: np.ndarray) -> np.ndarray:
        cfg = self.config
        expect = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expect:
            raise ContractError(f"predict_noise: x_t has shape {x.shape}, expected (B, {expect[0]}, {expect[1]}, {expect[2]})")
        if x.dtype != self.dtype:
            raise ContractError(f"predict_noise: x_t dtype {x.dtype} does not match model dtype {self.dtype}")
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        if t.shape[0] != x.shape[0]:
            raise ContractError(f"predict_noise: {t.shape[0]} timesteps for batch of {x.shape[0]}")
        if not np.all((t >= 0) & (t <= cfg.num_train_timesteps - 1)):
            raise ContractError(f"predict_noise: timesteps must lie in [0, {cfg.num_train_timesteps - 1}]")
        if context.shape != (x.shape[0], cfg.max_tokens, cfg.cond_dim):
            raise ContractError(f"predict_noise: condition shape {context.shape} does not match batch/encoder")
        return t

    def output_scales(self, t) -> tuple[np.ndarray, np.ndarray]:
        """(c_skip, c_out) per timestep, with eps_hat = c_skip * x_t + c_out * network(x_t).

        c_skip * x_t is E[eps | x_t] when the data are N(0, sigma_data^2), and
        c_out is the standard deviation of the remaining residual. The network
        thus only learns a unit-scale correction, and its errors no longer grow
        with sigma when converted to a denoised image.
        """
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        if not self.config.precondition:
            return np.zeros_like(t), np.ones_like(t)
        sigma = np.exp(np.interp(t, np.arange(self.config.num_train_timesteps), self._log_sigmas))
        sd2 = self.config.sigma_data ** 2
        c_skip = sigma * np.sqrt(1.0 + sigma * sigma) / (sd2 + sigma * sigma)
        c_out = self.config.sigma_data / np.sqrt(sd2 + sigma * sigma)
        return c_skip, c_out

    def predict_noise(self, x_t, t, cond, capture: dict | None = None) -> Tensor:
        """ε-prediction. ``capture`` (if given) receives each block's input and output."""
        x = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=self.dtype))
        context = cond.embeddings if isinstance(cond, Conditioning) else np.asarray(cond)
        t = self._check_inputs(x, t, context)
        ctx = Tensor(context.astype(self.dtype, copy=False))
        temb = self.time_features(t)
        h = x
        skips: dict[BlockId, Tensor] = {}
        for b in ALL_BLOCKS:
            blk = self.blocks[b]
            skip = skips.get(skip_partner(b)) if b in OUT_BLOCKS else None
            if capture is not None:
                capture[b] = {"input": h, "skip": skip, "temb": temb, "context": ctx}
            h, feature = blk(h, temb, ctx, skip)
            if b in IN_BLOCKS:
                skips[b] = feature
            if capture is not None:
                capture[b]["output"] = h
        c_skip, c_out = self.output_scales(t)
        if not self.config.precondition:
            return h
        shape = (-1,) + (1,) * (x.ndim - 1)
        scale = np.broadcast_to(c_out.reshape(shape), h.shape).astype(self.dtype)
        return ops.add(ops.mul(h, Tensor(scale)), Tensor((c_skip.reshape(shape) * x.data).astype(self.dtype)))

    __call__ = predict_noise

    # -- copies ----------------------------------------------------------------
    def clone(self, dtype=None, keep_adapters: bool = False) -> "UNet":
        attached = self.attached
        hooks = {m.path: m.adapters for m in self.adaptable_modules()}
        if not keep_adapters:
            self.attached = []
            for m in self.adaptable_modules():
                m.adapters = []
        try:
            twin = copy.deepcopy(self)
        finally:
            self.attached = attached
            for m in self.adaptable_modules():
                m.adapters = hooks[m.path]
        if dtype is not None:
            for p in twin.parameters():
                p.data = p.data.astype(dtype)
        return twin

    def astype(self, dtype) -> "UNet":
        return self.clone(dtype=dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))[:3]
            extra = sorted(set(state) - set(params))[:3]
            raise ContractError(f"state dict mismatch: missing {missing}, unexpected {extra}")
        for name, arr in state.items():
            p = params[name]
            if tuple(arr.shape) != p.shape:
                raise ContractError(f"state dict: {name} has shape {arr.shape}, expected {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)


def build_unet(config: UNetConfig | None = None, seed: int = 0, vocabulary: Sequence[str] = (), dtype=np.float32) -> UNet:
    return UNet(config or UNetConfig(), seed, vocabulary, dtype)


def predict_noise(model: UNet, x_t, t, cond) -> Tensor:
    return model.predict_noise(x_t, t, cond)


def encode_condition(model: UNet, captions: Sequence[str]) -> Conditioning:
    return model.encoder.encode(captions)


def list_adaptable_layers(model: UNet) -> list[LayerEntry]:
    entries = []
    for m in model.adaptable_modules():
        block = BlockId.from_path(m.path)
        entries.append(LayerEntry(m.path, block, m.kind, tuple(m.weight.shape)))
    return entries


def block_of(name: str) -> BlockId | None:
    """Block owning a parameter or layer path; None for shared embeddings."""
    return BlockId.from_path(name)


def fingerprint(model: UNet) -> str:
    """sha256 over base parameter names, shapes and little-endian f32 bytes."""
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters().items()):
        h.update(name.encode())
        h.update(repr(tuple(p.shape)).encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return h.hexdigest()[:32]
