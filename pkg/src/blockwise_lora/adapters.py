"""Block-wise low-rank adapters (LoRA for attention projections, LoCon for convs).

A layer in a block with rank r > 0 computes

    h = W0 x + sum_i  w_i * (alpha_i / r_i) * B_i A_i x

and a layer in a rank-0 block has no adapter at all, so it runs exactly the
frozen base path. For convs the factor pair is a k x k conv ``B`` into r
channels followed by a 1 x 1 conv ``A`` back to c_out channels.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Parameter, Tensor
from .errors import CompatibilityError, ConfigError, ContractError, StateError
from .unet import ALL_BLOCKS, BlockId, Conv2d, Linear, UNet, fingerprint, list_adaptable_layers

KINDS = ("lora", "locon")


@dataclass
class BlockRankPolicy:
    ranks: dict[BlockId, int]
    alpha: dict[BlockId, float] = field(default_factory=dict)
    kind: str = "locon"

    def __post_init__(self):
        self.ranks = {BlockId.parse(b) if isinstance(b, str) else b: int(r) for b, r in self.ranks.items()}
        for b in ALL_BLOCKS:
            self.ranks.setdefault(b, 0)
        alpha = {BlockId.parse(b) if isinstance(b, str) else b: float(a) for b, a in self.alpha.items()}
        for b in ALL_BLOCKS:
            alpha.setdefault(b, float(self.ranks[b]) if self.ranks[b] > 0 else 1.0)
        self.alpha = alpha
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"policy kind must be one of {KINDS}, got {self.kind!r}")
        for b, r in self.ranks.items():
            if r < 0:
                raise ConfigError(f"rank for {b.name} must be >= 0, got {r}")
            if self.alpha[b] <= 0:
                raise ConfigError(f"alpha for {b.name} must be positive, got {self.alpha[b]}")

    @classmethod
    def full(cls, rank: int = 4, kind: str = "locon") -> "BlockRankPolicy":
        return cls({b: rank for b in ALL_BLOCKS}, kind=kind)

    @classmethod
    def only(cls, blocks: Iterable[BlockId | str], rank: int = 4, kind: str = "locon") -> "BlockRankPolicy":
        keep = {BlockId.parse(b) if isinstance(b, str) else b for b in blocks}
        return cls({b: (rank if b in keep else 0) for b in ALL_BLOCKS}, kind=kind)

    def active_blocks(self) -> list[BlockId]:
        return [b for b in ALL_BLOCKS if self.ranks[b] > 0]

    def adapts(self, layer_kind: str) -> bool:
        return layer_kind == "attention-linear" or self.kind == "locon"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "ranks": {b.name: self.ranks[b] for b in ALL_BLOCKS},
            "alpha": {b.name: self.alpha[b] for b in ALL_BLOCKS},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "BlockRankPolicy":
        unknown = set(data) - {"kind", "ranks", "alpha"}
        if unknown:
            raise ConfigError(f"unknown policy keys: {sorted(unknown)}")
        return cls(dict(data.get("ranks", {})), dict(data.get("alpha", {})), data.get("kind", "locon"))


@dataclass
class LayerAdapter:
    path: str
    block: BlockId
    kind: str  # "attention-linear" | "conv"
    rank: int
    alpha: float
    A: Parameter
    B: Parameter

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def parameters(self) -> list[Parameter]:
        return [self.A, self.B]

    def parameter_count(self) -> int:
        return self.A.data.size + self.B.data.size

    def apply(self, x: Tensor, strength: float, layer: Linear | Conv2d) -> Tensor:
        """The low-rank branch w * (alpha/r) * B A x for this layer's input."""
        s = strength * self.scale
        if self.kind == "conv":
            mid = ops.conv2d(x, self.B, stride=layer.stride, padding=layer.padding)
            return ops.scale(ops.conv2d(mid, self.A), s)
        return ops.scale(ops.linear(ops.linear(x, self.A), self.B), s)

    def delta(self, strength: float = 1.0) -> np.ndarray:
        return effective_delta(self, strength)


@dataclass
class Adapter:
    name: str
    policy: BlockRankPolicy
    layers: list[LayerAdapter]
    base_model_fingerprint: str
    trigger_token: str = ""

    def parameters(self) -> list[Parameter]:
        return [p for la in self.layers for p in la.parameters()]

    def parameter_count(self) -> int:
        return sum(la.parameter_count() for la in self.layers)

    def layer_map(self) -> dict[str, LayerAdapter]:
        return {la.path: la for la in self.layers}

    @property
    def blocks(self) -> set[BlockId]:
        return {la.block for la in self.layers}

    @property
    def kind(self) -> str:
        return self.policy.kind

    @property
    def dtype(self) -> np.dtype:
        return self.layers[0].A.dtype if self.layers else np.dtype(np.float32)

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.set_trainable(flag)

    def copy(self, name: str | None = None) -> "Adapter":
        twin = copy.deepcopy(self)
        if name is not None:
            twin.rename(name)
        return twin

    def rename(self, name: str) -> None:
        self.name = name
        for la in self.layers:
            la.A.name = _param_name(name, la.path, "A")
            la.B.name = _param_name(name, la.path, "B")

    def astype(self, dtype) -> "Adapter":
        twin = self.copy()
        for p in twin.parameters():
            p.data = p.data.astype(dtype)
        return twin

    def structurally_equal(self, other: "Adapter") -> bool:
        return (
            self.name == other.name
            and self.policy.to_dict() == other.policy.to_dict()
            and self.base_model_fingerprint == other.base_model_fingerprint
            and self.trigger_token == other.trigger_token
            and [(la.path, la.block, la.kind, la.rank, la.alpha) for la in self.layers]
            == [(la.path, la.block, la.kind, la.rank, la.alpha) for la in other.layers]
        )

    def tensors_equal(self, other: "Adapter") -> bool:
        if len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            for pa, pb in ((a.A, b.A), (a.B, b.B)):
                if pa.dtype != pb.dtype or pa.shape != pb.shape or pa.data.tobytes() != pb.data.tobytes():
                    return False
        return True


def _param_name(adapter_name: str, path: str, role: str) -> str:
    return f"{adapter_name}:{path}.{role}"


def _factor_shapes(kind: str, weight_shape: tuple[int, ...], rank: int) -> tuple[tuple, tuple]:
    """(A shape, B shape) for a target weight."""
    if kind == "conv":
        c_out, c_in, kh, kw = weight_shape
        return (c_out, rank, 1, 1), (rank, c_in, kh, kw)
    d, k = weight_shape
    return (rank, k), (d, rank)


def _check_rank(path: str, kind: str, weight_shape: tuple[int, ...], rank: int) -> None:
    if kind == "conv":
        c_out, c_in, kh, kw = weight_shape
        limit = min(c_in * kh * kw, c_out)
    else:
        limit = min(weight_shape)
    if rank >= limit:
        raise ContractError(f"rank {rank} for {path} must be < {limit} (weight {weight_shape})")


def inject(model: UNet, policy: BlockRankPolicy, seed: int = 0, name: str = "adapter",
           trigger_token: str = "", attach_strength: float | None = 1.0) -> Adapter:
    """Allocate factors for every adaptable layer of every rank>0 block and hook them into ``model``.

    A ~ N(0, (1/r)^2), B = 0, so the adapted model starts exactly at the base model.
    """
    policy.validate()
    if any(a.name == name for a, _ in model.attached):
        raise StateError(f"an adapter named {name!r} is already attached")
    rng = np.random.default_rng(seed)
    dtype = model.dtype
    layers = []
    for entry in list_adaptable_layers(model):
        rank = policy.ranks[entry.block]
        if rank == 0 or not policy.adapts(entry.kind):
            continue
        _check_rank(entry.path, entry.kind, entry.weight_shape, rank)
        a_shape, b_shape = _factor_shapes(entry.kind, entry.weight_shape, rank)
        a = Parameter(rng.normal(0.0, 1.0 / rank, size=a_shape).astype(dtype), _param_name(name, entry.path, "A"))
        b = Parameter(np.zeros(b_shape, dtype=dtype), _param_name(name, entry.path, "B"))
        layers.append(LayerAdapter(entry.path, entry.block, entry.kind, rank, policy.alpha[entry.block], a, b))
    if not layers and policy.active_blocks():
        raise ContractError(
            f"policy kind {policy.kind!r} finds no adaptable layer in blocks "
            f"{[b.name for b in policy.active_blocks()]} of this model"
        )
    adapter = Adapter(name, copy.deepcopy(policy), layers, fingerprint(model), trigger_token)
    if attach_strength is not None:
        attach(model, adapter, attach_strength)
    return adapter


def check_compatible(model: UNet, adapter: Adapter) -> None:
    fp = fingerprint(model)
    if adapter.base_model_fingerprint != fp:
        raise CompatibilityError(
            f"adapter {adapter.name!r} was built for model {adapter.base_model_fingerprint}, not {fp}"
        )
    for la in adapter.layers:
        layer = model.layer(la.path)
        a_shape, b_shape = _factor_shapes(la.kind, layer.weight.shape, la.rank)
        if la.A.shape != a_shape or la.B.shape != b_shape:
            raise CompatibilityError(f"adapter {adapter.name!r}: factor shapes for {la.path} do not fit the layer")


def attach(model: UNet, adapter: Adapter, strength: float = 1.0, check: bool = True) -> None:
    if any(a is adapter or a.name == adapter.name for a, _ in model.attached):
        raise StateError(f"an adapter named {adapter.name!r} is already attached")
    if check:
        check_compatible(model, adapter)
    if adapter.layers and adapter.dtype != model.dtype:
        raise ContractError(f"adapter dtype {adapter.dtype} does not match model dtype {model.dtype}")
    for la in adapter.layers:
        model.layer(la.path).adapters.append((la, float(strength)))
    model.attached.append((adapter, float(strength)))


def detach(model: UNet, adapter: Adapter | str) -> None:
    name = adapter if isinstance(adapter, str) else adapter.name
    found = [a for a, _ in model.attached if a.name == name]
    if not found:
        raise StateError(f"no attached adapter named {name!r}")
    target = found[0]
    for la in target.layers:
        layer = model.layer(la.path)
        layer.adapters = [(x, w) for x, w in layer.adapters if x is not la]
    model.attached = [(a, w) for a, w in model.attached if a is not target]


def detach_all(model: UNet) -> None:
    for adapter, _ in list(model.attached):
        detach(model, adapter)


class activated:
    """Context manager: attach (adapter, strength) pairs for the duration of a block."""

    def __init__(self, model: UNet, adapters: Sequence[tuple[Adapter, float]], check: bool = True):
        self.model = model
        self.adapters = list(adapters)
        self.check = check

    def __enter__(self):
        done = []
        try:
            for adapter, strength in self.adapters:
                attach(self.model, adapter, strength, check=self.check)
                done.append(adapter)
        except Exception:
            for adapter in done:
                detach(self.model, adapter)
            raise
        return self.model

    def __exit__(self, *exc):
        for adapter, _ in self.adapters:
            detach(self.model, adapter)
        return False


def adapted_forward(layer: Linear | Conv2d, x: Tensor, active: Sequence[tuple[LayerAdapter, float]]) -> Tensor:
    for la, _ in active:
        if la.path != layer.path:
            raise ContractError(f"adapter for {la.path} cannot be applied to layer {layer.path}")
    h = layer.base_forward(x)
    for la, strength in active:
        h = ops.add(h, la.apply(x, strength, layer))
    return h


def effective_delta(layer_adapter: LayerAdapter, strength: float = 1.0) -> np.ndarray:
    """Dense weight update w * (alpha/r) * B A (linear) or its conv-kernel analogue."""
    la = layer_adapter
    s = strength * la.scale
    a, b = la.A.data, la.B.data
    if la.kind == "conv":
        # dW[o, i, :, :] = sum_rho A[o, rho] * B[rho, i, :, :]
        r = la.rank
        dw = (a.reshape(a.shape[0], r) @ b.reshape(r, -1)).reshape(a.shape[0], *b.shape[1:])
    else:
        dw = b @ a
    return (dw * s).astype(a.dtype, copy=False)


def merge(model: UNet, adapter: Adapter, strength: float = 1.0) -> UNet:
    """A new model whose targeted weights are W0 + effective_delta; no hooks remain."""
    check_compatible(model, adapter)
    merged = model.clone()
    if strength == 0.0:
        return merged
    for la in adapter.layers:
        layer = merged.layer(la.path)
        layer.weight.data = (layer.weight.data + effective_delta(la, strength)).astype(layer.weight.dtype)
    return merged


def filter_blocks(adapter: Adapter, keep: Iterable[BlockId | str], name: str | None = None) -> Adapter:
    keep = {BlockId.parse(b) if isinstance(b, str) else b for b in keep}
    twin = adapter.copy()
    twin.layers = [la for la in twin.layers if la.block in keep]
    twin.policy.ranks = {b: (r if b in keep else 0) for b, r in twin.policy.ranks.items()}
    if name is not None:
        twin.rename(name)
    return twin


def expected_parameter_count(model: UNet, policy: BlockRankPolicy) -> int:
    """r*k + d*r for linear layers, r*c_in*k^2 + c_out*r for convs, summed over adapted layers."""
    total = 0
    for entry in list_adaptable_layers(model):
        r = policy.ranks[entry.block]
        if r == 0 or not policy.adapts(entry.kind):
            continue
        if entry.kind == "conv":
            c_out, c_in, kh, _ = entry.weight_shape
            total += r * c_in * kh * kh + c_out * r
        else:
            d, k = entry.weight_shape
            total += r * k + d * r
    return total
