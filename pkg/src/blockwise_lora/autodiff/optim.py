"""AdamW over named parameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..errors import ContractError
from .tensor import Parameter


@dataclass
class AdamW:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step_count: int = 0
    # Moments are allocated lazily, only for parameters that are actually stepped.
    state: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def step(self, parameters: Sequence[Parameter], gradients: Mapping[str, np.ndarray]) -> None:
        trainable = [p for p in parameters if p.trainable]
        missing = [p.name for p in trainable if p.name not in gradients]
        if missing:
            raise ContractError(f"adamw_step: no gradient for trainable parameter(s) {missing[:3]}")
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for p in trainable:
            g = np.asarray(gradients[p.name], dtype=p.dtype)
            if g.shape != p.shape:
                raise ContractError(f"adamw_step: gradient for {p.name} has shape {g.shape}, expected {p.shape}")
            m, v = self.state.get(p.name) or (np.zeros_like(p.data), np.zeros_like(p.data))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.state[p.name] = (m, v)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            new = p.data * (1.0 - self.lr * self.weight_decay) - self.lr * update
            p.data = new.astype(p.dtype, copy=False)


def adamw_step(
    parameters: Sequence[Parameter],
    gradients: Mapping[str, np.ndarray],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 1e-2,
    optimizer: AdamW | None = None,
) -> AdamW:
    """One AdamW update. Pass the returned optimizer back in to keep moments across steps."""
    if optimizer is None:
        optimizer = AdamW(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)
    optimizer.step(parameters, gradients)
    return optimizer
