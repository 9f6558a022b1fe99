"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, DeterminismError
from .tensor import Parameter, Tensor, backward


def grad_check(
    function: Callable[[], Tensor],
    parameters: Sequence[Parameter],
    step: float = 1e-5,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max over parameter elements of |analytic - numeric| / max(1, |analytic|).

    ``function`` rebuilds the scalar loss from the current parameter values.
    ``max_elements`` checks a random subset of each parameter's elements
    (every element when None).
    """
    for p in parameters:
        if p.dtype != np.float64:
            raise ContractError(f"grad_check: parameter {p.name} must be f64, got {p.dtype}")
        if not p.trainable:
            raise ContractError(f"grad_check: parameter {p.name} is frozen and receives no gradient")
    first = function()
    second = function()
    if first.data.size != 1:
        raise ContractError("grad_check: function must return a scalar")
    if not np.array_equal(first.data, second.data):
        raise DeterminismError("grad_check: two identical calls returned different values")
    analytic = backward(second)
    rng = rng or np.random.default_rng(0)

    worst = 0.0
    for p in parameters:
        g = analytic.get(p.name)
        if g is None:
            g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        gflat = g.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = function().item()
            flat[i] = orig - step
            down = function().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    return worst
