"""Regenerates golden_adapter.bwla. Run from the tests directory; commit the output."""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from conftest import tiny_config  # noqa: E402

from blockwise_lora.adapters import BlockRankPolicy, inject  # noqa: E402
from blockwise_lora.container import save_adapter  # noqa: E402
from blockwise_lora.data import synthetic_vocabulary  # noqa: E402
from blockwise_lora.unet import build_unet  # noqa: E402


def pattern(shape, salt):
    """Exactly representable f32 values: (i mod 17 - 8) / 64 + salt / 1024."""
    n = int(np.prod(shape))
    return ((np.arange(n) % 17 - 8) / 64.0 + salt / 1024.0).reshape(shape).astype(np.float32)


def build():
    model = build_unet(tiny_config(), seed=0, vocabulary=synthetic_vocabulary())
    adapter = inject(model, BlockRankPolicy({"IN0": 2, "MID": 1, "OUT3": 2}, kind="locon"),
                     name="golden", trigger_token="zkstyle", attach_strength=None)
    for i, la in enumerate(adapter.layers):
        la.A.data = pattern(la.A.shape, 2 * i)
        la.B.data = pattern(la.B.shape, 2 * i + 1)
    return adapter


if __name__ == "__main__":
    save_adapter(build(), Path(__file__).with_name("golden_adapter.bwla"))
