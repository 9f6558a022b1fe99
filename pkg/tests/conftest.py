import numpy as np
import pytest

from blockwise_lora.data import synthetic_vocabulary
from blockwise_lora.unet import UNetConfig, build_unet


def tiny_config(**overrides) -> UNetConfig:
    """Smallest config that keeps every block, both attention kinds and all skips."""
    base = dict(image_size=16, base_channels=8, channel_multipliers=[1, 1, 2, 2], cond_dim=16,
                time_embed_dim=16, max_tokens=8, head_dim=8)
    base.update(overrides)
    return UNetConfig(**base)


@pytest.fixture
def vocab():
    return synthetic_vocabulary()


@pytest.fixture
def tiny64(vocab):
    return build_unet(tiny_config(), seed=0, vocabulary=vocab, dtype=np.float64)


@pytest.fixture
def tiny32(vocab):
    return build_unet(tiny_config(), seed=0, vocabulary=vocab, dtype=np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randomize_adapter(adapter, rng, scale=0.1):
    """Give B factors nonzero values so an adapter actually changes outputs."""
    for la in adapter.layers:
        la.B.data = (rng.standard_normal(la.B.shape) * scale).astype(la.B.dtype)
        la.A.data = (rng.standard_normal(la.A.shape) * scale).astype(la.A.dtype)
    return adapter


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
