import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockwise_lora.adapters import BlockRankPolicy, detach, inject
from blockwise_lora.autodiff import Tensor, backward
from blockwise_lora.data import (ID_CLASS, InstanceStream, TrainDataset, identity_dataset, load_dataset, save_dataset,
                                 style_dataset)
from blockwise_lora.diffusion import NoiseSchedule, ddpm_loss, sample_training_noise
from blockwise_lora.errors import ConfigError, ContractError, NumericError, StateError
from blockwise_lora.sampler import SamplerConfig
from blockwise_lora.train import LONG_RUN_STEPS, TrainConfig, build_reg_images, train_adapter
from blockwise_lora.unet import BlockId, build_unet, fingerprint

from conftest import tiny_config


class ReplayStub:
    """Returns exactly the noise ddpm_loss drew, by replaying the same generator, plus an offset."""

    def __init__(self, seed, T, offset=0.0):
        self.rng = np.random.default_rng(seed)
        self.T = T
        self.offset = offset

    def predict_noise(self, x_t, t, cond):
        _, eps = sample_training_noise(self.rng, x_t.shape, self.T, x_t.dtype)
        return Tensor(eps + self.offset)


@pytest.fixture
def small_set():
    ds, _ = identity_dataset(4, size=16, seed=0, repeats=3)
    return ds


# ---------------------------------------------------------------- schedule


def test_schedule_invariants():
    s = NoiseSchedule()
    assert s.T == 1000 and s.betas[0] == pytest.approx(1e-4) and s.betas[-1] == pytest.approx(0.02)
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all(np.diff(s.alpha_bars) < 0) and s.alpha_bars[0] > 0.9998
    assert np.all(np.diff(s.sigmas) > 0)
    with pytest.raises(ConfigError):
        NoiseSchedule(beta_end=1.0)


def test_sigma_to_t_inverts_schedule():
    s = NoiseSchedule()
    t = np.array([0, 17, 500, 999])
    np.testing.assert_allclose(s.sigma_to_t(s.sigmas[t]), t, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), t=st.integers(0, 999))
def test_forward_process_inverts(seed, t):
    rng = np.random.default_rng(seed)
    s = NoiseSchedule()
    x0 = rng.uniform(-1, 1, (1, 3, 4, 4))
    eps = rng.standard_normal(x0.shape)
    x_t = s.add_noise(x0, np.array([t]), eps)
    ab = np.prod(1.0 - np.linspace(1e-4, 0.02, 1000)[: t + 1])
    np.testing.assert_allclose(x_t, np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps, atol=1e-12)
    np.testing.assert_allclose(s.recover_x0(x_t, np.array([t]), eps), x0, atol=1e-6)


def test_stratified_timesteps_are_uniform():
    rng = np.random.default_rng(0)
    ts = np.concatenate([sample_training_noise(rng, (4, 1), 1000)[0] for _ in range(5000)])
    assert ts.min() >= 0 and ts.max() <= 999
    counts = np.histogram(ts, bins=10, range=(0, 1000))[0]
    assert counts.min() > 0.9 * len(ts) / 10
    t, _ = sample_training_noise(rng, (4, 1), 1000)
    assert sorted(t // 250) == [0, 1, 2, 3]


# ---------------------------------------------------------------- loss


def test_loss_zero_with_perfect_stub():
    s = NoiseSchedule()
    x0 = np.random.default_rng(1).uniform(-1, 1, (3, 3, 8, 8))
    loss = ddpm_loss(ReplayStub(5, s.T), x0, np.zeros((3, 4, 4)), s, np.random.default_rng(5))
    assert loss.item() == 0.0


def test_loss_one_with_offset_stub():
    s = NoiseSchedule()
    x0 = np.zeros((2, 3, 8, 8))
    loss = ddpm_loss(ReplayStub(5, s.T, offset=1.0), x0, np.zeros((2, 4, 4)), s, np.random.default_rng(5))
    assert loss.item() == pytest.approx(1.0, abs=1e-12)


def test_loss_rejects_out_of_range_images():
    with pytest.raises(ContractError):
        ddpm_loss(ReplayStub(0, 1000), np.full((1, 3, 4, 4), 2.0), np.zeros((1, 4, 4)), NoiseSchedule(),
                  np.random.default_rng(0))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_is_numeric_error():
    class Exploding:
        def predict_noise(self, x_t, t, cond):
            return Tensor(np.full(x_t.shape, 1e200))

    with pytest.raises(NumericError):
        ddpm_loss(Exploding(), np.zeros((2, 3, 4, 4)), np.zeros((2, 4, 4)), NoiseSchedule(), np.random.default_rng(0))


# ---------------------------------------------------------------- dataset protocol


def test_dataset_protocol(small_set):
    assert small_set.repeats == 3 and small_set.stream_length == 12
    assert all(c.startswith("zkchar") for c in small_set.instance_captions)
    assert identity_dataset(2, size=16)[0].repeats == 25
    with pytest.raises(ContractError):
        TrainDataset(small_set.instance_images[:1], ["character, red"], "zkchar")
    with pytest.raises(ContractError):
        small_set.with_regularization(small_set.instance_images[:1], ["zkchar, character"])


def test_instance_stream_repeats_each_image():
    stream = InstanceStream(4, 25, np.random.default_rng(0))
    epoch = stream.take(100)
    assert np.array_equal(np.bincount(epoch), [25] * 4)
    assert stream.epoch == 0
    stream.take(1)
    assert stream.epoch == 1


def test_dataset_directory_round_trip(small_set, tmp_path):
    ds = small_set.with_regularization(small_set.instance_images[:2] * 0.5, [ID_CLASS, ID_CLASS])
    save_dataset(ds, tmp_path / "set")
    assert sorted(p.name for p in (tmp_path / "set" / "instance").iterdir())[:2] == ["0000.png", "0000.txt"]
    back = load_dataset(tmp_path / "set", repeats=3)
    assert back.trigger == "zkchar" and back.instance_captions == ds.instance_captions
    assert back.reg_captions == [ID_CLASS, ID_CLASS]
    assert np.max(np.abs(back.instance_images - ds.instance_images)) <= 1.0 / 255 + 1e-6


def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.steps, cfg.batch_size, cfg.learning_rate, cfg.prior_weight) == (2000, 2, 1e-3, 1.0)
    assert LONG_RUN_STEPS == 11000 and TrainConfig(steps=LONG_RUN_STEPS).steps == 11000
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    for bad in (dict(batch_size=0), dict(prior_weight=-1.0), dict(steps=-1)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"stpes": 3})


# ---------------------------------------------------------------- regularization images


def test_reg_images_deterministic(tiny32):
    cfg = SamplerConfig(steps=3)
    a, caps = build_reg_images(tiny32, ID_CLASS, 3, cfg)
    b, _ = build_reg_images(tiny32, ID_CLASS, 3, cfg)
    assert a.shape == (3, 3, 16, 16) and caps == [ID_CLASS] * 3
    assert np.array_equal(a, b) and not np.array_equal(a[0], a[1])


def test_reg_images_empty_and_requires_base(tiny32):
    imgs, caps = build_reg_images(tiny32, ID_CLASS, 0)
    assert imgs.shape[0] == 0 and caps == []
    inject(tiny32, BlockRankPolicy.full(2))
    with pytest.raises(StateError):
        build_reg_images(tiny32, ID_CLASS, 1)


# ---------------------------------------------------------------- train_adapter


def test_zero_steps_leave_factors(tiny32, small_set):
    adapter = inject(tiny32, BlockRankPolicy.full(2))
    before = adapter.copy()
    result = train_adapter(tiny32, adapter, small_set, TrainConfig(steps=0))
    assert result.losses == [] and adapter.tensors_equal(before)


def test_training_requires_attached_adapter(tiny32, small_set):
    adapter = inject(tiny32, BlockRankPolicy.full(2))
    detach(tiny32, adapter)
    with pytest.raises(ContractError):
        train_adapter(tiny32, adapter, small_set, TrainConfig(steps=1))


def test_frozen_base_and_optimizer_scope(tiny32, small_set):
    ds = small_set.with_regularization(small_set.instance_images[:2], [ID_CLASS] * 2)
    before = fingerprint(tiny32)
    adapter = inject(tiny32, BlockRankPolicy.only(["IN0", "OUT3"], 2))
    result = train_adapter(tiny32, adapter, ds, TrainConfig(steps=20))
    assert fingerprint(tiny32) == before == result.base_fingerprint
    own = {p.name for p in adapter.parameters()}
    assert set(result.optimizer.state) == own
    assert all(n.split(":", 1)[1].split(".")[0] in ("IN0", "OUT3") for n in result.optimizer.state)
    assert any(la.B.data.any() for la in adapter.layers)


def test_gradients_stay_in_active_blocks(tiny32, small_set, rng):
    adapter = inject(tiny32, BlockRankPolicy.only(["IN0", "OUT3"], 2))
    loss = ddpm_loss(tiny32, small_set.instance_images[:2], small_set.instance_captions[:2], NoiseSchedule(), rng)
    grads = backward(loss)
    assert grads and {BlockId.from_path(n.split(":", 1)[1]) for n in grads} == {BlockId.IN0, BlockId.OUT3}


def test_deterministic_replay(vocab, small_set):
    curves = []
    for _ in range(2):
        model = build_unet(tiny_config(), seed=0, vocabulary=vocab)
        adapter = inject(model, BlockRankPolicy.full(2), seed=3)
        curves.append(train_adapter(model, adapter, small_set, TrainConfig(steps=15, seed=4)).losses)
    assert curves[0] == curves[1]


def test_loss_descends_over_200_steps(vocab):
    model = build_unet(tiny_config(), seed=0, vocabulary=vocab)
    ds = style_dataset(8, size=16, seed=0)
    adapter = inject(model, BlockRankPolicy.full(4), seed=0)
    losses = train_adapter(model, adapter, ds, TrainConfig(steps=200, seed=0)).losses
    assert np.mean(losses[-20:]) < np.mean(losses[:20])
