import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockwise_lora.adapters import (BlockRankPolicy, LayerAdapter, activated, adapted_forward, attach, detach,
                                     effective_delta, expected_parameter_count, filter_blocks, inject, merge)
from blockwise_lora.autodiff import Parameter, Tensor, ops
from blockwise_lora.errors import CompatibilityError, ConfigError, ContractError, StateError
from blockwise_lora.unet import ALL_BLOCKS, BlockId, Conv2d, Linear, build_unet, encode_condition, fingerprint

from conftest import randomize_adapter, tiny_config


def linear_layer(W, path="IN1.attn.self.to_q"):
    layer = Linear(path, W.shape[1], W.shape[0], np.random.default_rng(0), np.float64, bias=False, adaptable=True)
    layer.weight.data = np.asarray(W, dtype=np.float64)
    return layer


def layer_adapter(A, B, kind="attention-linear", alpha=None, path="IN1.attn.self.to_q"):
    A, B = np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64)
    rank = A.shape[0] if kind == "attention-linear" else A.shape[1]
    return LayerAdapter(path, BlockId.from_path(path), kind, rank, float(alpha or rank),
                        Parameter(A, path + ".A"), Parameter(B, path + ".B"))


def forward(model, x, t=(10,), caption="zkchar, red"):
    return model.predict_noise(x, list(t) * x.shape[0] if len(t) == 1 else t,
                               encode_condition(model, [caption] * x.shape[0])).data


# ---------------------------------------------------------------- policy


def test_policy_defaults_and_validation():
    p = BlockRankPolicy({"IN0": 4})
    assert p.ranks[BlockId.IN0] == 4 and p.ranks[BlockId.MID] == 0
    assert p.alpha[BlockId.IN0] == 4.0
    assert p.active_blocks() == [BlockId.IN0]
    with pytest.raises(ConfigError):
        BlockRankPolicy({"IN0": -1})
    with pytest.raises(ConfigError):
        BlockRankPolicy({"IN0": 1}, alpha={"IN0": 0.0})
    with pytest.raises(ConfigError):
        BlockRankPolicy({}, kind="dora")
    assert BlockRankPolicy.from_dict(p.to_dict()) == p
    with pytest.raises(ConfigError):
        BlockRankPolicy.from_dict({"rank": {}})


def test_lora_adapts_attention_only():
    assert BlockRankPolicy.full(kind="lora").adapts("attention-linear")
    assert not BlockRankPolicy.full(kind="lora").adapts("conv")
    assert BlockRankPolicy.full(kind="locon").adapts("conv")


# ---------------------------------------------------------------- adapted_forward


def test_adapted_forward_worked_example():
    layer = linear_layer(np.eye(2))
    la = layer_adapter([[0.0, 1.0]], [[1.0], [0.0]])
    h = adapted_forward(layer, Tensor(np.array([[1.0, 1.0]])), [(la, 1.0)])
    np.testing.assert_array_equal(h.data, [[2.0, 1.0]])


def test_adapted_forward_without_adapter_is_base():
    layer = linear_layer(np.eye(2))
    h = adapted_forward(layer, Tensor(np.array([[1.0, 1.0]])), [])
    np.testing.assert_array_equal(h.data, [[1.0, 1.0]])


def test_opposite_strengths_cancel():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((4, 3))
    layer = linear_layer(W)
    la = layer_adapter(rng.standard_normal((2, 3)), rng.standard_normal((4, 2)))
    x = rng.standard_normal((5, 3))
    h = adapted_forward(layer, Tensor(x), [(la, 1.0), (la, -1.0)])
    np.testing.assert_allclose(h.data, x @ W.T, atol=1e-12)


def test_adapted_forward_rejects_foreign_adapter():
    layer = linear_layer(np.eye(2))
    la = layer_adapter([[0.0, 1.0]], [[1.0], [0.0]], path="MID.attn.self.to_q")
    with pytest.raises(ContractError):
        adapted_forward(layer, Tensor(np.ones((1, 2))), [(la, 1.0)])


@settings(max_examples=40, deadline=None)
@given(d=st.integers(2, 6), k=st.integers(2, 6), r=st.integers(1, 3), w1=st.floats(-2, 2), w2=st.floats(-2, 2),
       alpha=st.floats(0.25, 8), seed=st.integers(0, 2**31))
def test_two_adapters_equal_summed_delta(d, k, r, w1, w2, alpha, seed):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((d, k))
    a1 = layer_adapter(rng.standard_normal((r, k)), rng.standard_normal((d, r)), alpha=alpha)
    a2 = layer_adapter(rng.standard_normal((r, k)), rng.standard_normal((d, r)))
    x = rng.standard_normal((3, k))
    h = adapted_forward(linear_layer(W), Tensor(x), [(a1, w1), (a2, w2)]).data
    W_sum = W + effective_delta(a1, w1) + effective_delta(a2, w2)
    np.testing.assert_allclose(h, x @ W_sum.T, atol=1e-10)


# ---------------------------------------------------------------- effective_delta


def test_conv_delta_worked_example():
    la = layer_adapter(A=[[[[0.5]]]], B=[[[[1.0, 2.0], [3.0, 4.0]]]], kind="conv", path="IN0.res0.conv1")
    np.testing.assert_allclose(effective_delta(la)[0, 0], [[0.5, 1.0], [1.5, 2.0]])


def test_delta_zero_and_linear_in_strength():
    rng = np.random.default_rng(1)
    la = layer_adapter(rng.standard_normal((2, 4)), np.zeros((3, 2)))
    assert not effective_delta(la).any()
    la.B.data = rng.standard_normal((3, 2))
    np.testing.assert_array_equal(effective_delta(la, 2.0), 2.0 * effective_delta(la, 1.0))


@settings(max_examples=30, deadline=None)
@given(c_in=st.integers(1, 4), c_out=st.integers(2, 5), k=st.sampled_from([1, 3]), stride=st.integers(1, 2),
       seed=st.integers(0, 2**31))
def test_two_conv_composition_equals_delta_kernel(c_in, c_out, k, stride, seed):
    rng = np.random.default_rng(seed)
    r = 1
    conv = Conv2d("IN0.res0.conv1", c_in, c_out, k, rng, np.float64, stride=stride, adaptable=True)
    la = layer_adapter(rng.standard_normal((c_out, r, 1, 1)), rng.standard_normal((r, c_in, k, k)),
                       kind="conv", alpha=0.7, path=conv.path)
    x = Tensor(rng.standard_normal((2, c_in, 6, 6)))
    branch = la.apply(x, 1.3, conv).data
    dense = ops.conv2d(x, Tensor(effective_delta(la, 1.3)), stride=stride, padding=conv.padding).data
    np.testing.assert_allclose(branch, dense, atol=1e-10)


# ---------------------------------------------------------------- inject / attach


def test_all_zero_ranks_give_empty_adapter(tiny64, rng):
    x = rng.standard_normal((1, 3, 16, 16))
    before = forward(tiny64, x)
    adapter = inject(tiny64, BlockRankPolicy({}), name="nothing")
    assert adapter.layers == [] and adapter.parameter_count() == 0
    assert np.array_equal(forward(tiny64, x), before)


def test_full_policy_covers_every_adaptable_layer(tiny64):
    adapter = inject(tiny64, BlockRankPolicy.full(2, "locon"), attach_strength=None)
    assert {la.path for la in adapter.layers} == {m.path for m in tiny64.adaptable_modules()}
    lora = inject(tiny64, BlockRankPolicy.full(2, "lora"), attach_strength=None)
    assert {la.kind for la in lora.layers} == {"attention-linear"}


def test_fresh_adapter_is_bit_transparent(tiny64, rng):
    x = rng.standard_normal((2, 3, 16, 16))
    before = forward(tiny64, x, t=(5, 600))
    inject(tiny64, BlockRankPolicy.full(3), seed=4)
    assert np.array_equal(forward(tiny64, x, t=(5, 600)), before)


def test_init_statistics(tiny64):
    adapter = inject(tiny64, BlockRankPolicy.full(4), seed=0, attach_strength=None)
    A = np.concatenate([la.A.data.ravel() for la in adapter.layers])
    assert all(not la.B.data.any() for la in adapter.layers)
    assert np.std(A) == pytest.approx(0.25, rel=0.05)


def test_factor_shapes_and_parameter_count(tiny64):
    policy = BlockRankPolicy({"IN1": 2, "OUT3": 3, "MID": 1})
    adapter = inject(tiny64, policy, attach_strength=None)
    for la in adapter.layers:
        w = tiny64.layer(la.path).weight.shape
        if la.kind == "conv":
            assert la.A.shape == (w[0], la.rank, 1, 1) and la.B.shape == (la.rank,) + w[1:]
        else:
            assert la.A.shape == (la.rank, w[1]) and la.B.shape == (w[0], la.rank)
    assert adapter.parameter_count() == expected_parameter_count(tiny64, policy)
    assert {la.block for la in adapter.layers} == {BlockId.IN1, BlockId.OUT3, BlockId.MID}


def test_rank_limit_enforced(tiny64):
    with pytest.raises(ContractError, match="must be <"):
        inject(tiny64, BlockRankPolicy({"IN0": 8}, kind="locon"))


def test_lora_on_attention_free_blocks_is_contract_error(tiny64):
    with pytest.raises(ContractError, match="no adaptable layer"):
        inject(tiny64, BlockRankPolicy.only(["IN0", "OUT3"], 2, "lora"))


def test_duplicate_names_are_state_errors(tiny64):
    a = inject(tiny64, BlockRankPolicy.full(2), name="same")
    with pytest.raises(StateError):
        inject(tiny64, BlockRankPolicy.full(2), name="same")
    with pytest.raises(StateError):
        attach(tiny64, a)
    detach(tiny64, a)
    with pytest.raises(StateError):
        detach(tiny64, a)


def test_base_parameters_stay_frozen(tiny64):
    inject(tiny64, BlockRankPolicy.full(2))
    assert not any(p.trainable for p in tiny64.parameters())


def test_activated_context_restores_base(tiny64, rng):
    adapter = randomize_adapter(inject(tiny64, BlockRankPolicy.full(2), attach_strength=None), rng)
    x = rng.standard_normal((1, 3, 16, 16))
    before = forward(tiny64, x)
    with activated(tiny64, [(adapter, 1.0)]):
        assert not np.array_equal(forward(tiny64, x), before)
    assert np.array_equal(forward(tiny64, x), before) and tiny64.attached == []


def test_incompatible_model_rejected(tiny64, vocab, rng):
    adapter = inject(tiny64, BlockRankPolicy.full(2), attach_strength=None)
    other = build_unet(tiny_config(), seed=1, vocabulary=vocab, dtype=np.float64)
    with pytest.raises(CompatibilityError):
        attach(other, adapter)
    with pytest.raises(CompatibilityError):
        merge(other, adapter)


# ---------------------------------------------------------------- block skipping


@pytest.mark.parametrize("skipped", list(ALL_BLOCKS))
def test_rank_zero_block_computes_base_path(tiny64, rng, skipped):
    """Feed the adapted model's own block input to the base block: outputs must be bit-equal."""
    ranks = {b: (0 if b is skipped else 2) for b in ALL_BLOCKS}
    base = tiny64.clone()
    randomize_adapter(inject(tiny64, BlockRankPolicy(ranks), seed=1), rng)
    x = rng.standard_normal((2, 3, 16, 16))
    cond = encode_condition(tiny64, ["zkchar, red", ""])
    capture = {}
    tiny64.predict_noise(x, [7, 400], cond, capture=capture)
    got = capture[skipped]
    out, _ = base.blocks[skipped](got["input"], got["temb"], got["context"], got["skip"])
    assert np.array_equal(out.data, got["output"].data)


# ---------------------------------------------------------------- merge


def test_merge_matches_hooks_f64(tiny64, rng):
    adapter = randomize_adapter(inject(tiny64, BlockRankPolicy.full(2), attach_strength=None), rng)
    x = rng.standard_normal((2, 3, 16, 16))
    merged = merge(tiny64, adapter, 0.8)
    assert merged.attached == [] and all(not m.adapters for m in merged.adaptable_modules())
    with activated(tiny64, [(adapter, 0.8)]):
        hooked = forward(tiny64, x)
    np.testing.assert_allclose(forward(merged, x), hooked, atol=1e-10)


def test_merge_matches_hooks_f32(tiny32, rng):
    adapter = randomize_adapter(inject(tiny32, BlockRankPolicy.full(2), attach_strength=None), rng)
    x = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
    with activated(tiny32, [(adapter, 1.0)]):
        hooked = forward(tiny32, x)
    assert np.max(np.abs(forward(merge(tiny32, adapter), x) - hooked)) < 1e-5


def test_merge_strength_zero_is_base(tiny64, rng):
    adapter = randomize_adapter(inject(tiny64, BlockRankPolicy.full(2), attach_strength=None), rng)
    merged = merge(tiny64, adapter, 0.0)
    assert fingerprint(merged) == fingerprint(tiny64)
    assert all(np.array_equal(p.data, tiny64.named_parameters()[n].data) for n, p in merged.named_parameters().items())


def test_merge_commutes(tiny64, rng):
    a = randomize_adapter(inject(tiny64, BlockRankPolicy.full(2), name="a", attach_strength=None), rng)
    b = randomize_adapter(inject(tiny64, BlockRankPolicy.only(["IN1", "OUT2"], 3), name="b", attach_strength=None), rng)
    # a merged model has a new fingerprint, so the second merge is applied by hand
    first = tiny64.clone()
    second = tiny64.clone()
    for model, order in ((first, (a, b)), (second, (b, a))):
        for adapter in order:
            for la in adapter.layers:
                layer = model.layer(la.path)
                layer.weight.data = layer.weight.data + effective_delta(la)
    for name, p in first.named_parameters().items():
        np.testing.assert_allclose(p.data, second.named_parameters()[name].data, atol=1e-10)
    merged = merge(tiny64, a)
    for la in a.layers:
        np.testing.assert_array_equal(merged.layer(la.path).weight.data,
                                      tiny64.layer(la.path).weight.data + effective_delta(la))


# ---------------------------------------------------------------- filter_blocks


def test_filter_keep_all_is_identity(tiny64, rng):
    adapter = randomize_adapter(inject(tiny64, BlockRankPolicy.full(2), attach_strength=None), rng)
    kept = filter_blocks(adapter, ALL_BLOCKS)
    assert kept.structurally_equal(adapter) and kept.tensors_equal(adapter)


def test_filter_keep_none_is_transparent(tiny64, rng):
    adapter = randomize_adapter(inject(tiny64, BlockRankPolicy.full(2), attach_strength=None), rng)
    x = rng.standard_normal((1, 3, 16, 16))
    before = forward(tiny64, x)
    empty = filter_blocks(adapter, [])
    assert empty.layers == [] and empty.policy.active_blocks() == []
    with activated(tiny64, [(empty, 1.0)]):
        assert np.array_equal(forward(tiny64, x), before)


def test_filter_drops_blocks_without_touching_original(tiny64, rng):
    adapter = inject(tiny64, BlockRankPolicy({"IN0": 4, "MID": 4}), attach_strength=None)
    n = len(adapter.layers)
    kept = filter_blocks(adapter, {"IN0"})
    assert kept.policy.ranks[BlockId.IN0] == 4 and kept.policy.ranks[BlockId.MID] == 0
    assert kept.blocks == {BlockId.IN0}
    assert len(adapter.layers) == n and adapter.policy.ranks[BlockId.MID] == 4
    kept.layers[0].A.data[...] = 0
    assert adapter.layers[0].A.data.any()


@settings(max_examples=25, deadline=None)
@given(keep=st.sets(st.sampled_from(list(ALL_BLOCKS))))
def test_filter_idempotent(keep):
    model = build_unet(tiny_config(), seed=0, dtype=np.float64)
    adapter = inject(model, BlockRankPolicy.full(2), attach_strength=None)
    once = filter_blocks(adapter, keep)
    twice = filter_blocks(once, keep)
    assert once.structurally_equal(twice) and once.tensors_equal(twice)
    assert once.blocks == set(keep)
