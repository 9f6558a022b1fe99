import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockwise_lora.adapters import BlockRankPolicy, attach, inject
from blockwise_lora.container import (ALIGN, decode, encode, load_adapter, load_model, read_file, save_adapter,
                                      save_model)
from blockwise_lora.data import synthetic_vocabulary
from blockwise_lora.errors import FormatError
from blockwise_lora.unet import BlockId, build_unet, fingerprint

from conftest import randomize_adapter, tiny_config

GOLDEN = Path(__file__).parent / "data" / "golden_adapter.bwla"
GOLDEN_SHA256 = "1f9b25134d5c26598ea844fa2a0511215b13f0f330f2bfa7aa82c1f45853e693"
GOLDEN_FINGERPRINT = "d1c0b95039985f00cbfa14fef9ea6c10"


def golden_pattern(shape, salt):
    n = int(np.prod(shape))
    return ((np.arange(n) % 17 - 8) / 64.0 + salt / 1024.0).reshape(shape)


@pytest.fixture
def trained(tiny32, rng):
    return randomize_adapter(inject(tiny32, BlockRankPolicy({"IN0": 2, "IN1": 3, "OUT2": 1}), name="demo",
                                    trigger_token="zkchar", attach_strength=None), rng)


def test_round_trip_bit_exact(trained, tmp_path):
    save_adapter(trained, tmp_path / "a.bwla")
    back = load_adapter(tmp_path / "a.bwla")
    assert back.structurally_equal(trained) and back.tensors_equal(trained)
    assert back.name == "demo" and back.trigger_token == "zkchar"
    assert back.base_model_fingerprint == trained.base_model_fingerprint
    assert back.policy == trained.policy


def test_round_trip_f64(tiny64, rng, tmp_path):
    adapter = randomize_adapter(inject(tiny64, BlockRankPolicy.full(2), attach_strength=None), rng)
    save_adapter(adapter, tmp_path / "a.bwla")
    assert load_adapter(tmp_path / "a.bwla").tensors_equal(adapter)


def test_empty_adapter_round_trip(tiny32, tmp_path):
    adapter = inject(tiny32, BlockRankPolicy({}), attach_strength=None)
    save_adapter(adapter, tmp_path / "e.bwla")
    back = load_adapter(tmp_path / "e.bwla")
    assert back.layers == [] and back.policy.active_blocks() == []


def test_layout_header_and_alignment(trained, tmp_path):
    save_adapter(trained, tmp_path / "a.bwla", provenance={"seed": 3})
    buf = (tmp_path / "a.bwla").read_bytes()
    magic, version, meta_len = struct.unpack_from("<4sIQ", buf)
    assert magic == b"BWLA" and version == 1
    meta = json.loads(buf[16:16 + meta_len])
    assert {"name", "kind", "trigger_token", "base_model_fingerprint", "alpha", "ranks", "tensors"} <= set(meta)
    assert meta["ranks"]["IN1"] == 3 and meta["ranks"]["MID"] == 0
    assert meta["provenance"] == {"seed": 3}
    payload = (16 + meta_len + ALIGN - 1) // ALIGN * ALIGN
    for entry in meta["tensors"]:
        assert entry["byte_offset"] % ALIGN == 0 and entry["role"] in ("A", "B")
        raw = buf[payload + entry["byte_offset"]: payload + entry["byte_offset"] + entry["byte_length"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
        la = trained.layer_map()[entry["path"]]
        assert np.array_equal(arr, getattr(la, entry["role"]).data)


def test_golden_file_loads_with_matching_fingerprint(vocab):
    assert hashlib.sha256(GOLDEN.read_bytes()).hexdigest() == GOLDEN_SHA256
    adapter = load_adapter(GOLDEN)
    assert adapter.name == "golden" and adapter.kind == "locon" and adapter.trigger_token == "zkstyle"
    assert adapter.base_model_fingerprint == GOLDEN_FINGERPRINT
    model = build_unet(tiny_config(), seed=0, vocabulary=vocab)
    assert fingerprint(model) == GOLDEN_FINGERPRINT
    assert adapter.blocks == {BlockId.IN0, BlockId.MID, BlockId.OUT3}
    assert len(adapter.layers) == 21 and adapter.parameter_count() == 2480
    for i, la in enumerate(adapter.layers):
        assert la.A.dtype == np.float32
        np.testing.assert_array_equal(la.A.data, golden_pattern(la.A.shape, 2 * i))
        np.testing.assert_array_equal(la.B.data, golden_pattern(la.B.shape, 2 * i + 1))
    # applies cleanly to the model it was built for
    attach(model, adapter)


@pytest.mark.parametrize("cut", [0, 5, 15, 16, 100, -1, -64])
def test_truncated_file_rejected(cut, trained, tmp_path):
    save_adapter(trained, tmp_path / "a.bwla")
    buf = (tmp_path / "a.bwla").read_bytes()
    (tmp_path / "t.bwla").write_bytes(buf[:cut])
    with pytest.raises(FormatError) as info:
        load_adapter(tmp_path / "t.bwla")
    assert 0 <= info.value.offset <= len(buf) and "at byte" in str(info.value)


@settings(max_examples=40, deadline=None)
@given(frac=st.floats(0.0, 0.999))
def test_any_truncation_is_format_error(frac):
    buf = GOLDEN.read_bytes()
    with pytest.raises(FormatError):
        decode(buf[: int(len(buf) * frac)])


def test_bad_magic_and_version():
    buf = bytearray(GOLDEN.read_bytes())
    bad = bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError, match="magic"):
        decode(bad)
    buf[4:8] = struct.pack("<I", 9)
    with pytest.raises(FormatError, match="version") as info:
        decode(bytes(buf))
    assert info.value.offset == 4


def test_inconsistent_byte_length_rejected():
    meta, tensors = decode(GOLDEN.read_bytes())
    meta.pop("tensors")
    good = encode(meta, tensors)
    _, _, meta_len = struct.unpack_from("<4sIQ", good)
    table = json.loads(good[16:16 + meta_len])
    table["tensors"][0]["byte_length"] += 4
    raw = json.dumps(table, sort_keys=True, separators=(",", ":")).encode()
    with pytest.raises(FormatError, match="does not match shape"):
        decode(good[:8] + struct.pack("<Q", len(raw)) + raw + bytes(4096))


def test_model_checkpoint_is_not_an_adapter(tiny32, tmp_path):
    save_model(tiny32, tmp_path / "m.bwla")
    meta, _ = read_file(tmp_path / "m.bwla")
    assert meta["kind"] == "base-model"
    with pytest.raises(FormatError):
        load_adapter(tmp_path / "m.bwla")
    with pytest.raises(FormatError):
        load_model(GOLDEN)


def test_model_round_trip(tmp_path):
    model = build_unet(tiny_config(), seed=3, vocabulary=synthetic_vocabulary())
    save_model(model, tmp_path / "m.bwla", provenance={"note": "x"})
    back = load_model(tmp_path / "m.bwla")
    assert fingerprint(back) == fingerprint(model)
    assert back.config == model.config and back.encoder.vocabulary == model.encoder.vocabulary
    assert read_file(tmp_path / "m.bwla")[0]["provenance"] == {"note": "x"}
