"""Binary tensor container shared by adapters and base-model checkpoints.

Layout (all integers little-endian)::

    b"BWLA" | version: u32 | metadata length: u64 | metadata (UTF-8 JSON)
    | zero padding to a 64-byte boundary | payload

Tensors are stored row-major little-endian inside the payload. Each tensor
starts at a multiple of 64 bytes from the payload start; ``byte_offset`` in
the tensor table is relative to the payload start.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapters import Adapter, BlockRankPolicy, LayerAdapter, _param_name
from .autodiff.tensor import Parameter
from .errors import FormatError
from .unet import BlockId, UNet, UNetConfig, fingerprint

MAGIC = b"BWLA"
VERSION = 1
ALIGN = 64
_HEADER = struct.Struct("<4sIQ")
_WIRE = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise FormatError(f"unsupported tensor dtype {arr.dtype}", 0)


def encode(metadata: dict, tensors: Sequence[tuple[str, str, np.ndarray]]) -> bytes:
    """Serialize ``metadata`` plus (path, role, array) triples. Adds the tensor table to the metadata."""
    table = []
    offset = 0
    blobs = []
    for path, role, arr in tensors:
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=_WIRE[tag]).tobytes()
        offset = _align(offset)
        table.append({"path": path, "role": role, "dtype": tag, "shape": list(arr.shape),
                      "byte_offset": offset, "byte_length": len(raw)})
        blobs.append((offset, raw))
        offset += len(raw)
    meta = dict(metadata)
    meta["tensors"] = table
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload_start = _align(_HEADER.size + len(meta_bytes))
    out = bytearray(payload_start + offset)
    out[: _HEADER.size] = _HEADER.pack(MAGIC, VERSION, len(meta_bytes))
    out[_HEADER.size : _HEADER.size + len(meta_bytes)] = meta_bytes
    for off, raw in blobs:
        out[payload_start + off : payload_start + off + len(raw)] = raw
    return bytes(out)


def decode(buf: bytes) -> tuple[dict, list[tuple[str, str, np.ndarray]]]:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} of {_HEADER.size} bytes", len(buf))
    magic, version, meta_len = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    meta_end = _HEADER.size + meta_len
    if meta_end > len(buf):
        raise FormatError(f"truncated metadata: need {meta_len} bytes", len(buf))
    try:
        meta = json.loads(buf[_HEADER.size : meta_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata is not valid UTF-8 JSON: {exc}", _HEADER.size) from None
    if not isinstance(meta, dict) or not isinstance(meta.get("tensors"), list):
        raise FormatError("metadata lacks a tensor table", _HEADER.size)
    payload = _align(meta_end)
    tensors = []
    for entry in meta["tensors"]:
        try:
            wire = _WIRE[entry["dtype"]]
            shape = tuple(int(s) for s in entry["shape"])
            start = payload + int(entry["byte_offset"])
            length = int(entry["byte_length"])
            path, role = entry["path"], entry["role"]
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"malformed tensor table entry {entry!r}", _HEADER.size) from None
        if entry["byte_offset"] % ALIGN:
            raise FormatError(f"tensor {path} is not {ALIGN}-byte aligned", start)
        if length != int(np.prod(shape, dtype=np.int64)) * wire.itemsize:
            raise FormatError(f"tensor {path}: byte_length {length} does not match shape {shape}", start)
        if start + length > len(buf):
            raise FormatError(f"truncated payload for tensor {path}: need {start + length} bytes, have {len(buf)}", len(buf))
        arr = np.frombuffer(buf, dtype=wire, count=length // wire.itemsize, offset=start).reshape(shape)
        tensors.append((path, role, arr.astype(wire.newbyteorder("="), copy=True)))
    return meta, tensors


def write_file(path: str | os.PathLike, metadata: dict, tensors) -> None:
    data = encode(metadata, tensors)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def read_file(path: str | os.PathLike) -> tuple[dict, list[tuple[str, str, np.ndarray]]]:
    return decode(Path(path).read_bytes())


# --------------------------------------------------------------------------- adapters


def adapter_metadata(adapter: Adapter) -> dict:
    policy = adapter.policy.to_dict()
    return {
        "name": adapter.name,
        "kind": adapter.policy.kind,
        "trigger_token": adapter.trigger_token,
        "base_model_fingerprint": adapter.base_model_fingerprint,
        "alpha": policy["alpha"],
        "ranks": policy["ranks"],
    }


def save_adapter(adapter: Adapter, path: str | os.PathLike, provenance: dict | None = None) -> None:
    """``provenance`` (e.g. the resolved run config) is stored verbatim in the metadata."""
    tensors = []
    for la in adapter.layers:
        tensors.append((la.path, "A", la.A.data))
        tensors.append((la.path, "B", la.B.data))
    meta = adapter_metadata(adapter)
    if provenance is not None:
        meta["provenance"] = provenance
    write_file(path, meta, tensors)


def load_adapter(path: str | os.PathLike) -> Adapter:
    meta, tensors = read_file(path)
    return adapter_from_container(meta, tensors)


def adapter_from_container(meta: dict, tensors) -> Adapter:
    if meta.get("kind") not in ("lora", "locon"):
        raise FormatError(f"not an adapter container (kind={meta.get('kind')!r})", _HEADER.size)
    try:
        policy = BlockRankPolicy(meta["ranks"], meta["alpha"], meta["kind"])
        name = meta["name"]
    except KeyError as exc:
        raise FormatError(f"adapter metadata missing {exc}", _HEADER.size) from None
    factors: dict[str, dict[str, np.ndarray]] = {}
    order: list[str] = []
    for path, role, arr in tensors:
        if path not in factors:
            factors[path] = {}
            order.append(path)
        factors[path][role] = arr
    layers = []
    for path in order:
        pair = factors[path]
        if set(pair) != {"A", "B"}:
            raise FormatError(f"layer {path} lacks an A/B factor pair", _HEADER.size)
        block = BlockId.from_path(path)
        if block is None:
            raise FormatError(f"layer path {path!r} names no block", _HEADER.size)
        a, b = pair["A"], pair["B"]
        kind = "conv" if a.ndim == 4 else "attention-linear"
        rank = a.shape[1] if kind == "conv" else a.shape[0]
        layers.append(LayerAdapter(path, block, kind, rank, policy.alpha[block],
                                   Parameter(a, _param_name(name, path, "A")),
                                   Parameter(b, _param_name(name, path, "B"))))
    return Adapter(name, policy, layers, meta.get("base_model_fingerprint", ""), meta.get("trigger_token", ""))


# --------------------------------------------------------------------------- base models


def save_model(model: UNet, path: str | os.PathLike, provenance: dict | None = None) -> None:
    meta = {
        "kind": "base-model",
        "name": "base",
        "unet_config": model.config.to_dict(),
        "seed": model.seed,
        "vocabulary": [tok for tok, _ in sorted(model.encoder.vocabulary.items(), key=lambda kv: kv[1])][1:],
        "fingerprint": fingerprint(model),
    }
    if provenance is not None:
        meta["provenance"] = provenance
    write_file(path, meta, [(name, "param", p.data) for name, p in model.named_parameters().items()])


def load_model(path: str | os.PathLike) -> UNet:
    meta, tensors = read_file(path)
    if meta.get("kind") != "base-model":
        raise FormatError(f"not a base-model container (kind={meta.get('kind')!r})", _HEADER.size)
    config = UNetConfig.from_dict(meta["unet_config"])
    dtype = tensors[0][2].dtype if tensors else np.float32
    model = UNet(config, meta.get("seed", 0), meta.get("vocabulary", []), dtype=dtype)
    model.load_state_dict({p: arr for p, _, arr in tensors})
    return model
