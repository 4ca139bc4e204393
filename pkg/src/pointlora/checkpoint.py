"""Named-tensor checkpoint files (``PLRK`` format, see docs/formats.md).

Layout: 4-byte magic, u32 version, u64 header length, a UTF-8 JSON header,
zero padding to a 64-byte boundary, then the payload.  Every tensor is raw
little-endian float32 starting on a 64-byte boundary relative to the payload.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .config import model_config_from_dict, to_dict
from .data import SchemaError
from .model import PointClassifier, component_of, trainable_components

MAGIC = b"PLRK"
VERSION = 1
ALIGN = 64
_PREFIX = struct.Struct("<4sIQ")


class CheckpointFormatError(ValueError):
    pass


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def encode(tensors: dict[str, np.ndarray], frozen: dict[str, bool], config: dict) -> bytes:
    entries, offset = [], 0
    for name, arr in tensors.items():
        length = int(arr.size) * 4
        entries.append({"name": name, "dtype": "float32", "shape": list(arr.shape),
                        "offset": offset, "length": length, "frozen": bool(frozen[name])})
        offset += _align(length)
    header = json.dumps({"config": config, "tensors": entries}, sort_keys=True,
                        separators=(",", ":")).encode()
    start = _align(_PREFIX.size + len(header))
    buf = bytearray(start + offset)
    buf[:_PREFIX.size] = _PREFIX.pack(MAGIC, VERSION, len(header))
    buf[_PREFIX.size:_PREFIX.size + len(header)] = header
    for e, arr in zip(entries, tensors.values()):
        pos = start + e["offset"]
        buf[pos:pos + e["length"]] = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(buf)


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray], dict[str, bool]]:
    if len(blob) < _PREFIX.size:
        raise CheckpointFormatError("file too short for a checkpoint header")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    if _PREFIX.size + hlen > len(blob):
        raise CheckpointFormatError("header runs past end of file")
    try:
        header = json.loads(blob[_PREFIX.size:_PREFIX.size + hlen].decode())
        config, entries = header["config"], header["tensors"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from None
    start = _align(_PREFIX.size + hlen)
    tensors, frozen, end_prev = {}, {}, 0
    for e in sorted(entries, key=lambda e: e["offset"]):
        name, shape, off, length = e["name"], tuple(e["shape"]), e["offset"], e["length"]
        if e.get("dtype") != "float32":
            raise CheckpointFormatError(f"{name}: unsupported dtype {e.get('dtype')}")
        if off % ALIGN or off < end_prev:
            raise CheckpointFormatError(f"{name}: misaligned or overlapping offset {off}")
        if length != int(np.prod(shape, dtype=np.int64)) * 4:
            raise CheckpointFormatError(f"{name}: length {length} does not match shape {shape}")
        if start + off + length > len(blob):
            raise CheckpointFormatError(f"{name}: payload truncated")
        if name in tensors:
            raise CheckpointFormatError(f"duplicate tensor {name}")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=length // 4,
                                      offset=start + off).reshape(shape).astype(np.float32)
        frozen[name] = bool(e["frozen"])
        end_prev = off + length
    order = [e["name"] for e in entries]
    return config, {n: tensors[n] for n in order}, {n: frozen[n] for n in order}


def save_checkpoint(model: PointClassifier, registry: dict[str, bool] | None, path) -> None:
    """Write every parameter and buffer with its frozen flag; the write is atomic.

    A buffer counts as frozen when its owning component is frozen.
    """
    registry = registry if registry is not None else {n: p.requires_grad for n, p in model.named_parameters()}
    tensors = {n: p.data for n, p in model.named_parameters()}
    frozen = {n: not registry.get(n, False) for n in tensors}
    live = trainable_components(model.cfg)
    for n, buf in model.named_buffers():
        tensors[n] = buf
        frozen[n] = component_of(n) not in live
    blob = encode(tensors, frozen, {"model": to_dict(model.cfg)})
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[PointClassifier, dict[str, bool]]:
    """Rebuild the model from the stored config and fill in every tensor.

    Returns the model and its trainable registry (name -> not frozen).
    """
    config, tensors, frozen = decode(Path(path).read_bytes())
    try:
        cfg = model_config_from_dict(config["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"checkpoint config invalid: {exc}") from None
    model = PointClassifier(cfg)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    missing = sorted((set(params) | set(buffers)) - set(tensors))
    extra = sorted(set(tensors) - set(params) - set(buffers))
    if missing or extra:
        raise SchemaError(f"checkpoint does not match its config: missing {missing[:5]}, unexpected {extra[:5]}")
    registry = {}
    for name, param in params.items():
        if tensors[name].shape != param.shape:
            raise SchemaError(f"{name}: shape {tensors[name].shape} != expected {param.shape}")
        param.data = tensors[name].astype(param.data.dtype)
        param.requires_grad = not frozen[name]
        registry[name] = param.requires_grad
    for name, buf in buffers.items():
        if tensors[name].shape != buf.shape:
            raise SchemaError(f"{name}: shape {tensors[name].shape} != expected {buf.shape}")
        model.set_buffer(name, tensors[name].astype(buf.dtype))
    return model, registry


def load_backbone(model: PointClassifier, path) -> int:
    """Copy the backbone tensors of a checkpoint into ``model``; returns the count copied."""
    _, tensors, _ = decode(Path(path).read_bytes())
    copied = 0
    for name, param in model.named_parameters():
        if component_of(name) not in ("tokenizer", "pos_embed", "cls", "backbone_linear", "norms"):
            continue
        if name not in tensors:
            raise SchemaError(f"backbone checkpoint lacks {name}")
        if tensors[name].shape != param.shape:
            raise SchemaError(f"{name}: shape {tensors[name].shape} != expected {param.shape}")
        param.data = tensors[name].astype(param.data.dtype)
        copied += 1
    return copied
