"""Binary experiment checkpoints.

Layout (all integers little-endian)::

    b"DRLC" | version u16 | config digest 32B | stage u32 | header_len u32
    | header JSON (UTF-8, sorted keys) | float64 LE blocks in header order | sha256 32B

The trailing SHA-256 covers every preceding byte. The header lists each block
as ``[hierarchical_name, shape]``; prototypes are stored as blocks named
``prototypes.<class>.<stream>``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, BackboneState
from .config import RunConfig, load_config
from .engine import IncrementalState, PrototypeStore
from .errors import (
    BadMagicError,
    CorruptCheckpointError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from .ipa import StageModule

MAGIC = b"DRLC"
VERSION = 1
_PREFIX = struct.Struct("<4sH32sII")
_DIGEST_LEN = 32


def _stream_meta(module: StageModule) -> dict:
    first = module.blocks[0]
    return {
        "stage": module.stage,
        "fusion_mode": module.fusion_mode.value,
        "attention_mode": module.attention_mode.value,
        "gamma": module.gamma,
        "per_head": module.per_head,
        "r": first.adapter.w_down.shape[1],
        "transfer_hidden": module.transfer.w_first.shape[1],
        "num_classes": module.head.num_classes if module.head is not None else 0,
    }


def _named_blocks(state: IncrementalState, store: PrototypeStore) -> list[tuple[str, np.ndarray]]:
    blocks = [(f"backbone.{k}", p.data) for k, p in state.backbone.named_params().items()]
    for i, module in enumerate(state.streams):
        blocks += [(f"streams.{i}.{k}", p.data) for k, p in module.named_params().items()]
    for c in store.classes:
        blocks += [(f"prototypes.{c}.{s}", seg) for s, seg in enumerate(store.segments[c])]
    return blocks


def checkpoint_bytes(state: IncrementalState, store: PrototypeStore, config: RunConfig | None = None) -> bytes:
    blocks = _named_blocks(state, store)
    header = {
        "config": config.experiment_fields() if config is not None else None,
        "backbone_config": state.backbone.config.model_dump(mode="json"),
        "pretrain_accuracy": state.backbone.pretrain_accuracy,
        "pretrain_losses": state.backbone.pretrain_losses,
        "streams": [_stream_meta(m) for m in state.streams],
        "class_registry": {str(c): s for c, s in sorted(state.class_registry.items())},
        "provenance": {str(c): store.provenance[c] for c in store.classes},
        "blocks": [[name, list(arr.shape)] for name, arr in blocks],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    digest = config.digest() if config is not None else bytes(_DIGEST_LEN)
    body = bytearray(_PREFIX.pack(MAGIC, VERSION, digest, state.stage_index, len(header_bytes)))
    body += header_bytes
    for _, arr in blocks:
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    body += hashlib.sha256(body).digest()
    return bytes(body)


def save_checkpoint(state: IncrementalState, store: PrototypeStore, path, config: RunConfig | None = None) -> None:
    """Write atomically via a sibling temp file."""
    path = Path(path)
    data = checkpoint_bytes(state, store, config)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def read_header(data: bytes) -> tuple[dict, int, bytes, int]:
    """Validate framing; returns (header, stage, digest, payload offset)."""
    if len(data) < 4:
        raise TruncatedCheckpointError("file shorter than the magic number")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < _PREFIX.size:
        raise TruncatedCheckpointError("file ends inside the fixed prefix")
    _, version, digest, stage, header_len = _PREFIX.unpack_from(data)
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {VERSION}")
    offset = _PREFIX.size + header_len
    if len(data) < offset:
        raise TruncatedCheckpointError("file ends inside the header")
    try:
        header = json.loads(data[_PREFIX.size : offset])
        payload = sum(8 * int(np.prod(shape)) for _, shape in header["blocks"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"unreadable header: {exc}") from exc
    expected = offset + payload + _DIGEST_LEN
    if len(data) < expected:
        raise TruncatedCheckpointError(f"file has {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise CorruptCheckpointError(f"{len(data) - expected} trailing bytes")
    if hashlib.sha256(data[: expected - _DIGEST_LEN]).digest() != data[expected - _DIGEST_LEN :]:
        raise CorruptCheckpointError("checksum mismatch")
    return header, stage, digest, offset


def _assign(params: dict, arrays: dict, prefix: str) -> None:
    for name, p in params.items():
        key = f"{prefix}{name}"
        if key not in arrays:
            raise CorruptCheckpointError(f"missing block {key}")
        arr = arrays.pop(key)
        if arr.shape != p.shape:
            raise CorruptCheckpointError(f"block {key} has shape {arr.shape}, expected {p.shape}")
        p.data = arr
        p.freeze()


def parse_checkpoint(data: bytes) -> tuple[IncrementalState, PrototypeStore, RunConfig | None]:
    header, stage, _, offset = read_header(data)
    arrays = {}
    pos = offset
    for name, shape in header["blocks"]:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * count
    try:
        backbone = BackboneState.init(BackboneConfig.model_validate(header["backbone_config"]))
        backbone.pretrain_accuracy = header["pretrain_accuracy"]
        backbone.pretrain_losses = list(header["pretrain_losses"])
        _assign(backbone.named_params(), arrays, "backbone.")
        rng = np.random.default_rng(0)
        streams = []
        for i, meta in enumerate(header["streams"]):
            module = StageModule.init(
                stage=meta["stage"],
                embed_dim=backbone.config.embed_dim,
                num_blocks=backbone.config.blocks,
                r=meta["r"],
                num_classes=meta["num_classes"],
                rng=rng,
                fusion_mode=meta["fusion_mode"],
                attention_mode=meta["attention_mode"],
                gamma=meta["gamma"],
                transfer_hidden=meta["transfer_hidden"],
                per_head=meta["per_head"],
            )
            _assign(module.named_params(), arrays, f"streams.{i}.")
            streams.append(module)
        store = PrototypeStore()
        for c, flags in header["provenance"].items():
            for s, flag in enumerate(flags):
                store.set_segment(int(c), s, arrays.pop(f"prototypes.{c}.{s}"), flag)
        if arrays:
            raise CorruptCheckpointError(f"unexpected blocks: {sorted(arrays)[:3]}")
        state = IncrementalState(
            backbone=backbone,
            streams=streams,
            class_registry={int(c): s for c, s in header["class_registry"].items()},
        )
        config = load_config(json.dumps(header["config"])) if header["config"] is not None else None
    except CorruptCheckpointError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise CorruptCheckpointError(f"inconsistent checkpoint contents: {exc}") from exc
    if state.stage_index != stage:
        raise CorruptCheckpointError(f"prefix says stage {stage}, header holds {state.stage_index} streams")
    return state, store, config


def load_checkpoint(path) -> tuple[IncrementalState, PrototypeStore, RunConfig | None]:
    return parse_checkpoint(Path(path).read_bytes())


def inspect_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    header, stage, digest, _ = read_header(data)
    return {
        "path": str(path),
        "bytes": len(data),
        "format_version": VERSION,
        "stage": stage,
        "config_digest": digest.hex(),
        "streams": header["streams"],
        "classes": len(header["provenance"]),
        "parameter_blocks": sum(1 for name, _ in header["blocks"] if not name.startswith("prototypes.")),
        "parameters": sum(int(np.prod(s)) for n, s in header["blocks"] if not n.startswith("prototypes.")),
        "pretrain_accuracy": header["pretrain_accuracy"],
    }
