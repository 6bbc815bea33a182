"""Model checkpoints: a text manifest plus little-endian float32 payloads.

Layout::

    bytes 0..6   magic ``PGCKPT1``
    bytes 7..10  manifest length, unsigned 32-bit little-endian
    manifest     UTF-8 JSON: version, model_kind, model config, tensor
                 directory (name/shape/dtype/offset), prototype provenance
    payload      tensors back to back, row-major little-endian binary32

Offsets are relative to the payload start. Reloading reproduces forward
outputs bit-exactly because parameters are stored in their native binary32.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, _ModelBase, build_model

MAGIC = b"PGCKPT1"
VERSION = 1


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def save_checkpoint(model: _ModelBase, path: str | Path, extra: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    provenance = None
    for name, tensor in model.state_dict().items():
        if name.endswith("provenance"):
            provenance = tensor.numpy().tolist()
            continue
        array = tensor.detach().numpy().astype("<f4", copy=False)
        entries.append(
            {"name": name, "shape": list(array.shape), "dtype": "f4", "offset": offset}
        )
        blob = np.ascontiguousarray(array).tobytes()
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "version": VERSION,
        "model_kind": model.kind,
        "model_config": model.model_config.to_dict(),
        "tensors": entries,
        "provenance": provenance,
    }
    if hasattr(model, "bank"):
        manifest["prototypes_total"] = model.bank.total
    if extra:
        manifest["extra"] = extra
    text = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        for blob in blobs:
            fh.write(blob)


def read_manifest(path: str | Path) -> dict:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"bad checkpoint magic, expected {MAGIC!r}", offset=0)
    if len(blob) < len(MAGIC) + 4:
        raise CheckpointFormatError("truncated manifest length", offset=len(blob))
    (length,) = struct.unpack_from("<I", blob, len(MAGIC))
    start = len(MAGIC) + 4
    if len(blob) < start + length:
        raise CheckpointFormatError("truncated manifest", offset=len(blob))
    manifest = json.loads(blob[start : start + length].decode("utf-8"))
    if manifest.get("version") != VERSION:
        raise CheckpointFormatError(
            f"unsupported checkpoint version {manifest.get('version')!r}", offset=start
        )
    manifest["_payload_start"] = start + length
    return manifest


def load_checkpoint(path: str | Path) -> _ModelBase:
    blob = Path(path).read_bytes()
    manifest = read_manifest(path)
    payload_start = manifest.pop("_payload_start")
    config = ModelConfig.from_dict(manifest["model_config"])
    model = build_model(config, seed=0)
    state = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        begin = payload_start + entry["offset"]
        end = begin + 4 * count
        if end > len(blob):
            raise CheckpointFormatError(f"truncated payload for {entry['name']}", offset=len(blob))
        array = np.frombuffer(blob, dtype="<f4", count=count, offset=begin).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(array.copy())
    if manifest.get("provenance") is not None:
        state["bank.provenance"] = torch.tensor(manifest["provenance"], dtype=torch.int64)
    model.load_state_dict(state)
    model.eval()
    return model
