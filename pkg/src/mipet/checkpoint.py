"""Single-file checkpoints: a text manifest followed by a raw float64 payload.

File layout::

    MIPET-CHECKPOINT <format version>\\n
    <manifest length in bytes>\\n
    <manifest: indented JSON>
    <payload: concatenated little-endian float64 arrays>

The manifest records the config hash, the optimizer step, the payload
SHA-256 and, for every array, its name, shape, byte offset and element count.
"""

from __future__ import annotations

import hashlib
import json
import os
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
MAGIC = "MIPET-CHECKPOINT"


class CheckpointError(OSError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointLayoutError(CheckpointError):
    pass


class CheckpointHashError(CheckpointError):
    """Payload digest or config hash does not match the manifest."""


def dumps(arrays: "OrderedDict[str, np.ndarray]", step: int, config_hash: str,
          extra: dict | None = None) -> bytes:
    index, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        data = np.asarray(arr, dtype="<f8")
        index.append({"name": name, "shape": list(data.shape), "offset": offset, "count": int(data.size)})
        chunks.append(data.tobytes(order="C"))
        offset += data.nbytes
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "step": int(step),
        "dtype": "<f8",
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "arrays": index,
        "extra": extra or {},
    }
    text = json.dumps(manifest, indent=1).encode()
    return f"{MAGIC} {FORMAT_VERSION}\n{len(text)}\n".encode() + text + payload


def save(path, arrays, step: int, config_hash: str, extra: dict | None = None) -> None:
    """Write atomically (temp file + rename) so readers never see a partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(arrays, step, config_hash, extra))
    os.replace(tmp, path)


def _read_line(buf: bytes, start: int) -> tuple[str, int]:
    end = buf.find(b"\n", start)
    if end < 0:
        raise CheckpointTruncatedError("checkpoint header is truncated")
    return buf[start:end].decode("ascii", errors="replace"), end + 1


def parse_manifest(buf: bytes) -> tuple[dict, int]:
    first, pos = _read_line(buf, 0)
    parts = first.split()
    if len(parts) != 2 or parts[0] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic line)")
    if parts[1] != str(FORMAT_VERSION):
        raise CheckpointVersionError(f"unsupported checkpoint version {parts[1]} (expected {FORMAT_VERSION})")
    size_line, pos = _read_line(buf, pos)
    try:
        size = int(size_line)
    except ValueError as exc:
        raise CheckpointError(f"bad manifest length {size_line!r}") from exc
    if len(buf) < pos + size:
        raise CheckpointTruncatedError("checkpoint manifest is truncated")
    try:
        manifest = json.loads(buf[pos:pos + size])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"manifest is not valid JSON: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"manifest version {manifest.get('format_version')} != {FORMAT_VERSION}")
    return manifest, pos + size


def _check_layout(manifest: dict) -> None:
    expected = 0
    for entry in sorted(manifest["arrays"], key=lambda e: e["offset"]):
        if int(np.prod(entry["shape"], dtype=np.int64)) != entry["count"]:
            raise CheckpointLayoutError(f"{entry['name']}: shape {entry['shape']} disagrees with count")
        if entry["offset"] < expected:
            raise CheckpointLayoutError(f"{entry['name']}: overlaps the previous array")
        if entry["offset"] > expected:
            raise CheckpointLayoutError(f"{entry['name']}: gap before offset {entry['offset']}")
        expected = entry["offset"] + 8 * entry["count"]
    if expected != manifest["payload_bytes"]:
        raise CheckpointLayoutError(
            f"arrays cover {expected} bytes but payload_bytes is {manifest['payload_bytes']}"
        )


def loads(buf: bytes, config_hash: str | None = None) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    manifest, start = parse_manifest(buf)
    _check_layout(manifest)
    payload = buf[start:]
    if len(payload) < manifest["payload_bytes"]:
        raise CheckpointTruncatedError(
            f"payload has {len(payload)} bytes, manifest expects {manifest['payload_bytes']}"
        )
    if len(payload) > manifest["payload_bytes"]:
        raise CheckpointLayoutError("trailing bytes after the payload")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointHashError("payload digest mismatch: the file is corrupted")
    if config_hash is not None and manifest["config_hash"] != config_hash:
        raise CheckpointHashError(
            f"checkpoint was written for config {manifest['config_hash'][:12]}, not {config_hash[:12]}"
        )
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for entry in manifest["arrays"]:
        arr = np.frombuffer(payload, dtype="<f8", count=entry["count"], offset=entry["offset"])
        arrays[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
    return arrays, manifest


def load(path, config_hash: str | None = None):
    return loads(Path(path).read_bytes(), config_hash)


def model_state(model, store) -> "OrderedDict[str, np.ndarray]":
    """Every model parameter plus the optimizer moments of the trainable ones."""
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, p in model.named_parameters():
        out[f"param/{name}"] = p.detach().cpu().numpy()
    for key, arr in store.state_arrays().items():
        if not key.startswith("param/"):
            out[key] = arr
    return out


def restore_model(model, store, arrays, step: int) -> None:
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = f"param/{name}"
            if key not in arrays:
                raise CheckpointLayoutError(f"checkpoint has no array {key!r}")
            if tuple(arrays[key].shape) != tuple(p.shape):
                raise CheckpointLayoutError(f"{key}: shape {arrays[key].shape} != {tuple(p.shape)}")
            p.copy_(torch.as_tensor(np.array(arrays[key], dtype=np.float64)))
    if store is not None:
        store.load_state_arrays(arrays, step)
