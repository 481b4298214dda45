"""Binary checkpoint container.

Layout::

    b"GAVNCKP1" | uint64 LE header length | UTF-8 JSON header | payload

The payload is the concatenation of little-endian float32 arrays; the header's
``manifest`` lists ``name``, ``shape``, byte ``offset`` and byte ``size`` of each
array, tiling the payload exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"GAVNCKP1"
DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    header: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def stage(self) -> str:
        return self.header.get("stage", "")


def _encode_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(ckpt: Checkpoint) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name in sorted(ckpt.arrays):
        arr = np.array(ckpt.arrays[name], dtype=DTYPE, order="C")  # keeps 0-d shapes
        raw = arr.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "size": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = dict(ckpt.header)
    header["manifest"] = manifest
    header["payload_bytes"] = offset
    hb = _encode_header(header)
    return MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(chunks)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def _validate_manifest(header: dict) -> list[dict]:
    manifest = header.get("manifest")
    if not isinstance(manifest, list):
        raise CheckpointError("header has no parameter manifest")
    expected = 0
    seen = set()
    for entry in manifest:
        name = entry["name"]
        if name in seen:
            raise CheckpointError(f"duplicate array name {name!r} in manifest")
        seen.add(name)
        n = int(np.prod(entry["shape"], dtype=np.int64)) * DTYPE.itemsize
        if entry["offset"] != expected or entry["size"] != n:
            raise CheckpointError(
                f"manifest entry {name!r} (offset {entry['offset']}, size {entry['size']}) does not tile the payload"
            )
        expected += n
    if header.get("payload_bytes") != expected:
        raise CheckpointError(f"manifest covers {expected} bytes but header declares {header.get('payload_bytes')}")
    return manifest


def from_bytes(data: bytes) -> Checkpoint:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(data) < 16:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    manifest = _validate_manifest(header)
    payload = data[16 + hlen :]
    if len(payload) != header["payload_bytes"]:
        for entry in manifest:
            if entry["offset"] + entry["size"] > len(payload):
                raise CheckpointError(
                    f"payload has {len(payload)} of {header['payload_bytes']} bytes; "
                    f"first missing parameter is {entry['name']!r}"
                )
        raise CheckpointError(f"payload has {len(payload)} bytes, expected {header['payload_bytes']}")
    arrays = {}
    for entry in manifest:
        raw = payload[entry["offset"] : entry["offset"] + entry["size"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=DTYPE).reshape(tuple(entry["shape"])).copy()
    header = {k: v for k, v in header.items() if k not in ("manifest", "payload_bytes")}
    return Checkpoint(header, arrays)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(hlen).decode("utf-8"))


def module_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}{n}": p.detach().cpu().numpy().astype(DTYPE) for n, p in module.named_parameters()}


def load_module(module: torch.nn.Module, ckpt: Checkpoint, prefix: str, strict: bool = True) -> None:
    """Copy ``prefix``-named arrays into ``module``; unknown or missing names are errors."""
    params = dict(module.named_parameters())
    names = {k[len(prefix):] for k in ckpt.arrays if k.startswith(prefix)}
    unknown = sorted(names - set(params))
    if unknown:
        raise CheckpointError(f"checkpoint has unknown parameters under {prefix!r}: {unknown[:5]}")
    missing = sorted(set(params) - names)
    if strict and missing:
        raise CheckpointError(f"checkpoint lacks parameters under {prefix!r}: {missing[:5]}")
    with torch.no_grad():
        for n in names:
            arr = ckpt.arrays[prefix + n]
            if tuple(arr.shape) != tuple(params[n].shape):
                raise CheckpointError(f"shape mismatch for {prefix + n}: {arr.shape} vs {tuple(params[n].shape)}")
            params[n].copy_(torch.from_numpy(arr))
