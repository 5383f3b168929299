"""Named-tensor checkpoint files with a JSON sidecar.

Binary layout, all integers little-endian uint32::

    magic b"ENRCKPT\\0" | version | count
    count x (name_len | name utf-8 | rank | dims... | float32 data)

The sidecar (``<path>.json``) holds the model config, the vocabularies the
embedding rows were built from, their hashes and the sha256 of the binary.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .data import vocab_hash
from .errors import CheckpointError

MAGIC = b"ENRCKPT\0"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(tensors))]
    for name, array in tensors.items():
        raw = name.encode("utf-8")
        array = np.asarray(array, dtype="<f4")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(array.ndim)]
        parts += [_U32.pack(d) for d in array.shape]
        parts.append(array.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob, source):
        self.blob, self.pos, self.source = blob, 0, source

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"{self.source}: truncated at byte {self.pos} reading {what} "
                f"(needs {n} bytes, {len(self.blob) - self.pos} left)"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]


def decode_tensors(blob: bytes, source="checkpoint") -> dict[str, np.ndarray]:
    r = _Reader(blob, source)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{source}: bad magic at byte 0, not a checkpoint file")
    version = r.u32("format version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version} at byte {len(MAGIC)}")
    count = r.u32("tensor count")
    out = {}
    for i in range(count):
        start = r.pos
        name_len = r.u32(f"name length of tensor {i}")
        try:
            name = r.take(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{source}: tensor {i} name at byte {start + 4} is not UTF-8") from exc
        rank = r.u32(f"rank of {name!r}")
        if rank > 8:
            raise CheckpointError(f"{source}: implausible rank {rank} for {name!r} at byte {r.pos - 4}")
        shape = tuple(r.u32(f"dim {d} of {name!r}") for d in range(rank))
        n_bytes = 4 * int(np.prod(shape, dtype=np.int64))
        data = r.take(n_bytes, f"data of {name!r}")
        if name in out:
            raise CheckpointError(f"{source}: duplicate tensor {name!r} at byte {start}")
        out[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(blob):
        raise CheckpointError(f"{source}: {len(blob) - r.pos} trailing bytes after byte {r.pos}")
    return out


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict, vocabs: dict[str, dict], extra=None):
    """Write the binary and its sidecar; returns the sidecar dict."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_tensors(tensors)
    meta = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "config_hash": config_hash(config),
        "vocabs": {k: sorted(v.items(), key=lambda kv: kv[1]) for k, v in vocabs.items()},
        "vocab_hashes": {k: vocab_hash(v) for k, v in vocabs.items()},
        "sha256": hashlib.sha256(blob).hexdigest(),
        "extra": extra or {},
    }
    _atomic_write(path, blob)
    _atomic_write(sidecar_path(path), json.dumps(meta, indent=1).encode())
    return meta


def load_checkpoint(path, expected_vocab_hashes: dict | None = None):
    """Read and verify a checkpoint.

    Returns:
        ``(tensors, config, vocabs, meta)``.

    Raises:
        CheckpointError: missing files, corrupt bytes, hash mismatches, or a
            vocabulary that differs from ``expected_vocab_hashes``.
    """
    path = Path(path)
    side = sidecar_path(path)
    if not path.exists() or not side.exists():
        raise CheckpointError(f"checkpoint {path} or its sidecar is missing")
    blob = path.read_bytes()
    try:
        meta = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{side}: sidecar is not valid JSON ({exc})") from exc
    digest = hashlib.sha256(blob).hexdigest()
    tensors = decode_tensors(blob, str(path))
    if digest != meta.get("sha256"):
        raise CheckpointError(f"{path}: sha256 {digest[:12]} does not match sidecar {str(meta.get('sha256'))[:12]}")
    if config_hash(meta["config"]) != meta.get("config_hash"):
        raise CheckpointError(f"{side}: config hash mismatch")
    vocabs = {k: {key: idx for key, idx in items} for k, items in meta["vocabs"].items()}
    for name, v in vocabs.items():
        if vocab_hash(v) != meta["vocab_hashes"].get(name):
            raise CheckpointError(f"{side}: stored {name} vocabulary does not match its hash")
    for name, expected in (expected_vocab_hashes or {}).items():
        got = meta["vocab_hashes"].get(name)
        if got != expected:
            raise CheckpointError(f"{path}: {name} vocabulary hash {str(got)[:12]} != expected {expected[:12]}")
    return tensors, meta["config"], vocabs, meta
