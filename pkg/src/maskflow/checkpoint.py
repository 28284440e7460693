"""Seeded random streams and the run checkpoint format.

Checkpoints are a single binary file with a canonical layout so that
save -> load -> save reproduces the file byte for byte:

* magic ``MFCK``, u32 version
* u64 length + JSON metadata (sorted keys; config digest, schedule
  position, history, blob manifest extras)
* u32 blob count, then blobs sorted by name: u16 name length, utf-8
  name, u8 dtype code, u8 ndim, u64 dims, raw little-endian data
* u16 stream count, then per stream: u16 name length, name, u64 state
  length, generator state bytes
* u32 CRC32 of everything above

Tensors cover model parameters, the inter-task average used for weight
merging, optimizer state, and any banked negative samples; metadata
holds everything JSON-safe.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

MAGIC = b"MFCK"
VERSION = 1

_DTYPE_CODES = {
    torch.float32: 1,
    torch.float64: 2,
    torch.int64: 3,
    torch.uint8: 4,
    torch.bool: 5,
    torch.int32: 6,
}
_CODE_TO_NUMPY = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i8"),
    4: np.dtype("|u1"),
    5: np.dtype("|b1"),
    6: np.dtype("<i4"),
}


class CheckpointError(Exception):
    """Raised for unreadable, corrupt, or incompatible checkpoints."""


def derive_seed(master_seed: int, name: str) -> int:
    """Stable 63-bit seed for a named stream under one master seed."""
    digest = hashlib.sha256(f"{master_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


class RandomStreams:
    """Named torch generators, each seeded independently from one master seed.

    Every stochastic choice in the system draws from a named stream
    (data, init, noise, timestep, negatives, sampling, ...) so that
    consumers do not perturb each other and state can be captured and
    restored exactly.
    """

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)
        self._generators: dict[str, torch.Generator] = {}

    def get(self, name: str) -> torch.Generator:
        gen = self._generators.get(name)
        if gen is None:
            gen = torch.Generator()
            gen.manual_seed(derive_seed(self.master_seed, name))
            self._generators[name] = gen
        return gen

    def names(self) -> list[str]:
        return sorted(self._generators)

    def state_bytes(self) -> dict[str, bytes]:
        return {
            name: bytes(gen.get_state().numpy().tobytes())
            for name, gen in self._generators.items()
        }

    def load_state_bytes(self, states: dict[str, bytes]) -> None:
        for name, raw in states.items():
            gen = self.get(name)
            gen.set_state(torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).copy()))


@dataclass
class Checkpoint:
    """Everything needed to resume a run mid-schedule."""

    tensors: dict[str, Tensor]
    meta: dict
    rng_states: dict[str, bytes] = field(default_factory=dict)


def _encode_tensor(name: str, tensor: Tensor) -> bytes:
    if tensor.dtype not in _DTYPE_CODES:
        raise CheckpointError(f"blob {name!r}: unsupported dtype {tensor.dtype}")
    array = tensor.detach().cpu().contiguous().numpy()
    code = _DTYPE_CODES[tensor.dtype]
    target = _CODE_TO_NUMPY[code]
    if array.dtype != target:
        array = array.astype(target)
    name_raw = name.encode()
    if len(name_raw) > 0xFFFF:
        raise CheckpointError(f"blob name too long: {name!r}")
    if array.ndim > 0xFF:
        raise CheckpointError(f"blob {name!r}: too many dims")
    parts = [
        struct.pack("<H", len(name_raw)),
        name_raw,
        struct.pack("<BB", code, array.ndim),
        struct.pack(f"<{array.ndim}Q", *array.shape),
        array.tobytes(),
    ]
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    meta_raw = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode()
    body = [MAGIC, struct.pack("<I", VERSION)]
    body.append(struct.pack("<Q", len(meta_raw)))
    body.append(meta_raw)
    names = sorted(ckpt.tensors)
    body.append(struct.pack("<I", len(names)))
    for name in names:
        body.append(_encode_tensor(name, ckpt.tensors[name]))
    stream_names = sorted(ckpt.rng_states)
    body.append(struct.pack("<H", len(stream_names)))
    for name in stream_names:
        raw = ckpt.rng_states[name]
        name_raw = name.encode()
        body.append(struct.pack("<H", len(name_raw)))
        body.append(name_raw)
        body.append(struct.pack("<Q", len(raw)))
        body.append(raw)
    blob = b"".join(body)
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    Path(path).write_bytes(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    stored_crc = struct.unpack_from("<I", raw, len(raw) - 4)[0]
    actual_crc = zlib.crc32(raw[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt file)")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    offset = 8
    (meta_len,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    meta = json.loads(raw[offset : offset + meta_len].decode())
    offset += meta_len
    (n_blobs,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    tensors: dict[str, Tensor] = {}
    for _ in range(n_blobs):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + name_len].decode()
        offset += name_len
        code, ndim = struct.unpack_from("<BB", raw, offset)
        offset += 2
        dims = struct.unpack_from(f"<{ndim}Q", raw, offset)
        offset += 8 * ndim
        dtype = _CODE_TO_NUMPY.get(code)
        if dtype is None:
            raise CheckpointError(f"{path}: blob {name!r} has unknown dtype code {code}")
        count = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(dims)
        offset += count * dtype.itemsize
        tensors[name] = torch.from_numpy(data.copy())
    (n_streams,) = struct.unpack_from("<H", raw, offset)
    offset += 2
    rng_states: dict[str, bytes] = {}
    for _ in range(n_streams):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + name_len].decode()
        offset += name_len
        (state_len,) = struct.unpack_from("<Q", raw, offset)
        offset += 8
        rng_states[name] = bytes(raw[offset : offset + state_len])
        offset += state_len
    if offset != len(raw) - 4:
        raise CheckpointError(f"{path}: trailing bytes after payload")
    return Checkpoint(tensors=tensors, meta=meta, rng_states=rng_states)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def pack_state_dict(prefix: str, state: dict[str, Tensor]) -> dict[str, Tensor]:
    return {f"{prefix}.{key}": value for key, value in state.items()}


def unpack_state_dict(prefix: str, tensors: dict[str, Tensor]) -> dict[str, Tensor]:
    head = f"{prefix}."
    return {
        key[len(head) :]: value for key, value in tensors.items() if key.startswith(head)
    }
