"""Flat binary tensor files: a small self-describing header plus raw data.

Layout (all little-endian): magic ``MFTN``, u32 version, u8 dtype code,
u32 ndim, u64 dims, then the raw element bytes. Used for generated
clips and other array outputs; raw float32 waveforms are headerless and
handled in :mod:`maskflow.features`.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

MAGIC = b"MFTN"
VERSION = 1

_DTYPE_CODES = {
    "<f4": 1,
    "<f8": 2,
    "<i8": 3,
    "|u1": 4,
    "|b1": 5,
}
_CODE_DTYPES = {code: np.dtype(s) for s, code in _DTYPE_CODES.items()}


class TensorFormatError(Exception):
    """Raised for malformed tensor files."""


def _dtype_code(array: np.ndarray) -> int:
    key = array.dtype.newbyteorder("<").str if array.dtype.str[0] == ">" else array.dtype.str
    if key not in _DTYPE_CODES:
        raise TensorFormatError(f"unsupported dtype {array.dtype}")
    return _DTYPE_CODES[key]


def save_tensor(tensor: Tensor | np.ndarray, path: str | Path) -> None:
    array = (
        tensor.detach().cpu().numpy() if isinstance(tensor, Tensor) else np.asarray(tensor)
    )
    shape = array.shape  # before ascontiguousarray, which promotes 0-d to 1-d
    array = np.ascontiguousarray(array)
    if array.dtype.str[0] == ">":
        array = array.astype(array.dtype.newbyteorder("<"))
    code = _dtype_code(array)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IBI", VERSION, code, len(shape)))
        fh.write(struct.pack(f"<{len(shape)}Q", *shape))
        fh.write(array.tobytes())


def load_tensor(path: str | Path) -> Tensor:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic")
    version, code, ndim = struct.unpack_from("<IBI", raw, 4)
    if version != VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    offset = 4 + struct.calcsize("<IBI")
    dims = struct.unpack_from(f"<{ndim}Q", raw, offset)
    offset += 8 * ndim
    dtype = _CODE_DTYPES.get(code)
    if dtype is None:
        raise TensorFormatError(f"{path}: unknown dtype code {code}")
    count = int(np.prod(dims)) if ndim else 1
    expected = offset + count * dtype.itemsize
    if len(raw) != expected:
        raise TensorFormatError(f"{path}: size mismatch ({len(raw)} vs {expected})")
    array = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(dims)
    return torch.from_numpy(array.copy())
