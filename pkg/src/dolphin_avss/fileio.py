"""WAV and DLPH tensor-container I/O. Every write goes through a temp file and a rename.

DLPH layout (all little-endian)::

    b"DLPH" | u32 version | u32 count
    count x ( u16 name_len | name (utf-8) | u8 dtype | u8 rank | rank x u64 dim | raw data )

dtype codes: 0 = float32, 1 = float64, 2 = int64.
"""
from __future__ import annotations

import io
import os
import struct
import tempfile
import warnings
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import torch

from .config import SAMPLE_RATE

MAGIC = b"DLPH"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


class FormatError(IOError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# WAV

def read_wav(path, target_rate: int = SAMPLE_RATE):
    """Returns ``(x [1, L] float32 in [-1, 1], rate)``; stereo is averaged, other rates resampled linearly."""
    try:
        rate, data = scipy.io.wavfile.read(str(path))
    except (ValueError, EOFError, struct.error) as err:
        raise FormatError(f"{path}: unreadable WAV ({err})") from None
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype} (need PCM-16 or float32)")
    if x.ndim == 2:
        if x.shape[1] > 1:
            warnings.warn(f"{path}: {x.shape[1]} channels averaged to mono", stacklevel=2)
        x = x.mean(axis=1)
    if rate != target_rate:
        warnings.warn(f"{path}: resampling {rate} Hz to {target_rate} Hz (linear)", stacklevel=2)
        n_out = int(round(len(x) * target_rate / rate))
        x = np.interp(np.arange(n_out) * rate / target_rate, np.arange(len(x)), x)
        rate = target_rate
    return torch.from_numpy(x.astype(np.float32))[None], rate


def write_wav(path, x, rate: int = SAMPLE_RATE) -> None:
    """Write a mono 32-bit float WAV."""
    data = torch.as_tensor(x).detach().reshape(-1).to(torch.float32).numpy()
    buf = io.BytesIO()
    scipy.io.wavfile.write(buf, rate, data)
    atomic_write_bytes(path, buf.getvalue())


# ---------------------------------------------------------------------------
# DLPH

def encode_tensors(tensors) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = torch.as_tensor(value).detach().cpu().numpy().copy(order="C")
        if arr.dtype not in CODES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"{name}: name or rank too large")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", CODES[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return b"".join(out)


def decode_tensors(data: bytes) -> dict[str, torch.Tensor]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated container: need {n} bytes at offset {pos}, have {len(view) - pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("bad magic (not a DLPH container)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dtype = DTYPES[code]
        size = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize
        arr = np.frombuffer(bytes(take(size)), dtype=dtype).reshape(dims)
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}")
        tensors[name] = torch.from_numpy(arr.astype(dtype.newbyteorder("="), copy=True))
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after {count} entries")
    return tensors


def save_tensors(path, tensors) -> None:
    atomic_write_bytes(path, encode_tensors(tensors))


def load_tensors(path) -> dict[str, torch.Tensor]:
    return decode_tensors(Path(path).read_bytes())


def save_weights(module: torch.nn.Module, path) -> None:
    save_tensors(path, module.state_dict())


def load_weights(module: torch.nn.Module, path, strict: bool = True) -> None:
    """Load a container into ``module``; nothing is copied unless every check passes."""
    tensors = load_tensors(path)
    expected = module.state_dict()
    if strict:
        extra = sorted(set(tensors) - set(expected))
        missing = sorted(set(expected) - set(tensors))
        if extra:
            raise FormatError(f"unexpected tensor(s) in {path}: {', '.join(extra)}")
        if missing:
            raise FormatError(f"missing tensor(s) in {path}: {', '.join(missing)}")
    for name, value in tensors.items():
        if name in expected and tuple(expected[name].shape) != tuple(value.shape):
            raise FormatError(f"{name}: shape {tuple(value.shape)} != expected {tuple(expected[name].shape)}")
    state = {k: v.to(expected[k].dtype) for k, v in tensors.items() if k in expected}
    module.load_state_dict(state, strict=strict)
