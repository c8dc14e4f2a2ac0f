"""File formats: 16-bit PCM WAV, GELPF feature containers, GELPW weights.

GELPF: magic "GELPF", u32 version, u32 K, u32 C, f32 little-endian
row-major payload.

GELPW: magic "GELPW", u32 version, u32 config length, config bytes
(key=value lines), u32 tensor count, then per tensor: u16 name length, name
bytes, u8 ndim, u32 dims, f32 little-endian payload.

Checkpoints reuse the GELPW container and append a "GELPO" optimizer-state
section whose tensor records carry a dtype byte (4 = f32, 8 = f64) so
64-bit training state round-trips exactly.

All writers stage to a temporary file and rename atomically, so failed runs
never leave partial outputs.
"""
from __future__ import annotations

import os
import struct
import wave
from dataclasses import dataclass

import numpy as np

GELPF_MAGIC = b"GELPF"
GELPW_MAGIC = b"GELPW"
GELPO_MAGIC = b"GELPO"
FORMAT_VERSION = 1


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


class FormatError(ValueError):
    """Corrupt or mismatched file content."""


def atomic_write(path: str, payload: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def read_wav(path: str) -> Waveform:
    with wave.open(path, "rb") as fh:
        if fh.getnchannels() != 1:
            raise FormatError(f"{path}: expected mono audio, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise FormatError(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path: str, wav: Waveform) -> None:
    pcm = np.clip(np.round(wav.samples * 32767.0), -32768, 32767).astype("<i2")
    import io as _io

    buf = _io.BytesIO()
    with wave.open(buf, "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wav.sample_rate)
        fh.writeframes(pcm.tobytes())
    atomic_write(path, buf.getvalue())


def write_gelpf(path: str, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise ValueError(f"feature frames must be 2-D, got shape {frames.shape}")
    head = GELPF_MAGIC + struct.pack("<III", FORMAT_VERSION, *frames.shape)
    atomic_write(path, head + frames.tobytes())


def read_gelpf(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != GELPF_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected GELPF")
        version, k, c = struct.unpack("<III", fh.read(12))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported GELPF version {version}")
        payload = fh.read(4 * k * c)
    if len(payload) != 4 * k * c:
        raise FormatError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(k, c).astype(np.float64)


_DTYPE_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def _pack_tensor(name: str, arr: np.ndarray, with_dtype: bool) -> bytes:
    encoded = name.encode()
    parts = [struct.pack("<H", len(encoded)), encoded]
    if with_dtype:
        code = 8 if arr.dtype == np.float64 else 4
        parts.append(struct.pack("<B", code))
        arr = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code])
    else:
        arr = np.ascontiguousarray(arr, dtype="<f4")
    parts.append(struct.pack("<B", arr.ndim))
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(arr.tobytes())
    return b"".join(parts)


def _unpack_tensor(fh, with_dtype: bool, path: str):
    raw = fh.read(2)
    if len(raw) != 2:
        raise FormatError(f"{path}: truncated tensor record")
    (namelen,) = struct.unpack("<H", raw)
    name = fh.read(namelen).decode()
    if with_dtype:
        (code,) = struct.unpack("<B", fh.read(1))
        if code not in _DTYPE_CODES:
            raise FormatError(f"{path}: unknown dtype code {code} for {name}")
        dtype = _DTYPE_CODES[code]
    else:
        dtype = np.dtype("<f4")
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    payload = fh.read(dtype.itemsize * count)
    if len(payload) != dtype.itemsize * count:
        raise FormatError(f"{path}: truncated payload for tensor {name}")
    return name, np.frombuffer(payload, dtype=dtype).reshape(shape)


def _section_bytes(magic: bytes, config: str, tensors: dict, with_dtype: bool) -> bytes:
    cfg = config.encode()
    parts = [magic, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        parts.append(_pack_tensor(name, np.asarray(arr), with_dtype))
    return b"".join(parts)


def _read_section(fh, magic: bytes, with_dtype: bool, path: str):
    got = fh.read(5)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic.decode()}")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (cfg_len,) = struct.unpack("<I", fh.read(4))
    config = fh.read(cfg_len).decode()
    (count,) = struct.unpack("<I", fh.read(4))
    tensors = {}
    for _ in range(count):
        name, arr = _unpack_tensor(fh, with_dtype, path)
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor name {name}")
        tensors[name] = arr
    return config, tensors


def write_gelpw(path: str, config: str, tensors: dict) -> None:
    atomic_write(path, _section_bytes(GELPW_MAGIC, config, tensors, with_dtype=False))


def read_gelpw(path: str):
    with open(path, "rb") as fh:
        return _read_section(fh, GELPW_MAGIC, with_dtype=False, path=path)


def write_checkpoint(path: str, config: str, weights: dict, state_config: str, state: dict) -> None:
    payload = _section_bytes(GELPW_MAGIC, config, weights, with_dtype=False)
    payload += _section_bytes(GELPO_MAGIC, state_config, state, with_dtype=True)
    atomic_write(path, payload)


def read_checkpoint(path: str):
    with open(path, "rb") as fh:
        config, weights = _read_section(fh, GELPW_MAGIC, with_dtype=False, path=path)
        state_config, state = _read_section(fh, GELPO_MAGIC, with_dtype=True, path=path)
    return config, weights, state_config, state
