"""Binary tensor format and named-parameter manifests.

Layout: ``b"MGT1"``, u32 rank, rank x u32 extents, float32 payload, all
little-endian.
"""
from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"MGT1"


class FormatError(ValueError):
    code = "format_error"


class BadMagicError(FormatError):
    code = "bad_magic"


class TruncatedPayloadError(FormatError):
    code = "truncated_payload"


class ExtentMismatchError(FormatError):
    code = "extent_mismatch"


class VersionMismatchError(FormatError):
    code = "version_mismatch"


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedPayloadError(f"{what}: expected {n} bytes, got {len(buf)}")
    return buf


def write_tensor(f: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array)
    f.write(MAGIC)
    f.write(struct.pack("<I", array.ndim))
    f.write(struct.pack(f"<{array.ndim}I", *array.shape))
    f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "extents"))
    count = int(np.prod(shape, dtype=np.int64))
    payload = _read_exact(f, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)


def tensor_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        arr = read_tensor(f)
        if f.read(1):
            raise ExtentMismatchError(f"{path}: trailing bytes after declared extents")
    return arr


def _safe_name(name: str) -> str:
    return name.replace("/", "_").replace(".", "_")


def save_manifest(directory, tensors: Mapping[str, np.ndarray]) -> Path:
    """One MGT1 file per named tensor plus ``manifest.txt`` of ``name file`` lines."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, arr in tensors.items():
        fname = _safe_name(name) + ".mgt"
        save_tensor(directory / fname, arr)
        lines.append(f"{name} {fname}")
    path = directory / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def load_manifest(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    out = {}
    for line in (directory / "manifest.txt").read_text().splitlines():
        if not line.strip():
            continue
        name, fname = line.split()
        out[name] = load_tensor(os.path.join(directory, fname))
    return out
