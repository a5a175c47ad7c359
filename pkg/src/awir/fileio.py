"""On-disk formats: AWTF tensor files, AWCK checkpoints, binary PPM previews.

AWTF: magic "AWTF", u32 LE version = 1, u8 dtype (0 = f32), u8 ndim,
ndim x u32 LE dims, then the row-major f32 LE payload.  Used for embeddings,
checkpoints, dataset images, and golden-test fixtures.

AWCK: magic "AWCK", u32 LE version, u32 LE tensor count, then repeated
[u16 LE name length, UTF-8 name, embedded AWTF record]; the remainder of the
file is a UTF-8 "key = value" block holding the model config and any run
state needed for resume.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

AWTF_MAGIC = b"AWTF"
AWCK_MAGIC = b"AWCK"
AWTF_VERSION = 1
AWCK_VERSION = 1


class FormatError(Exception):
    """Malformed or unsupported file contents."""


def awtf_bytes(arr: np.ndarray) -> bytes:
    a = np.ascontiguousarray(arr, dtype=np.float32)
    if a.ndim > 255:
        raise FormatError(f"too many dimensions: {a.ndim}")
    head = AWTF_MAGIC + struct.pack("<IBB", AWTF_VERSION, 0, a.ndim)
    dims = struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b""
    return head + dims + a.tobytes()


def save_awtf(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(awtf_bytes(arr))


def _read_awtf_from(buf: bytes, off: int) -> tuple[np.ndarray, int]:
    if buf[off : off + 4] != AWTF_MAGIC:
        raise FormatError(f"bad AWTF magic at offset {off}")
    version, dtype, ndim = struct.unpack_from("<IBB", buf, off + 4)
    if version != AWTF_VERSION:
        raise FormatError(f"unsupported AWTF version {version}")
    if dtype != 0:
        raise FormatError(f"unsupported AWTF dtype code {dtype}")
    off += 10
    dims = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    count = int(np.prod(dims)) if ndim else 1
    end = off + 4 * count
    if end > len(buf):
        raise FormatError("truncated AWTF payload")
    arr = np.frombuffer(buf[off:end], dtype="<f4").reshape(dims).astype(np.float32)
    return arr, end


def load_awtf(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = _read_awtf_from(buf, 0)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes")
    return arr


def save_checkpoint(
    path: str | Path, tensors: list[tuple[str, np.ndarray]], meta: dict[str, str]
) -> None:
    parts = [AWCK_MAGIC, struct.pack("<II", AWCK_VERSION, len(tensors))]
    for name, arr in tensors:
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name!r}")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(awtf_bytes(arr))
    lines = [f"{k} = {v}" for k, v in meta.items()]
    parts.append("\n".join(lines).encode("utf-8"))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    buf = Path(path).read_bytes()
    if buf[:4] != AWCK_MAGIC:
        raise FormatError(f"{path}: bad AWCK magic")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != AWCK_VERSION:
        raise FormatError(f"unsupported AWCK version {version}")
    off = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        arr, off = _read_awtf_from(buf, off)
        tensors[name] = arr
    meta: dict[str, str] = {}
    for line in buf[off:].decode("utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    return tensors, meta


def save_ppm(path: str | Path, img: np.ndarray) -> None:
    """Write a (3, h, w) float image in [0, 1] as binary PPM (P6, maxval 255)."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise FormatError(f"PPM preview needs a (3, h, w) image, got {img.shape}")
    byts = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[1], img.shape[2]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + byts.transpose(1, 2, 0).tobytes())


def load_ppm(path: str | Path) -> np.ndarray:
    """Read a binary PPM into a (3, h, w) float32 image in [0, 1]."""
    buf = Path(path).read_bytes()
    fields: list[bytes] = []
    off = 0
    while len(fields) < 4:
        while off < len(buf) and buf[off : off + 1].isspace():
            off += 1
        if buf[off : off + 1] == b"#":
            while off < len(buf) and buf[off] != 0x0A:
                off += 1
            continue
        start = off
        while off < len(buf) and not buf[off : off + 1].isspace():
            off += 1
        fields.append(buf[start:off])
    off += 1  # single whitespace after maxval
    if fields[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    raw = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=off)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0
