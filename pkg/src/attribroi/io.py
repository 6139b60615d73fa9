"""File formats: ATSR tensor blobs, binary PGM images, and JSON artifacts.

ATSR layout (all little-endian)::

    b"ATSR" | u32 version | u32 dtype code (1 = f64) | u32 rank | u64 extent * rank | payload

PGM images are written as binary P5. Floats in [0, 1] are quantized with
``floor(v * maxval + 0.5)`` and read back as ``pixel / maxval``; 16-bit
samples are big-endian as the PGM format requires.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .exceptions import ParseError

ATSR_MAGIC = b"ATSR"
ATSR_VERSION = 1
DTYPE_F64 = 1
SCHEMA_VERSION = 1


def atomic_write_bytes(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    atomic_write_bytes(path, dumps_json(obj).encode("utf-8"))


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_report(path, report: dict):
    """Write a JSON artifact, stamping ``schema_version`` if absent."""
    payload = dict(report)
    payload.setdefault("schema_version", SCHEMA_VERSION)
    write_json(path, payload)


# ATSR tensors

def encode_tensor(array) -> bytes:
    # asarray keeps 0-d arrays 0-d; tobytes emits C order regardless of layout
    arr = np.asarray(array, dtype="<f8")
    header = ATSR_MAGIC + struct.pack("<III", ATSR_VERSION, DTYPE_F64, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 16:
        raise ParseError(f"ATSR header truncated at byte offset {len(buf)}: need 16 bytes")
    if buf[:4] != ATSR_MAGIC:
        raise ParseError(f"bad magic {buf[:4]!r} at byte offset 0, expected {ATSR_MAGIC!r}")
    version, dtype, rank = struct.unpack_from("<III", buf, 4)
    if version != ATSR_VERSION:
        raise ParseError(f"unsupported ATSR version {version} at byte offset 4")
    if dtype != DTYPE_F64:
        raise ParseError(f"unsupported dtype code {dtype} at byte offset 8")
    dims_end = 16 + 8 * rank
    if len(buf) < dims_end:
        raise ParseError(f"extent table truncated at byte offset {len(buf)}: need {dims_end} bytes")
    shape = struct.unpack_from(f"<{rank}Q", buf, 16)
    expected = int(np.prod(shape, dtype=np.int64)) * 8
    actual = len(buf) - dims_end
    if actual != expected:
        raise ParseError(
            f"payload at byte offset {dims_end}: expected {expected} bytes, got {actual}"
        )
    return np.frombuffer(buf, dtype="<f8", offset=dims_end).reshape(shape).astype(np.float64)


def write_tensor(path, array):
    atomic_write_bytes(path, encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# PGM images

def quantize(values, maxval):
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * maxval + 0.5).astype(np.int64)


def encode_pgm(pixels, maxval=255) -> bytes:
    """Encode a 2-D integer grid (already in ``0..maxval``) as binary PGM."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError(f"PGM needs a 2-D grid, got shape {pixels.shape}")
    if not 0 < maxval < 65536:
        raise ValueError(f"maxval must be in 1..65535, got {maxval}")
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > maxval:
        raise ValueError("pixel values outside 0..maxval")
    h, w = pixels.shape
    dtype = ">u1" if maxval < 256 else ">u2"
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + pixels.astype(dtype).tobytes()


def decode_pgm(buf: bytes):
    """Return ``(pixels, maxval)`` from a binary P5 file."""
    pos = 0
    fields = []
    if buf[:2] != b"P5":
        raise ParseError(f"bad PGM magic {buf[:2]!r} at byte offset 0")
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ParseError(f"malformed PGM header at byte offset {pos}")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ParseError(f"missing whitespace after PGM header at byte offset {pos}")
    pos += 1
    w, h, maxval = fields
    if not 0 < maxval < 65536:
        raise ParseError(f"PGM maxval {maxval} out of range")
    width = 1 if maxval < 256 else 2
    expected = w * h * width
    actual = len(buf) - pos
    if actual < expected:
        raise ParseError(f"PGM payload at byte offset {pos}: expected {expected} bytes, got {actual}")
    pixels = np.frombuffer(buf, dtype=">u1" if width == 1 else ">u2", count=w * h, offset=pos)
    return pixels.reshape(h, w).astype(np.int64), maxval


def write_image(path, values, maxval=255):
    """Quantize a float grid in [0, 1] and write it as PGM."""
    atomic_write_bytes(path, encode_pgm(quantize(values, maxval), maxval))


def read_image(path) -> np.ndarray:
    pixels, maxval = decode_pgm(Path(path).read_bytes())
    return pixels / maxval


def write_labels(path, labels):
    """Write an integer label grid as a 16-bit PGM."""
    atomic_write_bytes(path, encode_pgm(np.asarray(labels), 65535))


def read_labels(path) -> np.ndarray:
    pixels, _ = decode_pgm(Path(path).read_bytes())
    return pixels
