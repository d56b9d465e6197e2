"""Minimal PNG codec for 8-bit RGB images.

Writes color-type-2 (truecolor) PNGs with filter 0 on every scanline and a
fixed zlib level, so identical pixels always produce identical bytes (no
timestamps, no ancillary chunks).  Reads any single-image 8-bit RGB PNG,
including scanlines filtered with types 0-4.
"""
from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import DataError, UsageError

_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_ZLIB_LEVEL = 6
_BPP = 3  # bytes per pixel, 8-bit RGB


def _chunk(kind: bytes, payload: bytes) -> bytes:
    return struct.pack(">I", len(payload)) + kind + payload \
        + struct.pack(">I", zlib.crc32(kind + payload))


def _to_u8(image: np.ndarray) -> np.ndarray:
    """Accept (3, H, W) float in [0, 1] or uint8; return (H, W, 3) uint8."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise UsageError(f"image must be (3, H, W), got {arr.shape}")
    if arr.dtype == np.uint8:
        return np.ascontiguousarray(arr.transpose(1, 2, 0))
    if arr.dtype.kind != "f":
        raise UsageError(f"image dtype must be float or uint8, got {arr.dtype}")
    if arr.min() < -1e-6 or arr.max() > 1.0 + 1e-6:
        raise UsageError(
            f"float image values must lie in [0, 1], got [{arr.min():.4f}, {arr.max():.4f}]")
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(u8.transpose(1, 2, 0))


def encode_png(image: np.ndarray) -> bytes:
    """Serialize a (3, H, W) image ([0,1] float or uint8) to PNG bytes."""
    hwc = _to_u8(image)
    h, w = hwc.shape[:2]
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    rows = np.zeros((h, 1 + w * _BPP), dtype=np.uint8)
    rows[:, 1:] = hwc.reshape(h, w * _BPP)  # filter byte 0 + raw scanline
    idat = zlib.compress(rows.tobytes(), _ZLIB_LEVEL)
    return _SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", idat) + _chunk(b"IEND", b"")


def write_png(path, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_png(image))


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    if pb <= pc:
        return b
    return c


def _unfilter(raw: bytes, h: int, w: int) -> np.ndarray:
    stride = w * _BPP
    if len(raw) != h * (stride + 1):
        raise DataError(f"decompressed pixel data is {len(raw)} bytes, "
                        f"expected {h * (stride + 1)} for {w}x{h}")
    out = np.zeros((h, stride), dtype=np.uint8)
    for y in range(h):
        line = raw[y * (stride + 1): (y + 1) * (stride + 1)]
        ftype, cur = line[0], bytearray(line[1:])
        prev = out[y - 1] if y else np.zeros(stride, dtype=np.uint8)
        if ftype == 0:
            pass
        elif ftype == 1:  # sub: add reconstructed left neighbour
            for i in range(_BPP, stride):
                cur[i] = (cur[i] + cur[i - _BPP]) & 0xFF
        elif ftype == 2:  # up
            cur = bytearray((np.frombuffer(bytes(cur), np.uint8) + prev).astype(np.uint8))
        elif ftype == 3:  # average of left and up
            for i in range(stride):
                left = cur[i - _BPP] if i >= _BPP else 0
                cur[i] = (cur[i] + (left + int(prev[i])) // 2) & 0xFF
        elif ftype == 4:  # Paeth predictor
            for i in range(stride):
                left = cur[i - _BPP] if i >= _BPP else 0
                upleft = int(prev[i - _BPP]) if i >= _BPP else 0
                cur[i] = (cur[i] + _paeth(left, int(prev[i]), upleft)) & 0xFF
        else:
            raise DataError(f"unknown scanline filter type {ftype} on row {y}")
        out[y] = np.frombuffer(bytes(cur), np.uint8)
    return out.reshape(h, w, _BPP)


def decode_png(data: bytes) -> np.ndarray:
    """Parse PNG bytes into a (3, H, W) float32 array in [0, 1]."""
    if not isinstance(data, (bytes, bytearray)) or not data.startswith(_SIGNATURE):
        raise DataError("not a PNG stream (bad signature)")
    pos = len(_SIGNATURE)
    header = None
    idat = b""
    ended = False
    while pos < len(data):
        if pos + 8 > len(data):
            raise DataError("truncated PNG: chunk header cut short")
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        kind = data[pos + 4:pos + 8]
        body = data[pos + 8:pos + 8 + length]
        if len(body) != length or pos + 12 + length > len(data):
            raise DataError(f"truncated PNG: {kind!r} chunk cut short")
        (crc,) = struct.unpack(">I", data[pos + 8 + length:pos + 12 + length])
        if crc != zlib.crc32(kind + body):
            raise DataError(f"PNG chunk {kind!r} failed its checksum")
        pos += 12 + length
        if kind == b"IHDR":
            header = struct.unpack(">IIBBBBB", body)
        elif kind == b"IDAT":
            idat += body
        elif kind == b"IEND":
            ended = True
            break
    if header is None or not ended:
        raise DataError("PNG missing IHDR or IEND")
    w, h, depth, color, comp, filt, interlace = header
    if depth != 8 or color != 2:
        raise DataError(f"only 8-bit RGB supported, got depth {depth} color type {color}")
    if comp != 0 or filt != 0 or interlace != 0:
        raise DataError("unsupported PNG compression/filter/interlace mode")
    if w < 1 or h < 1:
        raise DataError(f"invalid PNG dimensions {w}x{h}")
    try:
        raw = zlib.decompress(idat)
    except zlib.error as exc:
        raise DataError(f"PNG pixel data failed to decompress: {exc}") from exc
    hwc = _unfilter(raw, h, w)
    return (hwc.transpose(2, 0, 1).astype(np.float32) / 255.0)


def read_png(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_png(fh.read())
