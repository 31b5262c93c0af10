"""Binary PGM/PPM images and the raw little-endian tensor format.

Raw tensor layout::

    magic    8 bytes  b"UUTENSR1"
    dtype    u8       code from DTYPE_CODES
    rank     u8
    extents  rank x u64 little-endian
    payload  packed little-endian values, row-major
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"UUTENSR1"
DTYPE_CODES = {
    0: np.dtype("<f8"),
    1: np.dtype("<f4"),
    2: np.dtype("<i8"),
    3: np.dtype("<i4"),
    4: np.dtype("u1"),
}
_CODE_FOR = {(dt.kind, dt.itemsize): code for code, dt in DTYPE_CODES.items()}
_CODE_FOR[("b", 1)] = 4


class FormatError(ValueError):
    """A file is malformed or truncated."""


# ---------------------------------------------------------------------------
# Raw tensors
# ---------------------------------------------------------------------------


def pack_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODE_FOR.get((arr.dtype.kind, arr.dtype.itemsize))
    if code is None:
        raise ValueError(f"unsupported tensor dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("tensor rank above 255")
    head = TENSOR_MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def unpack_tensor(buf: bytes, offset: int = 0, source: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns it and the next offset."""
    if buf[offset : offset + 8] != TENSOR_MAGIC:
        raise FormatError(f"{source}: bad tensor magic at byte {offset}")
    if len(buf) < offset + 10:
        raise FormatError(f"{source}: truncated tensor header")
    code, rank = struct.unpack_from("<BB", buf, offset + 8)
    if code not in DTYPE_CODES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    pos = offset + 10
    if len(buf) < pos + 8 * rank:
        raise FormatError(f"{source}: truncated tensor extents")
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dtype = DTYPE_CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError(f"{source}: truncated payload ({len(buf) - pos} of {nbytes} bytes)")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def write_tensor(path: str | os.PathLike, arr: np.ndarray) -> None:
    Path(path).write_bytes(pack_tensor(arr))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = unpack_tensor(buf, 0, str(path))
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after tensor payload")
    return arr


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------


def _header_tokens(buf: bytes, count: int, source: str) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(buf):
            raise FormatError(f"{source}: truncated PNM header")
        ch = buf[pos : pos + 1]
        if ch == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end < 0 else end + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
                pos += 1
            tokens.append(buf[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError(f"{source}: missing whitespace after PNM header")
    return tokens, pos + 1


def decode_pnm(buf: bytes, source: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Decode binary P5/P6 bytes into ``(pixels, maxval)``.

    Pixels are ``[H, W]`` for P5 and ``[H, W, 3]`` for P6, as uint8 or uint16.
    """
    tokens, pos = _header_tokens(buf, 4, source)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{source}: unsupported PNM magic {magic!r} (need P5 or P6)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{source}: non-numeric PNM header field") from exc
    if width < 1 or height < 1 or not 1 <= maxval <= 65535:
        raise FormatError(f"{source}: invalid PNM dimensions {width}x{height} or maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = width * height * channels * dtype.itemsize
    if len(buf) - pos < need:
        raise FormatError(f"{source}: truncated raster ({len(buf) - pos} of {need} bytes)")
    pixels = np.frombuffer(buf, dtype=dtype, count=width * height * channels, offset=pos)
    pixels = pixels.astype(np.uint8 if maxval < 256 else np.uint16)
    shape = (height, width) if channels == 1 else (height, width, 3)
    pixels = pixels.reshape(shape)
    if pixels.max(initial=0) > maxval:
        raise FormatError(f"{source}: pixel value exceeds maxval {maxval}")
    return pixels, maxval


def encode_pnm(pixels: np.ndarray, maxval: int = 255) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"PNM needs [H,W] or [H,W,3] pixels, got {pixels.shape}")
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > maxval:
        raise ValueError(f"pixel values outside [0, {maxval}]")
    h, w = pixels.shape[:2]
    raster = pixels.astype("u1" if maxval < 256 else ">u2").tobytes()
    return magic + f"\n{w} {h}\n{maxval}\n".encode() + raster


def read_pnm(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    return decode_pnm(Path(path).read_bytes(), str(path))


def write_pnm(path: str | os.PathLike, pixels: np.ndarray, maxval: int = 255) -> None:
    Path(path).write_bytes(encode_pnm(pixels, maxval))


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Load a PGM/PPM (scaled to [0,1]) or a raw tensor as ``[C, H, W]`` float64."""
    buf = Path(path).read_bytes()
    if buf[:8] == TENSOR_MAGIC:
        arr, end = unpack_tensor(buf, 0, str(path))
        if end != len(buf):
            raise FormatError(f"{path}: trailing bytes after tensor payload")
        arr = arr.astype(np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise FormatError(f"{path}: image tensor must be [H,W] or [C,H,W], got {arr.shape}")
        return arr
    pixels, maxval = decode_pnm(buf, str(path))
    img = pixels.astype(np.float64) / maxval
    return img[None] if img.ndim == 2 else img.transpose(2, 0, 1).copy()


def read_mask(path: str | os.PathLike) -> np.ndarray:
    """Load a label map (PGM pixel value or raw integer tensor) as ``[H, W]`` int64."""
    buf = Path(path).read_bytes()
    if buf[:8] == TENSOR_MAGIC:
        arr, _ = unpack_tensor(buf, 0, str(path))
        if arr.ndim != 2 or arr.dtype.kind not in "iu":
            raise FormatError(f"{path}: mask tensor must be 2-D integer, got {arr.dtype} {arr.shape}")
        return arr.astype(np.int64)
    pixels, _ = decode_pnm(buf, str(path))
    if pixels.ndim != 2:
        raise FormatError(f"{path}: mask must be a single-channel PGM")
    return pixels.astype(np.int64)
