"""File formats: the DFT1 tensor container, multi-section checkpoints, binary PGM.

DFT1 block layout (all little-endian)::

    b"DFT1" | u8 dtype (0=f32, 1=f64) | u8 ndim | ndim x u32 extent | payload

A section file bundles named DFT1 blocks::

    b"DFTS" | u32 count | count x (u16 name length | utf-8 name | DFT1 block)

and is accompanied by a ``<path>.manifest`` text file listing ``name<TAB>shape<TAB>dtype``
lines plus ``#key=value`` metadata lines.
"""

from __future__ import annotations

import io
import os
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"DFT1"
SECTIONS_MAGIC = b"DFTS"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float64)
    code = _CODES[arr.dtype]
    if arr.ndim > 255:
        raise FormatError("DFT1 supports at most 255 dimensions")
    head = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one DFT1 block at ``offset``; returns the array and the end offset."""
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError("missing DFT1 magic", offset)
    if len(buf) < offset + 6:
        raise FormatError("truncated DFT1 header", len(buf))
    code, ndim = struct.unpack_from("<BB", buf, offset + 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset + 4)
    pos = offset + 6
    if len(buf) < pos + 4 * ndim:
        raise FormatError("truncated DFT1 extents", len(buf))
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dtype = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError(f"truncated DFT1 payload: need {nbytes} bytes, have {len(buf) - pos}", len(buf))
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def save_dft(path: str | os.PathLike, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_dft(path: str | os.PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after DFT1 block", end)
    return arr


def save_sections(
    path: str | os.PathLike,
    sections: Mapping[str, np.ndarray],
    meta: Mapping[str, object] | None = None,
) -> None:
    """Write named tensors to ``path`` and a text manifest to ``path.manifest``."""
    out = io.BytesIO()
    out.write(SECTIONS_MAGIC + struct.pack("<I", len(sections)))
    lines = []
    for name, arr in sections.items():
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)) + raw)
        block = encode_tensor(arr)
        out.write(block)
        arr = np.asarray(arr)
        dtype = "f32" if block[4] == 0 else "f64"
        lines.append(f"{name}\t{'x'.join(map(str, arr.shape)) or 'scalar'}\t{dtype}")
    Path(path).write_bytes(out.getvalue())
    head = [f"#{k}={v}" for k, v in (meta or {}).items()]
    Path(f"{path}.manifest").write_text("\n".join(head + lines) + "\n")


def load_sections(path: str | os.PathLike) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != SECTIONS_MAGIC:
        raise FormatError("missing DFTS magic", 0)
    if len(buf) < 8:
        raise FormatError("truncated section count", len(buf))
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    sections: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(buf) < pos + 2:
            raise FormatError("truncated section name length", len(buf))
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) < pos + nlen:
            raise FormatError("truncated section name", len(buf))
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        sections[name], pos = decode_tensor(buf, pos)
    if pos != len(buf):
        raise FormatError("trailing bytes after last section", pos)
    return sections


def load_manifest(path: str | os.PathLike) -> tuple[dict[str, tuple[int, ...]], dict[str, str]]:
    """Read ``path.manifest``: returns (name -> shape, metadata)."""
    shapes: dict[str, tuple[int, ...]] = {}
    meta: dict[str, str] = {}
    for line in Path(f"{path}.manifest").read_text().splitlines():
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            meta[key] = value
            continue
        name, shape, _dtype = line.split("\t")
        shapes[name] = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
    return shapes, meta


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Affine map [-1, 1] -> {0..255}."""
    return np.clip(np.rint((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(pix: np.ndarray) -> np.ndarray:
    return pix.astype(np.float64) / 127.5 - 1.0


def save_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    """Write a 2-D (or 1xHxW) image in [-1, 1] as binary P5 with maxval 255."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise FormatError(f"PGM needs a single-channel 2-D image, got shape {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + to_uint8(img).tobytes())


def load_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary P5 PGM (maxval 255) into an HxW float array in [-1, 1]."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise FormatError("not a binary PGM (expected P5 magic)", 0)
    fields: list[int] = []
    starts: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed PGM header field", start)
        fields.append(int(buf[start:pos]))
        starts.append(start)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after PGM maxval", pos)
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval}", starts[2])
    if len(buf) - pos != w * h:
        raise FormatError(f"PGM payload has {len(buf) - pos} bytes, expected {w * h}", pos)
    return from_uint8(np.frombuffer(buf, dtype=np.uint8, offset=pos).reshape(h, w))
