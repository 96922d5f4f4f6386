"""Binary sidecar formats: GTEN tensors and netpbm images.

GTEN layout (little-endian): b"GTEN", u32 rank, u32 dims[rank], f32 data
in row-major order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """Base class for malformed binary files."""


class MagicMismatch(FormatError):
    pass


class DimensionMismatch(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


GTEN_MAGIC = b"GTEN"


def gten_bytes(array) -> bytes:
    a = np.asarray(array, dtype="<f4", order="C")
    head = GTEN_MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def save_gten(path, array) -> None:
    Path(path).write_bytes(gten_bytes(array))


def parse_gten(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise TruncatedFile("GTEN header shorter than 8 bytes")
    if buf[:4] != GTEN_MAGIC:
        raise MagicMismatch(f"expected GTEN magic, got {buf[:4]!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 4 * rank
    if len(buf) < off:
        raise TruncatedFile("GTEN dims truncated")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    need = off + 4 * count
    if len(buf) < need:
        raise TruncatedFile(f"GTEN payload has {len(buf) - off} bytes, need {4 * count}")
    if len(buf) > need:
        raise DimensionMismatch("GTEN payload longer than declared dims")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).copy()


def load_gten(path) -> np.ndarray:
    return parse_gten(Path(path).read_bytes())


def _to_u8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def _pnm_header(kind: bytes, w: int, h: int, comment: str | None) -> bytes:
    note = b"" if not comment else b"# " + comment.encode("ascii") + b"\n"
    return kind + b"\n" + note + b"%d %d\n255\n" % (w, h)


def save_ppm(path, rgb, comment: str | None = None) -> None:
    """Write an H x W x 3 float image in [0, 1] as binary P6."""
    px = _to_u8(rgb)
    h, w, _ = px.shape
    Path(path).write_bytes(_pnm_header(b"P6", w, h, comment) + px.tobytes())


def save_pgm(path, mask, comment: str | None = None) -> None:
    """Write a boolean mask as binary P5 with values 0/255."""
    px = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    h, w = px.shape
    Path(path).write_bytes(_pnm_header(b"P5", w, h, comment) + px.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read P5/P6 files written by this module back as uint8."""
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    kind, w, h = fields[0], int(fields[1]), int(fields[2])
    data = np.frombuffer(raw, dtype=np.uint8, offset=pos + 1)
    if kind == b"P6":
        return data.reshape(h, w, 3)
    return data.reshape(h, w)
