"""On-disk formats: raw tensor container, binary PGM, dataset manifest.

Tensor container layout (all integers little-endian)::

    b"SDD1" | u8 dtype (1=float32, 2=float64) | u8 rank | u16 reserved=0
    | rank x u32 dims | row-major payload
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, List

import numpy as np

TENSOR_MAGIC = b"SDD1"
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODE_OF = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class FormatError(ValueError):
    """Base class for malformed files."""


class BadMagicError(FormatError):
    pass


class BadDtypeError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedError(f"truncated {what}: expected {n} bytes, got {len(data)}")
    return data


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in CODE_OF:
        raise BadDtypeError(f"unsupported dtype {arr.dtype}; only float32/float64")
    if arr.ndim > 255:
        raise FormatError("rank too large")
    code = CODE_OF[arr.dtype]
    header = TENSOR_MAGIC + struct.pack("<BBH", code, arr.ndim, 0)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()
    return header + payload


def decode_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != TENSOR_MAGIC:
        if len(magic) < 4:
            raise TruncatedError("truncated tensor header")
        raise BadMagicError(f"bad tensor magic {magic!r}")
    code, rank, reserved = struct.unpack("<BBH", _read_exact(f, 4, "tensor header"))
    if code not in DTYPE_CODES:
        raise BadDtypeError(f"unknown dtype code {code}")
    if reserved != 0:
        raise FormatError("reserved header field must be 0")
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "tensor dims"))
    dtype = DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = _read_exact(f, count * dtype.itemsize, "tensor payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path, arr) -> None:
    data = encode_tensor(arr)
    with open(path, "wb") as f:
        f.write(data)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        arr = decode_tensor(f)
        if f.read(1):
            raise FormatError(f"trailing bytes after tensor in {path}")
    return arr


# ----------------------------------------------------------------------------
# PGM


def to_uint8(image, lo=None, hi=None) -> np.ndarray:
    """Min-max scale a float map to 0..255 (constant maps become all zero)."""
    a = np.asarray(image, dtype=np.float64)
    lo = a.min() if lo is None else lo
    hi = a.max() if hi is None else hi
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.clip(np.rint((a - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, image) -> None:
    """Write a 2-D image as binary P5 with maxval 255.

    ``uint8`` input is written verbatim; anything else is min-max scaled.
    """
    a = np.asarray(image)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {a.shape}")
    if a.dtype != np.uint8:
        a = to_uint8(a)
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(a).tobytes())


def _pgm_tokens(data: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("malformed PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # one whitespace byte ends the header


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] != b"P5":
        raise FormatError("not a binary PGM (P5)")
    tokens, pos = _pgm_tokens(data, 3)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError("malformed PGM header") from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise FormatError(f"unsupported PGM header (w={w}, h={h}, maxval={maxval})")
    body = data[pos : pos + w * h]
    if len(body) != w * h:
        raise TruncatedError("truncated PGM payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


# ----------------------------------------------------------------------------
# manifest: path<TAB>split<TAB>label<TAB>mask_path_or_dash


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    split: str
    label: int
    mask_path: str = "-"


def write_manifest(path, records: List[ManifestRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(f"{r.path}\t{r.split}\t{r.label}\t{r.mask_path or '-'}\n")


def read_manifest(path) -> List[ManifestRecord]:
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 tab-separated fields")
            p, split, label, mask = parts
            resolve = lambda q: q if os.path.isabs(q) else os.path.join(base, q)  # noqa: E731
            out.append(ManifestRecord(resolve(p), split, int(label), "-" if mask == "-" else resolve(mask)))
    return out


def tensor_bytes(arr) -> io.BytesIO:
    return io.BytesIO(encode_tensor(arr))
