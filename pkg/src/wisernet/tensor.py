"""Image/noise value types and the two on-disk formats (binary PPM, WLTENSOR).

Tensors are plain ``numpy.ndarray`` objects of dtype float32 or float64.
Images and noise fields are small frozen wrappers around read-only
``(3, M, N)`` arrays in R, G, B band order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DimensionMismatch,
    IoFailure,
    MalformedHeader,
    ShapeOverflow,
    TruncatedPayload,
)

TENSOR_MAGIC = b"WLTENSOR"
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_MAX_ELEMENTS = 1 << 62


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PlanarImage:
    """A 3-band 8-bit color image, bands ordered red, green, blue."""

    bands: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bands)
        if b.ndim != 3 or b.shape[0] != 3 or b.shape[1] < 1 or b.shape[2] < 1:
            raise DimensionMismatch(f"expected (3, M, N) bands, got {b.shape}")
        if b.dtype != np.uint8:
            if b.size and (b.min() < 0 or b.max() > 255):
                raise ValueError("intensities must lie in [0, 255]")
            if not np.all(b == np.round(b)):
                raise ValueError("intensities must be integers")
            b = b.astype(np.uint8)
        object.__setattr__(self, "bands", _frozen(b))

    @property
    def height(self) -> int:
        return self.bands.shape[1]

    @property
    def width(self) -> int:
        return self.bands.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bands.shape[1], self.bands.shape[2]

    def to_tensor(self, dtype=np.float64) -> np.ndarray:
        return self.bands.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, PlanarImage):
            return NotImplemented
        return self.bands.shape == other.bands.shape and bool(np.array_equal(self.bands, other.bands))

    def __hash__(self):
        return hash((self.bands.shape, self.bands.tobytes()))


@dataclass(frozen=True, eq=False)
class NoiseField:
    """Ternary per-band modification field with values in {-1, 0, +1}."""

    planes: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.planes)
        if p.ndim != 3 or p.shape[0] != 3:
            raise DimensionMismatch(f"expected (3, M, N) planes, got {p.shape}")
        if p.size and not np.all(np.isin(p, (-1, 0, 1))):
            raise ValueError("noise values must be in {-1, 0, +1}")
        object.__setattr__(self, "planes", _frozen(p.astype(np.int8)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.planes.shape[1], self.planes.shape[2]

    @classmethod
    def zeros(cls, height: int, width: int) -> "NoiseField":
        return cls(np.zeros((3, height, width), dtype=np.int8))

    def __eq__(self, other):
        if not isinstance(other, NoiseField):
            return NotImplemented
        return self.planes.shape == other.planes.shape and bool(np.array_equal(self.planes, other.planes))

    def __hash__(self):
        return hash((self.planes.shape, self.planes.tobytes()))


# --------------------------------------------------------------------- PPM

def _ppm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments.

    Returns the tokens and the offset of the single whitespace byte that
    terminates the last token.
    """
    tokens = []
    i, n = 0, len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        if i >= n:
            raise MalformedHeader("header ends prematurely")
        j = i
        while j < n and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        tokens.append(data[i:j])
        i = j
    return tokens, i


def decode_ppm(data: bytes) -> PlanarImage:
    if data[:2] != b"P6":
        raise MalformedHeader(f"not a binary PPM (magic {data[:2]!r})")
    tokens, end = _ppm_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise MalformedHeader(f"non-numeric header field: {exc}") from None
    if width <= 0 or height <= 0:
        raise MalformedHeader(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise MalformedHeader(f"maxval must be 255, got {maxval}")
    if end >= len(data) or not data[end:end + 1].isspace():
        raise TruncatedPayload("missing whitespace after maxval")
    start = end + 1
    need = 3 * width * height
    payload = data[start:start + need]
    if len(payload) < need:
        raise TruncatedPayload(f"expected {need} payload bytes, found {len(payload)}")
    pix = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return PlanarImage(pix.transpose(2, 0, 1).copy())


def encode_ppm(img: PlanarImage) -> bytes:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(img.bands.transpose(1, 2, 0)).tobytes()


def load_ppm(path) -> PlanarImage:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return decode_ppm(data)


def save_ppm(img: PlanarImage, path) -> None:
    try:
        Path(path).write_bytes(encode_ppm(img))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


# ---------------------------------------------------------------- WLTENSOR

def encode_tensor(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    if t.dtype not in _TAG_OF:
        raise TypeError(f"unsupported tensor dtype {t.dtype}; use float32 or float64")
    if t.ndim > 255:
        raise ShapeOverflow("rank exceeds 255")
    head = TENSOR_MAGIC + struct.pack("<BB", _TAG_OF[t.dtype], t.ndim)
    head += struct.pack(f"<{t.ndim}Q", *t.shape)
    return head + np.ascontiguousarray(t, dtype=DTYPE_TAGS[_TAG_OF[t.dtype]]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; return it and the end offset."""
    if buf[offset:offset + 8] != TENSOR_MAGIC:
        raise BadMagic(f"bad tensor magic {bytes(buf[offset:offset + 8])!r}")
    if len(buf) < offset + 10:
        raise TruncatedPayload("tensor header truncated")
    tag, rank = struct.unpack_from("<BB", buf, offset + 8)
    if tag not in DTYPE_TAGS:
        raise BadMagic(f"unknown dtype tag {tag}")
    pos = offset + 10
    if len(buf) < pos + 8 * rank:
        raise TruncatedPayload("tensor extents truncated")
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = 1
    for extent in shape:
        if extent == 0:
            raise ShapeOverflow("zero extent")
        count *= extent
        if count > _MAX_ELEMENTS:
            raise ShapeOverflow(f"shape {shape} too large")
    dt = DTYPE_TAGS[tag]
    nbytes = count * dt.itemsize
    if len(buf) < pos + nbytes:
        raise TruncatedPayload(f"expected {nbytes} payload bytes, found {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=True), pos + nbytes


def save_tensor(t: np.ndarray, path) -> None:
    try:
        Path(path).write_bytes(encode_tensor(t))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_tensor(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    arr, end = decode_tensor(data)
    if end != len(data):
        raise ShapeOverflow(f"{len(data) - end} trailing bytes after payload")
    return arr


# ------------------------------------------------------------------- noise

def apply_noise(img: PlanarImage, noise: NoiseField) -> PlanarImage:
    """Add a ternary field, reflecting at the range ends (0-1 -> 1, 255+1 -> 254)."""
    if img.bands.shape != noise.planes.shape:
        raise DimensionMismatch(f"image {img.bands.shape} vs noise {noise.planes.shape}")
    out = img.bands.astype(np.int16) + noise.planes
    out[out < 0] = 1
    out[out > 255] = 254
    return PlanarImage(out.astype(np.uint8))
