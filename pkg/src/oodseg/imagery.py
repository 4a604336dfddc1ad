"""Raster containers and bit-exact file I/O.

Four array wrappers (Image, LabelMap, LogitMap, ScoreMap) validate their
invariants once at construction and then freeze the underlying buffer, so
downstream code can share them without defensive copies.  File formats are
deliberately boring: binary PPM/PGM for images and label/heat maps, and a
small versioned little-endian container for float32 logit planes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DataError, FormatError, TruncationError

# Label codes reserved above the class range.  Class ids must stay below
# OOD_ID, which caps the number of classes at 254.
OOD_ID = 254
IGNORE_ID = 255
MAX_CLASSES = 254

_LOGIT_MAGIC = b"OODL"
_LOGIT_VERSION = 1


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Image:
    """RGB raster, float64 in [0, 1], shape (height, width, 3)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ArgumentError(f"image must have shape (h, w, 3), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ArgumentError("image must have positive height and width")
        if not np.isfinite(arr).all():
            raise ArgumentError("image values must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ArgumentError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel uint8 codes: class ids plus the OOD_ID/IGNORE_ID sentinels."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ArgumentError(f"label map must have shape (h, w), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ArgumentError("label map must have positive height and width")
        if arr.dtype != np.uint8:
            if not np.issubdtype(arr.dtype, np.integer):
                raise ArgumentError("label map must hold integers")
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise ArgumentError("label codes must fit in uint8")
            arr = arr.astype(np.uint8)
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def validate_classes(self, num_classes: int) -> None:
        """Reject codes that are neither a class id nor a sentinel."""
        if not 2 <= num_classes <= MAX_CLASSES:
            raise ArgumentError(f"num_classes must be in [2, {MAX_CLASSES}]")
        codes = self.data
        bad = (codes >= num_classes) & (codes != OOD_ID) & (codes != IGNORE_ID)
        if bad.any():
            offenders = np.unique(codes[bad])
            raise ArgumentError(f"label codes {offenders.tolist()} out of range for C={num_classes}")


@dataclass(frozen=True, eq=False)
class LogitMap:
    """Per-pixel class logits, float64, shape (height, width, C), C >= 2."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ArgumentError(f"logit map must have shape (h, w, C), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ArgumentError("logit map must have positive height and width")
        if arr.shape[2] < 2:
            raise ArgumentError("logit map needs at least 2 classes")
        if not np.isfinite(arr).all():
            raise ArgumentError("logit values must be finite")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def num_classes(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class ScoreMap:
    """Per-pixel anomaly scores, float64; higher means more anomalous."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ArgumentError(f"score map must have shape (h, w), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ArgumentError("score map must have positive height and width")
        if not np.isfinite(arr).all():
            raise ArgumentError("score values must be finite")
        object.__setattr__(self, "data", _frozen(arr))


@dataclass(frozen=True, eq=False)
class SegSample:
    """An image with its pixel-aligned label map."""

    image: Image
    labels: LabelMap

    def __post_init__(self):
        if (self.image.height, self.image.width) != (self.labels.height, self.labels.width):
            raise ArgumentError(
                f"image {self.image.data.shape[:2]} and labels "
                f"{self.labels.data.shape} disagree on size"
            )


# ---------------------------------------------------------------------------
# Netpbm parsing helpers

def _parse_pnm_header(blob: bytes, magic: bytes, n_fields: int):
    """Return (fields, payload_offset) for a binary netpbm header.

    Accepts arbitrary whitespace and '#' comments between header tokens,
    which is the full legal variation for the binary formats.
    """
    if not blob.startswith(magic):
        raise FormatError(f"expected {magic.decode()} magic, got {blob[:2]!r}")
    pos = len(magic)
    if pos >= len(blob) or blob[pos : pos + 1] not in b" \t\r\n#":
        raise FormatError("malformed header after magic")
    fields = []
    while len(fields) < n_fields:
        # skip whitespace and comments
        while pos < len(blob):
            ch = blob[pos : pos + 1]
            if ch.isspace():
                pos += 1
            elif ch == b"#":
                nl = blob.find(b"\n", pos)
                if nl < 0:
                    raise FormatError("unterminated comment in header")
                pos = nl + 1
            else:
                break
        start = pos
        while pos < len(blob) and blob[pos : pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise FormatError("expected integer field in header")
        fields.append(int(blob[start:pos]))
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        raise FormatError("header must end with a single whitespace byte")
    return fields, pos + 1


def _check_payload(blob: bytes, offset: int, expected: int) -> bytes:
    payload = blob[offset:]
    if len(payload) < expected:
        raise TruncationError(f"payload holds {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise FormatError(f"{len(payload) - expected} trailing bytes after payload")
    return payload


def read_image(path) -> Image:
    """Read a binary PPM (P6, maxval 255) into an Image in [0, 1]."""
    blob = Path(path).read_bytes()
    (width, height, maxval), offset = _parse_pnm_header(blob, b"P6", 3)
    if maxval != 255:
        raise FormatError(f"maxval must be 255, got {maxval}")
    if width < 1 or height < 1:
        raise FormatError("zero-sized raster")
    payload = _check_payload(blob, offset, width * height * 3)
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return Image(arr.astype(np.float64) / 255.0)


def write_image(image: Image, path) -> None:
    """Write an Image as binary PPM; values quantized round-half-up to bytes."""
    arr = np.floor(image.data * 255.0 + 0.5).astype(np.uint8)
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.tobytes())


def read_label_map(path) -> LabelMap:
    """Read a binary PGM (P5, maxval 255); byte codes are preserved exactly."""
    blob = Path(path).read_bytes()
    (width, height, maxval), offset = _parse_pnm_header(blob, b"P5", 3)
    if maxval != 255:
        raise FormatError(f"maxval must be 255, got {maxval}")
    if width < 1 or height < 1:
        raise FormatError("zero-sized raster")
    payload = _check_payload(blob, offset, width * height)
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return LabelMap(arr)


def write_label_map(labels: LabelMap, path) -> None:
    header = f"P5\n{labels.width} {labels.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + labels.data.tobytes())


def write_heatmap(scores: ScoreMap, path) -> None:
    """Write scores as an 8-bit PGM, min->0 and max->255 (round-half-up).

    A constant map carries no ordering information and is written as
    mid-gray (128) everywhere.
    """
    arr = scores.data
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        scaled = np.floor((arr - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)
    else:
        scaled = np.full(arr.shape, 128, dtype=np.uint8)
    h, w = arr.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + scaled.tobytes())


# ---------------------------------------------------------------------------
# Logit dump container: magic, u32 version, u32 height, u32 width, u32 C,
# then height*width*C float32 little-endian values, class index fastest.

def _write_plane(arr: np.ndarray, path) -> None:
    h, w, c = arr.shape
    header = _LOGIT_MAGIC + struct.pack("<IIII", _LOGIT_VERSION, h, w, c)
    Path(path).write_bytes(header + arr.astype("<f4").tobytes())


def _read_plane(path):
    blob = Path(path).read_bytes()
    if len(blob) < 20:
        raise TruncationError("file shorter than the fixed header")
    if blob[:4] != _LOGIT_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}")
    version, h, w, c = struct.unpack("<IIII", blob[4:20])
    if version != _LOGIT_VERSION:
        raise FormatError(f"unsupported container version {version}")
    if h < 1 or w < 1 or c < 1:
        raise FormatError("zero-sized logit plane")
    payload = _check_payload(blob, 20, h * w * c * 4)
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    if not np.isfinite(arr).all():
        raise DataError("logit payload contains NaN or infinity")
    return arr.astype(np.float64)


def write_logit_dump(logits: LogitMap, path) -> None:
    """Write logits to the float32 interchange container."""
    _write_plane(logits.data, path)


def read_logit_dump(path) -> LogitMap:
    """Read a logit dump; rejects planes with fewer than 2 classes."""
    arr = _read_plane(path)
    if arr.shape[2] < 2:
        raise FormatError("logit dump must carry at least 2 classes")
    return LogitMap(arr)


def write_score_dump(scores: ScoreMap, path) -> None:
    """Write a score map to the same container with a single channel."""
    _write_plane(scores.data[:, :, None], path)


def read_score_dump(path) -> ScoreMap:
    arr = _read_plane(path)
    if arr.shape[2] != 1:
        raise FormatError(f"score dump must carry exactly 1 channel, got {arr.shape[2]}")
    return ScoreMap(arr[:, :, 0])
