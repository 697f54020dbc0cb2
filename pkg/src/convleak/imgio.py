"""Image ingestion and output: IDX datasets, binary PGM, silhouettes.

All images are 8-bit grayscale held as ``numpy.uint8`` arrays of shape
``(height, width)``. Loaders reject malformed input instead of coercing:
a value that cannot be represented in [0, 255] is a format error, never
a clamp.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataLengthError, DimensionError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Image:
    """A grayscale 8-bit image, pixels in row-major order.

    Parameters
    ----------
    pixels : ndarray
        ``(height, width)`` array of dtype uint8.
    channels : int
        Channel count. Only 1 is exercised in v1; the type accepts more
        but the PGM writer rejects them.
    """

    pixels: np.ndarray
    channels: int = 1

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.dtype != np.uint8:
            if np.any(self.pixels < 0) or np.any(self.pixels > 255):
                raise FormatError("pixel values outside [0, 255]")
            self.pixels = self.pixels.astype(np.uint8)
        if self.pixels.ndim != 2:
            raise DimensionError("pixels must be a 2-D (height, width) array")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass
class SilhouetteImage:
    """Per-pixel background/foreground markers.

    ``markers`` is a boolean ``(height, width)`` array, True = foreground.
    """

    markers: np.ndarray = field()

    def __post_init__(self):
        self.markers = np.asarray(self.markers, dtype=bool)
        if self.markers.ndim != 2:
            raise DimensionError("markers must be a 2-D (height, width) array")

    @property
    def width(self) -> int:
        return self.markers.shape[1]

    @property
    def height(self) -> int:
        return self.markers.shape[0]


def load_idx(path) -> list[Image]:
    """Load every image from an IDX image file (big-endian, magic 0x803).

    Returns a list of single-channel :class:`Image`. Raises
    :class:`FormatError` on a bad magic/header and
    :class:`DataLengthError` on a truncated payload.
    """
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise FormatError(f"{path}: IDX header truncated")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"{path}: bad IDX image magic 0x{magic:08x}")
        payload = fh.read()
    expected = count * rows * cols
    if len(payload) < expected:
        raise DataLengthError(
            f"{path}: expected {expected} pixel bytes, found {len(payload)}")
    data = np.frombuffer(payload[:expected], dtype=np.uint8)
    data = data.reshape(count, rows, cols)
    return [Image(data[i].copy()) for i in range(count)]


def load_idx_labels(path) -> np.ndarray:
    """Load an IDX label file (big-endian, magic 0x801) as a uint8 vector."""
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) < 8:
            raise FormatError(f"{path}: IDX header truncated")
        magic, count = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"{path}: bad IDX label magic 0x{magic:08x}")
        payload = fh.read()
    if len(payload) < count:
        raise DataLengthError(
            f"{path}: expected {count} label bytes, found {len(payload)}")
    return np.frombuffer(payload[:count], dtype=np.uint8).copy()


def write_idx(images: list[Image], path) -> None:
    """Write images to an IDX file; inverse of :func:`load_idx`."""
    if images:
        rows, cols = images[0].pixels.shape
        for img in images:
            if img.pixels.shape != (rows, cols):
                raise DimensionError("all images in an IDX file share one size")
    else:
        rows = cols = 0
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, len(images), rows, cols))
        for img in images:
            fh.write(img.pixels.tobytes())


def write_idx_labels(labels, path) -> None:
    """Write a label vector to an IDX file; inverse of :func:`load_idx_labels`."""
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def write_pgm(img: Image, path) -> None:
    """Write a single-channel image as binary PGM (P5, maxval 255)."""
    if img.channels != 1:
        raise FormatError("PGM output supports single-channel images only")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(img.pixels.tobytes())


def load_pgm(path) -> Image:
    """Read a binary PGM (P5) image written by :func:`write_pgm`."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # optionally interleaved with '#' comment lines.
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"{path}: non-numeric PGM header field") from None
    if maxval != 255:
        raise FormatError(f"{path}: unsupported PGM maxval {maxval}")
    expected = width * height
    payload = data[pos:pos + expected]
    if len(payload) < expected:
        raise DataLengthError(
            f"{path}: expected {expected} pixel bytes, found {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return Image(pixels.copy())


def binarize_markers(sil: SilhouetteImage) -> Image:
    """Render markers as a black-and-white image: background 0, foreground 255."""
    return Image(np.where(sil.markers, 255, 0).astype(np.uint8))
