"""Raster and geometry types, image I/O and area tessellation.

Coordinates follow one convention everywhere: ``x`` is the column, ``y`` the
row, origin at the top-left pixel.  Arrays are stored row-major as
``(height, width[, channels])``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    DimensionMismatchError,
    ImageFormatError,
    UnsupportedBitDepthError,
    UnsupportedChannelsError,
)

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_LUMA_PERMILLE = np.array([299, 587, 114], dtype=np.int64)


def _frozen(arr: np.ndarray, dtype) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RasterImage:
    """8-bit RGB image, ``data`` has shape ``(height, width, 3)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] != 3:
            raise DimensionMismatchError(f"expected (H, W, 3) array, got {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise DimensionMismatchError("image must be at least 1x1")
        object.__setattr__(self, "data", _frozen(data, np.uint8))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def extent(self) -> Extent:
        return Extent(0, 0, self.width, self.height)

    def crop(self, x: int, y: int, w: int, h: int) -> RasterImage:
        return RasterImage(self.data[y:y + h, x:x + w])

    def __eq__(self, other):
        return isinstance(other, RasterImage) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Single-channel luminance image, ``data`` has shape ``(height, width)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise DimensionMismatchError(f"expected (H, W) array, got {data.shape}")
        object.__setattr__(self, "data", _frozen(data, np.float64))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        return isinstance(other, GrayImage) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class SegmentationMask:
    """Binary mask with values in {0, 1}, shape ``(height, width)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise DimensionMismatchError(f"expected (H, W) array, got {data.shape}")
        if data.dtype != bool and not np.isin(data, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "data", _frozen(data, np.uint8))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def area(self) -> int:
        return int(self.data.sum())

    @classmethod
    def empty(cls, width: int, height: int) -> SegmentationMask:
        return cls(np.zeros((height, width), np.uint8))

    def __eq__(self, other):
        return isinstance(other, SegmentationMask) and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class Extent:
    x: int
    y: int
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"extent must be at least 1x1, got {self.width}x{self.height}")

    @property
    def x1(self) -> int:
        return self.x + self.width

    @property
    def y1(self) -> int:
        return self.y + self.height

    def contains(self, x: float, y: float) -> bool:
        """Closed containment; points on the right/bottom edge count as inside."""
        return self.x <= x <= self.x1 and self.y <= y <= self.y1


def _png_header(path: Path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(26)
    # IHDR payload: width, height, bit depth, colour type
    _, _, bit_depth, colour_type = struct.unpack(">IIBB", head[16:26])
    return bit_depth, colour_type


def load_image(path) -> RasterImage:
    """Read an 8-bit RGB PNG or TIFF."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    with open(path, "rb") as fh:
        is_png = fh.read(8) == _PNG_SIGNATURE
    if is_png:
        bit_depth, colour_type = _png_header(path)
        if bit_depth != 8:
            raise UnsupportedBitDepthError(f"{path}: {bit_depth}-bit PNG, expected 8-bit")
        if colour_type != 2:
            raise UnsupportedChannelsError(f"{path}: PNG colour type {colour_type}, expected RGB")
    try:
        im = Image.open(path)
    except Exception as exc:
        raise ImageFormatError(f"{path}: unreadable image ({exc})") from exc
    with im:
        if im.format == "TIFF":
            bits = im.tag_v2.get(258, (8,))
            if any(b != 8 for b in bits):
                raise UnsupportedBitDepthError(f"{path}: {bits}-bit TIFF, expected 8-bit")
        elif im.format != "PNG":
            raise ImageFormatError(f"{path}: unsupported format {im.format}")
        if im.mode in ("I;16", "I;16B", "I;16L", "I", "F"):
            raise UnsupportedBitDepthError(f"{path}: mode {im.mode}, expected 8-bit RGB")
        if im.mode != "RGB":
            raise UnsupportedChannelsError(f"{path}: mode {im.mode}, expected RGB")
        return RasterImage(np.asarray(im))


def save_image(img: RasterImage, path) -> None:
    """Write PNG or uncompressed TIFF depending on the suffix."""
    path = Path(path)
    suffix = path.suffix.lower()
    im = Image.fromarray(np.asarray(img.data), mode="RGB")
    if suffix == ".png":
        im.save(path, format="PNG")
    elif suffix in (".tif", ".tiff"):
        im.save(path, format="TIFF", compression=None)
    else:
        raise ImageFormatError(f"{path}: unsupported output suffix {suffix!r}")


def save_mask(mask: SegmentationMask, path) -> None:
    """Masks are stored as single-channel PNG with values {0, 255}."""
    Image.fromarray(mask.data * np.uint8(255), mode="L").save(Path(path), format="PNG")


def load_mask(path) -> SegmentationMask:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"mask not found: {path}")
    with Image.open(path) as im:
        if im.mode == "RGB":
            arr = np.asarray(im)[..., 0]
        elif im.mode in ("L", "1", "P"):
            arr = np.asarray(im.convert("L"))
        else:
            raise UnsupportedChannelsError(f"{path}: mask mode {im.mode}")
    return SegmentationMask((arr >= 128).astype(np.uint8))


def to_grayscale(img: RasterImage) -> GrayImage:
    """ITU-R 601 luminance, rounded to the nearest integer."""
    # integer arithmetic so exact halves round up instead of drifting in floating point
    lum = img.data.astype(np.int64) @ _LUMA_PERMILLE
    return GrayImage(((lum + 500) // 1000).astype(np.float64))


def tessellate(extent: Extent, cell: int) -> list[Extent]:
    """Split ``extent`` into ``cell`` x ``cell`` squares, row-major."""
    if cell < 1:
        raise ValueError("cell must be positive")
    if extent.width % cell or extent.height % cell:
        raise DimensionMismatchError(
            f"extent {extent.width}x{extent.height} is not a multiple of cell {cell}"
        )
    return [
        Extent(extent.x + i * cell, extent.y + j * cell, cell, cell)
        for j in range(extent.height // cell)
        for i in range(extent.width // cell)
    ]
