"""Patch tessellation and per-patch feature vectors.

Two built-in descriptors are provided (HOG on luminance, per-channel colour
histograms) plus a keyed file format for features computed elsewhere, e.g. by
a pretrained convolutional network.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DimensionMismatchError,
    DuplicateKeyError,
    FeatureFileError,
    LengthMismatchError,
    MissingKeyError,
    PatchTooLargeError,
    PatchTooSmallError,
)
from .raster import Extent, GrayImage, RasterImage, to_grayscale

EXTRACTORS = ("hog", "color", "hog+color")
FEATURE_MAGIC = "APLFEAT v1"

PatchKey = tuple  # (image_id, x, y)


@dataclass(frozen=True)
class HogParams:
    cell_size: int = 8
    bins: int = 9
    block: int = 2
    block_stride: int = 1
    eps: float = 1e-6
    clip: float = 0.2

    def __post_init__(self):
        if self.cell_size < 2:
            raise ValueError("cell_size must be >= 2")
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if self.block < 1 or self.block_stride < 1:
            raise ValueError("block and block_stride must be >= 1")

    def layout(self, width: int, height: int) -> tuple[int, int, int, int]:
        """Return (cells_x, cells_y, blocks_x, blocks_y) for a patch."""
        cx, cy = width // self.cell_size, height // self.cell_size
        if cx < self.block or cy < self.block:
            raise PatchTooSmallError(
                f"patch {width}x{height} is smaller than one {self.block}x{self.block} "
                f"block of {self.cell_size} px cells"
            )
        bx = (cx - self.block) // self.block_stride + 1
        by = (cy - self.block) // self.block_stride + 1
        return cx, cy, bx, by

    def dim(self, width: int, height: int | None = None) -> int:
        _, _, bx, by = self.layout(width, width if height is None else height)
        return bx * by * self.block * self.block * self.bins


@dataclass(frozen=True)
class PatchGrid:
    image_id: str
    patch_size: int
    stride: int
    origins: tuple[tuple[int, int], ...]
    image_width: int = 0
    image_height: int = 0

    def __len__(self):
        return len(self.origins)

    def keys(self) -> list[PatchKey]:
        return [(self.image_id, x, y) for x, y in self.origins]

    def subset(self, indices: Iterable[int]) -> PatchGrid:
        return PatchGrid(
            self.image_id, self.patch_size, self.stride,
            tuple(self.origins[i] for i in indices), self.image_width, self.image_height,
        )


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    keys: tuple[PatchKey, ...]
    rows: np.ndarray
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        keys = tuple((str(k[0]), int(k[1]), int(k[2])) for k in self.keys)
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] != len(keys):
            raise DimensionMismatchError(f"{len(keys)} keys but rows have shape {rows.shape}")
        index = {}
        for i, k in enumerate(keys):
            if k in index:
                raise DuplicateKeyError(f"duplicate patch key {k}")
            index[k] = i
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "_index", index)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self):
        return len(self.keys)

    def index_of(self, key: PatchKey) -> int:
        return self._index[(str(key[0]), int(key[1]), int(key[2]))]

    def select(self, keys: Sequence[PatchKey]) -> FeatureMatrix:
        idx = [self.index_of(k) for k in keys]
        return FeatureMatrix(tuple(keys), self.rows[idx].reshape(len(idx), self.dim))

    @staticmethod
    def concat(parts: Sequence[FeatureMatrix]) -> FeatureMatrix:
        if not parts:
            raise ValueError("nothing to concatenate")
        dims = {p.dim for p in parts}
        if len(dims) != 1:
            raise DimensionMismatchError(f"inconsistent feature dims {sorted(dims)}")
        keys = tuple(k for p in parts for k in p.keys)
        return FeatureMatrix(keys, np.concatenate([p.rows for p in parts], axis=0))


def extract_patches(extent: Extent, patch_size: int, stride: int, image_id: str = "") -> PatchGrid:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if patch_size < 1 or patch_size > min(extent.width, extent.height):
        raise PatchTooLargeError(
            f"patch size {patch_size} exceeds image {extent.width}x{extent.height}"
        )
    nx = (extent.width - patch_size) // stride + 1
    ny = (extent.height - patch_size) // stride + 1
    origins = tuple(
        (extent.x + i * stride, extent.y + j * stride) for j in range(ny) for i in range(nx)
    )
    return PatchGrid(image_id, patch_size, stride, origins, extent.x1, extent.y1)


# --------------------------------------------------------------------------
# HOG
# --------------------------------------------------------------------------


def _orientation_votes(gx: np.ndarray, gy: np.ndarray, bins: int) -> np.ndarray:
    """Magnitude-weighted soft votes into the two nearest unsigned bins.

    Bin ``b`` is centred at ``(b + 0.5) * 180 / bins`` degrees.  Returns an
    array of shape ``gx.shape + (bins,)``.
    """
    mag = np.hypot(gx, gy)
    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    pos = angle * (bins / 180.0) - 0.5
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(np.int64) % bins
    hi = (lo + 1) % bins
    w_lo, w_hi = mag * (1.0 - frac), mag * frac
    votes = np.empty(gx.shape + (bins,))
    for b in range(bins):
        votes[..., b] = np.where(lo == b, w_lo, 0.0) + np.where(hi == b, w_hi, 0.0)
    return votes


def _centered_gradients(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    padded = np.pad(gray, 1, mode="edge")
    gx = padded[1:-1, 2:] - padded[1:-1, :-2]
    gy = padded[2:, 1:-1] - padded[:-2, 1:-1]
    return gx, gy


def _normalize_blocks(cells: np.ndarray, params: HogParams) -> np.ndarray:
    """L2-hys block normalisation of ``(..., cells_y, cells_x, bins)`` histograms."""
    lead = cells.shape[:-3]
    cy, cx = cells.shape[-3], cells.shape[-2]
    b, s = params.block, params.block_stride
    by = (cy - b) // s + 1
    bx = (cx - b) // s + 1
    blocks = np.empty(lead + (by, bx, b, b, params.bins))
    for j in range(b):
        for i in range(b):
            blocks[..., j, i, :] = cells[..., j:j + s * (by - 1) + 1:s, i:i + s * (bx - 1) + 1:s, :]
    blocks = blocks.reshape(lead + (by, bx, b * b * params.bins))
    eps2 = params.eps ** 2
    blocks = blocks / np.sqrt(np.sum(blocks ** 2, axis=-1, keepdims=True) + eps2)
    np.minimum(blocks, params.clip, out=blocks)
    blocks = blocks / np.sqrt(np.sum(blocks ** 2, axis=-1, keepdims=True) + eps2)
    return blocks.reshape(lead + (-1,))


def hog_descriptor(patch, params: HogParams = HogParams()) -> np.ndarray:
    """HOG of a single luminance patch (reference implementation)."""
    gray = patch.data if isinstance(patch, GrayImage) else np.asarray(patch, dtype=np.float64)
    h, w = gray.shape
    cx, cy, _, _ = params.layout(w, h)
    gx, gy = _centered_gradients(gray)
    votes = _orientation_votes(gx, gy, params.bins)
    c = params.cell_size
    cells = votes[: cy * c, : cx * c].reshape(cy, c, cx, c, params.bins).sum(axis=(1, 3))
    return _normalize_blocks(cells, params)


class DenseHog:
    """HOG descriptors for many equally-sized windows of one image.

    Equivalent to calling :func:`hog_descriptor` on every crop, but cell
    histograms come from a summed-area table of per-pixel votes.  Pixels on
    a window's outer rows/columns see edge replication inside the crop, so
    their votes differ from the whole-image votes; those lines are corrected
    explicitly.
    """

    def __init__(self, gray, params: HogParams = HogParams()):
        self.gray = gray.data if isinstance(gray, GrayImage) else np.asarray(gray, dtype=np.float64)
        self.params = params
        gx, gy = _centered_gradients(self.gray)
        self._gx, self._gy = gx, gy
        votes = _orientation_votes(gx, gy, params.bins)
        h, w = self.gray.shape
        sat = np.zeros((h + 1, w + 1, params.bins))
        np.cumsum(np.cumsum(votes, axis=0), axis=1, out=sat[1:, 1:])
        self._sat = sat
        self._votes = votes
        self._row_cache: dict = {}
        self._col_cache: dict = {}

    # gradient variants on a window border (replication inside the crop)
    def _gx_variant(self, ys, xs, kind):
        g = self.gray
        if kind == "L":
            return g[ys, xs + 1] - g[ys, xs]
        if kind == "R":
            return g[ys, xs] - g[ys, xs - 1]
        return self._gx[ys, xs]

    def _gy_variant(self, ys, xs, kind):
        g = self.gray
        if kind == "T":
            return g[ys + 1, xs] - g[ys, xs]
        if kind == "B":
            return g[ys, xs] - g[ys - 1, xs]
        return self._gy[ys, xs]

    def _row_delta_cumsum(self, y: int, kind: str) -> np.ndarray:
        """Cumulative (over x) vote change when row ``y`` uses the ``kind`` gy variant."""
        key = (y, kind)
        if key not in self._row_cache:
            xs = np.arange(self.gray.shape[1])
            ys = np.full_like(xs, y)
            delta = _orientation_votes(self._gx[y], self._gy_variant(ys, xs, kind), self.params.bins)
            delta -= self._votes[y]
            cum = np.zeros((len(xs) + 1, self.params.bins))
            np.cumsum(delta, axis=0, out=cum[1:])
            self._row_cache[key] = cum
        return self._row_cache[key]

    def _col_delta_cumsum(self, x: int, kind: str) -> np.ndarray:
        key = (x, kind)
        if key not in self._col_cache:
            ys = np.arange(self.gray.shape[0])
            xs = np.full_like(ys, x)
            delta = _orientation_votes(self._gx_variant(ys, xs, kind), self._gy[:, x], self.params.bins)
            delta -= self._votes[:, x]
            cum = np.zeros((len(ys) + 1, self.params.bins))
            np.cumsum(delta, axis=0, out=cum[1:])
            self._col_cache[key] = cum
        return self._col_cache[key]

    def cell_histograms(self, origins: np.ndarray, size: int) -> np.ndarray:
        """Return ``(n, cells_y, cells_x, bins)`` cell histograms for square windows."""
        p = self.params
        c = p.cell_size
        ncx, ncy, _, _ = p.layout(size, size)
        origins = np.asarray(origins, dtype=np.int64).reshape(-1, 2)
        x0, y0 = origins[:, 0], origins[:, 1]
        k = np.arange(ncx) * c
        ya = (y0[:, None] + k[None, :])[:, :, None]  # (n, ncy, 1)
        xa = (x0[:, None] + k[None, :])[:, None, :]  # (n, 1, ncx)
        sat = self._sat
        hist = sat[ya + c, xa + c] - sat[ya, xa + c] - sat[ya + c, xa] + sat[ya, xa]

        # the bottom/right line only falls inside a cell when cells tile the window
        rows = [(0, "T")] + ([(size - 1, "B")] if ncy * c == size else [])
        cols = [(0, "L")] + ([(size - 1, "R")] if ncx * c == size else [])
        xs_lo = x0[:, None] + k[None, :]  # (n, ncx)
        ys_lo = y0[:, None] + k[None, :]  # (n, ncy)
        for off, kind in rows:
            for yy in np.unique(y0 + off):
                sel = np.nonzero(y0 + off == yy)[0]
                cum = self._row_delta_cumsum(int(yy), kind)
                hist[sel, off // c] += cum[xs_lo[sel] + c] - cum[xs_lo[sel]]
        for off, kind in cols:
            for xx in np.unique(x0 + off):
                sel = np.nonzero(x0 + off == xx)[0]
                cum = self._col_delta_cumsum(int(xx), kind)
                hist[sel, :, off // c] += cum[ys_lo[sel] + c] - cum[ys_lo[sel]]

        # corner pixels got both a row and a column correction; inclusion-exclusion
        for yoff, ykind in rows:
            for xoff, xkind in cols:
                ys, xs = y0 + yoff, x0 + xoff
                gx_c, gy_c = self._gx[ys, xs], self._gy[ys, xs]
                gx_v, gy_v = self._gx_variant(ys, xs, xkind), self._gy_variant(ys, xs, ykind)
                fix = (
                    _orientation_votes(gx_v, gy_v, p.bins)
                    - _orientation_votes(gx_c, gy_v, p.bins)
                    - _orientation_votes(gx_v, gy_c, p.bins)
                    + _orientation_votes(gx_c, gy_c, p.bins)
                )
                hist[:, yoff // c, xoff // c] += fix
        return hist

    def descriptors(self, origins, size: int) -> np.ndarray:
        return _normalize_blocks(self.cell_histograms(origins, size), self.params)


# --------------------------------------------------------------------------
# colour histograms and feature assembly
# --------------------------------------------------------------------------


def color_histogram(patch: RasterImage | np.ndarray, bins: int = 8) -> np.ndarray:
    """Per-channel histograms, each normalised to sum to one."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    data = patch.data if isinstance(patch, RasterImage) else np.asarray(patch)
    idx = (data.reshape(-1, 3).astype(np.int64) * bins) // 256
    n = idx.shape[0]
    return np.concatenate([np.bincount(idx[:, ch], minlength=bins) / n for ch in range(3)])


def feature_dim(extractor: str, patch_size: int, hog: HogParams = HogParams(), color_bins: int = 8) -> int:
    if extractor not in EXTRACTORS:
        raise ValueError(f"unknown extractor {extractor!r}; choose from {EXTRACTORS}")
    dim = 0
    if "hog" in extractor:
        dim += hog.dim(patch_size)
    if "color" in extractor:
        dim += 3 * color_bins
    return dim


def compute_descriptors(
    img: RasterImage,
    origins,
    size: int,
    extractor: str = "hog+color",
    hog: HogParams = HogParams(),
    color_bins: int = 8,
    dense: DenseHog | None = None,
) -> np.ndarray:
    """Descriptor rows for square windows at ``origins`` (array of (x, y))."""
    dim = feature_dim(extractor, size, hog, color_bins)
    origins = np.asarray(origins, dtype=np.int64).reshape(-1, 2)
    if len(origins) == 0:
        return np.zeros((0, dim))
    parts = []
    if "hog" in extractor:
        if dense is None:
            dense = DenseHog(to_grayscale(img), hog)
        parts.append(dense.descriptors(origins, size))
    if "color" in extractor:
        parts.append(np.stack([
            color_histogram(img.data[y:y + size, x:x + size], color_bins) for x, y in origins
        ]))
    return np.concatenate(parts, axis=1)


def compute_features(
    img: RasterImage,
    grid: PatchGrid,
    extractor: str = "hog+color",
    hog: HogParams = HogParams(),
    color_bins: int = 8,
    batch: int = 1024,
) -> FeatureMatrix:
    if grid.image_width and (grid.image_width > img.width or grid.image_height > img.height):
        raise DimensionMismatchError(f"grid for image {grid.image_id!r} does not fit this image")
    dim = feature_dim(extractor, grid.patch_size, hog, color_bins)
    origins = np.asarray(grid.origins, dtype=np.int64).reshape(-1, 2)
    dense = DenseHog(to_grayscale(img), hog) if "hog" in extractor and len(origins) else None
    rows = [
        compute_descriptors(img, origins[i:i + batch], grid.patch_size, extractor, hog, color_bins, dense)
        for i in range(0, len(origins), batch)
    ]
    rows = np.concatenate(rows, axis=0) if rows else np.zeros((0, dim))
    return FeatureMatrix(tuple(grid.keys()), rows)


# --------------------------------------------------------------------------
# feature files
# --------------------------------------------------------------------------


def save_features(fm: FeatureMatrix, path) -> None:
    """Write the binary ``APLFEAT v1`` container, or CSV for a ``.csv`` suffix."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "x", "y"] + [f"f{i}" for i in range(fm.dim)])
            for key, row in zip(fm.keys, fm.rows):
                w.writerow([key[0], key[1], key[2]] + [repr(float(v)) for v in row])
        return
    with open(path, "wb") as fh:
        fh.write(f"{FEATURE_MAGIC} dim={fm.dim} count={len(fm)}\n".encode("ascii"))
        rows = fm.rows.astype("<f4")
        for key, row in zip(fm.keys, rows):
            name = key[0].encode("utf-8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<II", key[1], key[2]))
            fh.write(row.tobytes())


def _parse_header(line: bytes, path) -> tuple[int, int]:
    text = line.decode("ascii", errors="replace").strip()
    if not text.startswith(FEATURE_MAGIC):
        raise FeatureFileError(f"{path}: not an {FEATURE_MAGIC} file")
    fields_ = dict(tok.split("=", 1) for tok in text[len(FEATURE_MAGIC):].split())
    try:
        return int(fields_["dim"]), int(fields_["count"])
    except (KeyError, ValueError) as exc:
        raise FeatureFileError(f"{path}: malformed header {text!r}") from exc


def _read_binary(path: Path) -> tuple[list, list, int]:
    with open(path, "rb") as fh:
        dim, count = _parse_header(fh.readline(), path)
        keys, rows = [], []
        for _ in range(count):
            head = fh.read(4)
            if len(head) < 4:
                raise FeatureFileError(f"{path}: truncated after {len(keys)} records")
            (n,) = struct.unpack("<I", head)
            name = fh.read(n).decode("utf-8")
            x, y = struct.unpack("<II", fh.read(8))
            buf = fh.read(4 * dim)
            if len(buf) != 4 * dim:
                raise LengthMismatchError(
                    f"{path}: record {(name, x, y)} has {len(buf) // 4} values, expected {dim}"
                )
            keys.append((name, x, y))
            rows.append(np.frombuffer(buf, dtype="<f4").astype(np.float64))
        if fh.read(1):
            raise FeatureFileError(f"{path}: trailing data after {count} records")
    return keys, rows, dim


def _read_csv(path: Path) -> tuple[list, list, int]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:3] != ["image_id", "x", "y"]:
            raise FeatureFileError(f"{path}: expected header image_id,x,y,f0,...")
        dim = len(header) - 3
        keys, rows = [], []
        for rec in reader:
            if not rec:
                continue
            key = (rec[0], int(rec[1]), int(rec[2]))
            if len(rec) - 3 != dim:
                raise LengthMismatchError(
                    f"{path}: row {key} has {len(rec) - 3} values, expected {dim}"
                )
            keys.append(key)
            rows.append(np.array([float(v) for v in rec[3:]]))
    return keys, rows, dim


def read_feature_file(path) -> FeatureMatrix:
    """Load every record of a feature file (binary or CSV)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"feature file not found: {path}")
    with open(path, "rb") as fh:
        binary = fh.read(len(FEATURE_MAGIC)) == FEATURE_MAGIC.encode()
    keys, rows, dim = _read_binary(path) if binary else _read_csv(path)
    seen = set()
    for k in keys:
        if k in seen:
            raise DuplicateKeyError(f"{path}: duplicate key {k}")
        seen.add(k)
    arr = np.stack(rows) if rows else np.zeros((0, dim))
    return FeatureMatrix(tuple(keys), arr)


def load_external_features(path, grid: PatchGrid) -> FeatureMatrix:
    """Join a feature file against ``grid``; rows come back in grid order."""
    fm = read_feature_file(path)
    out = []
    for key in grid.keys():
        try:
            out.append(fm.rows[fm.index_of(key)])
        except KeyError:
            raise MissingKeyError(f"{path}: no features for patch {key}") from None
    rows = np.stack(out) if out else np.zeros((0, fm.dim))
    return FeatureMatrix(tuple(grid.keys()), rows)
