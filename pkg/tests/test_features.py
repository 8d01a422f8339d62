import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from apl.errors import (
    DimensionMismatchError,
    DuplicateKeyError,
    FeatureFileError,
    LengthMismatchError,
    MissingKeyError,
    PatchTooLargeError,
    PatchTooSmallError,
)
from apl.features import (
    DenseHog,
    FeatureMatrix,
    HogParams,
    color_histogram,
    compute_features,
    extract_patches,
    feature_dim,
    hog_descriptor,
    load_external_features,
    read_feature_file,
    save_features,
)
from apl.raster import Extent, RasterImage, to_grayscale

from conftest import random_image


def hog_oracle(gray, cell=8, bins=9, block=2, eps=1e-6, clip=0.2):
    """Loop-by-loop HOG written independently of the library."""
    h, w = len(gray), len(gray[0])

    def px(y, x):
        return float(gray[min(max(y, 0), h - 1)][min(max(x, 0), w - 1)])

    ncy, ncx = h // cell, w // cell
    hist = [[[0.0] * bins for _ in range(ncx)] for _ in range(ncy)]
    width = 180.0 / bins
    for y in range(ncy * cell):
        for x in range(ncx * cell):
            gx = px(y, x + 1) - px(y, x - 1)
            gy = px(y + 1, x) - px(y - 1, x)
            mag = math.hypot(gx, gy)
            ang = math.degrees(math.atan2(gy, gx)) % 180.0
            pos = ang / width - 0.5
            lo = math.floor(pos)
            frac = pos - lo
            hist[y // cell][x // cell][lo % bins] += mag * (1 - frac)
            hist[y // cell][x // cell][(lo + 1) % bins] += mag * frac
    out = []
    for by in range(ncy - block + 1):
        for bx in range(ncx - block + 1):
            v = [hist[by + j][bx + i][b] for j in range(block) for i in range(block) for b in range(bins)]
            n = math.sqrt(sum(t * t for t in v) + eps * eps)
            v = [min(t / n, clip) for t in v]
            n = math.sqrt(sum(t * t for t in v) + eps * eps)
            out.extend(t / n for t in v)
    return np.array(out)


def test_patch_grid_examples():
    assert len(extract_patches(Extent(0, 0, 10000, 10000), 100, 100)) == 10_000
    assert len(extract_patches(Extent(0, 0, 1000, 1000), 100, 10)) == 8_281
    with pytest.raises(PatchTooLargeError):
        extract_patches(Extent(0, 0, 50, 50), 100, 100)
    with pytest.raises(ValueError):
        extract_patches(Extent(0, 0, 50, 50), 10, 0)


@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 12), st.integers(1, 9))
def test_patch_grid_enumerates_row_major(w, h, size, stride):
    if size > min(w, h):
        return
    grid = extract_patches(Extent(0, 0, w, h), size, stride, "img")
    expected = [(x, y) for y in range(0, h - size + 1, stride) for x in range(0, w - size + 1, stride)]
    assert list(grid.origins) == expected


@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 10))
def test_disjoint_grid_partitions_divisible_region(nx, ny, size):
    w, h = nx * size + 3, ny * size + 2
    cover = np.zeros((h, w), dtype=int)
    for x, y in extract_patches(Extent(0, 0, w, h), size, size).origins:
        cover[y:y + size, x:x + size] += 1
    assert np.all(cover[: ny * size, : nx * size] == 1)


def test_hog_layout_and_dim():
    p = HogParams()
    assert p.layout(100, 100) == (12, 12, 11, 11)
    assert p.dim(100) == 4356
    assert feature_dim("hog+color", 100) == 4356 + 24
    with pytest.raises(ValueError):
        HogParams(cell_size=1)


def test_uniform_patch_gives_zero_descriptor():
    d = hog_descriptor(np.full((32, 32), 77.0))
    assert d.shape == (HogParams().dim(32),)
    assert np.all(d == 0)


def test_patch_smaller_than_block_rejected():
    with pytest.raises(PatchTooSmallError):
        hog_descriptor(np.zeros((15, 40)))


@pytest.mark.parametrize("shape", [(16, 16), (24, 40), (37, 29)])
def test_hog_matches_loop_oracle(rng, shape):
    gray = rng.integers(0, 256, size=shape).astype(np.float64)
    assert np.allclose(hog_descriptor(gray), hog_oracle(gray.tolist()), atol=1e-9, rtol=0)


def test_hog_shift_equality(rng):
    gray = rng.integers(0, 256, size=(64, 80)).astype(np.float64)
    p = HogParams()
    a = hog_descriptor(gray[8:48, 8:48], p).reshape(4, 4, -1)
    b = hog_descriptor(gray[8:48, 16:56], p).reshape(4, 4, -1)
    # blocks away from the crop borders see identical pixels
    assert np.allclose(b[1:-1, 1:-2], a[1:-1, 2:-1], atol=1e-12)


@given(st.integers(-60, 60), st.integers(0, 2**31 - 1))
def test_hog_invariant_to_constant_offset(offset, seed):
    gray = np.random.default_rng(seed).integers(60, 190, size=(24, 24)).astype(np.float64)
    assert np.allclose(hog_descriptor(gray), hog_descriptor(gray + offset), atol=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_hog_entries_in_unit_interval(seed):
    gray = np.random.default_rng(seed).integers(0, 256, size=(24, 32)).astype(np.float64)
    d = hog_descriptor(gray)
    assert d.min() >= 0 and d.max() <= 1


@pytest.mark.parametrize("size", [16, 20, 40])
def test_dense_hog_equals_per_crop_descriptor(rng, size):
    gray = rng.integers(0, 256, size=(70, 90)).astype(np.float64)
    dense = DenseHog(gray)
    origins = np.array([(0, 0), (3, 5), (90 - size, 70 - size), (17, 70 - size), (90 - size, 0), (31, 12)])
    got = dense.descriptors(origins, size)
    for row, (x, y) in zip(got, origins):
        assert np.allclose(row, hog_descriptor(gray[y:y + size, x:x + size]), atol=1e-9, rtol=0)


def test_color_histogram_examples(rng):
    red = np.zeros((5, 5, 3), dtype=np.uint8)
    red[..., 0] = 255
    h = color_histogram(RasterImage(red), 8).reshape(3, 8)
    assert h[0, 7] == 1 and h[1, 0] == 1 and h[2, 0] == 1
    patch = rng.integers(0, 256, size=(9, 11, 3), dtype=np.uint8)
    h = color_histogram(patch, 5).reshape(3, 5)
    assert np.allclose(h.sum(axis=1), 1, atol=1e-12)
    shuffled = patch.reshape(-1, 3)[rng.permutation(99)].reshape(patch.shape)
    assert np.array_equal(color_histogram(shuffled, 5), color_histogram(patch, 5))
    with pytest.raises(ValueError):
        color_histogram(patch, 0)


def test_compute_features_rows_are_descriptors(rng):
    img = random_image(rng, 40, 56)
    grid = extract_patches(img.extent, 16, 8, "a")
    fm = compute_features(img, grid, "hog+color")
    assert fm.dim == HogParams().dim(16) + 24
    gray = to_grayscale(img).data
    for (x, y), row in zip(grid.origins, fm.rows):
        expected = np.concatenate([
            hog_descriptor(gray[y:y + 16, x:x + 16]), color_histogram(img.data[y:y + 16, x:x + 16])
        ])
        assert np.allclose(row, expected, atol=1e-9)


def test_compute_features_single_and_empty(rng):
    img = random_image(rng, 16, 16)
    one = compute_features(img, extract_patches(img.extent, 16, 16, "a"), "color")
    assert one.rows.shape == (1, 24)
    empty = extract_patches(img.extent, 16, 16, "a").subset([])
    fm = compute_features(img, empty, "hog")
    assert fm.rows.shape == (0, HogParams().dim(16))


def test_compute_features_permutation_equivariant(rng):
    img = random_image(rng, 32, 32)
    grid = extract_patches(img.extent, 16, 8, "a")
    perm = rng.permutation(len(grid))
    a = compute_features(img, grid, "hog+color")
    b = compute_features(img, grid.subset(perm), "hog+color")
    assert np.allclose(b.rows, a.rows[perm], atol=1e-12)


def test_feature_matrix_rejects_duplicates():
    with pytest.raises(DuplicateKeyError):
        FeatureMatrix((("a", 0, 0), ("a", 0, 0)), np.zeros((2, 3)))
    with pytest.raises(DimensionMismatchError):
        FeatureMatrix((("a", 0, 0),), np.zeros((2, 3)))


@pytest.mark.parametrize("suffix", [".aplfeat", ".csv"])
def test_feature_file_round_trip(tmp_path, rng, suffix):
    keys = (("img-1", 0, 0), ("img-1", 100, 0), ("other", 0, 200))
    rows = rng.normal(size=(3, 5)).astype(np.float32).astype(np.float64)
    path = tmp_path / f"f{suffix}"
    save_features(FeatureMatrix(keys, rows), path)
    back = read_feature_file(path)
    assert back.keys == keys
    assert np.array_equal(back.rows, rows)


def test_binary_header_layout(tmp_path):
    path = tmp_path / "f.aplfeat"
    save_features(FeatureMatrix((("ab", 3, 4),), np.array([[1.5, -2.0]])), path)
    raw = path.read_bytes()
    assert raw.startswith(b"APLFEAT v1 dim=2 count=1\n")
    body = raw[len(b"APLFEAT v1 dim=2 count=1\n"):]
    assert body == (b"\x02\x00\x00\x00ab" + (3).to_bytes(4, "little") + (4).to_bytes(4, "little")
                    + np.array([1.5, -2.0], dtype="<f4").tobytes())


def _grid4():
    return extract_patches(Extent(0, 0, 20, 20), 10, 10, "g")


def test_external_features_join_in_grid_order(tmp_path):
    keys = [("g", 10, 10), ("g", 0, 0), ("g", 0, 10), ("g", 10, 0)]
    rows = np.arange(8, dtype=np.float64).reshape(4, 2)
    path = tmp_path / "ext.csv"
    save_features(FeatureMatrix(tuple(keys), rows), path)
    fm = load_external_features(path, _grid4())
    assert fm.keys == tuple(_grid4().keys())
    assert fm.rows.tolist() == [[2, 3], [6, 7], [4, 5], [0, 1]]


def test_external_features_missing_key(tmp_path):
    path = tmp_path / "ext.csv"
    save_features(FeatureMatrix((("g", 0, 0), ("g", 10, 0), ("g", 0, 10)), np.zeros((3, 2))), path)
    with pytest.raises(MissingKeyError, match="10, 10"):
        load_external_features(path, _grid4())


def test_external_features_bad_rows(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("image_id,x,y,f0,f1\ng,0,0,1,2\ng,10,0,1\n")
    with pytest.raises(LengthMismatchError, match="10, 0"):
        read_feature_file(path)
    path.write_text("image_id,x,y,f0\ng,0,0,1\ng,0,0,2\n")
    with pytest.raises(DuplicateKeyError, match="0, 0"):
        read_feature_file(path)
    path.write_text("nonsense\n")
    with pytest.raises(FeatureFileError):
        read_feature_file(path)


def test_truncated_binary_record(tmp_path):
    path = tmp_path / "t.aplfeat"
    save_features(FeatureMatrix((("g", 0, 0),), np.ones((1, 4))), path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(LengthMismatchError):
        read_feature_file(path)
