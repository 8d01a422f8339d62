"""Shadow detection and removal.

Shadows are found by thresholding a Gaussian-smoothed luminance image against
a fraction of its mean, then each colour channel of the shadowed pixels is
histogram-matched to the sunlit pixels of the same image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatchError, NoSunlitReferenceError
from .raster import RasterImage, SegmentationMask, to_grayscale

TRUNCATE_SIGMAS = 3.0


@dataclass(frozen=True)
class ShadowParams:
    blur_sigma: float = 15.0
    threshold_factor: float = 0.6
    histogram_bins: int = 256

    def __post_init__(self):
        if not self.blur_sigma > 0:
            raise ValueError("blur_sigma must be positive")
        if not 0 < self.threshold_factor < 1:
            raise ValueError("threshold_factor must lie in (0, 1)")
        if self.histogram_bins != 256:
            raise ValueError("only 256-bin histograms are supported for 8-bit data")


def smoothed_luminance(img: RasterImage, sigma: float) -> np.ndarray:
    gray = to_grayscale(img).data
    # mode="nearest" is edge replication
    return ndimage.gaussian_filter(gray, sigma=sigma, mode="nearest", truncate=TRUNCATE_SIGMAS)


def detect_shadow_mask(img: RasterImage, params: ShadowParams = ShadowParams()) -> SegmentationMask:
    smooth = smoothed_luminance(img, params.blur_sigma)
    threshold = params.threshold_factor * smooth.mean()
    return SegmentationMask((smooth < threshold).astype(np.uint8))


def _match_channel(values: np.ndarray, shadow: np.ndarray, bins: int) -> np.ndarray:
    src_cum = np.cumsum(np.bincount(values[shadow], minlength=bins)).astype(np.int64)
    ref_cum = np.cumsum(np.bincount(values[~shadow], minlength=bins)).astype(np.int64)
    n_src, n_ref = src_cum[-1], ref_cum[-1]
    # smallest u with F_ref(u) >= F_src(v), compared in exact integer arithmetic
    lut = np.searchsorted(ref_cum * n_src, src_cum * n_ref, side="left")
    lut = np.clip(lut, 0, bins - 1).astype(np.uint8)
    out = values.copy()
    out[shadow] = lut[values[shadow]]
    return out


def remove_shadows(
    img: RasterImage, mask: SegmentationMask, params: ShadowParams = ShadowParams()
) -> RasterImage:
    if (mask.height, mask.width) != (img.height, img.width):
        raise DimensionMismatchError("mask and image dimensions differ")
    shadow = mask.data.astype(bool)
    if not shadow.any():
        return img
    if shadow.all():
        raise NoSunlitReferenceError("shadow mask covers every pixel; no sunlit reference")
    out = np.empty_like(img.data)
    for c in range(3):
        out[..., c] = _match_channel(img.data[..., c], shadow, params.histogram_bins)
    return RasterImage(out)
