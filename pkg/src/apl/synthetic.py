"""Procedural "forest" scenes with misaligned trunk labels.

Target canopies are disks carrying a radial frond pattern, background
canopies are disks of blotchy noise, and the floor is low-frequency value
noise in green hues.  Each canopy gets one point label at its centre plus a
uniform random offset, which models trunks leaning away from their crowns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import TooCrowdedError
from .raster import RasterImage, SegmentationMask
from .weak import PointLabel

MAX_ATTEMPTS = 1000


@dataclass(frozen=True)
class ForestParams:
    image_size: int = 1000
    n_target: int = 25
    n_background: int = 60
    radius_range: tuple[int, int] = (36, 56)
    trunk_offset_max: float = 30.0
    texture_arms: int = 9
    noise_scale: float = 48.0
    seed: int = 7
    target_class: str = "palm"
    background_class: str = "other"
    image_id: str = "forest"

    def __post_init__(self):
        lo, hi = self.radius_range
        if lo < 4 or hi < lo:
            raise ValueError("canopy radii must be >= 4 px with min <= max")
        if 2 * hi > self.image_size:
            raise ValueError("largest canopy does not fit in the image")
        if self.trunk_offset_max < 0:
            raise ValueError("trunk_offset_max must be >= 0")
        if self.n_target < 0 or self.n_background < 0:
            raise ValueError("canopy counts must be >= 0")


@dataclass(frozen=True)
class Canopy:
    x: int
    y: int
    radius: int
    target: bool


def value_noise(rng: np.random.Generator, height: int, width: int, scale: float) -> np.ndarray:
    """Smooth noise in [0, 1]: random lattice values, cosine-interpolated."""
    gh = int(np.ceil(height / scale)) + 2
    gw = int(np.ceil(width / scale)) + 2
    lattice = rng.random((gh, gw))
    ys = np.arange(height) / scale
    xs = np.arange(width) / scale
    y0, x0 = ys.astype(int), xs.astype(int)
    ty = (1 - np.cos(np.pi * (ys - y0))) / 2
    tx = (1 - np.cos(np.pi * (xs - x0))) / 2
    top = lattice[y0][:, x0] * (1 - tx) + lattice[y0][:, x0 + 1] * tx
    bot = lattice[y0 + 1][:, x0] * (1 - tx) + lattice[y0 + 1][:, x0 + 1] * tx
    return top * (1 - ty)[:, None] + bot * ty[:, None]


def _place(rng, params: ForestParams) -> list[Canopy]:
    size = params.image_size
    lo, hi = params.radius_range
    placed: list[Canopy] = []
    for target, count in ((True, params.n_target), (False, params.n_background)):
        for _ in range(count):
            for _attempt in range(MAX_ATTEMPTS):
                r = int(rng.integers(lo, hi + 1))
                x = int(rng.integers(r, size - r + 1))
                y = int(rng.integers(r, size - r + 1))
                # same-class overlap is fine, target/background overlap is not
                clash = any(
                    c.target != target and (c.x - x) ** 2 + (c.y - y) ** 2 < (c.radius + r) ** 2
                    for c in placed
                )
                if not clash:
                    placed.append(Canopy(x, y, r, target))
                    break
            else:
                kind = "target" if target else "background"
                raise TooCrowdedError(
                    f"could not place {kind} canopy #{len(placed) + 1} in {MAX_ATTEMPTS} attempts"
                )
    return placed


def _disk(c: Canopy, size: int):
    """Bounding-box slices plus pixel-centre offsets from the canopy centre."""
    y0, y1 = max(c.y - c.radius - 1, 0), min(c.y + c.radius + 2, size)
    x0, x1 = max(c.x - c.radius - 1, 0), min(c.x + c.radius + 2, size)
    dy, dx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    dy += 0.5 - c.y
    dx += 0.5 - c.x
    inside = dx ** 2 + dy ** 2 <= c.radius ** 2
    return (slice(y0, y1), slice(x0, x1)), dx, dy, inside


def generate_forest(params: ForestParams = ForestParams()):
    """Return ``(image, truth_mask, point_labels)``; fully determined by the seed."""
    rng = np.random.default_rng(params.seed)
    size = params.image_size
    canopies = _place(rng, params)

    floor = value_noise(rng, size, size, params.noise_scale)
    grain = value_noise(rng, size, size, 3.0)
    img = np.empty((size, size, 3))
    img[..., 0] = 45 + 35 * floor + 10 * grain
    img[..., 1] = 85 + 45 * floor + 12 * grain
    img[..., 2] = 40 + 20 * floor + 8 * grain

    truth = np.zeros((size, size), dtype=np.uint8)
    blotch = value_noise(rng, size, size, 7.0)
    for c in canopies:
        sl, dx, dy, inside = _disk(c, size)
        rho = np.sqrt(dx ** 2 + dy ** 2) / c.radius
        shade = 1.0 - 0.35 * rho ** 2
        patch = img[sl]
        if c.target:
            theta = np.arctan2(dy, dx)
            phase = rng.uniform(0, 2 * np.pi)
            twist = rng.uniform(-1.5, 1.5)
            fronds = 0.5 + 0.5 * np.cos(params.texture_arms * theta + phase + twist * rho)
            fronds = fronds ** 0.6
            level = (0.35 + 0.65 * fronds) * shade
            colour = np.stack([120 + 70 * level, 150 + 80 * level, 45 + 35 * level], axis=-1)
            truth[sl][inside] = 1
        else:
            tone = blotch[sl]
            level = (0.45 + 0.55 * tone) * shade
            colour = np.stack([30 + 45 * level, 75 + 70 * level, 30 + 35 * level], axis=-1)
        patch[inside] = colour[inside]

    image = RasterImage(np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8))

    points = []
    for c in canopies:
        angle = rng.uniform(0, 2 * np.pi)
        dist = params.trunk_offset_max * np.sqrt(rng.random())
        px = float(np.clip(c.x + dist * np.cos(angle), 0, size - 1))
        py = float(np.clip(c.y + dist * np.sin(angle), 0, size - 1))
        cls = params.target_class if c.target else params.background_class
        points.append(PointLabel(params.image_id, px, py, cls))
    return image, SegmentationMask(truth), points


def canopies_for(params: ForestParams) -> list[Canopy]:
    """The canopy layout ``generate_forest`` uses for these params."""
    return _place(np.random.default_rng(params.seed), params)
