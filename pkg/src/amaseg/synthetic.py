"""Synthetic test images with known geometry.

All shapes are defined in unit fractions of the image size, so fixtures
scale to any resolution; analytic masks come from the same definitions.
Rendering supersamples each pixel, which leaves a thin fractional-coverage
band along the shape boundaries (natural antialiasing).
"""

from __future__ import annotations

import numpy as np

from .raster import PixelGrid

# ten scattered disks (cx, cy, r) in unit fractions; pairwise disjoint
CIRCLES = [
    (0.20, 0.17, 0.125),
    (0.54, 0.13, 0.085),
    (0.84, 0.18, 0.105),
    (0.13, 0.46, 0.090),
    (0.45, 0.43, 0.150),
    (0.80, 0.47, 0.105),
    (0.15, 0.78, 0.085),
    (0.40, 0.81, 0.100),
    (0.66, 0.82, 0.090),
    (0.89, 0.80, 0.080),
]

# concentric circles (radius fraction, gray value inside up to that circle),
# listed outermost first as (radius, gray of the annulus inside it)
RING_RADII = [0.095, 0.160, 0.225, 0.290, 0.355, 0.420]
RING_GRAYS = [0.90, 0.15, 0.75, 0.25, 0.60, 0.35]
RING_BACKGROUND = 0.05

TWO_OBJECTS = [
    (0.30, 0.50, 0.16, 0.90),
    (0.70, 0.50, 0.16, 0.45),
]
TWO_OBJECT_BACKGROUND = 0.05


def _supersampled(size: int, value_fn, supersample: int = 4) -> np.ndarray:
    """Average of value_fn over supersample^2 sub-positions per pixel."""
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    base = np.arange(size, dtype=np.float64)
    xs = (base[:, None] + offs[None, :]).ravel()
    xx, yy = np.meshgrid(xs, xs)
    sub = np.asarray(value_fn(xx, yy), dtype=np.float64)
    return (
        sub.reshape(size, supersample, size, supersample)
        .swapaxes(1, 2)
        .reshape(size, size, supersample * supersample)
        .mean(axis=-1)
    )


def circles_image(size: int = 256, inside: float = 0.95,
                  outside: float = 0.05) -> PixelGrid:
    """Ten-disk test image; values `inside` on the disks, `outside` elsewhere."""
    def in_any(x, y):
        hit = np.zeros_like(x, dtype=bool)
        for cx, cy, r in CIRCLES:
            hit |= (x - cx * (size - 1)) ** 2 + (y - cy * (size - 1)) ** 2 <= (
                r * size
            ) ** 2
        return hit

    cov = _supersampled(size, in_any)
    return PixelGrid(outside + (inside - outside) * cov)


def circles_mask(size: int = 256) -> np.ndarray:
    """Analytic disk mask at pixel centers."""
    x = np.arange(size, dtype=np.float64)
    xx, yy = np.meshgrid(x, x)
    hit = np.zeros((size, size), dtype=bool)
    for cx, cy, r in CIRCLES:
        hit |= (xx - cx * (size - 1)) ** 2 + (yy - cy * (size - 1)) ** 2 <= (
            r * size
        ) ** 2
    return hit


def rings_image(size: int = 512) -> PixelGrid:
    """Concentric-circles image with alternating gray levels."""
    def value(x, y):
        cx = cy = 0.5 * (size - 1)
        rr = np.sqrt((x - cx) ** 2 + (y - cy) ** 2)
        out = np.full_like(rr, RING_BACKGROUND)
        for radius, gray in sorted(
            zip(RING_RADII, RING_GRAYS), key=lambda t: -t[0]
        ):
            out = np.where(rr <= radius * size, gray, out)
        return out

    return PixelGrid(_supersampled(size, value))


def ring_circles(size: int = 512):
    """(cx, cy, r) in pixels for every ring boundary circle."""
    c = 0.5 * (size - 1)
    return [(c, c, r * size) for r in RING_RADII]


def two_object_image(size: int = 256) -> PixelGrid:
    """Two disks of different gray levels on a dark background."""
    def value(x, y):
        out = np.full_like(x, TWO_OBJECT_BACKGROUND, dtype=np.float64)
        for cx, cy, r, gray in TWO_OBJECTS:
            hit = (x - cx * (size - 1)) ** 2 + (y - cy * (size - 1)) ** 2 <= (
                r * size
            ) ** 2
            out = np.where(hit, gray, out)
        return out

    return PixelGrid(_supersampled(size, value))


def edge_step_image(size: int = 256) -> PixelGrid:
    """Vertical unit step at the image midline."""
    vals = np.zeros((size, size))
    vals[:, size // 2:] = 1.0
    return PixelGrid(vals)


def add_gaussian_noise(grid: PixelGrid, sigma: float, seed: int = 7) -> PixelGrid:
    """Additive Gaussian intensity noise, clipped back to [0, 1]."""
    rng = np.random.default_rng(seed)
    noisy = grid.values + rng.normal(0.0, sigma, grid.values.shape)
    return PixelGrid(np.clip(noisy, 0.0, 1.0))
