"""Grayscale raster images: loading, sampling, and finite-difference derivatives.

Images live on the pixel grid with intensities normalized to [0, 1]. Pixel
(i, j) of a width-w, height-h image sits at coordinates (x=i, y=j), so the
image occupies the rectangle [0, w-1] x [0, h-1].
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter


class RasterError(ValueError):
    """Raised for unreadable, unsupported, or degenerate image input."""


@dataclass
class PixelGrid:
    """Rectangular grayscale raster, row-major, intensities in [0, 1]."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 2 or v.shape[1] < 2:
            raise RasterError("zero-sized or degenerate image")
        if not np.isfinite(v).all():
            raise RasterError("non-finite intensity values")
        if v.min() < -1e-12 or v.max() > 1.0 + 1e-12:
            raise RasterError("intensities must lie in [0, 1]")
        self.values = np.clip(v, 0.0, 1.0)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.values.size


def _atomic_write(path, data: bytes):
    """Write via a temp file in the same directory, then rename."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_pgm_tokens(data: bytes, count: int, offset: int):
    """Read `count` whitespace-separated header tokens, skipping # comments."""
    tokens = []
    i = offset
    n = len(data)
    while len(tokens) < count and i < n:
        c = data[i : i + 1]
        if c == b"#":
            while i < n and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < n and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
                j += 1
            tokens.append(data[i:j])
            i = j
    if len(tokens) < count:
        raise RasterError("truncated PGM header")
    return tokens, i


def read_pgm(path) -> PixelGrid:
    """Read a P2 (ASCII) or P5 (binary) PGM file, rescaled by its maxval."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise RasterError(f"unsupported format (magic {magic!r})")
    (w_tok, h_tok, mv_tok), i = _read_pgm_tokens(data, 3, 2)
    try:
        width, height, maxval = int(w_tok), int(h_tok), int(mv_tok)
    except ValueError as exc:
        raise RasterError("malformed PGM header") from exc
    if width < 2 or height < 2:
        raise RasterError("zero-sized or degenerate image")
    if not 0 < maxval <= 65535:
        raise RasterError(f"bad maxval {maxval}")
    if magic == b"P5":
        i += 1  # single whitespace byte after maxval
        dtype = ">u2" if maxval > 255 else np.uint8
        raw = np.frombuffer(data, dtype=dtype, count=width * height, offset=i)
        if raw.size < width * height:
            raise RasterError("truncated PGM pixel data")
    else:
        fields = data[i:].split()
        if len(fields) < width * height:
            raise RasterError("truncated PGM pixel data")
        raw = np.array([int(t) for t in fields[: width * height]], dtype=np.int64)
    vals = raw.reshape(height, width).astype(np.float64) / float(maxval)
    return PixelGrid(vals)


def write_pgm(grid: PixelGrid, path, ascii_format: bool = False):
    """Write an 8-bit PGM (binary P5 by default). Atomic: temp file + rename."""
    q = np.rint(grid.values * 255.0).astype(np.uint8)
    header = f"{'P2' if ascii_format else 'P5'}\n{grid.width} {grid.height}\n255\n"
    if ascii_format:
        body = "\n".join(" ".join(str(int(v)) for v in row) for row in q) + "\n"
        _atomic_write(path, header.encode() + body.encode())
    else:
        _atomic_write(path, header.encode() + q.tobytes())


def load_image(path) -> PixelGrid:
    """Load a grayscale image (PGM required; PNG if Pillow is installed).

    Multi-channel input is converted to luminance before rescaling to [0, 1].
    """
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic[:2] in (b"P2", b"P5"):
        return read_pgm(path)
    if magic == b"\x89PNG\r\n\x1a\n":
        try:
            from PIL import Image
        except ImportError as exc:
            raise RasterError("PNG support requires Pillow") from exc
        with Image.open(path) as im:
            lum = im.convert("L")
            vals = np.asarray(lum, dtype=np.float64) / 255.0
        if vals.ndim != 2 or min(vals.shape) < 2:
            raise RasterError("zero-sized or degenerate image")
        return PixelGrid(vals)
    raise RasterError(f"unsupported format (magic {magic[:2]!r})")


def sample_bilinear(grid: PixelGrid, points):
    """Bilinear interpolation at pixel coordinates; clamps outside the grid.

    `points` is a length-2 vector or an (n, 2) array of (x, y); exact at
    pixel centers (integer coordinates).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    v = grid.values
    h, w = v.shape
    x = np.clip(pts[:, 0], 0.0, w - 1.0)
    y = np.clip(pts[:, 1], 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(y).astype(np.intp), h - 2)
    tx = x - x0
    ty = y - y0
    out = (
        v[y0, x0] * (1 - tx) * (1 - ty)
        + v[y0, x0 + 1] * tx * (1 - ty)
        + v[y0 + 1, x0] * (1 - tx) * ty
        + v[y0 + 1, x0 + 1] * tx * ty
    )
    return out[0] if np.asarray(points).ndim == 1 else out


def smoothed_values(grid: PixelGrid, sigma: float) -> np.ndarray:
    """Gaussian presmooth (truncated at 3 sigma, reflected boundary)."""
    if sigma < 0:
        raise ValueError("presmooth sigma must be >= 0")
    if sigma == 0:
        return grid.values.copy()
    return gaussian_filter(grid.values, sigma, mode="reflect", truncate=3.0)


def _d1(f: np.ndarray, axis: int) -> np.ndarray:
    """First derivative: central interior, second-order one-sided boundary."""
    if f.shape[axis] < 3:
        return np.gradient(f, axis=axis, edge_order=1)
    return np.gradient(f, axis=axis, edge_order=2)


def _d2(f: np.ndarray, axis: int) -> np.ndarray:
    """Pure second derivative along one axis with one-sided boundary stencils."""
    f = np.moveaxis(f, axis, 0)
    n = f.shape[0]
    out = np.empty_like(f)
    if n < 4:
        # too short for one-sided second-order stencils; fall back
        if n == 2:
            out[:] = 0.0
        else:
            mid = f[2] - 2.0 * f[1] + f[0]
            out[:] = mid
        return np.moveaxis(out, 0, axis)
    out[1:-1] = f[2:] - 2.0 * f[1:-1] + f[:-2]
    out[0] = 2.0 * f[0] - 5.0 * f[1] + 4.0 * f[2] - f[3]
    out[-1] = 2.0 * f[-1] - 5.0 * f[-2] + 4.0 * f[-3] - f[-4]
    return np.moveaxis(out, 0, axis)


def grid_gradient(grid: PixelGrid, presmooth_sigma: float = 0.0) -> np.ndarray:
    """Per-pixel intensity gradient, shape (h, w, 2) ordered (d/dx, d/dy).

    Units are intensity per pixel. Exact for linear data when sigma=0.
    """
    f = smoothed_values(grid, presmooth_sigma)
    gx = _d1(f, axis=1)
    gy = _d1(f, axis=0)
    return np.stack([gx, gy], axis=-1)


def grid_hessian(grid: PixelGrid, presmooth_sigma: float = 0.0) -> np.ndarray:
    """Per-pixel symmetric Hessian, shape (h, w, 2, 2).

    Second central differences inside, second-order one-sided at the
    boundary; the cross term is the symmetrized composition of first
    derivatives. Exact for quadratics in the interior when sigma=0.
    """
    f = smoothed_values(grid, presmooth_sigma)
    fxx = _d2(f, axis=1)
    fyy = _d2(f, axis=0)
    fxy = _d1(_d1(f, axis=1), axis=0)
    hess = np.empty(f.shape + (2, 2), dtype=np.float64)
    hess[..., 0, 0] = fxx
    hess[..., 0, 1] = fxy
    hess[..., 1, 0] = fxy
    hess[..., 1, 1] = fyy
    return hess
