"""Binary silhouettes of fins and a strict binary PGM codec.

Pixels are sampled at their centres with the even-odd rule; solid is 255 on
a 0 background. Row 0 is the top of the domain, as in the PGM file.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import FinShape, Polyline, Rect, polygonize

SAMPLES_PER_SEGMENT = 64


class RasterFormatError(ValueError):
    """Malformed or truncated image data."""


@dataclass(frozen=True, eq=False)
class RasterImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width), uint8 in [0, 255] or float in [0, 1]

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.shape != (self.height, self.width):
            raise ValueError(f"pixel array {px.shape} does not match {self.height}x{self.width}")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RasterImage):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.pixels.dtype == other.pixels.dtype
            and np.array_equal(self.pixels, other.pixels)
        )

    def normalized(self) -> np.ndarray:
        """Intensities scaled to [0, 1] as float64."""
        if self.pixels.dtype == np.uint8:
            return self.pixels.astype(np.float64) / 255.0
        return self.pixels.astype(np.float64)


def _fill_polygon(mask: np.ndarray, verts: np.ndarray, domain: Rect) -> None:
    """XOR the even-odd interior of one closed polygon into ``mask``."""
    h, w = mask.shape
    # pixel coordinates: column c has centre x = c + 0.5; row r centre y = r + 0.5 from the top
    px = (verts[:, 0] - domain.x0) / domain.width * w
    py = (domain.y1 - verts[:, 1]) / domain.height * h
    x0, y0 = px, py
    x1, y1 = np.roll(px, -1), np.roll(py, -1)
    nonflat = y0 != y1
    x0, y0, x1, y1 = x0[nonflat], y0[nonflat], x1[nonflat], y1[nonflat]
    lo, hi = np.minimum(y0, y1), np.maximum(y0, y1)
    r_first = max(int(np.floor(lo.min() - 0.5)), 0) if len(lo) else 0
    r_last = min(int(np.ceil(hi.max() - 0.5)), h - 1) if len(hi) else -1
    cols = np.arange(w) + 0.5
    for r in range(r_first, r_last + 1):
        yc = r + 0.5
        hit = (lo <= yc) & (yc < hi)  # half-open so shared vertices count once
        if not hit.any():
            continue
        t = (yc - y0[hit]) / (y1[hit] - y0[hit])
        xs = np.sort(x0[hit] + t * (x1[hit] - x0[hit]))
        # number of crossings left of each pixel centre decides parity
        inside = (np.searchsorted(xs, cols, side="right") % 2) == 1
        mask[r] ^= inside


def rasterize(
    shapes: Sequence[FinShape | Polyline],
    width: int,
    height: int,
    domain: Rect,
    samples_per_segment: int = SAMPLES_PER_SEGMENT,
) -> RasterImage:
    """Filled silhouette of the union of ``shapes`` over ``domain``."""
    if not shapes:
        raise ValueError("rasterize needs at least one shape")
    if width < 8 or height < 8:
        raise ValueError("image must be at least 8x8")
    return RasterImage(width, height, solid_mask(shapes, width, height, domain, samples_per_segment) * np.uint8(255))


def solid_mask(
    shapes: Sequence[FinShape | Polyline],
    width: int,
    height: int,
    domain: Rect,
    samples_per_segment: int = SAMPLES_PER_SEGMENT,
) -> np.ndarray:
    """Boolean (height, width) union mask, row 0 at the top."""
    out = np.zeros((height, width), dtype=bool)
    for s in shapes:
        poly = s if isinstance(s, Polyline) else polygonize(s, samples_per_segment)
        m = np.zeros_like(out)
        _fill_polygon(m, poly.vertices, domain)
        out |= m
    return out


def downscale(img: RasterImage, factor: int) -> RasterImage:
    """Block mean over factor x factor tiles, rounding half up.

    Trailing rows/columns that do not fill a whole block are dropped, so
    506 px halves to 253 px.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    h, w = img.height // factor, img.width // factor
    if h == 0 or w == 0:
        raise ValueError("factor larger than image")
    px = img.pixels[: h * factor, : w * factor]
    blocks = px.reshape(h, factor, w, factor)
    n = factor * factor
    if px.dtype == np.uint8:
        s = blocks.astype(np.int64).sum(axis=(1, 3))
        out = ((2 * s + n) // (2 * n)).astype(np.uint8)
    else:
        out = np.floor(blocks.mean(axis=(1, 3)) + 0.5)
    return RasterImage(w, h, out)


def write_pgm(img: RasterImage) -> bytes:
    if img.pixels.dtype != np.uint8:
        raise ValueError("PGM export needs uint8 pixels")
    return f"P5 {img.width} {img.height} 255\n".encode("ascii") + img.pixels.tobytes()


_HEADER = re.compile(rb"\AP5(?:\s+|#[^\n]*\n)+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(data: bytes) -> RasterImage:
    m = _HEADER.match(data)
    if m is None:
        raise RasterFormatError("not a binary PGM (P5) header")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise RasterFormatError(f"only maxval 255 is supported, got {maxval}")
    if w < 1 or h < 1:
        raise RasterFormatError("image dimensions must be positive")
    payload = data[m.end():]
    if len(payload) != w * h:
        raise RasterFormatError(f"payload has {len(payload)} bytes, expected {w * h}")
    return RasterImage(w, h, np.frombuffer(payload, dtype=np.uint8).reshape(h, w))


def save_pgm(img: RasterImage, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_pgm(img))


def load_pgm(path) -> RasterImage:
    with open(path, "rb") as fh:
        return read_pgm(fh.read())
