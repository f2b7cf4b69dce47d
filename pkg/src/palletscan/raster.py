"""Polar to Cartesian conversion and binary occupancy rasterization of scans."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scan_core import BoundingBox, Scan


@dataclass(frozen=True)
class GridSpec:
    """Square window ``[-extent, extent]^2`` (meters) sampled on ``side`` pixels."""

    side_pixels: int = 250
    extent_meters: float = 5.0

    def __post_init__(self):
        if self.side_pixels < 2:
            raise ValueError("side_pixels must be at least 2")
        if not self.extent_meters > 0:
            raise ValueError("extent_meters must be positive")

    @property
    def meters_per_pixel(self) -> float:
        return 2 * self.extent_meters / self.side_pixels


def polar_to_cartesian(scan: Scan) -> np.ndarray:
    """Return an ``(n, 2)`` array of beam endpoints; NO_RETURN beams are skipped."""
    r = scan.ranges_array()
    theta = scan.angles
    keep = np.isfinite(r)
    r, theta = r[keep], theta[keep]
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def point_to_pixel(x, y, spec: GridSpec):
    """Map metric coordinates to (row, col); row 0 is the top (+y up)."""
    side, R = spec.side_pixels, spec.extent_meters
    col = np.floor((np.asarray(x) + R) / (2 * R) * side).astype(np.int64)
    row = np.floor((R - np.asarray(y)) / (2 * R) * side).astype(np.int64)
    return np.clip(row, 0, side - 1), np.clip(col, 0, side - 1)


def rasterize(points, spec: GridSpec = GridSpec()) -> np.ndarray:
    """Binary occupancy image: a pixel is 1.0 iff at least one point falls in it."""
    img = np.zeros((spec.side_pixels, spec.side_pixels), dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    R = spec.extent_meters
    inside = (np.abs(pts[:, 0]) <= R) & (np.abs(pts[:, 1]) <= R)
    pts = pts[inside]
    if len(pts):
        rows, cols = point_to_pixel(pts[:, 0], pts[:, 1], spec)
        img[rows, cols] = 1.0
    return img


def scan_to_image(scan: Scan, spec: GridSpec = GridSpec()) -> np.ndarray:
    return rasterize(polar_to_cartesian(scan), spec)


def _bin_starts(source: int, target: int) -> np.ndarray:
    bins = (np.arange(source) * target) // source
    return np.searchsorted(bins, np.arange(target))


def downscale(img: np.ndarray, target_side: int) -> np.ndarray:
    """Block-max resample to ``target_side``: a bin is occupied if any source cell in it is.

    Works on a single ``(H, W)`` image or a stack ``(..., H, W)``.
    """
    img = np.asarray(img, dtype=np.float64)
    side = img.shape[-1]
    if img.shape[-2] != side:
        raise ValueError("image must be square")
    if target_side < 2 or target_side > side:
        raise ValueError(f"target_side must lie in [2, {side}], got {target_side}")
    starts = _bin_starts(side, target_side)
    out = np.maximum.reduceat(img, starts, axis=-1)
    return np.maximum.reduceat(out, starts, axis=-2)


def resize(img: np.ndarray, target_side: int) -> np.ndarray:
    """Block-max when shrinking, nearest neighbour when enlarging (per axis)."""
    img = np.asarray(img, dtype=np.float64)
    for axis in (-2, -1):
        n = img.shape[axis]
        if target_side < n:
            img = np.maximum.reduceat(img, _bin_starts(n, target_side), axis=axis)
        elif target_side > n:
            src = (np.arange(target_side) * n) // target_side
            img = np.take(img, src, axis=axis)
    return img


def crop(img: np.ndarray, box: BoundingBox) -> np.ndarray:
    return img[..., box.row0:box.row1, box.col0:box.col1]


def scale_box(box: BoundingBox, source_side: int, target_side: int) -> BoundingBox:
    """Map a box between raster resolutions, keeping every cell it touches."""
    f = target_side / source_side
    r0 = math.floor(box.row0 * f)
    c0 = math.floor(box.col0 * f)
    r1 = min(target_side, max(r0 + 1, math.ceil(box.row1 * f - 1e-9)))
    c1 = min(target_side, max(c0 + 1, math.ceil(box.col1 * f - 1e-9)))
    return BoundingBox(r0, c0, r1 - r0, c1 - c0)


def write_pgm(path: str | os.PathLike, img: np.ndarray, maxval: int = 255) -> None:
    """Plain (P2) PGM dump for eyeballing rasters."""
    img = np.asarray(img)
    levels = np.rint(np.clip(img, 0.0, 1.0) * maxval).astype(int)
    h, w = levels.shape
    rows = "\n".join(" ".join(str(v) for v in row) for row in levels)
    Path(path).write_text(f"P2\n{w} {h}\n{maxval}\n{rows}\n")


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text().splitlines():
        tokens += line.split("#", 1)[0].split()
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    values = np.array(tokens[4:], dtype=np.float64)
    if values.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {values.size}")
    return values.reshape(h, w) / maxval
