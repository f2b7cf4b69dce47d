"""Eight-fold dihedral augmentation of square rasters and their boxes.

An element is ``rotation`` quarter turns counter-clockwise followed, when
``reflect_x`` is set, by a reflection over the x-axis. With row 0 at the top
and +y pointing up, reflecting over the x-axis reverses the row order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scan_core import BoundingBox


@dataclass(frozen=True)
class DihedralElement:
    rotation: int = 0  # quarter turns CCW, 0..3
    reflect_x: bool = False

    def __post_init__(self):
        if self.rotation not in (0, 1, 2, 3):
            raise ValueError("rotation must be 0, 1, 2 or 3 quarter turns")

    @property
    def degrees(self) -> int:
        return 90 * self.rotation

    @property
    def index(self) -> int:
        return self.rotation + 4 * int(self.reflect_x)

    def then(self, other: "DihedralElement") -> "DihedralElement":
        """Element equivalent to applying ``self`` first and ``other`` second."""
        # F R^a = R^-a F, so (F^f2 R^k2)(F^f1 R^k1) = F^(f1+f2) R^(k1 + (-1)^f1 k2)
        k2 = -other.rotation if self.reflect_x else other.rotation
        return DihedralElement((self.rotation + k2) % 4, self.reflect_x != other.reflect_x)

    def inverse(self) -> "DihedralElement":
        if self.reflect_x:
            return self
        return DihedralElement((-self.rotation) % 4, False)


ELEMENTS = tuple(DihedralElement(k, f) for f in (False, True) for k in range(4))
IDENTITY = ELEMENTS[0]


def apply_dihedral(img: np.ndarray, g: DihedralElement) -> np.ndarray:
    """Exact pixel permutation of a square image (or a stack of them on the last two axes)."""
    img = np.asarray(img)
    if img.shape[-1] != img.shape[-2]:
        raise ValueError("dihedral transforms need a square image")
    out = np.rot90(img, g.rotation, axes=(-2, -1))
    if g.reflect_x:
        out = out[..., ::-1, :]
    return np.ascontiguousarray(out)


def transform_pixel(row: int, col: int, side: int, g: DihedralElement) -> tuple[int, int]:
    for _ in range(g.rotation):
        row, col = side - 1 - col, row
    if g.reflect_x:
        row = side - 1 - row
    return row, col


def transform_box(box: BoundingBox, side: int, g: DihedralElement) -> BoundingBox:
    r_a, c_a = transform_pixel(box.row0, box.col0, side, g)
    r_b, c_b = transform_pixel(box.row1 - 1, box.col1 - 1, side, g)
    r0, c0 = min(r_a, r_b), min(c_a, c_b)
    return BoundingBox(r0, c0, abs(r_a - r_b) + 1, abs(c_a - c_b) + 1)


def augment_example(img: np.ndarray, boxes=()) -> list[tuple[np.ndarray, tuple[BoundingBox, ...]]]:
    """All eight dihedral variants of ``img``, boxes carried along; order follows ``ELEMENTS``."""
    side = np.shape(img)[-1]
    return [
        (apply_dihedral(img, g), tuple(transform_box(b, side, g) for b in boxes))
        for g in ELEMENTS
    ]


def augment_batch(images: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stack the eight variants of every image in an ``(N, H, W)`` batch.

    Output is element-major: rows ``[k*N:(k+1)*N]`` hold element ``k``.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    out = np.concatenate([apply_dihedral(images, g) for g in ELEMENTS])
    return out, np.tile(labels, len(ELEMENTS))
