"""Scan and label types, the on-disk text formats, and dataset splitting."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NO_RETURN = math.inf


class ParseError(ValueError):
    """Malformed scan or label file. ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}: "
        if line is not None:
            where += f"line {line}: "
        super().__init__(where + message)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned pixel box; ``row0``/``col0`` inclusive, extents in pixels."""

    row0: int
    col0: int
    height: int
    width: int

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"box extents must be positive, got {self.height}x{self.width}")

    @property
    def area(self) -> int:
        return self.height * self.width

    @property
    def row1(self) -> int:
        """Exclusive end row."""
        return self.row0 + self.height

    @property
    def col1(self) -> int:
        return self.col0 + self.width

    @property
    def center(self) -> tuple[float, float]:
        return (self.row0 + self.height / 2.0, self.col0 + self.width / 2.0)

    def inside(self, side: int) -> bool:
        return self.row0 >= 0 and self.col0 >= 0 and self.row1 <= side and self.col1 <= side


@dataclass(frozen=True)
class Scan:
    angle_min: float
    angle_increment: float
    ranges: tuple[float, ...]
    timestamp: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ranges", tuple(float(r) for r in self.ranges))
        if not self.ranges:
            raise ValueError("scan has no ranges")
        if not self.angle_increment > 0:
            raise ValueError("angle_increment must be positive")
        for r in self.ranges:
            if math.isnan(r) or r < 0:
                raise ValueError(f"invalid range value {r!r}")
        if self.angle_increment * (len(self.ranges) - 1) > 2 * math.pi + 1e-9:
            raise ValueError("angular span exceeds 2*pi")

    @property
    def angles(self) -> np.ndarray:
        return self.angle_min + self.angle_increment * np.arange(len(self.ranges))

    def ranges_array(self) -> np.ndarray:
        return np.asarray(self.ranges, dtype=np.float64)


@dataclass(frozen=True)
class ScanLabel:
    has_pallet: bool
    boxes: tuple[BoundingBox, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if not self.has_pallet and self.boxes:
            raise ValueError("a label without a pallet cannot carry boxes")


@dataclass(frozen=True)
class DatasetSplit:
    train_indices: tuple[int, ...]
    test_indices: tuple[int, ...]


def _format_float(x: float) -> str:
    if math.isinf(x):
        return "inf"
    return repr(float(x))


def _parse_float(token: str, lineno: int, source) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"not a number: {token!r}", lineno, source) from None
    if math.isnan(value):
        raise ParseError("NaN is not a valid value", lineno, source)
    return value


def _keyed_line(lines: list[str], index: int, key: str, source) -> str:
    if index >= len(lines):
        raise ParseError(f"missing '{key}' header", index + 1, source)
    parts = lines[index].split()
    if len(parts) != 2 or parts[0] != key:
        raise ParseError(f"expected '{key} <value>'", index + 1, source)
    return parts[1]


def parse_scan(text: str | bytes, timestamp: int = 0, source: str | None = None) -> Scan:
    """Parse the four-line ``.scan`` text format."""
    if isinstance(text, bytes):
        text = text.decode("ascii")
    lines = text.splitlines()
    if not any(line.strip() for line in lines):
        raise ParseError("empty scan file", 1, source)
    angle_min = _parse_float(_keyed_line(lines, 0, "angle_min", source), 1, source)
    increment = _parse_float(_keyed_line(lines, 1, "angle_increment", source), 2, source)
    count_token = _keyed_line(lines, 2, "count", source)
    try:
        count = int(count_token)
    except ValueError:
        raise ParseError(f"count is not an integer: {count_token!r}", 3, source) from None
    if count < 1:
        raise ParseError("count must be at least 1", 3, source)
    if not increment > 0:
        raise ParseError("angle_increment must be positive", 2, source)
    tokens = lines[3].split() if len(lines) > 3 else []
    if len(tokens) != count:
        raise ParseError(f"count mismatch: header says {count}, found {len(tokens)}", 4, source)
    if any(line.strip() for line in lines[4:]):
        raise ParseError("unexpected trailing content", 5, source)
    ranges = []
    for tok in tokens:
        r = _parse_float(tok, 4, source)
        if r < 0:
            raise ParseError(f"negative range {tok}", 4, source)
        ranges.append(r)
    try:
        return Scan(angle_min, increment, tuple(ranges), timestamp)
    except ValueError as exc:
        raise ParseError(str(exc), 2, source) from None


def write_scan(scan: Scan) -> bytes:
    lines = [
        f"angle_min {_format_float(scan.angle_min)}",
        f"angle_increment {_format_float(scan.angle_increment)}",
        f"count {len(scan.ranges)}",
        " ".join(_format_float(r) for r in scan.ranges),
    ]
    return ("\n".join(lines) + "\n").encode("ascii")


def parse_label(text: str | bytes, source: str | None = None) -> ScanLabel:
    if isinstance(text, bytes):
        text = text.decode("ascii")
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty label file", 1, source)
    flag = _keyed_line(lines, 0, "has_pallet", source)
    if flag not in ("0", "1"):
        raise ParseError(f"has_pallet must be 0 or 1, got {flag!r}", 1, source)
    boxes = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] != "box" or len(parts) != 5:
            raise ParseError("expected 'box <row0> <col0> <height> <width>'", lineno, source)
        try:
            boxes.append(BoundingBox(*(int(p) for p in parts[1:])))
        except ValueError as exc:
            raise ParseError(str(exc), lineno, source) from None
    try:
        return ScanLabel(flag == "1", tuple(boxes))
    except ValueError as exc:
        raise ParseError(str(exc), 2, source) from None


def write_label(label: ScanLabel) -> bytes:
    lines = [f"has_pallet {int(label.has_pallet)}"]
    lines += [f"box {b.row0} {b.col0} {b.height} {b.width}" for b in label.boxes]
    return ("\n".join(lines) + "\n").encode("ascii")


@dataclass
class Frame:
    """A scan paired with its (optional) label, as stored on disk under one stem."""

    stem: str
    scan: Scan
    label: ScanLabel | None = None


def save_frame(directory: str | os.PathLike, frame: Frame) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{frame.stem}.scan").write_bytes(write_scan(frame.scan))
    if frame.label is not None:
        (directory / f"{frame.stem}.label").write_bytes(write_label(frame.label))


def load_frames(directory: str | os.PathLike, require_labels: bool = False) -> list[Frame]:
    """Load every ``.scan`` in ``directory`` (sorted by stem) with its sibling ``.label``."""
    directory = Path(directory)
    frames = []
    for i, path in enumerate(sorted(directory.glob("*.scan"))):
        scan = parse_scan(path.read_bytes(), timestamp=i, source=str(path))
        label_path = path.with_suffix(".label")
        label = None
        if label_path.exists():
            label = parse_label(label_path.read_bytes(), source=str(label_path))
        elif require_labels:
            raise ParseError("missing label file", None, str(label_path))
        frames.append(Frame(path.stem, scan, label))
    return frames


def split_dataset(n: int, train_fraction: float = 0.7, seed: int = 0) -> DatasetSplit:
    """Seeded random split; the training side gets ``floor(train_fraction * n)`` indices."""
    if n < 2:
        raise ValueError("need at least two items to split")
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    # tolerance so that e.g. 0.7 * 340 floors to 238, not 237
    n_train = math.floor(train_fraction * n + 1e-9)
    order = np.random.default_rng(seed).permutation(n)
    return DatasetSplit(
        tuple(int(i) for i in order[:n_train]),
        tuple(int(i) for i in order[n_train:]),
    )
