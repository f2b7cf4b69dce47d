"""Synthetic warehouse scans: a rectangular room, an optional pallet, one 2D rangefinder.

The pallet is seen only through its front face, three solid blocks separated
by two fork pockets. Its ground-truth box on the raster is the square of side
``width`` centred on the front-face midpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .raster import GridSpec, point_to_pixel
from .scan_core import BoundingBox, Frame, Scan, ScanLabel

_EPS = 1e-12


@dataclass(frozen=True)
class Pose:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0  # radians, world frame


@dataclass(frozen=True)
class Pallet:
    """``center`` is the footprint centre; ``orientation`` is the outward normal of the front face."""

    center: tuple[float, float]
    orientation: float = 0.0
    width: float = 1.2
    depth: float = 0.8
    pocket_width: float = 0.2

    def __post_init__(self):
        if not (self.width > 2 * self.pocket_width >= 0 and self.depth > 0):
            raise ValueError("pallet dimensions are inconsistent")

    @property
    def normal(self) -> np.ndarray:
        return np.array([math.cos(self.orientation), math.sin(self.orientation)])

    @property
    def face_center(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float) + 0.5 * self.depth * self.normal

    def face_segments(self) -> np.ndarray:
        """``(3, 2, 2)`` array of block segments (start, end) along the front face."""
        n = self.normal
        t = np.array([-n[1], n[0]])
        block = (self.width - 2 * self.pocket_width) / 3
        half = self.width / 2
        spans = [
            (-half, -half + block),
            (-half + block + self.pocket_width, half - block - self.pocket_width),
            (half - block, half),
        ]
        mid = self.face_center
        return np.array([[mid + a * t, mid + b * t] for a, b in spans])

    def footprint(self) -> np.ndarray:
        n = self.normal
        t = np.array([-n[1], n[0]])
        c = np.asarray(self.center, dtype=float)
        hw, hd = self.width / 2, self.depth / 2
        return np.array([c + sx * hw * t + sy * hd * n for sx in (-1, 1) for sy in (-1, 1)])


@dataclass(frozen=True)
class WorldSpec:
    room_half_x: float = 5.0
    room_half_y: float = 5.0
    pallet: Pallet | None = None
    sensor: Pose = field(default_factory=Pose)
    beams: int = 360
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.beams < 8:
            raise ValueError("need at least 8 beams")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.room_half_x <= 0 or self.room_half_y <= 0:
            raise ValueError("room half-extents must be positive")
        if self.pallet is not None and not self.contains(self.pallet.footprint()).all():
            raise ValueError("pallet footprint leaves the room")

    @property
    def diagonal(self) -> float:
        return 2 * math.hypot(self.room_half_x, self.room_half_y)

    def contains(self, points, margin: float = 0.0) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return (np.abs(p[:, 0]) <= self.room_half_x - margin) & (
            np.abs(p[:, 1]) <= self.room_half_y - margin
        )

    def wall_segments(self) -> np.ndarray:
        hx, hy = self.room_half_x, self.room_half_y
        corners = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
        return np.stack([corners, np.roll(corners, -1, axis=0)], axis=1)


@dataclass
class RaycastResult:
    scan: Scan
    label: ScanLabel
    pallet_beams: np.ndarray  # bool per beam: nearest hit is on the pallet


def ray_segment_distances(origin, directions: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """Distance along each ray to each segment, ``inf`` where they miss. Shape ``(beams, segs)``."""
    p = np.asarray(origin, dtype=float)
    d = directions[:, None, :]
    a = segments[None, :, 0, :]
    e = segments[None, :, 1, :] - a
    ap = a - p
    denom = d[..., 0] * e[..., 1] - d[..., 1] * e[..., 0]
    safe = np.where(np.abs(denom) > _EPS, denom, 1.0)
    t = (ap[..., 0] * e[..., 1] - ap[..., 1] * e[..., 0]) / safe
    u = (ap[..., 0] * d[..., 1] - ap[..., 1] * d[..., 0]) / safe
    hit = (np.abs(denom) > _EPS) & (t > _EPS) & (u >= 0.0) & (u <= 1.0)
    return np.where(hit, t, np.inf)


def pallet_box(world: WorldSpec, grid: GridSpec = GridSpec()) -> BoundingBox | None:
    """Ground-truth box of the pallet in the sensor-centred raster, clipped; None if off-image."""
    if world.pallet is None:
        return None
    s = world.sensor
    rel = world.pallet.face_center - np.array([s.x, s.y])
    c, sn = math.cos(-s.heading), math.sin(-s.heading)
    x, y = c * rel[0] - sn * rel[1], sn * rel[0] + c * rel[1]
    h = world.pallet.width / 2
    R = grid.extent_meters
    if x + h < -R or x - h > R or y + h < -R or y - h > R:
        return None
    rows, cols = point_to_pixel(np.array([x - h, x + h]), np.array([y + h, y - h]), grid)
    return BoundingBox(int(rows[0]), int(cols[0]), int(rows[1] - rows[0] + 1), int(cols[1] - cols[0] + 1))


def raycast(world: WorldSpec, grid: GridSpec = GridSpec(), rng=None) -> RaycastResult:
    """Simulate one sweep of ``world.beams`` beams over a full turn.

    Noise is drawn from ``rng`` when given, else from a generator seeded with ``world.seed``.
    """
    s = world.sensor
    if not world.contains([s.x, s.y])[0]:
        raise ValueError(f"sensor at ({s.x}, {s.y}) is outside the room")
    inc = 2 * math.pi / world.beams
    rel_angles = -math.pi + inc * np.arange(world.beams)
    theta = rel_angles + s.heading
    dirs = np.column_stack([np.cos(theta), np.sin(theta)])
    dist = ray_segment_distances((s.x, s.y), dirs, world.wall_segments())
    wall = dist.min(axis=1)
    if world.pallet is not None:
        pal = ray_segment_distances((s.x, s.y), dirs, world.pallet.face_segments()).min(axis=1)
        on_pallet = pal < wall
        ranges = np.minimum(wall, pal)
    else:
        on_pallet = np.zeros(world.beams, dtype=bool)
        ranges = wall
    if world.noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(world.seed)
        ranges = ranges + rng.normal(0.0, world.noise_sigma, size=ranges.shape)
    ranges = np.clip(ranges, 0.0, world.diagonal)
    has_pallet = bool(on_pallet.any())
    box = pallet_box(world, grid) if has_pallet else None
    label = ScanLabel(has_pallet, (box,) if box is not None else ())
    scan = Scan(float(rel_angles[0]), inc, tuple(ranges.tolist()))
    return RaycastResult(scan, label, on_pallet)


@dataclass(frozen=True)
class Sampling:
    """How ``generate_dataset`` draws poses.

    Sensor headings follow the room axes (AGVs drive along aisles) with a
    uniform jitter of ``heading_jitter`` radians; ``None`` draws any heading.
    Pallets are placed ``pallet_distance`` meters from the sensor with their
    face turned towards it, give or take ``facing_jitter`` radians.
    """

    heading_jitter: float | None = math.radians(10)
    pallet_distance: tuple[float, float] = (1.0, 3.0)
    facing_jitter: float = math.radians(30)
    sensor_margin: float = 0.5
    pallet_margin: float = 0.2


def random_sensor(world: WorldSpec, rng: np.random.Generator, sampling: Sampling = Sampling()) -> Pose:
    m = sampling.sensor_margin
    x = float(rng.uniform(-world.room_half_x + m, world.room_half_x - m))
    y = float(rng.uniform(-world.room_half_y + m, world.room_half_y - m))
    if sampling.heading_jitter is None:
        heading = rng.uniform(0.0, 2 * math.pi)
    else:
        jitter = sampling.heading_jitter
        heading = rng.integers(4) * math.pi / 2 + rng.uniform(-jitter, jitter)
    return Pose(x, y, float(heading))


def sample_pallet_world(
    base: WorldSpec,
    rng: np.random.Generator,
    grid: GridSpec = GridSpec(),
    sampling: Sampling = Sampling(),
    max_tries: int = 1000,
) -> tuple[WorldSpec, RaycastResult]:
    """Draw sensor and pallet poses until the pallet is visible and its box fits the raster."""
    template = base.pallet or Pallet((0.0, 0.0))
    for _ in range(max_tries):
        sensor = random_sensor(base, rng, sampling)
        d = rng.uniform(*sampling.pallet_distance)
        bearing = rng.uniform(0.0, 2 * math.pi)
        face = np.array([sensor.x, sensor.y]) + d * np.array([math.cos(bearing), math.sin(bearing)])
        jitter = sampling.facing_jitter
        orientation = bearing + math.pi + rng.uniform(-jitter, jitter)
        normal = np.array([math.cos(orientation), math.sin(orientation)])
        center = face - 0.5 * template.depth * normal
        pallet = replace(template, center=(float(center[0]), float(center[1])), orientation=float(orientation))
        if not base.contains(pallet.footprint(), margin=sampling.pallet_margin).all():
            continue
        world = replace(base, pallet=pallet, sensor=sensor)
        result = raycast(world, grid, rng)
        if result.label.has_pallet and result.label.boxes and result.label.boxes[0].inside(grid.side_pixels):
            return world, result
    raise RuntimeError("could not place a visible pallet; check the room and distance range")


def generate_dataset(
    n_pallet: int,
    n_empty: int,
    base_world: WorldSpec = WorldSpec(),
    seed: int = 0,
    grid: GridSpec = GridSpec(),
    sampling: Sampling = Sampling(),
) -> list[Frame]:
    """Labeled frames with exactly ``n_pallet`` positives and ``n_empty`` negatives, shuffled.

    Each example draws from its own child stream of ``seed``.
    """
    if n_pallet < 0 or n_empty < 0:
        raise ValueError("counts must be non-negative")
    root = np.random.SeedSequence(seed)
    streams = root.spawn(n_pallet + n_empty + 1)
    frames = []
    for i in range(n_pallet + n_empty):
        rng = np.random.default_rng(streams[i])
        if i < n_pallet:
            _, result = sample_pallet_world(base_world, rng, grid, sampling)
        else:
            world = replace(base_world, pallet=None, sensor=random_sensor(base_world, rng, sampling))
            result = raycast(world, grid, rng)
        frames.append((result.scan, result.label))
    order = np.random.default_rng(streams[-1]).permutation(len(frames))
    return [
        Frame(f"scan_{k:05d}", replace(frames[j][0], timestamp=k), frames[j][1])
        for k, j in enumerate(order)
    ]


def generate_sequence(
    world: WorldSpec, trajectory, grid: GridSpec = GridSpec()
) -> list[Frame]:
    """One frame per sensor pose with the world (and pallet) held fixed."""
    frames = []
    seeds = np.random.SeedSequence(world.seed).spawn(len(trajectory))
    for k, pose in enumerate(trajectory):
        if not world.contains([pose.x, pose.y])[0]:
            raise ValueError(f"pose {k} at ({pose.x}, {pose.y}) is outside the room")
        result = raycast(replace(world, sensor=pose), grid, np.random.default_rng(seeds[k]))
        frames.append(Frame(f"frame_{k:05d}", replace(result.scan, timestamp=k), result.label))
    return frames


def linear_trajectory(start: Pose, end: Pose, n: int) -> list[Pose]:
    if n <= 0:
        return []
    if n == 1:
        return [start]
    ts = np.linspace(0.0, 1.0, n)
    return [
        Pose(
            float(start.x + t * (end.x - start.x)),
            float(start.y + t * (end.y - start.y)),
            float(start.heading + t * (end.heading - start.heading)),
        )
        for t in ts
    ]
