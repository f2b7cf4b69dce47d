"""Glue between frames on disk and the models: batching, detector recipes, scored sequences."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .detect import Detector, DetectorConfig, iou, train_detector
from .raster import GridSpec, downscale, scan_to_image
from .scan_core import Frame, split_dataset
from .synth import Pose, Sampling, WorldSpec, generate_sequence, random_sensor, sample_pallet_world
from .train_eval import HyperParams, _child_seeds

CLASSIFIER_SIDE = 32


def rasters(frames: list[Frame], grid: GridSpec = GridSpec()) -> np.ndarray:
    if not frames:
        return np.zeros((0, grid.side_pixels, grid.side_pixels))
    return np.stack([scan_to_image(f.scan, grid) for f in frames])


def classifier_inputs(frames: list[Frame], grid: GridSpec = GridSpec(), side: int = CLASSIFIER_SIDE):
    """``(images, labels)``: rasters block-max downscaled to ``side``, labels 1 for pallet frames."""
    if any(f.label is None for f in frames):
        raise ValueError("every frame needs a label")
    images = downscale(rasters(frames, grid), side) if frames else np.zeros((0, side, side))
    labels = np.array([int(f.label.has_pallet) for f in frames], dtype=np.int64)
    return images, labels


@dataclass(frozen=True)
class DetectorSplit:
    """Pallet frames split 70/30 for the detector; empty frames only ever train it."""

    train: list[Frame]
    test: list[Frame]
    background: list[Frame]


def detector_split(frames: list[Frame], seed: int = 0, train_fraction: float = 0.7,
                   max_background: int = 150) -> DetectorSplit:
    boxed = [f for f in frames if f.label is not None and f.label.has_pallet and f.label.boxes]
    empty = [f for f in frames if f.label is not None and not f.label.has_pallet]
    split = split_dataset(len(boxed), train_fraction, seed)
    return DetectorSplit(
        [boxed[i] for i in split.train_indices],
        [boxed[i] for i in split.test_indices],
        empty[:max_background],
    )


def rpn_hyperparams(seed: int = 0) -> HyperParams:
    return HyperParams(learning_rate=0.1, max_epochs=10, batch_size=10, seed=seed)


def roi_hyperparams(seed: int = 0) -> HyperParams:
    return HyperParams(learning_rate=0.1, max_epochs=10, batch_size=50, seed=seed)


def fit_detector(train: list[Frame], background: list[Frame] = (), grid: GridSpec = GridSpec(),
                 config: DetectorConfig = DetectorConfig(), seed: int = 0) -> Detector:
    """Train the proposal head and ROI classifier; background frames supply extra negatives."""
    frames = list(train) + list(background)
    images = rasters(frames, grid)
    boxes = [f.label.boxes if f.label.has_pallet else () for f in frames]
    rpn_seed, roi_seed = _child_seeds(seed, 2)
    return train_detector(images, boxes, config, rpn_hyperparams(rpn_seed), roi_hyperparams(roi_seed))


def hit_rate(detector: Detector, frames: list[Frame], grid: GridSpec = GridSpec(),
             threshold: float = 0.5) -> float:
    """Share of frames where some detection overlaps a ground-truth box by IoU >= threshold."""
    if not frames:
        return float("nan")
    hits = 0
    for f in frames:
        dets = detector(scan_to_image(f.scan, grid))
        hits += any(iou(d.box, b) >= threshold for d in dets for b in f.label.boxes)
    return hits / len(frames)


def static_pallet_sequence(n: int = 10, seed: int = 0, base: WorldSpec = WorldSpec(),
                           grid: GridSpec = GridSpec(), sampling: Sampling = Sampling()) -> list[Frame]:
    """``n`` frames of one parked sensor facing one pallet; only the range noise changes."""
    rng = np.random.default_rng(seed)
    world, _ = sample_pallet_world(base, rng, grid, sampling)
    return generate_sequence(replace(world, seed=seed), [world.sensor] * n, grid)


def background_sequence(n: int = 10, seed: int = 0, base: WorldSpec = WorldSpec(),
                        grid: GridSpec = GridSpec(), drift: float = 0.05) -> list[Frame]:
    """An empty room seen from a sensor creeping forward ``drift`` meters per frame."""
    rng = np.random.default_rng(seed)
    start = random_sensor(base, rng)
    step = drift * np.array([np.cos(start.heading), np.sin(start.heading)])
    poses = []
    for k in range(n):
        x, y = np.clip([start.x + k * step[0], start.y + k * step[1]],
                       [-base.room_half_x + 0.1, -base.room_half_y + 0.1],
                       [base.room_half_x - 0.1, base.room_half_y - 0.1])
        poses.append(Pose(float(x), float(y), start.heading))
    return generate_sequence(replace(base, pallet=None, seed=seed), poses, grid)
