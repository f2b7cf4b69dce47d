"""Frame-to-frame association of pallet detections into position tracks.

Association is greedy nearest-centroid: all track/detection pairs within the
gate are visited by increasing distance, and a pair is accepted when neither
side is taken yet. Unmatched detections open new tracks; a track that goes
unmatched more than ``max_misses`` frames in a row is retired.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .detect import Detection
from .raster import GridSpec, downscale, scan_to_image

DEFAULT_GATE = 20.0  # pixels at the 250 px raster scale
MAX_MISSES = 3


@dataclass(frozen=True)
class TrackPoint:
    frame: int
    row: float
    col: float
    prob: float


@dataclass
class Track:
    id: int
    points: list[TrackPoint] = field(default_factory=list)
    miss_count: int = 0
    retired: bool = False

    @property
    def position(self) -> tuple[float, float]:
        last = self.points[-1]
        return (last.row, last.col)

    def __len__(self):
        return len(self.points)


def _centroid(det: Detection) -> tuple[float, float]:
    return det.box.center


def match(tracks: list[Track], detections: list[Detection], gate: float) -> list[tuple[int, int]]:
    """Greedy globally-nearest pairs ``(track_index, detection_index)`` within ``gate``.

    Ties fall to the older track, then to the detection nearer the image origin,
    so the result does not depend on the order detections are listed in.
    """
    if gate <= 0:
        raise ValueError("gate must be positive")
    pairs = []
    for ti, track in enumerate(tracks):
        tr, tc = track.position
        for di, det in enumerate(detections):
            r, c = _centroid(det)
            d = math.hypot(r - tr, c - tc)
            if d <= gate:
                pairs.append((d, track.id, r, c, -det.class_prob, ti, di))
    pairs.sort()
    used_t, used_d, out = set(), set(), []
    for *_, ti, di in pairs:
        if ti in used_t or di in used_d:
            continue
        used_t.add(ti)
        used_d.add(di)
        out.append((ti, di))
    return out


def associate(tracks: list[Track], detections: list[Detection], frame: int,
              gate: float = DEFAULT_GATE, max_misses: int = MAX_MISSES) -> list[Track]:
    """One tracking step. Returns every track (retired ones included), new tracks last.

    Tracks in the input list are updated in place.
    """
    live = [t for t in tracks if not t.retired]
    pairs = match(live, detections, gate)
    matched_t = {ti for ti, _ in pairs}
    matched_d = {di for _, di in pairs}
    for ti, di in pairs:
        det = detections[di]
        r, c = _centroid(det)
        live[ti].points.append(TrackPoint(frame, r, c, det.class_prob))
        live[ti].miss_count = 0
    for ti, track in enumerate(live):
        if ti not in matched_t:
            track.miss_count += 1
            if track.miss_count > max_misses:
                track.retired = True
    next_id = max((t.id for t in tracks), default=-1) + 1
    spawned = sorted(
        (d for di, d in enumerate(detections) if di not in matched_d),
        key=lambda d: (_centroid(d), -d.class_prob),
    )
    out = list(tracks)
    for det in spawned:
        r, c = _centroid(det)
        out.append(Track(next_id, [TrackPoint(frame, r, c, det.class_prob)]))
        next_id += 1
    return out


@dataclass
class SequenceResult:
    tracks: list[Track]
    frames: int = 0
    proposal_calls: int = 0
    gated_frames: int = 0
    frame_seconds: list[float] = field(default_factory=list)


def track_sequence(frames, detector, gate: float = DEFAULT_GATE, classifier=None,
                   grid: GridSpec = GridSpec(), gate_threshold: float = 0.5,
                   max_misses: int = MAX_MISSES) -> SequenceResult:
    """Detect and associate over ordered frames (``Frame`` or ``Scan`` objects, or rasters).

    With a whole-scan ``classifier``, frames it scores below ``gate_threshold``
    skip the proposal stage entirely and count as frames without detections.
    """
    tracks: list[Track] = []
    result = SequenceResult(tracks)
    for k, frame in enumerate(frames):
        start = time.perf_counter()
        frame = getattr(frame, "scan", frame)
        raster = frame if isinstance(frame, np.ndarray) else scan_to_image(frame, grid)
        frame_index = k if isinstance(frame, np.ndarray) else getattr(frame, "timestamp", k)
        dets: list[Detection] = []
        run = True
        if classifier is not None:
            side = classifier.config.input_side
            p = classifier.predict_proba(downscale(raster, side)[None])[0, 1]
            run = p >= gate_threshold
        if run:
            result.proposal_calls += 1
            dets = detector(raster)
        else:
            result.gated_frames += 1
        tracks = associate(tracks, dets, frame_index, gate, max_misses)
        result.frames += 1
        result.frame_seconds.append(time.perf_counter() - start)
    result.tracks = tracks
    return result


def format_tracks(tracks: list[Track]) -> str:
    lines = []
    for t in tracks:
        for p in t.points:
            lines.append(f"{t.id}\t{p.frame}\t{p.row:.2f}\t{p.col:.2f}\t{p.prob:.6f}\n")
    return "".join(lines)
