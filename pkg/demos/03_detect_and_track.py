# %% [markdown]
# Two-stage detection (anchors, proposals, ROI classifier) and tracking over a short sequence.
# Expect several minutes on one core, most of it training.
import time

import numpy as np

from palletscan.raster import scan_to_image
from palletscan.synth import generate_dataset
from palletscan.track import format_tracks, track_sequence
from palletscan.train_eval import HyperParams, train_classifier
from palletscan.workflow import (
    background_sequence,
    classifier_inputs,
    detector_split,
    fit_detector,
    hit_rate,
    static_pallet_sequence,
)

# %%
frames = generate_dataset(200, 120, seed=4)
split = detector_split(frames, seed=4)
print(f"{len(split.train)} train / {len(split.test)} held-out pallet frames, {len(split.background)} empty")

t0 = time.perf_counter()
detector = fit_detector(split.train, split.background, seed=4)
print(f"detector trained in {time.perf_counter() - t0:.0f} s, {len(detector.rpn.anchors)} anchors")

# %%
frame = split.test[0]
dets = detector(scan_to_image(frame.scan))
print("ground truth", frame.label.boxes)
for d in dets:
    print("detected", d.box, f"objectness {d.objectness:.2f} pallet {d.class_prob:.2f}")
print(f"held-out hit rate (IoU >= 0.5): {hit_rate(detector, split.test):.3f}")

# %%
# the whole-scan classifier doubles as a cheap gate in front of the proposal stage
images, labels = classifier_inputs(frames)
gate, _ = train_classifier(images, labels, HyperParams(seed=4))

static = track_sequence(static_pallet_sequence(10, seed=4), detector, classifier=gate)
print(format_tracks(static.tracks), end="")
print("tracks:", len(static.tracks), "proposal calls:", static.proposal_calls)

empty = track_sequence(background_sequence(10, seed=4), detector, classifier=gate)
print("background tracks:", len(empty.tracks), "proposal calls:", empty.proposal_calls,
      "gated frames:", empty.gated_frames)
print(f"mean frame time {1000 * np.mean(static.frame_seconds):.1f} ms with proposals, "
      f"{1000 * np.mean(empty.frame_seconds):.1f} ms gated")
