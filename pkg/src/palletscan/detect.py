"""Two-stage pallet detector: anchor objectness proposals, NMS, then a CNN on each ROI.

Proposals are scored on a ``detect_side`` raster (default 128 px). Its
stride-4 anchor grid coincides with a 32x32 block-max feature image, which
feeds a small convolutional objectness head (one logit per anchor scale per
cell). Surviving proposals are cropped from the full-resolution raster,
resized to 32x32 and scored by a classifier with the same architecture as
the whole-scan classifier.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .augment import ELEMENTS, apply_dihedral, transform_box
from .nn import Conv2d, Network, NumericalError, ReLU, init_parameters, sigmoid, sgd_step
from .nn.weights import fill_params, load_classifier, pack, save_classifier, unpack_header
from .raster import crop, downscale, resize, scale_box
from .scan_core import BoundingBox
from .train_eval import HyperParams, _child_seeds, train_classifier

RPN_MAGIC = b"PSDR1"


@dataclass(frozen=True)
class DetectorConfig:
    detect_side: int = 128
    stride: int = 4
    scales: tuple[int, ...] = (12, 16, 20)
    rpn_filters: int = 8
    rpn_layers: int = 2
    top_k: int = 16
    proposal_iou: float = 0.5
    positive_iou: float = 0.5
    negative_iou: float = 0.2
    prob_threshold: float = 0.5
    final_iou: float = 0.3
    roi_side: int = 32
    recenter: bool = True

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        if self.detect_side % self.stride:
            raise ValueError("detect_side must be a multiple of stride")

    @property
    def feature_side(self) -> int:
        return self.detect_side // self.stride


@dataclass(frozen=True)
class Anchor:
    box: BoundingBox
    cell: tuple[int, int]
    scale: int


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    objectness: float = 0.0
    class_prob: float = 0.0

    def __post_init__(self):
        for v in (self.objectness, self.class_prob):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"score {v} outside [0, 1]")

    @property
    def score(self) -> float:
        """Joint two-stage confidence. The ROI classifier saturates on any crop that
        overlaps a pallet, so objectness is what separates well-placed boxes."""
        return self.objectness * self.class_prob


def generate_anchors(image_side: int, scales, stride: int = 4) -> list[Anchor]:
    """Square anchors centred on every stride cell, one per scale, clipped to the image.

    Ordered by cell row, cell column, then scale.
    """
    scales = [int(s) for s in scales]
    if any(s <= 0 or s > image_side for s in scales):
        raise ValueError("anchor scales must lie in (0, image_side]")
    cells = -(-image_side // stride)
    anchors = []
    for i in range(cells):
        for j in range(cells):
            cr, cc = i * stride + stride / 2, j * stride + stride / 2
            for s in scales:
                r0, c0 = int(np.floor(cr - s / 2)), int(np.floor(cc - s / 2))
                r1, c1 = min(image_side, r0 + s), min(image_side, c0 + s)
                r0, c0 = max(0, r0), max(0, c0)
                anchors.append(Anchor(BoundingBox(r0, c0, r1 - r0, c1 - c0), (i, j), s))
    return anchors


def _box_tuple(b) -> tuple[float, float, float, float]:
    if isinstance(b, (BoundingBox, Anchor, Detection)):
        b = b.box if not isinstance(b, BoundingBox) else b
        return (b.row0, b.col0, b.height, b.width)
    return tuple(float(v) for v in b)


def iou(a, b) -> float:
    """Intersection over union of two boxes given as ``BoundingBox`` or ``(row0, col0, h, w)``."""
    ar, ac, ah, aw = _box_tuple(a)
    br, bc, bh, bw = _box_tuple(b)
    ih = max(0.0, min(ar + ah, br + bh) - max(ar, br))
    iw = max(0.0, min(ac + aw, bc + bw) - max(ac, bc))
    inter = ih * iw
    union = ah * aw + bh * bw - inter
    return inter / union if union > 0 else 0.0


def boxes_array(boxes) -> np.ndarray:
    """``(n, 4)`` float array of ``(row0, col0, row1, col1)``."""
    out = np.array([_box_tuple(b) for b in boxes], dtype=np.float64).reshape(-1, 4)
    out[:, 2:] += out[:, :2]
    return out


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(n, 4)`` and ``(m, 4)`` corner arrays from ``boxes_array``."""
    ih = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iw = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ih * iw
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def box_sums(img: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """Sum of ``img`` inside each integer corner box, via a summed-area table."""
    sat = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
    sat[1:, 1:] = img.cumsum(0).cumsum(1)
    r0, c0, r1, c1 = corners.astype(np.int64).T
    return sat[r1, c1] - sat[r0, c1] - sat[r1, c0] + sat[r0, c0]


def nms_indices(corners: np.ndarray, scores: np.ndarray, iou_threshold: float, limit: int | None = None) -> list[int]:
    """Greedy suppression. Visits boxes by descending score (ties: lower index first)
    and drops any box overlapping an already kept one by more than ``iou_threshold``."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in (0, 1]")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for pos, idx in enumerate(order):
        if not alive[pos]:
            continue
        keep.append(int(idx))
        if limit is not None and len(keep) >= limit:
            break
        rest = order[pos + 1:]
        overlap = iou_matrix(corners[idx:idx + 1], corners[rest])[0]
        alive[pos + 1:] &= overlap <= iou_threshold
    return keep


def nms(dets: list[Detection], iou_threshold: float = 0.5, score: str = "objectness") -> list[Detection]:
    """Kept detections in descending score order."""
    if not dets:
        return []
    scores = [getattr(d, score) for d in dets]
    return [dets[i] for i in nms_indices(boxes_array(dets), scores, iou_threshold)]


class RegionProposalNet:
    """Per-anchor objectness: 3x3 conv stack on the block-max feature image, then 1x1 conv."""

    def __init__(self, config: DetectorConfig = DetectorConfig()):
        self.config = config
        layers, channels = [], 1
        for i in range(config.rpn_layers):
            layers += [Conv2d(channels, config.rpn_filters, 3, input_grad=i > 0), ReLU()]
            channels = config.rpn_filters
        layers.append(Conv2d(channels, len(config.scales), 1, input_grad=config.rpn_layers > 0))
        self.net = Network(layers)
        self.anchors = generate_anchors(config.detect_side, config.scales, config.stride)
        self.anchor_corners = boxes_array([a.box for a in self.anchors])

    def features(self, det_images: np.ndarray) -> np.ndarray:
        x = downscale(det_images, self.config.feature_side)
        return x.reshape(-1, 1, self.config.feature_side, self.config.feature_side)

    def logits(self, det_images: np.ndarray) -> np.ndarray:
        """``(N, anchors)`` logits in anchor order."""
        out = self.net.forward(self.features(det_images))  # N, S, F, F
        return out.transpose(0, 2, 3, 1).reshape(len(out), -1)

    def backward(self, grad_logits: np.ndarray) -> None:
        fs, s = self.config.feature_side, len(self.config.scales)
        grad = grad_logits.reshape(-1, fs, fs, s).transpose(0, 3, 1, 2)
        self.net.backward(np.ascontiguousarray(grad))

    def objectness(self, det_image: np.ndarray) -> np.ndarray:
        return sigmoid(self.logits(det_image[None])[0])


def label_anchors(anchor_corners: np.ndarray, gt_boxes, positive_iou=0.5, negative_iou=0.2) -> np.ndarray:
    """1 where max IoU with any ground truth >= positive_iou, 0 where < negative_iou, else -1."""
    labels = np.zeros(len(anchor_corners), dtype=np.int64)
    if len(gt_boxes) == 0:
        return labels
    best = iou_matrix(anchor_corners, boxes_array(gt_boxes)).max(axis=1)
    labels[best >= positive_iou] = 1
    labels[(best >= negative_iou) & (best < positive_iou)] = -1
    return labels


def _detection_inputs(images, boxes, config: DetectorConfig, augment: bool):
    """Downscale rasters to the detection side, rescale boxes, optionally add the 8 dihedral copies."""
    side = np.shape(images)[-1]
    det = downscale(np.asarray(images, dtype=np.float64), config.detect_side)
    det_boxes = [tuple(scale_box(b, side, config.detect_side) for b in bs) for bs in boxes]
    if not augment:
        return det, det_boxes
    imgs, out_boxes = [], []
    for g in ELEMENTS:
        imgs.append(apply_dihedral(det, g))
        out_boxes += [tuple(transform_box(b, config.detect_side, g) for b in bs) for bs in det_boxes]
    return np.concatenate(imgs), out_boxes


def train_rpn(images, boxes, config: DetectorConfig = DetectorConfig(), hp: HyperParams = HyperParams()) -> RegionProposalNet:
    """Fit objectness with class-balanced binary cross-entropy and mini-batch SGD.

    ``images`` are full-resolution rasters, ``boxes`` a box sequence per image
    in the same pixel coordinates.
    """
    det, det_boxes = _detection_inputs(images, boxes, config, hp.augment)
    rpn = RegionProposalNet(config)
    targets = np.stack([
        label_anchors(rpn.anchor_corners, bs, config.positive_iou, config.negative_iou) for bs in det_boxes
    ])
    if not (targets == 1).any():
        raise ValueError("no anchor reaches the positive IoU threshold in this dataset")
    init_seed, shuffle_seed = _child_seeds(hp.seed, 2)
    init_parameters(rpn.net, init_seed)
    rng = np.random.default_rng(shuffle_seed)
    params = rpn.net.parameters()
    for epoch in range(hp.max_epochs):
        order = rng.permutation(len(det))
        for start in range(0, len(det), hp.batch_size):
            idx = order[start:start + hp.batch_size]
            z = rpn.logits(det[idx])
            t = targets[idx]
            pos, neg = t == 1, t == 0
            weight = np.zeros_like(z)
            if pos.any():
                weight[pos] = 0.5 / pos.sum()
            if neg.any():
                weight[neg] = 0.5 / neg.sum()
            grad = (sigmoid(z) - (t == 1)) * weight
            if not np.all(np.isfinite(grad)):
                raise NumericalError(f"epoch {epoch + 1}: non-finite objectness gradient")
            rpn.backward(grad)
            sgd_step(params, rpn.net.gradients(), hp.learning_rate)
    return rpn


def propose(det_image: np.ndarray, rpn: RegionProposalNet, top_k: int | None = None) -> list[Detection]:
    """Objectness-scored anchors after NMS, best ``top_k`` first. Boxes in detection-raster pixels."""
    cfg = rpn.config
    k = cfg.top_k if top_k is None else top_k
    scores = rpn.objectness(np.asarray(det_image, dtype=np.float64))
    keep = nms_indices(rpn.anchor_corners, scores, cfg.proposal_iou, limit=k)
    return [Detection(rpn.anchors[i].box, float(scores[i]), 0.0) for i in keep]


def roi_inputs(img: np.ndarray, boxes, side: int = 32) -> np.ndarray:
    if not len(boxes):
        return np.zeros((0, side, side))
    return np.stack([resize(crop(img, b), side) for b in boxes])


def classify_rois(img: np.ndarray, proposals: list[Detection], classifier: Network,
                  threshold: float = 0.5, roi_side: int = 32) -> list[Detection]:
    """Score each proposal's crop with ``classifier``; keep those with pallet probability >= threshold."""
    if not proposals:
        return []
    probs = classifier.predict_proba(roi_inputs(img, [p.box for p in proposals], roi_side))[:, 1]
    return [
        replace(p, class_prob=float(q)) for p, q in zip(proposals, probs) if q >= threshold
    ]


def recenter_box(img: np.ndarray, box: BoundingBox) -> BoundingBox:
    """Shift ``box`` so its centre sits on the centroid of the lit pixels it covers.

    Anchors lie on a coarse grid; the returns inside a detection are mostly the
    pallet face, whose midpoint is where the box belongs. Size is unchanged and
    the result is kept inside the image.
    """
    rows, cols = np.nonzero(crop(img, box))
    if not len(rows):
        return box
    # pixel i covers [i, i + 1), so its centre is at i + 0.5
    r = int(round(max(box.row0, 0) + rows.mean() + 0.5 - box.height / 2))
    c = int(round(max(box.col0, 0) + cols.mean() + 0.5 - box.width / 2))
    h, w = img.shape[-2:]
    return BoundingBox(min(max(r, 0), h - box.height), min(max(c, 0), w - box.width), box.height, box.width)


@dataclass
class Detector:
    rpn: RegionProposalNet
    roi_classifier: Network
    config: DetectorConfig = field(default_factory=DetectorConfig)
    proposal_calls: int = 0

    def propose(self, raster: np.ndarray) -> list[Detection]:
        """Proposal stage on a full-resolution raster; boxes come back in raster pixels."""
        self.proposal_calls += 1
        side = raster.shape[-1]
        det = downscale(raster, self.config.detect_side)
        props = propose(det, self.rpn, self.config.top_k)
        return [replace(p, box=scale_box(p.box, self.config.detect_side, side)) for p in props]

    def detect(self, raster: np.ndarray) -> list[Detection]:
        raster = np.asarray(raster, dtype=np.float64)
        props = self.propose(raster)
        scored = classify_rois(raster, props, self.roi_classifier, self.config.prob_threshold, self.config.roi_side)
        if self.config.recenter:
            scored = [replace(d, box=recenter_box(raster, d.box)) for d in scored]
        return nms(scored, self.config.final_iou, score="score")

    __call__ = detect

    def save(self, directory: str | os.PathLike) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_rpn(directory / "rpn.psdw", self.rpn)
        save_classifier(directory / "roi.psdw", self.roi_classifier)
        (directory / "detector.json").write_text(json.dumps(asdict(self.config), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "Detector":
        directory = Path(directory)
        config = json.loads((directory / "detector.json").read_text())
        config = DetectorConfig(**{**config, "scales": tuple(config["scales"])})
        rpn = load_rpn(directory / "rpn.psdw")
        if rpn.config.scales != config.scales or rpn.config.detect_side != config.detect_side:
            raise ValueError("rpn weights do not match detector.json")
        rpn.config = config
        return cls(rpn, load_classifier(directory / "roi.psdw"), config)


def save_rpn(path, rpn: RegionProposalNet) -> None:
    c = rpn.config
    header = [c.detect_side, c.stride, c.rpn_filters, c.rpn_layers, len(c.scales), *c.scales]
    Path(path).write_bytes(pack(RPN_MAGIC, header, rpn.net.parameters()))


def load_rpn(path) -> RegionProposalNet:
    data = Path(path).read_bytes()
    header, offset = unpack_header(data, RPN_MAGIC)
    side, stride, filters, layers, n = header[:5]
    config = DetectorConfig(detect_side=side, stride=stride, rpn_filters=filters, rpn_layers=layers,
                            scales=tuple(header[5:5 + n]))
    rpn = RegionProposalNet(config)
    fill_params(data, offset, rpn.net.parameters())
    return rpn


def roi_training_set(images, boxes, rpn: RegionProposalNet, seed: int = 0,
                     positives_per_image: int = 4, negatives_per_image: int = 8,
                     near_per_image: int = 4, near_iou: tuple[float, float] = (0.2, 0.4)):
    """Crops for the ROI classifier: proposals and anchors labeled by IoU with ground truth.

    Positives are anchors with IoU >= positive threshold; negatives mix the
    RPN's own false proposals with random occupied background anchors, plus
    near misses (IoU within ``near_iou``) so that off-centre crops score low.
    """
    cfg = rpn.config
    rng = np.random.default_rng(seed)
    crops, labels = [], []
    for img, bs in zip(images, boxes):
        side = img.shape[-1]
        det = downscale(img, cfg.detect_side)
        gt = [scale_box(b, side, cfg.detect_side) for b in bs]
        target = label_anchors(rpn.anchor_corners, gt, cfg.positive_iou, cfg.negative_iou)
        pos = np.flatnonzero(target == 1)
        chosen_pos = rng.choice(pos, size=min(positives_per_image, len(pos)), replace=False) if len(pos) else []
        proposals = nms_indices(rpn.anchor_corners, rpn.objectness(det), cfg.proposal_iou, limit=cfg.top_k)
        hard = [i for i in proposals if target[i] == 0]
        occupied = box_sums(det, rpn.anchor_corners) > 0
        easy = np.flatnonzero((target == 0) & occupied)
        n_easy = max(0, negatives_per_image - len(hard))
        chosen_neg = list(hard[:negatives_per_image])
        if n_easy and len(easy):
            chosen_neg += list(rng.choice(easy, size=min(n_easy, len(easy)), replace=False))
        if gt and near_per_image:
            best = iou_matrix(rpn.anchor_corners, boxes_array(gt)).max(axis=1)
            near = np.flatnonzero((best >= near_iou[0]) & (best < near_iou[1]))
            if len(near):
                chosen_neg += list(rng.choice(near, size=min(near_per_image, len(near)), replace=False))
        for i, lab in [(i, 1) for i in chosen_pos] + [(i, 0) for i in chosen_neg]:
            box = scale_box(rpn.anchors[i].box, cfg.detect_side, side)
            crops.append(resize(crop(img, box), cfg.roi_side))
            labels.append(lab)
    return np.array(crops).reshape(-1, cfg.roi_side, cfg.roi_side), np.array(labels, dtype=np.int64)


def train_detector(images, boxes, config: DetectorConfig = DetectorConfig(),
                   rpn_hp: HyperParams = HyperParams(), roi_hp: HyperParams = HyperParams()) -> Detector:
    """Train the proposal head, then the ROI classifier on crops it helps select."""
    images = np.asarray(images, dtype=np.float64)
    rpn = train_rpn(images, boxes, config, rpn_hp)
    crops, labels = roi_training_set(images, boxes, rpn, seed=roi_hp.seed)
    roi_model, _ = train_classifier(crops, labels, roi_hp)
    return Detector(rpn, roi_model, config)


def format_detections(frame: int, dets: list[Detection]) -> str:
    return "".join(
        f"{frame}\t{d.box.row0}\t{d.box.col0}\t{d.box.height}\t{d.box.width}\t{d.objectness:.6f}\t{d.class_prob:.6f}\n"
        for d in dets
    )


def parse_detections(text: str) -> list[tuple[int, Detection]]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        f, r, c, h, w, obj, prob = line.split("\t")
        out.append((int(f), Detection(BoundingBox(int(r), int(c), int(h), int(w)), float(obj), float(prob))))
    return out
