"""Mini-batch SGD training, k-fold cross-validation, hyperparameter sweeps and metrics."""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .augment import augment_batch
from .nn import ModelConfig, Network, NumericalError, init_model, loss_and_backward, sgd_step


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 0.1
    max_epochs: int = 10
    folds: int = 5
    batch_size: int = 50
    filters: int = 15
    conv_layers: int = 1
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    def model_config(self, input_side: int = 32) -> ModelConfig:
        return ModelConfig(conv_layers=self.conv_layers, filters=self.filters, input_side=input_side)


@dataclass(frozen=True)
class Metrics:
    """Binary confusion counts with the pallet class as positive."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "Metrics":
        t = np.asarray(y_true).astype(bool)
        p = np.asarray(y_pred).astype(bool)
        return cls(
            tp=int(np.sum(t & p)),
            fp=int(np.sum(~t & p)),
            tn=int(np.sum(~t & ~p)),
            fn=int(np.sum(t & ~p)),
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else float("nan")

    @property
    def precision(self) -> float | None:
        """None when nothing was predicted positive."""
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else None

    @property
    def recall(self) -> float | None:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else None

    @property
    def false_negative_rate(self) -> float | None:
        return self.fn / (self.fn + self.tp) if self.fn + self.tp else None

    def as_dict(self) -> dict:
        return {**asdict(self), "accuracy": self.accuracy, "precision": self.precision, "recall": self.recall}


@dataclass(frozen=True)
class Summary:
    """Arithmetic means of per-fold ratios. Undefined ratios are left out of their mean."""

    accuracy: float
    precision: float | None
    recall: float | None

    @classmethod
    def mean_of(cls, metrics: list[Metrics]) -> "Summary":
        def mean(values):
            values = [v for v in values if v is not None]
            return float(np.mean(values)) if values else None

        return cls(
            mean([m.accuracy for m in metrics]),
            mean([m.precision for m in metrics]),
            mean([m.recall for m in metrics]),
        )


@dataclass
class CVResult:
    mean: Summary
    folds: list[Metrics]


def kfold_split(n: int, k: int, seed: int = 0) -> list[np.ndarray]:
    """Shuffle ``range(n)`` and cut it into ``k`` folds whose sizes differ by at most one."""
    if k < 2 or k > n:
        raise ValueError(f"need 2 <= k <= n, got k={k}, n={n}")
    order = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(order, k)]


def _child_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def train_classifier(images, labels, hp: HyperParams = HyperParams(), on_step=None):
    """Train a fresh classifier; returns ``(model, per-epoch mean loss)``.

    ``images`` is ``(N, side, side)``; labels are 0 (no pallet) / 1 (pallet).
    The eight dihedral variants of every image are trained on when ``hp.augment``.
    ``on_step(epoch, batch_loss)`` is called after every parameter update.
    """
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("empty training set")
    if len(np.unique(y)) < 2:
        raise ValueError("training set must contain both classes")
    if hp.augment:
        x, y = augment_batch(x, y)
    init_seed, shuffle_seed = _child_seeds(hp.seed, 2)
    net = init_model(hp.model_config(x.shape[-1]), init_seed)
    rng = np.random.default_rng(shuffle_seed)
    params = net.parameters()
    losses = []
    for epoch in range(hp.max_epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), hp.batch_size):
            idx = order[start:start + hp.batch_size]
            try:
                loss, _ = loss_and_backward(net, x[idx], y[idx])
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch + 1}: {exc}") from None
            sgd_step(params, net.gradients(), hp.learning_rate)
            total += loss * len(idx)
            if on_step is not None:
                on_step(epoch, loss)
        epoch_loss = total / len(x)
        if not math.isfinite(epoch_loss):
            raise NumericalError(f"epoch {epoch + 1}: loss is not finite")
        losses.append(epoch_loss)
    return net, losses


def predict(model: Network, images) -> np.ndarray:
    """Argmax class per image (equivalently pallet probability >= 0.5 for two classes)."""
    return model.predict_proba(images).argmax(axis=1)


def evaluate(model: Network, images, labels) -> Metrics:
    return Metrics.from_predictions(np.asarray(labels) == 1, predict(model, images) == 1)


def _run_fold(args) -> Metrics:
    images, labels, train_idx, test_idx, hp = args
    model, _ = train_classifier(images[train_idx], labels[train_idx], hp)
    return evaluate(model, images[test_idx], labels[test_idx])


def _pmap(fn, tasks: list, jobs: int) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def fold_tasks(images, labels, hp: HyperParams):
    """Per-fold ``(images, labels, train_idx, test_idx, hp)`` with a derived seed per fold."""
    n = len(labels)
    folds = kfold_split(n, hp.folds, hp.seed)
    seeds = _child_seeds(hp.seed, hp.folds)
    tasks = []
    for i, test_idx in enumerate(folds):
        train_idx = np.concatenate([f for j, f in enumerate(folds) if j != i])
        tasks.append((images, labels, np.sort(train_idx), test_idx, replace(hp, seed=seeds[i])))
    return tasks


def cross_validate(images, labels, hp: HyperParams = HyperParams(), jobs: int = 1) -> CVResult:
    """k-fold CV: train on k-1 folds (augmented), score the held-out fold."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    metrics = _pmap(_run_fold, fold_tasks(images, labels, hp), jobs)
    return CVResult(Summary.mean_of(metrics), metrics)


AXES = {
    "learning_rate": ("learning_rate", "Learning Rate", float),
    "epochs": ("max_epochs", "Max Epochs", int),
    "folds": ("folds", "Folds", int),
    "filters": ("filters", "Filters", int),
    "layers": ("conv_layers", "Layers", int),
}


def normalize_axis(axis: str) -> str:
    key = axis.replace("-", "_").lower()
    if key not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(AXES)}")
    return key


@dataclass
class SweepRow:
    value: float
    mean: Summary
    folds: list[Metrics] = field(default_factory=list)


@dataclass
class SweepReport:
    axis: str
    rows: list[SweepRow]

    @property
    def best(self) -> SweepRow:
        """Highest accuracy, then recall, then the cheaper setting (smaller value)."""

        def key(row):
            cost = 0.0 if self.axis == "learning_rate" else row.value
            return (-row.mean.accuracy, -(row.mean.recall or 0.0), cost, row.value)

        return min(self.rows, key=key)

    def to_tsv(self) -> str:
        title = AXES[self.axis][1]
        lines = [f"{title}\tAccuracy\tPrecision\tRecall"]
        for row in self.rows:
            lines.append("\t".join([_fmt_value(row.value), *(_fmt(v) for v in (
                row.mean.accuracy, row.mean.precision, row.mean.recall))]))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "rows": [
                {"value": r.value, "mean": asdict(r.mean), "folds": [m.as_dict() for m in r.folds]}
                for r in self.rows
            ],
            "best": self.best.value,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _fmt(v) -> str:
    return "NA" if v is None else f"{v:.3f}"


def _fmt_value(v) -> str:
    return f"{v:g}"


def sweep(images, labels, base_hp: HyperParams, axis: str, values, jobs: int = 1) -> SweepReport:
    """Cross-validate once per value along ``axis``; rows follow the order of ``values``.

    Every row uses ``base_hp.seed`` so that a row's result does not depend on
    which other values are in the sweep or in what order.
    """
    axis = normalize_axis(axis)
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    name, _, cast = AXES[axis]
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    configs = [replace(base_hp, **{name: cast(v)}) for v in values]
    tasks, spans = [], []
    for hp in configs:
        fold_list = fold_tasks(images, labels, hp)
        spans.append((len(tasks), len(tasks) + len(fold_list)))
        tasks += fold_list
    metrics = _pmap(_run_fold, tasks, jobs)
    rows = [
        SweepRow(cast(v), Summary.mean_of(metrics[a:b]), metrics[a:b])
        for v, (a, b) in zip(values, spans)
    ]
    return SweepReport(axis, rows)


def relative_reduction(before: float | None, after: float | None) -> float | None:
    if before is None or after is None or before == 0:
        return None
    return (before - after) / before


def error_reduction(baseline: Metrics, improved: Metrics) -> tuple[float | None, float | None]:
    """Relative drop in error rate (1 - accuracy) and in false negative rate."""
    return (
        relative_reduction(1.0 - baseline.accuracy, 1.0 - improved.accuracy),
        relative_reduction(baseline.false_negative_rate, improved.false_negative_rate),
    )
