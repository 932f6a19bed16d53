"""Training loop: seeded split, per-epoch reshuffle, SGD at minibatch size one,
per-iteration log rows and periodic checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dced_net, nn_core as nn, seg_metrics
from .label_codec import DatasetEntry

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "iteration", "loss", "pixel_accuracy", "wall_time_s"]


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 1e-3
    batch_size: int = 1
    train_count: int | None = None
    test_count: int = 0
    seed: int = 0
    class_weights: list[float] | str | None = None  # list, "median_frequency" or None
    ignore_background: bool = False
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if isinstance(self.class_weights, str) and self.class_weights != "median_frequency":
            raise ValueError(f"unknown class weighting {self.class_weights!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class TrainLogRow:
    epoch: int
    iteration: int
    loss: float
    pixel_accuracy: float
    wall_time: float


def split_dataset(entries: Sequence, config: TrainConfig) -> tuple[list, list]:
    n = len(entries)
    n_train = n - config.test_count if config.train_count is None else config.train_count
    if n_train < 0 or config.test_count < 0 or n_train + config.test_count > n:
        raise ValueError(f"train {n_train} + test {config.test_count} exceeds dataset size {n}")
    order = np.random.default_rng([config.seed, 1]).permutation(n)
    train = [entries[i] for i in order[:n_train]]
    test = [entries[i] for i in order[n_train:n_train + config.test_count]]
    return train, test


def median_frequency_weights(labels: Sequence[np.ndarray], num_classes: int) -> list[float]:
    """freq_c = pixels of c / pixels of images containing c; w_c = median(freq) / freq_c."""
    counts = np.zeros(num_classes)
    present = np.zeros(num_classes)
    for lab in labels:
        hist = np.bincount(lab.ravel(), minlength=num_classes)[:num_classes]
        counts += hist
        present += np.where(hist > 0, lab.size, 0)
    freq = np.divide(counts, present, out=np.zeros(num_classes), where=present > 0)
    med = np.median(freq[freq > 0])
    return [float(med / f) if f > 0 else 0.0 for f in freq]


def _resolve_weights(config: TrainConfig, entries, num_classes):
    if config.class_weights is None:
        return None
    if config.class_weights == "median_frequency":
        return median_frequency_weights([e.label for e in entries], num_classes)
    if len(config.class_weights) != num_classes:
        raise ValueError(f"expected {num_classes} class weights, got {len(config.class_weights)}")
    return list(config.class_weights)


def train(
    model: dced_net.DcedModel,
    entries: Sequence[DatasetEntry],
    config: TrainConfig,
    checkpoint_dir: str | Path | None = None,
) -> tuple[dced_net.DcedModel, list[TrainLogRow]]:
    if not entries:
        raise ValueError("empty training set")
    k = model.config.num_classes
    width, height = model.config.input_size
    for e in entries:
        if e.label.shape != e.image.shape[:2]:
            raise nn.ShapeError(f"entry {e.source_id}: image and label sizes differ")
        if e.image.shape[:2] != (height, width):
            raise nn.ShapeError(
                f"entry {e.source_id}: size {e.image.shape[1]}x{e.image.shape[0]} != model input {width}x{height}"
            )
    model.check_input(np.zeros((1, model.config.in_channels, height, width)))
    weights = _resolve_weights(config, entries, k)
    ignore = 0 if config.ignore_background else None
    shuffler = np.random.default_rng([config.seed, 2])
    model.zero_grad()
    rows: list[TrainLogRow] = []
    start = time.perf_counter()
    iteration = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffler.permutation(len(entries))
        for b in range(0, len(order), config.batch_size):
            batch = [entries[i] for i in order[b:b + config.batch_size]]
            x = dced_net.image_to_input(np.stack([e.image for e in batch]))
            y = np.stack([e.label for e in batch])
            logits = model.forward(x)
            loss, grad = nn.softmax_cross_entropy(logits, y, class_weights=weights, ignore_id=ignore)
            iteration += 1
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch}, iteration {iteration} "
                    f"(entries {[e.source_id for e in batch]})"
                )
            counted = np.ones(y.shape, bool) if ignore is None else y != ignore
            acc = float((dced_net.argmax_labels(logits) == y)[counted].mean()) if counted.any() else 1.0
            model.backward(grad)
            nn.sgd_step(model.parameters(), config.learning_rate)
            rows.append(TrainLogRow(epoch, iteration, loss, acc, time.perf_counter() - start))
        if checkpoint_dir is not None and (epoch % config.checkpoint_every == 0 or epoch == config.epochs):
            path = Path(checkpoint_dir) / f"ckpt_epoch{epoch}.safetensors"
            model.save(path)
            log.info("epoch %d: wrote %s", epoch, path)
    return model, rows


def write_log(rows: Sequence[TrainLogRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r.epoch, r.iteration, repr(r.loss), repr(r.pixel_accuracy), f"{r.wall_time:.6f}"])


def evaluate_on(
    model: dced_net.DcedModel,
    entries: Sequence[DatasetEntry],
    evaluated: Sequence[int] = seg_metrics.CELL_CLASSES,
    tolerance: float | None = None,
) -> seg_metrics.EvalReport:
    if not entries:
        raise ValueError("cannot evaluate on an empty test set")
    acc = seg_metrics.Accumulator(model.config.num_classes, evaluated, tolerance=tolerance)
    for e in entries:
        pred = dced_net.predict(model, dced_net.image_to_input(e.image))[0]
        acc.add(pred, e.label)
    return acc.report()
