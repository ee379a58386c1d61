"""Data preparation shared by both parties, and the in-process training loops.

Guest, host, and local reference all derive the same cohort, the same
patient-level split, and the same batch order from the session config, so
their computations line up step for step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from splitvfl.alignment import AlignedCohort, intersect_plain
from splitvfl.config import SessionConfig
from splitvfl.data import (
    ImageDataset,
    SplitSpec,
    TabularDataset,
    apply_minmax,
    batch_iter,
    fit_minmax,
    patient_key,
    patients_in_order,
    sequential_batches,
    split_by_patient,
)
from splitvfl.errors import DataError
from splitvfl.eval import ConfusionMatrix, MetricsRecord, confusion
from splitvfl.models import LocalReferenceModel, TabularOnlyModel, predict_from_logits

log = logging.getLogger(__name__)

StepHook = Callable[[int, int], None]


@dataclass
class Splits:
    train: list[str]
    val: list[str]
    test: list[str]


@dataclass
class TrainResult:
    metrics: list[MetricsRecord] = field(default_factory=list)
    val_confusion: ConfusionMatrix | None = None
    test_confusion: ConfusionMatrix | None = None


def make_splits(cohort: AlignedCohort, cfg: SessionConfig) -> Splits:
    key = patient_key(cfg.patient_separator)
    spec = SplitSpec(patients_in_order(cohort.ids, key), cfg.split.train, cfg.split.val, cfg.split.test)
    return Splits(*split_by_patient(cohort.ids, spec, key))


def prepare_tabular(tab: TabularDataset, splits: Splits) -> tuple[TabularDataset, TabularDataset, TabularDataset]:
    """Select split rows and min-max scale them with statistics from the training rows."""
    if tab.labels is None:
        raise DataError("the guest's tabular data must carry labels")
    parts = [tab.select(ids) for ids in (splits.train, splits.val, splits.test)]
    if len(parts[0]) == 0:
        return tuple(parts)
    stats = fit_minmax(parts[0])
    return tuple(apply_minmax(stats, p) for p in parts)


def prepare_images(images: ImageDataset, splits: Splits) -> tuple[ImageDataset, ImageDataset, ImageDataset]:
    return tuple(images.select(ids) for ids in (splits.train, splits.val, splits.test))


class Evaluator:
    """Accumulates batch losses and predictions over one pass."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.loss_sum = 0.0
        self.count = 0
        self.labels: list[np.ndarray] = []
        self.preds: list[np.ndarray] = []

    def add(self, loss: float, logits: np.ndarray, labels: np.ndarray) -> None:
        self.loss_sum += loss * len(labels)
        self.count += len(labels)
        self.labels.append(np.asarray(labels))
        self.preds.append(predict_from_logits(logits))

    @property
    def loss(self) -> float:
        return self.loss_sum / self.count if self.count else float("nan")

    def confusion(self) -> ConfusionMatrix:
        labels = np.concatenate(self.labels) if self.labels else np.zeros(0, dtype=np.int64)
        preds = np.concatenate(self.preds) if self.preds else np.zeros(0, dtype=np.int64)
        return confusion(labels, preds, self.num_classes)


def train_local(model: LocalReferenceModel, cfg: SessionConfig,
                tab: tuple[TabularDataset, TabularDataset, TabularDataset],
                img: tuple[ImageDataset, ImageDataset, ImageDataset],
                on_step: StepHook | None = None) -> TrainResult:
    """Train the monolithic reference model on already-prepared splits."""
    train_t, val_t, test_t = tab
    train_i, val_i, test_i = img
    result = TrainResult()
    n = len(train_t)
    if n == 0:
        return result
    for epoch in range(cfg.epochs):
        total = 0.0
        for b, idx in enumerate(batch_iter(n, cfg.batch_size, epoch, cfg.shuffle_seed)):
            loss = model.train_step(train_i.images[idx], train_t.features[idx], train_t.labels[idx], cfg.optimizer)
            total += loss * len(idx)
            if on_step is not None:
                on_step(epoch, b)
        ev = _evaluate_local(model, val_t, val_i, cfg)
        result.metrics.append(MetricsRecord(epoch, total / n, ev.loss, ev.confusion().accuracy))
        result.val_confusion = ev.confusion()
        log.info("epoch %d train_loss %.6f val_loss %.6f val_acc %.4f", epoch, *_tail(result.metrics[-1]))
    if cfg.evaluate_test and cfg.epochs and len(test_t):
        result.test_confusion = _evaluate_local(model, test_t, test_i, cfg).confusion()
    return result


def _tail(r: MetricsRecord):
    return r.train_loss, r.val_loss, r.val_accuracy


def _evaluate_local(model, tab: TabularDataset, img: ImageDataset, cfg: SessionConfig) -> Evaluator:
    ev = Evaluator(cfg.model.num_classes)
    for idx in sequential_batches(len(tab), cfg.batch_size):
        loss, logits = model.evaluate(img.images[idx], tab.features[idx], tab.labels[idx])
        ev.add(loss, logits, tab.labels[idx])
    return ev


def train_tabular_only(model: TabularOnlyModel, cfg: SessionConfig,
                       tab: tuple[TabularDataset, TabularDataset, TabularDataset]) -> TrainResult:
    """Ablation baseline: same schedule, no image party."""
    train_t, val_t, _ = tab
    result = TrainResult()
    n = len(train_t)
    for epoch in range(cfg.epochs if n else 0):
        total = 0.0
        for idx in batch_iter(n, cfg.batch_size, epoch, cfg.shuffle_seed):
            total += model.train_step(train_t.features[idx], train_t.labels[idx], cfg.optimizer) * len(idx)
        ev = Evaluator(cfg.model.num_classes)
        for idx in sequential_batches(len(val_t), cfg.batch_size):
            loss, logits = model.evaluate(val_t.features[idx], val_t.labels[idx])
            ev.add(loss, logits, val_t.labels[idx])
        result.metrics.append(MetricsRecord(epoch, total / n, ev.loss, ev.confusion().accuracy))
        result.val_confusion = ev.confusion()
    return result


def local_cohort(tab: TabularDataset, images: ImageDataset, cfg: SessionConfig) -> AlignedCohort:
    return intersect_plain(tab.ids, images.ids, cfg.order_seed)
