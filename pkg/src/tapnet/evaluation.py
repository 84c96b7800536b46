"""Accuracy, confusion matrices, fold aggregation and embedding export."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import AggregationError, ConfigError, EvaluationError
from .signals import NUM_CLASSES, UNLABELED, Dataset, DefectClass


@dataclass
class MetricsBundle:
    """Evaluation summary. Accuracies are percentages; confusion rows are true classes."""

    confusion: np.ndarray
    fold_accuracies: list[float] = field(default_factory=list)
    inference_ms: float | None = None

    def __post_init__(self):
        self.confusion = np.asarray(self.confusion, dtype=np.int64)
        if self.confusion.ndim != 2 or self.confusion.shape[0] != self.confusion.shape[1]:
            raise ValueError("confusion matrix must be square")
        if not self.fold_accuracies:
            self.fold_accuracies = [self.accuracy]

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return 100.0 * float(np.trace(self.confusion)) / self.total if self.total else float("nan")

    @property
    def per_class_accuracy(self) -> list[float]:
        rows = self.confusion.sum(axis=1)
        diag = np.diag(self.confusion)
        return [100.0 * d / r if r else float("nan") for d, r in zip(diag, rows)]

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def std(self) -> float:
        # population standard deviation across folds
        return float(np.std(self.fold_accuracies))

    def normalized_confusion(self) -> np.ndarray:
        rows = self.confusion.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, 100.0 * self.confusion / np.maximum(rows, 1), 0.0)

    def to_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and np.isnan(v) else v

        return {
            "accuracy": clean(self.accuracy),
            "per_class_accuracy": {c.name: clean(a) for c, a in zip(DefectClass, self.per_class_accuracy)},
            "confusion": self.confusion.tolist(),
            "fold_accuracies": [clean(a) for a in self.fold_accuracies],
            "mean": clean(self.mean),
            "std": clean(self.std),
            "total": self.total,
            "inference_ms_per_signal": self.inference_ms,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsBundle":
        return cls(np.array(d["confusion"]), list(d.get("fold_accuracies") or []), d.get("inference_ms_per_signal"))

    def confusion_csv(self, normalized: bool = False) -> str:
        names = [c.name for c in DefectClass][: len(self.confusion)]
        m = self.normalized_confusion() if normalized else self.confusion
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["true\\pred", *names])
        for name, row in zip(names, m):
            w.writerow([name, *[f"{v:.4f}" if normalized else int(v) for v in row]])
        return out.getvalue()


def confusion_matrix(true: np.ndarray, pred: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    return np.bincount(true * num_classes + pred, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


class _eval_mode:
    def __init__(self, model):
        self.model = model

    def __enter__(self):
        self.was_training = self.model.training
        self.model.eval()
        return self.model

    def __exit__(self, *exc):
        self.model.train(self.was_training)


def predict(model, samples: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class per signal, using running batch-norm statistics."""
    out = []
    with _eval_mode(model), torch.no_grad():
        for i in range(0, len(samples), batch_size):
            x = torch.from_numpy(np.array(samples[i : i + batch_size], dtype=np.float32)).unsqueeze(1)
            out.append(model(x)[:, :, 0].argmax(dim=1).numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model, ds: Dataset, batch_size: int = 256, use_ground_truth: bool = False) -> MetricsBundle:
    """Accuracy and confusion matrix of ``model`` on ``ds``.

    With ``use_ground_truth`` masked labels are evaluated too (transfer
    targets); otherwise every signal must carry a visible label.
    """
    labels = ds.ground_truth if use_ground_truth else ds.labels
    if np.any(labels == UNLABELED):
        raise EvaluationError(f"{int(np.sum(labels == UNLABELED))} unlabeled signal(s) cannot be evaluated")
    num_classes = model.spec.num_classes if hasattr(model, "spec") else NUM_CLASSES
    t0 = time.perf_counter()
    pred = predict(model, ds.samples, batch_size)
    elapsed = time.perf_counter() - t0
    ms = 1000.0 * elapsed / len(ds) if len(ds) else None
    return MetricsBundle(confusion_matrix(labels, pred, num_classes), inference_ms=ms)


def aggregate_folds(bundles: Sequence[MetricsBundle]) -> MetricsBundle:
    """Sum confusion matrices; keep per-fold accuracies for mean and std."""
    if not bundles:
        raise AggregationError("need at least one fold")
    shapes = {b.confusion.shape for b in bundles}
    if len(shapes) != 1:
        raise AggregationError(f"fold confusion matrices disagree in class count: {sorted(shapes)}")
    confusion = sum(b.confusion for b in bundles)
    folds = [a for b in bundles for a in b.fold_accuracies]
    times = [b.inference_ms for b in bundles if b.inference_ms is not None]
    return MetricsBundle(confusion, folds, float(np.mean(times)) if times else None)


@dataclass
class Embeddings:
    features: np.ndarray
    labels: np.ndarray
    domains: list[str]
    layer: str

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["domain", "label", *[f"f{i}" for i in range(self.features.shape[1])]])
        for d, y, row in zip(self.domains, self.labels, self.features):
            w.writerow([d, "" if y == UNLABELED else DefectClass(int(y)).name, *[repr(float(v)) for v in row]])
        return out.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def export_embeddings(model, ds: Dataset, layer: str = "gap", batch_size: int = 256) -> Embeddings:
    """Feature vector of every signal at ``layer`` (eval mode), with true label and domain."""
    if layer not in model.layer_names():
        raise ConfigError(f"unknown layer {layer!r}; choose from {model.layer_names()}")
    feats = []
    with _eval_mode(model), torch.no_grad():
        for i in range(0, len(ds), batch_size):
            x = torch.from_numpy(np.array(ds.samples[i : i + batch_size], dtype=np.float32)).unsqueeze(1)
            feats.append(model.forward_features(x, layer)[1].numpy())
    width = feats[0].shape[1] if feats else 0
    features = np.concatenate(feats) if feats else np.zeros((0, width), dtype=np.float32)
    domains = [ds.domains[int(i)] for i in ds.domain_ids]
    return Embeddings(features, ds.ground_truth.copy(), domains, layer)


def mean_embedding_distance(emb: Embeddings, a: str, b: str) -> float:
    """Euclidean distance between the mean feature vectors of two domains."""
    dom = np.array(emb.domains)
    return float(np.linalg.norm(emb.features[dom == a].mean(axis=0) - emb.features[dom == b].mean(axis=0)))
