"""Core domain types: defect classes, signals, domains and datasets."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import LabelingError, ShapeError, StratificationError

SIGNAL_LENGTH = 2048
SAMPLE_RATE = 48_000
UNLABELED = -1
NO_FOLD = -1
NO_POSITION = -1


class DefectClass(enum.IntEnum):
    """The seven tap-sound categories, in their stable code order."""

    N = 0
    LC = 1
    BC = 2
    LTD = 3
    BTD = 4
    LBD = 5
    BBD = 6

    @property
    def short_name(self) -> str:
        return self.name

    @classmethod
    def parse(cls, name: str) -> "DefectClass":
        try:
            return cls[name.strip()]
        except KeyError:
            raise ValueError(f"unknown defect class {name!r}") from None

    def __str__(self) -> str:
        return self.name


NUM_CLASSES = len(DefectClass)

# Reference tally of labeled signals per class for one specimen material.
REFERENCE_COUNTS = {
    DefectClass.N: 15978,
    DefectClass.LC: 4434,
    DefectClass.BC: 1470,
    DefectClass.LTD: 4434,
    DefectClass.BTD: 1470,
    DefectClass.LBD: 4434,
    DefectClass.BBD: 1470,
}


def apportion(total: int, weights: Sequence[float]) -> list[int]:
    """Split ``total`` into integer parts proportional to ``weights``.

    Largest-remainder method; ties go to the lower index. Parts sum to
    ``total`` exactly.
    """
    w = np.asarray(weights, dtype=np.float64)
    if total < 0 or np.any(w < 0):
        raise ValueError("total and weights must be non-negative")
    if total == 0 or w.sum() == 0:
        return [0] * len(w)
    quotas = total * w / w.sum()
    parts = np.floor(quotas).astype(np.int64)
    remainder = total - int(parts.sum())
    order = sorted(range(len(w)), key=lambda i: (-(quotas[i] - parts[i]), i))
    for i in order[:remainder]:
        parts[i] += 1
    return [int(p) for p in parts]


def reference_counts(total: int | None = None) -> dict[DefectClass, int]:
    """Per-class counts in reference proportions (the exact reference tallies if ``total`` is None)."""
    if total is None:
        return dict(REFERENCE_COUNTS)
    classes = list(DefectClass)
    parts = apportion(total, [REFERENCE_COUNTS[c] for c in classes])
    return dict(zip(classes, parts))


@dataclass(frozen=True)
class DomainTag:
    """Acquisition scenario identifier, e.g. a material name."""

    name: str

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise ValueError("domain name must be a non-empty string")

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Signal:
    samples: np.ndarray
    domain: DomainTag
    label: DefectClass | None = None
    source_position: tuple[int, int] | None = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.shape != (SIGNAL_LENGTH,):
            raise ShapeError(f"signal must have {SIGNAL_LENGTH} samples, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("signal samples must be finite")
        samples = samples.copy()
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        if isinstance(self.domain, str):
            object.__setattr__(self, "domain", DomainTag(self.domain))
        if self.label is not None:
            object.__setattr__(self, "label", DefectClass(self.label))

    def __eq__(self, other):
        if not isinstance(other, Signal):
            return NotImplemented
        return (
            self.domain == other.domain
            and self.label == other.label
            and self.source_position == other.source_position
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Columnar, immutable collection of signals.

    ``labels`` holds visible labels (-1 when unlabeled). ``hidden_labels``
    keeps ground truth for labels masked by :func:`label_fraction_mask`;
    it is never used for training.
    """

    samples: np.ndarray
    labels: np.ndarray
    domain_ids: np.ndarray
    domains: tuple[str, ...]
    folds: np.ndarray | None = None
    positions: np.ndarray | None = None
    hidden_labels: np.ndarray | None = None
    num_folds: int | None = field(default=None)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 2 or (len(samples) and samples.shape[1] != SIGNAL_LENGTH):
            if not (samples.size == 0):
                raise ShapeError(f"samples must be (N, {SIGNAL_LENGTH}), got {samples.shape}")
            samples = samples.reshape(0, SIGNAL_LENGTH)
        n = len(samples)
        if not np.all(np.isfinite(samples)):
            raise ValueError("dataset samples must be finite")
        labels = np.asarray(self.labels, dtype=np.int16).reshape(n)
        if np.any((labels < UNLABELED) | (labels >= NUM_CLASSES)):
            raise ValueError("label codes must be in 0..6 or -1")
        domain_ids = np.asarray(self.domain_ids, dtype=np.int32).reshape(n)
        domains = tuple(self.domains)
        for d in domains:
            DomainTag(d)
        if n and (domain_ids.min() < 0 or domain_ids.max() >= len(domains)):
            raise ValueError("domain id out of range of the domain table")
        object.__setattr__(self, "samples", _frozen(samples))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "domain_ids", _frozen(domain_ids))
        object.__setattr__(self, "domains", domains)
        if self.folds is not None:
            folds = np.asarray(self.folds, dtype=np.int16).reshape(n)
            if n and folds.min() < 0:
                raise ValueError("every signal needs a fold id once folds are assigned")
            object.__setattr__(self, "folds", _frozen(folds))
            if self.num_folds is None:
                object.__setattr__(self, "num_folds", int(folds.max()) + 1 if n else 0)
        positions = self.positions
        if positions is None:
            positions = np.full((n, 2), NO_POSITION, dtype=np.int32)
        object.__setattr__(self, "positions", _frozen(np.asarray(positions, dtype=np.int32).reshape(n, 2)))
        hidden = self.hidden_labels
        if hidden is None:
            hidden = np.full(n, UNLABELED, dtype=np.int16)
        object.__setattr__(self, "hidden_labels", _frozen(np.asarray(hidden, dtype=np.int16).reshape(n)))

    # -- construction -------------------------------------------------------

    @classmethod
    def from_signals(cls, signals: Iterable[Signal]) -> "Dataset":
        signals = list(signals)
        domains: list[str] = []
        for s in signals:
            if s.domain.name not in domains:
                domains.append(s.domain.name)
        n = len(signals)
        samples = np.zeros((n, SIGNAL_LENGTH), dtype=np.float32)
        labels = np.full(n, UNLABELED, dtype=np.int16)
        dom = np.zeros(n, dtype=np.int32)
        pos = np.full((n, 2), NO_POSITION, dtype=np.int32)
        for i, s in enumerate(signals):
            samples[i] = s.samples
            if s.label is not None:
                labels[i] = int(s.label)
            dom[i] = domains.index(s.domain.name)
            if s.source_position is not None:
                pos[i] = s.source_position
        return cls(samples, labels, dom, tuple(domains), positions=pos)

    @classmethod
    def empty(cls, domains: Sequence[str] = ()) -> "Dataset":
        return cls(np.zeros((0, SIGNAL_LENGTH), np.float32), np.zeros(0), np.zeros(0), tuple(domains))

    @classmethod
    def concat(cls, datasets: Sequence["Dataset"]) -> "Dataset":
        """Stack datasets, merging domain tables by name. Fold ids are dropped."""
        domains: list[str] = []
        for ds in datasets:
            for d in ds.domains:
                if d not in domains:
                    domains.append(d)
        ids = []
        for ds in datasets:
            remap = np.array([domains.index(d) for d in ds.domains], dtype=np.int32)
            ids.append(remap[ds.domain_ids] if len(ds) else np.zeros(0, np.int32))
        return cls(
            np.concatenate([ds.samples for ds in datasets]) if datasets else np.zeros((0, SIGNAL_LENGTH)),
            np.concatenate([ds.labels for ds in datasets]) if datasets else np.zeros(0),
            np.concatenate(ids) if ids else np.zeros(0),
            tuple(domains),
            positions=np.concatenate([ds.positions for ds in datasets]) if datasets else None,
            hidden_labels=np.concatenate([ds.hidden_labels for ds in datasets]) if datasets else None,
        )

    def replace(self, **changes) -> "Dataset":
        kw = dict(
            samples=self.samples,
            labels=self.labels,
            domain_ids=self.domain_ids,
            domains=self.domains,
            folds=self.folds,
            positions=self.positions,
            hidden_labels=self.hidden_labels,
            num_folds=self.num_folds,
        )
        kw.update(changes)
        if "folds" in changes and "num_folds" not in changes:
            kw["num_folds"] = None
        return Dataset(**kw)

    # -- access -------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Signal:
        label = int(self.labels[i])
        row, col = (int(v) for v in self.positions[i])
        return Signal(
            self.samples[i],
            DomainTag(self.domains[int(self.domain_ids[i])]),
            None if label == UNLABELED else DefectClass(label),
            None if row == NO_POSITION else (row, col),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        if (self.folds is None) != (other.folds is None):
            return False
        return (
            self.domains == other.domains
            and np.array_equal(self.samples, other.samples)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.domain_ids, other.domain_ids)
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.hidden_labels, other.hidden_labels)
            and (self.folds is None or np.array_equal(self.folds, other.folds))
        )

    __hash__ = None

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.samples[idx],
            self.labels[idx],
            self.domain_ids[idx],
            self.domains,
            folds=None if self.folds is None else self.folds[idx],
            positions=self.positions[idx],
            hidden_labels=self.hidden_labels[idx],
            num_folds=self.num_folds,
        )

    @property
    def is_labeled(self) -> bool:
        return bool(np.all(self.labels != UNLABELED))

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    @property
    def ground_truth(self) -> np.ndarray:
        """Visible labels with hidden ones filled back in."""
        return np.where(self.labels != UNLABELED, self.labels, self.hidden_labels).astype(np.int16)

    def class_counts(self, ground_truth: bool = False) -> dict[DefectClass, int]:
        labels = self.ground_truth if ground_truth else self.labels
        counts = np.bincount(labels[labels != UNLABELED], minlength=NUM_CLASSES)
        return {c: int(counts[c]) for c in DefectClass}

    def fold_indices(self, fold: int) -> np.ndarray:
        if self.folds is None:
            raise StratificationError("dataset has no fold assignment")
        return np.flatnonzero(self.folds == fold)

    def domain_mask(self, name: str) -> np.ndarray:
        if name not in self.domains:
            return np.zeros(len(self), dtype=bool)
        return self.domain_ids == self.domains.index(name)


def stratified_folds(ds: Dataset, num_folds: int, seed: int) -> Dataset:
    """Assign every signal to one of ``num_folds`` folds, stratified per class.

    Within each class the signals are shuffled and dealt round-robin. The
    starting fold rotates with the running total so overall fold sizes also
    differ by at most one.
    """
    if len(ds) == 0:
        raise StratificationError("cannot split an empty dataset")
    if num_folds < 2:
        raise StratificationError("need at least 2 folds")
    labels = ds.ground_truth
    if np.any(labels == UNLABELED):
        raise LabelingError(f"{int(np.sum(labels == UNLABELED))} unlabeled signal(s); folds need labels")
    rng = np.random.default_rng(seed)
    folds = np.full(len(ds), NO_FOLD, dtype=np.int16)
    start = 0
    for c in DefectClass:
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            continue
        if len(idx) < num_folds:
            raise StratificationError(f"class {c.name} has {len(idx)} signal(s), fewer than {num_folds} folds")
        idx = rng.permutation(idx)
        folds[idx] = (start + np.arange(len(idx))) % num_folds
        start = (start + len(idx)) % num_folds
    return ds.replace(folds=folds, num_folds=num_folds)


def label_fraction_mask(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Keep ``round(fraction * N)`` labels, stratified per class; hide the rest.

    Works from ground truth, so masking an already masked dataset with the
    same arguments gives the same result.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    truth = ds.ground_truth
    if np.any(truth == UNLABELED):
        raise LabelingError("label_fraction_mask needs a fully labeled dataset")
    n = len(ds)
    keep_total = int(math.floor(fraction * n + 0.5))
    classes = [c for c in DefectClass]
    counts = [int(np.sum(truth == c)) for c in classes]
    quotas = apportion(keep_total, counts)
    rng = np.random.default_rng(seed)
    keep = np.zeros(n, dtype=bool)
    for c, q in zip(classes, quotas):
        idx = np.flatnonzero(truth == c)
        if q:
            keep[rng.choice(idx, size=q, replace=False)] = True
    labels = np.where(keep, truth, UNLABELED)
    hidden = np.where(keep, UNLABELED, truth)
    return ds.replace(labels=labels, hidden_labels=hidden)
