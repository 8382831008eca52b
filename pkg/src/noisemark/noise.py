"""Synthetic label-noise injection with a ledger of every corruption.

The ledger records the original and injected label for every training sample,
so evaluations can split samples into clean/flipped groups and the clean
dataset can always be reconstructed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DataError, Dataset

NOISE_KINDS = ("symmetric", "asymmetric")

# Fixed 8-way expression labels and the confusability-based flip map used for
# asymmetric noise on expression-style data.
EXPRESSION_CLASSES = (
    "anger", "disgust", "fear", "happiness",
    "sadness", "surprise", "neutral", "contempt",
)
EXPRESSION_FLIP_NAMES = {
    "anger": "disgust",
    "disgust": "anger",
    "fear": "surprise",
    "happiness": "neutral",
    "sadness": "neutral",
    "surprise": "anger",
    "neutral": "sadness",
    "contempt": "neutral",
}


class NoiseError(ValueError):
    """Invalid noise kind, ratio, or flip map."""


def expression_flip_map() -> dict[int, int]:
    """EXPRESSION_FLIP_NAMES translated to class indices."""
    idx = {name: i for i, name in enumerate(EXPRESSION_CLASSES)}
    return {idx[src]: idx[dst] for src, dst in EXPRESSION_FLIP_NAMES.items()}


def next_class_flip_map(num_classes: int) -> dict[int, int]:
    """Default asymmetric map for synthetic data: each class flips to the next."""
    if num_classes < 2:
        raise NoiseError("need at least 2 classes to flip")
    return {k: (k + 1) % num_classes for k in range(num_classes)}


def _validate_flip_map(flip_map: dict[int, int], num_classes: int) -> None:
    for k in range(num_classes):
        if k not in flip_map:
            raise NoiseError(f"flip map missing source class {k}")
    for src, dst in flip_map.items():
        if not 0 <= src < num_classes or not 0 <= dst < num_classes:
            raise NoiseError(f"flip map entry {src}->{dst} out of range")
        if src == dst:
            raise NoiseError(f"flip map maps class {src} to itself")


@dataclass(frozen=True)
class LedgerEntry:
    original: int
    injected: int

    @property
    def flipped(self) -> bool:
        return self.original != self.injected


@dataclass
class NoiseLedger:
    """Per-sample record of the injected corruption, keyed by sample id."""

    num_classes: int
    entries: dict[int, LedgerEntry] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def flipped_ids(self) -> list[int]:
        return [sid for sid, e in self.entries.items() if e.flipped]

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "original", "injected"])
            for sid, e in self.entries.items():
                writer.writerow([sid, e.original, e.injected])

    @classmethod
    def load_csv(cls, path: str | Path, num_classes: int | None = None) -> "NoiseLedger":
        entries: dict[int, LedgerEntry] = {}
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["id", "original", "injected"]:
                raise DataError(f"{path}: expected header id,original,injected")
            for row in reader:
                sid, orig, inj = int(row[0]), int(row[1]), int(row[2])
                if sid in entries:
                    raise DataError(f"{path}: duplicate ledger id {sid}")
                entries[sid] = LedgerEntry(orig, inj)
        if not entries:
            raise DataError(f"{path}: empty ledger")
        if num_classes is None:
            num_classes = 1 + max(max(e.original, e.injected) for e in entries.values())
        return cls(num_classes=num_classes, entries=entries)


@dataclass(frozen=True)
class NoiseSpec:
    """What noise to inject: kind, rate, optional asymmetric map, seed."""

    kind: str
    ratio: float
    flip_map: tuple[tuple[int, int], ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise NoiseError(f"kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise NoiseError(f"ratio must lie in [0, 1], got {self.ratio}")

    def apply(self, dataset: Dataset) -> tuple[Dataset, NoiseLedger]:
        if self.kind == "symmetric":
            return inject_symmetric(dataset, self.ratio, self.seed)
        fmap = dict(self.flip_map) if self.flip_map else next_class_flip_map(dataset.num_classes)
        return inject_asymmetric(dataset, self.ratio, fmap, self.seed)


def _pick_targets(dataset: Dataset, ratio: float, seed: int
                  ) -> tuple[np.random.Generator, np.ndarray]:
    if not 0.0 <= ratio <= 1.0:
        raise NoiseError(f"ratio must lie in [0, 1], got {ratio}")
    n = len(dataset)
    count = math.floor(ratio * n)
    rng = np.random.default_rng(seed)
    return rng, rng.choice(n, size=count, replace=False)


def _build_ledger(dataset: Dataset, noisy_labels: np.ndarray) -> NoiseLedger:
    entries = {int(sid): LedgerEntry(int(orig), int(inj))
               for sid, orig, inj in zip(dataset.ids, dataset.labels, noisy_labels)}
    return NoiseLedger(num_classes=dataset.num_classes, entries=entries)


def inject_symmetric(dataset: Dataset, ratio: float, seed: int = 0
                     ) -> tuple[Dataset, NoiseLedger]:
    """Flip exactly floor(ratio * n) labels, each to a uniform different class."""
    if dataset.num_classes < 2:
        raise NoiseError("need at least 2 classes to flip")
    rng, picked = _pick_targets(dataset, ratio, seed)
    labels = dataset.labels.copy()
    if picked.size:
        offset = rng.integers(0, dataset.num_classes - 1, size=picked.size)
        labels[picked] = np.where(offset >= labels[picked], offset + 1, offset)
    noisy = dataset.with_labels(labels)
    return noisy, _build_ledger(dataset, labels)


def inject_asymmetric(dataset: Dataset, ratio: float, flip_map: dict[int, int],
                      seed: int = 0) -> tuple[Dataset, NoiseLedger]:
    """Flip exactly floor(ratio * n) labels along a fixed class->class map."""
    _validate_flip_map(flip_map, dataset.num_classes)
    _, picked = _pick_targets(dataset, ratio, seed)
    labels = dataset.labels.copy()
    if picked.size:
        table = np.array([flip_map[k] for k in range(dataset.num_classes)])
        labels[picked] = table[labels[picked]]
    noisy = dataset.with_labels(labels)
    return noisy, _build_ledger(dataset, labels)


def ledger_stats(ledger: NoiseLedger) -> tuple[float, np.ndarray]:
    """Empirical flip rate and a C x C matrix counting flipped original->injected
    pairs (its diagonal is zero by construction)."""
    if not ledger.entries:
        raise DataError("empty ledger")
    c = ledger.num_classes
    counts = np.zeros((c, c), dtype=np.int64)
    flipped = 0
    for e in ledger.entries.values():
        if e.flipped:
            counts[e.original, e.injected] += 1
            flipped += 1
    return flipped / len(ledger.entries), counts


def apply_original_labels(dataset: Dataset, ledger: NoiseLedger) -> Dataset:
    """Reconstruct the clean dataset recorded in the ledger."""
    return dataset.with_labels(_labels_from(dataset, ledger, "original"))


def apply_injected_labels(dataset: Dataset, ledger: NoiseLedger) -> Dataset:
    """Re-apply the ledger's injected labels (e.g. when resuming a run)."""
    return dataset.with_labels(_labels_from(dataset, ledger, "injected"))


def _labels_from(dataset: Dataset, ledger: NoiseLedger, which: str) -> np.ndarray:
    labels = np.empty(len(dataset), dtype=np.int64)
    for i, sid in enumerate(dataset.ids):
        entry = ledger.entries.get(int(sid))
        if entry is None:
            raise DataError(f"sample id {int(sid)} missing from ledger")
        labels[i] = getattr(entry, which)
    return labels
