"""Metrics and diagnostics: accuracy, confusion counts, clean-vs-flipped
cross-entropy histograms, Jensen-Shannon divergence, and embedding export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .core import LOG_FLOOR, validate_distribution
from .data import DataError, Dataset
from .models import DualViewModel, as_model_input
from .noise import NoiseLedger

HISTOGRAM_BINS = 50


def predict_probs(model: DualViewModel, dataset: Dataset,
                  batch_size: int = 256) -> np.ndarray:
    """Class probabilities for every sample, in dataset order."""
    was_training = model.training
    model.eval()
    rows = []
    with torch.no_grad():
        for start in range(0, len(dataset.ids), batch_size):
            x = as_model_input(dataset.inputs[start:start + batch_size], model.cfg)
            _, probs = model.forward_expression(x)
            rows.append(probs.numpy())
    if was_training:
        model.train()
    return np.concatenate(rows, axis=0)


def overall_accuracy(predictions, labels) -> float:
    """Fraction of samples whose predicted class matches the label.

    `predictions` may be a (n, C) probability matrix (argmax is taken) or a
    vector of predicted class indices.
    """
    pred = np.asarray(predictions)
    if pred.ndim == 2:
        pred = pred.argmax(axis=1)
    labels = np.asarray(labels, dtype=np.int64)
    if pred.shape != labels.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {labels.shape}")
    if pred.size == 0:
        raise ValueError("cannot score an empty prediction set")
    return float((pred == labels).mean())


def confusion_matrix(predictions, labels, num_classes: int) -> np.ndarray:
    """Count matrix with true classes on rows and predicted classes on columns."""
    pred = np.asarray(predictions)
    if pred.ndim == 2:
        pred = pred.argmax(axis=1)
    labels = np.asarray(labels, dtype=np.int64)
    if pred.shape != labels.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {labels.shape}")
    out = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(out, (labels, pred.astype(np.int64)), 1)
    return out


def per_sample_ce(probs: np.ndarray, labels) -> np.ndarray:
    """-log p[label] per sample, floored the same way as the training loss."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ValueError("expected (n, C) probabilities and n labels")
    picked = probs[np.arange(probs.shape[0]), labels]
    return -np.log(np.maximum(picked, LOG_FLOOR))


@dataclass(frozen=True, eq=False)
class CeNoiseSplit:
    """Per-sample CE statistics split by whether the label was flipped."""

    clean_mean: float
    noisy_mean: float
    clean_count: int
    noisy_count: int
    bin_edges: np.ndarray
    clean_hist: np.ndarray
    noisy_hist: np.ndarray

    def __post_init__(self):
        if self.clean_count + self.noisy_count == 0:
            raise ValueError("empty split")
        if len(self.bin_edges) != HISTOGRAM_BINS + 1:
            raise ValueError(f"expected {HISTOGRAM_BINS + 1} bin edges")


def ce_histogram_by_noise(ids, ce_values, ledger: NoiseLedger) -> CeNoiseSplit:
    """Split per-sample CE by the ledger's flipped flag and histogram both groups.

    Both histograms share 50 uniform bins over [0, max CE observed].
    """
    ids = np.asarray(ids, dtype=np.int64)
    ce = np.asarray(ce_values, dtype=np.float64)
    if ids.shape != ce.shape or ids.ndim != 1 or ids.size == 0:
        raise ValueError("ids and ce_values must be equal-length non-empty vectors")
    missing = [int(i) for i in ids if int(i) not in ledger.entries]
    if missing:
        raise DataError(f"ledger does not cover sample ids {missing[:5]}")
    flipped = np.array([ledger.entries[int(i)].flipped for i in ids], dtype=bool)
    hi = float(ce.max())
    if hi <= 0.0:
        hi = 1.0
    edges = np.linspace(0.0, hi, HISTOGRAM_BINS + 1)
    clean, noisy = ce[~flipped], ce[flipped]
    return CeNoiseSplit(
        clean_mean=float(clean.mean()) if clean.size else math.nan,
        noisy_mean=float(noisy.mean()) if noisy.size else math.nan,
        clean_count=int(clean.size),
        noisy_count=int(noisy.size),
        bin_edges=edges,
        clean_hist=np.histogram(clean, bins=edges)[0],
        noisy_hist=np.histogram(noisy, bins=edges)[0],
    )


def js_divergence(p1, p2) -> float:
    """Jensen-Shannon divergence with natural log; symmetric, in [0, ln 2]."""
    a = validate_distribution(p1)
    b = validate_distribution(p2)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    m = 0.5 * (a + b)

    def half_kl(p):
        mask = p > 0.0
        return float(np.sum(p[mask] * np.log(p[mask] / m[mask])))

    return max(0.0, 0.5 * half_kl(a) + 0.5 * half_kl(b))


def mean_js(reference: dict, candidate: dict) -> float:
    """Mean JS divergence between two id-aligned sets of distributions."""
    if set(reference) != set(candidate):
        raise DataError("reference and candidate cover different sample ids")
    if not reference:
        raise ValueError("cannot average over an empty id set")
    return float(np.mean([js_divergence(reference[i], candidate[i])
                          for i in sorted(reference)]))


def export_embeddings(model: DualViewModel, dataset: Dataset, path,
                      ledger: NoiseLedger | None = None,
                      batch_size: int = 256) -> Path:
    """Write expression-view features as CSV: id,label,flipped,u_1..u_D."""
    path = Path(path)
    was_training = model.training
    model.eval()
    blocks = []
    with torch.no_grad():
        for start in range(0, len(dataset.ids), batch_size):
            x = as_model_input(dataset.inputs[start:start + batch_size], model.cfg)
            u, _ = model.forward_expression(x)
            blocks.append(u.numpy())
    if was_training:
        model.train()
    features = np.concatenate(blocks, axis=0)

    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "flipped"]
                        + [f"u_{j + 1}" for j in range(features.shape[1])])
        for i, sample_id in enumerate(dataset.ids):
            entry = ledger.entries.get(int(sample_id)) if ledger is not None else None
            flipped = int(entry.flipped) if entry is not None else 0
            writer.writerow([int(sample_id), int(dataset.labels[i]), flipped]
                            + [repr(float(x)) for x in features[i]])
    return path


@dataclass(frozen=True, eq=False)
class EvalReport:
    """Test-set metrics plus optional training-set diagnostics."""

    accuracy: float
    confusion: np.ndarray
    ce_split: CeNoiseSplit | None = None
    js_scores: dict | None = None

    def __post_init__(self):
        conf = np.asarray(self.confusion)
        if conf.ndim != 2 or conf.shape[0] != conf.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {conf.shape}")
        total = int(conf.sum())
        if total == 0:
            raise ValueError("confusion matrix is empty")
        from_trace = float(np.trace(conf)) / total
        if abs(self.accuracy - from_trace) > 1e-9:
            raise ValueError(f"accuracy {self.accuracy} does not match "
                             f"confusion trace {from_trace}")

    def with_diagnostics(self, ce_split=None, js_scores=None) -> "EvalReport":
        return replace(self, ce_split=ce_split, js_scores=js_scores)


def evaluate(model: DualViewModel, dataset: Dataset,
             batch_size: int = 256) -> EvalReport:
    """Accuracy and confusion counts of the classifier over a dataset."""
    probs = predict_probs(model, dataset, batch_size)
    return EvalReport(
        accuracy=overall_accuracy(probs, dataset.labels),
        confusion=confusion_matrix(probs, dataset.labels, dataset.num_classes),
    )


def write_report(report: EvalReport, directory) -> Path:
    """Serialize a report as summary.txt plus machine-readable CSVs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    with (directory / "confusion.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        num_classes = report.confusion.shape[0]
        writer.writerow(["true_class"] + [f"pred_{c}" for c in range(num_classes)])
        for c in range(num_classes):
            writer.writerow([c] + [int(x) for x in report.confusion[c]])

    lines = [f"overall_accuracy = {report.accuracy!r}"]
    if report.ce_split is not None:
        split = report.ce_split
        lines += [
            f"train_ce_clean_mean = {split.clean_mean!r} (n={split.clean_count})",
            f"train_ce_noisy_mean = {split.noisy_mean!r} (n={split.noisy_count})",
        ]
        with (directory / "ce_histogram.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_lo", "bin_hi", "clean_count", "noisy_count"])
            for j in range(HISTOGRAM_BINS):
                writer.writerow([repr(float(split.bin_edges[j])),
                                 repr(float(split.bin_edges[j + 1])),
                                 int(split.clean_hist[j]), int(split.noisy_hist[j])])
    if report.js_scores:
        lines += [f"js_{key} = {value!r}" for key, value in sorted(report.js_scores.items())]
    (directory / "summary.txt").write_text("\n".join(lines) + "\n")
    return directory
