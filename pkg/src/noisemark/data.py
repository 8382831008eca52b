"""Synthetic dual-view datasets, manifest IO, and balanced batch sampling.

Each sample carries two views of the same underlying class prototype: a flat
input vector and a set of 2-d landmark points in [0, 1]. The two views get
independent noise so that one can stay informative when the other degrades.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Landmark jitter is this fraction of the input-view noise, keeping normalized
# coordinates well inside [0, 1] at the default noise level.
LANDMARK_JITTER_SCALE = 0.05

# Class landmark prototypes are drawn from this range so jitter rarely clips.
_LANDMARK_LO, _LANDMARK_HI = 0.15, 0.85

MANIFEST_HEADER = ["id", "class", "landmarks", "input"]


class DataError(ValueError):
    """Dataset construction or IO failure."""


class DuplicateIdError(DataError):
    """Two records share a sample id."""


class ManifestError(DataError):
    """Manifest file violates the expected schema."""


@dataclass(frozen=True, eq=False)
class SampleRecord:
    """One labeled sample: stable id, input vector, class index, landmarks."""

    id: int
    input: np.ndarray
    label: int
    landmarks: np.ndarray


class Dataset:
    """Array-backed collection of samples with a fixed class and landmark count.

    `landmarks` rows are flattened (x, y) pairs, so their length is twice the
    landmark count and every coordinate lies in [0, 1].
    """

    def __init__(self, ids, inputs, labels, landmarks, num_classes: int,
                 split: str | None = None):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.inputs = np.asarray(inputs, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.landmarks = np.asarray(landmarks, dtype=np.float64)
        self.num_classes = int(num_classes)
        self.split = split

        n = self.ids.shape[0]
        if self.inputs.shape[0] != n or self.labels.shape[0] != n or self.landmarks.shape[0] != n:
            raise DataError("ids, inputs, labels, and landmarks disagree on length")
        if n and self.inputs.ndim != 2:
            raise DataError(f"inputs must be 2-d, got shape {self.inputs.shape}")
        if n and (self.landmarks.ndim != 2 or self.landmarks.shape[1] % 2 != 0
                  or self.landmarks.shape[1] == 0):
            raise DataError(f"landmarks must be rows of (x, y) pairs, got shape {self.landmarks.shape}")
        uniq, counts = np.unique(self.ids, return_counts=True)
        if np.any(counts > 1):
            raise DuplicateIdError(f"duplicate sample id {int(uniq[counts > 1][0])}")
        if self.num_classes < 1:
            raise DataError(f"num_classes must be >= 1, got {num_classes}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("label out of range for num_classes")
        if n and (self.landmarks.min() < 0.0 or self.landmarks.max() > 1.0):
            raise DataError("landmark coordinates must lie in [0, 1]")

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def landmark_count(self) -> int:
        return self.landmarks.shape[1] // 2

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def records(self) -> list[SampleRecord]:
        return [SampleRecord(int(i), x, int(y), lm)
                for i, x, y, lm in zip(self.ids, self.inputs, self.labels, self.landmarks)]

    def with_labels(self, labels) -> "Dataset":
        """Same samples, different labels (used by noise injection)."""
        return Dataset(self.ids, self.inputs, np.array(labels, dtype=np.int64),
                       self.landmarks, self.num_classes, self.split)

    def subset(self, index) -> "Dataset":
        idx = np.asarray(index)
        return Dataset(self.ids[idx], self.inputs[idx], self.labels[idx],
                       self.landmarks[idx], self.num_classes, self.split)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic dual-view benchmark generator."""

    num_classes: int
    samples_per_class: int
    input_dim: int = 64
    landmark_count: int = 5
    class_separation: float = 4.0
    view_noise_std: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise DataError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.samples_per_class < 2:
            raise DataError(f"samples_per_class must be >= 2, got {self.samples_per_class}")
        if self.input_dim < 1:
            raise DataError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.landmark_count < 1:
            raise DataError(f"landmark_count must be >= 1, got {self.landmark_count}")
        if self.class_separation <= 0.0:
            raise DataError(f"class_separation must be positive, got {self.class_separation}")
        if self.view_noise_std < 0.0:
            raise DataError(f"view_noise_std must be >= 0, got {self.view_noise_std}")


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Generate a stratified 80/20 train/test pair from `spec`, deterministically.

    Per class, a random input-space prototype of norm `class_separation` and a
    landmark prototype in [0.15, 0.85] are drawn; samples add independent
    Gaussian noise to each view. With view_noise_std = 0 every sample of a
    class collapses onto its prototypes.
    """
    rng = np.random.default_rng(spec.seed)
    dim, twol = spec.input_dim, 2 * spec.landmark_count

    input_protos = np.empty((spec.num_classes, dim))
    landmark_protos = np.empty((spec.num_classes, twol))
    for k in range(spec.num_classes):
        direction = rng.standard_normal(dim)
        input_protos[k] = direction / np.linalg.norm(direction) * spec.class_separation
        landmark_protos[k] = rng.uniform(_LANDMARK_LO, _LANDMARK_HI, size=twol)

    per = spec.samples_per_class
    inputs = np.empty((spec.num_classes * per, dim))
    landmarks = np.empty((spec.num_classes * per, twol))
    labels = np.repeat(np.arange(spec.num_classes), per)
    jitter_std = spec.view_noise_std * LANDMARK_JITTER_SCALE
    for k in range(spec.num_classes):
        rows = slice(k * per, (k + 1) * per)
        inputs[rows] = input_protos[k] + spec.view_noise_std * rng.standard_normal((per, dim))
        landmarks[rows] = np.clip(
            landmark_protos[k] + jitter_std * rng.standard_normal((per, twol)), 0.0, 1.0)

    ids = np.arange(spec.num_classes * per, dtype=np.int64)
    n_train = max(1, int(per * 0.8))
    train_mask = np.zeros(len(ids), dtype=bool)
    for k in range(spec.num_classes):
        train_mask[k * per: k * per + n_train] = True

    def build(mask, split):
        return Dataset(ids[mask], inputs[mask], labels[mask], landmarks[mask],
                       spec.num_classes, split=split)

    return build(train_mask, "train"), build(~train_mask, "test")


def _format_floats(vec: np.ndarray) -> str:
    return ";".join(repr(float(x)) for x in vec)


def _parse_floats(text: str) -> np.ndarray | None:
    try:
        return np.array([float(tok) for tok in text.split(";")], dtype=np.float64)
    except ValueError:
        return None


def save_manifest(dataset: Dataset, path: str | Path) -> None:
    """Write the dataset as a manifest CSV with inline input vectors."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for i in range(len(dataset)):
            writer.writerow([
                int(dataset.ids[i]),
                int(dataset.labels[i]),
                _format_floats(dataset.landmarks[i]),
                _format_floats(dataset.inputs[i]),
            ])


def load_manifest(path: str | Path, split: str | None = None,
                  num_classes: int | None = None) -> Dataset:
    """Parse a manifest CSV into a Dataset.

    The input column holds either a semicolon-separated vector or a path to a
    .npy file, resolved relative to the manifest. The class count defaults to
    the largest class index seen plus one.
    """
    path = Path(path)
    base = path.parent
    ids, labels, landmark_rows, input_rows = [], [], [], []
    seen: set[int] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ManifestError(f"{path}: expected header {','.join(MANIFEST_HEADER)}")
        for rownum, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ManifestError(f"{path}:{rownum}: expected 4 columns, got {len(row)}")
            try:
                sid, label = int(row[0]), int(row[1])
            except ValueError:
                raise ManifestError(f"{path}:{rownum}: id and class must be integers") from None
            if sid in seen:
                raise DuplicateIdError(f"{path}:{rownum}: duplicate sample id {sid}")
            seen.add(sid)
            lm = _parse_floats(row[2])
            if lm is None or lm.size == 0 or lm.size % 2 != 0:
                raise ManifestError(f"{path}:{rownum}: bad landmark vector")
            vec = _parse_floats(row[3])
            if vec is None:
                ref = base / row[3]
                if not ref.exists():
                    raise ManifestError(f"{path}:{rownum}: referenced input file {ref} not found")
                vec = np.load(ref).astype(np.float64).ravel()
            ids.append(sid)
            labels.append(label)
            landmark_rows.append(lm)
            input_rows.append(vec)
    if not ids:
        raise ManifestError(f"{path}: manifest has no records")
    lengths = {v.size for v in landmark_rows}
    if len(lengths) != 1:
        raise ManifestError(f"{path}: inconsistent landmark lengths {sorted(lengths)}")
    dims = {v.size for v in input_rows}
    if len(dims) != 1:
        raise ManifestError(f"{path}: inconsistent input dimensions {sorted(dims)}")
    if min(labels) < 0:
        raise ManifestError(f"{path}: negative class index")
    inferred = max(labels) + 1
    c = inferred if num_classes is None else int(num_classes)
    try:
        return Dataset(ids, np.stack(input_rows), labels, np.stack(landmark_rows), c, split=split)
    except DataError as exc:
        raise ManifestError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class SamplerSchedule:
    """Inputs of the progressively balanced sampling schedule."""

    class_counts: np.ndarray
    total_epochs: int

    def __post_init__(self):
        counts = np.asarray(self.class_counts, dtype=np.int64)
        object.__setattr__(self, "class_counts", counts)
        if counts.ndim != 1 or counts.size == 0:
            raise DataError("class_counts must be a non-empty 1-d array")
        if np.any(counts < 0) or counts.sum() == 0:
            raise DataError("class_counts must be non-negative with a positive total")
        if self.total_epochs < 1:
            raise DataError(f"total_epochs must be >= 1, got {self.total_epochs}")

    @classmethod
    def from_dataset(cls, dataset: Dataset, total_epochs: int) -> "SamplerSchedule":
        return cls(dataset.class_counts(), total_epochs)


def progressive_sampling_weights(epoch: int, schedule: SamplerSchedule) -> np.ndarray:
    """Class weights interpolating instance-balanced -> class-balanced.

    Epoch 0 weights classes by their empirical frequency; the final epoch
    weights them uniformly; intermediate epochs interpolate linearly. A
    single-epoch schedule stays instance-balanced.
    """
    if not 0 <= epoch < schedule.total_epochs:
        raise DataError(f"epoch {epoch} out of range for {schedule.total_epochs} epochs")
    counts = schedule.class_counts.astype(np.float64)
    t = 0.0 if schedule.total_epochs == 1 else epoch / (schedule.total_epochs - 1)
    return (1.0 - t) * counts / counts.sum() + t / counts.size


def sample_batch(dataset: Dataset, weights: np.ndarray, batch_size: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Draw `batch_size` sample indices with replacement: class first, then a
    uniform member of that class."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (dataset.num_classes,):
        raise DataError(f"weights shape {weights.shape} does not match {dataset.num_classes} classes")
    counts = dataset.class_counts()
    bad = (weights > 0) & (counts == 0)
    if np.any(bad):
        raise DataError(f"class {int(np.nonzero(bad)[0][0])} has nonzero weight but no samples")
    order = np.argsort(dataset.labels, kind="stable")
    offsets = np.concatenate([[0], np.cumsum(counts)])
    classes = rng.choice(dataset.num_classes, size=batch_size, p=weights / weights.sum())
    member = rng.integers(0, counts[classes])
    return order[offsets[classes] + member]
