"""Shared domain types, hyperparameters, and validation helpers."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

# Probability vectors drift a little under repeated blending; anything worse
# than this is a real bug, not float noise.
SIMPLEX_ATOL = 1e-6

# Floor applied to probabilities before logs in the CE/KL terms.
LOG_FLOOR = 1e-12


class ConfigError(ValueError):
    """Malformed config text or out-of-range hyperparameter."""


class NonSimplexError(ValueError):
    """Vector violates the probability-simplex constraints."""


class NumericError(ArithmeticError):
    """A loss component or intermediate value became non-finite."""


def validate_distribution(dist, atol: float = SIMPLEX_ATOL) -> np.ndarray:
    """Check that `dist` is a probability vector and return it as float64.

    Raises NonSimplexError when the vector has a negative entry, a non-finite
    entry, or a sum further than `atol` from 1.
    """
    v = np.asarray(dist, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise NonSimplexError(f"expected a non-empty 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonSimplexError("distribution has a non-finite entry")
    if np.any(v < 0.0):
        raise NonSimplexError(f"distribution has a negative entry (min {v.min()})")
    total = float(v.sum())
    if abs(total - 1.0) > atol:
        raise NonSimplexError(f"distribution sums to {total}, deviates from 1 by more than {atol}")
    return v


def validate_class_index(label: int, num_classes: int) -> int:
    lab = int(label)
    if not 0 <= lab < num_classes:
        raise ValueError(f"class index {lab} out of range for {num_classes} classes")
    return lab


def one_hot(class_index: int, num_classes: int) -> np.ndarray:
    """Expand a class index into a one-hot float64 vector."""
    lab = validate_class_index(class_index, num_classes)
    v = np.zeros(num_classes, dtype=np.float64)
    v[lab] = 1.0
    return v


def smoothed_one_hot(class_index: int, num_classes: int, eps: float = 0.05) -> np.ndarray:
    """One-hot vector with `eps` of its mass spread uniformly over all classes."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"smoothing eps must lie in [0, 1), got {eps}")
    return (1.0 - eps) * one_hot(class_index, num_classes) + eps / num_classes


@dataclass(frozen=True)
class HyperParams:
    """Training hyperparameters. Defaults follow the reference configuration.

    Class count and landmark count are dataset properties and deliberately
    not part of this record.
    """

    k_neighbors: int = 8
    omega: float = 0.9          # EMA retention for the target store
    tau: float = 0.1            # contrastive temperature
    delta: float = 0.7          # pseudo-label confidence threshold
    alpha: float = 1.0          # weight of the KL term
    beta: float = 0.1           # weight of the contrastive term
    batch_size: int = 128
    epochs: int = 80
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ConfigError(f"k_neighbors must be >= 1, got {self.k_neighbors}")
        if not 0.0 <= self.omega < 1.0:
            raise ConfigError(f"omega must lie in [0, 1), got {self.omega}")
        if self.tau <= 0.0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if self.alpha < 0.0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta < 0.0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.k_neighbors >= self.batch_size:
            raise ConfigError(
                f"k_neighbors ({self.k_neighbors}) must be smaller than "
                f"batch_size ({self.batch_size})"
            )


_INT_KEYS = ("k_neighbors", "batch_size", "epochs", "seed")
_FLOAT_KEYS = ("omega", "tau", "delta", "alpha", "beta", "lr")
CONFIG_KEYS = _INT_KEYS + _FLOAT_KEYS


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse flat `key = value` lines. `#` starts a comment, blank lines skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value in {raw.strip()!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def convert_config_value(key: str, value: str) -> int | float:
    """Convert one hyperparameter value from text using its declared type."""
    if key in _INT_KEYS:
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{key} expects an integer, got {value!r}") from None
    if key in _FLOAT_KEYS:
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{key} expects a number, got {value!r}") from None
    raise ConfigError(f"unknown config key {key!r}")


def parse_config(text: str) -> HyperParams:
    """Build HyperParams from config text; unknown keys are rejected."""
    kv = parse_kv_text(text)
    fields = {key: convert_config_value(key, value) for key, value in kv.items()}
    return HyperParams(**fields)


def load_config(path: str | Path) -> HyperParams:
    """Parse a config file; an empty file yields the defaults."""
    return parse_config(Path(path).read_text())


def format_config(hp: HyperParams) -> str:
    d = asdict(hp)
    return "".join(f"{key} = {d[key]}\n" for key in CONFIG_KEYS)


def save_config(hp: HyperParams, path: str | Path) -> None:
    Path(path).write_text(format_config(hp))


def format_kv(kv: dict) -> str:
    return "".join(f"{key} = {value}\n" for key, value in kv.items())
