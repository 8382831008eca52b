"""Loss terms and the weighted training objective.

All terms operate on probabilities (not logits) so callers control the
softmax placement. Everything runs in double precision; probabilities are
floored at LOG_FLOOR before logs so a confident-and-wrong model produces a
large finite loss rather than an infinity.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch

from .core import LOG_FLOOR, SIMPLEX_ATOL, NumericError


def _check_prob_rows(name: str, mat: torch.Tensor) -> None:
    if mat.ndim != 2 or mat.shape[0] == 0 or mat.shape[1] == 0:
        raise ValueError(f"{name} must be a non-empty (n, C) matrix, got {tuple(mat.shape)}")
    with torch.no_grad():
        if not torch.isfinite(mat).all():
            raise NumericError(f"{name} has a non-finite entry")
        if (mat < 0).any():
            raise ValueError(f"{name} has a negative entry")
        worst = float((mat.sum(dim=1) - 1.0).abs().max())
        if worst > SIMPLEX_ATOL:
            raise ValueError(f"{name} rows must sum to 1 (worst deviation {worst:.2e})")


def ce_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of each sample's labeled class."""
    _check_prob_rows("probs", probs)
    labels = torch.as_tensor(labels, dtype=torch.int64)
    if labels.shape != (probs.shape[0],):
        raise ValueError(f"labels must have shape ({probs.shape[0]},), got {tuple(labels.shape)}")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError("label outside [0, C)")
    picked = probs[torch.arange(probs.shape[0]), labels]
    clamped = int((picked < LOG_FLOOR).sum())
    if clamped:
        warnings.warn(f"ce_loss clamped {clamped} near-zero labeled probabilities",
                      stacklevel=2)
    return -torch.log(picked.clamp_min(LOG_FLOOR)).mean()


def kl_loss(targets: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of KL(target || predicted).

    Zero target entries contribute nothing (0 log 0 := 0); zero predicted
    entries under positive target mass are floored instead of diverging.
    """
    _check_prob_rows("targets", targets)
    _check_prob_rows("probs", probs)
    if targets.shape != probs.shape:
        raise ValueError(f"shape mismatch: targets {tuple(targets.shape)} "
                         f"vs probs {tuple(probs.shape)}")
    p = probs.clamp_min(LOG_FLOOR)
    per_row = (torch.xlogy(targets, targets) - torch.xlogy(targets, p)).sum(dim=1)
    return per_row.mean()


def landmark_mse(pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all coordinates of all samples."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} "
                         f"vs truth {tuple(truth.shape)}")
    if pred.ndim != 2:
        raise ValueError(f"expected (n, 2L) matrices, got {tuple(pred.shape)}")
    return ((pred - truth) ** 2).mean()


_COMPONENTS = ("ce", "lm", "kl", "el")


def _check_finite(name: str, value) -> None:
    if isinstance(value, torch.Tensor):
        value = value.detach()
    scalar = float(value)
    if not math.isfinite(scalar):
        raise NumericError(f"loss component '{name}' is non-finite ({scalar})")


def combine(ce, lm, kl=0.0, el=0.0, *, alpha: float, beta: float):
    """Weighted sum of the loss terms.

    Accepts python floats or 0-d tensors and preserves the input type, so the
    same expression drives both the backward pass and the logged report.
    Disabled terms passed as the float 0.0 leave the sum bit-identical to the
    two-term objective.
    """
    for name, value in zip(_COMPONENTS, (ce, lm, kl, el)):
        _check_finite(name, value)
    for name, value in (("alpha", alpha), ("beta", beta)):
        _check_finite(name, value)
    return ce + lm + alpha * kl + beta * el


@dataclass(frozen=True)
class LossReport:
    """Per-step loss breakdown, checked against its own weighted sum."""

    ce: float
    kl: float
    lm: float
    el: float
    alpha: float
    beta: float
    total: float

    def __post_init__(self):
        for name in (*_COMPONENTS, "alpha", "beta", "total"):
            _check_finite(name, getattr(self, name))
        expect = self.ce + self.lm + self.alpha * self.kl + self.beta * self.el
        if abs(self.total - expect) > 1e-9:
            raise ValueError(f"total {self.total!r} does not match weighted sum {expect!r}")

    def row(self) -> tuple[float, float, float, float, float]:
        """Values in training-log column order: ce, kl, lm, el, total."""
        return (self.ce, self.kl, self.lm, self.el, self.total)


def total_loss(ce, lm, kl=0.0, el=0.0, *, alpha: float, beta: float) -> LossReport:
    """Combine the loss terms and return the logged breakdown."""
    total = combine(ce, lm, kl, el, alpha=alpha, beta=beta)
    return LossReport(ce=float(ce), kl=float(kl), lm=float(lm), el=float(el),
                      alpha=float(alpha), beta=float(beta), total=float(total))
