"""Cross-view contrastive objective with pseudo-label pair selection.

Anchors are online projections of one view; keys are momentum projections of
the other view, drawn from the current batch plus a FIFO memory bank. Samples
whose target distribution is confident enough get a pseudo-label and treat
every same-label key as a positive; ambiguous samples (label -1) fall back to
instance discrimination, pairing only with their own cross-view key.

For each anchor/positive pair the softmax denominator spans that single
positive plus all of the anchor's negatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

# Large negative fill for masked logits. Finite on purpose: exp(-1e30 - x)
# underflows to exactly 0 without producing NaN gradients the way -inf can.
_NEG_FILL = -1e30

_UNIT_NORM_ATOL = 1e-6

AMBIGUOUS = -1


def pseudo_labels(targets: np.ndarray, delta: float) -> np.ndarray:
    """Argmax of each target distribution when its peak exceeds `delta`
    (strictly), else -1."""
    t = np.asarray(targets, dtype=np.float64)
    if t.ndim != 2:
        raise ValueError(f"expected (n, C) targets, got shape {t.shape}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    peaks = t.max(axis=1)
    return np.where(peaks > delta, t.argmax(axis=1), AMBIGUOUS).astype(np.int64)


@dataclass(frozen=True)
class PairIndex:
    """Boolean positive/negative masks of shape (batch, batch + bank)."""

    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        pos, neg = self.positives, self.negatives
        if pos.shape != neg.shape or pos.ndim != 2:
            raise ValueError("positive and negative masks must share an (n, M) shape")
        if np.any(pos & neg):
            raise ValueError("an entry cannot be both positive and negative")
        if not np.all(pos.sum(axis=1) >= 1):
            raise ValueError("every anchor needs at least one positive")


def build_pairs(batch_labels: np.ndarray, bank_labels: np.ndarray | None = None
                ) -> PairIndex:
    """Positive/negative masks over [batch keys, bank keys].

    A labeled anchor pairs with every equal-label entry (its own cross-view
    key included); an ambiguous anchor pairs only with itself. Everything
    else, ambiguous bank entries included, is a negative.
    """
    batch = np.asarray(batch_labels, dtype=np.int64)
    bank = np.asarray(bank_labels, dtype=np.int64) if bank_labels is not None else \
        np.empty(0, dtype=np.int64)
    if batch.ndim != 1 or batch.size == 0:
        raise ValueError("batch_labels must be a non-empty 1-d array")
    n = batch.size
    all_labels = np.concatenate([batch, bank])
    same = batch[:, None] == all_labels[None, :]
    self_only = np.zeros((n, all_labels.size), dtype=bool)
    self_only[np.arange(n), np.arange(n)] = True
    confident = (batch != AMBIGUOUS)[:, None]
    positives = np.where(confident, same, self_only)
    return PairIndex(positives=positives, negatives=~positives)


class MemoryBank:
    """FIFO bank of momentum keys and their pseudo-labels."""

    def __init__(self, capacity: int, dim: int, dtype: torch.dtype = torch.float64):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._keys = torch.empty((0, dim), dtype=dtype)
        self._labels = np.empty(0, dtype=np.int64)

    def __len__(self) -> int:
        return self._keys.shape[0]

    @property
    def labels(self) -> np.ndarray:
        return self._labels

    def snapshot(self) -> tuple[torch.Tensor, np.ndarray]:
        """Current keys and labels, oldest first, detached from the bank."""
        return self._keys.clone(), self._labels.copy()

    def enqueue(self, keys: torch.Tensor, labels) -> None:
        """Append keys (unit-norm rows) and labels; evict oldest past capacity."""
        keys = keys.detach()
        labels = np.asarray(labels, dtype=np.int64).ravel()
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ValueError(f"expected keys of shape (m, {self.dim}), got {tuple(keys.shape)}")
        if keys.shape[0] != labels.size:
            raise ValueError("keys and labels disagree on length")
        norms = keys.norm(dim=1)
        if keys.shape[0] and bool((norms - 1.0).abs().max() > _UNIT_NORM_ATOL):
            raise ValueError("bank keys must be unit-norm")
        self._keys = torch.cat([self._keys, keys.to(self._keys.dtype)])[-self.capacity:].clone()
        self._labels = np.concatenate([self._labels, labels])[-self.capacity:]

    def state(self) -> dict:
        return {"capacity": self.capacity, "dim": self.dim,
                "keys": self._keys.clone(), "labels": self._labels.copy()}

    @classmethod
    def from_state(cls, state: dict) -> "MemoryBank":
        bank = cls(state["capacity"], state["dim"], dtype=state["keys"].dtype)
        bank._keys = state["keys"].clone()
        bank._labels = np.asarray(state["labels"], dtype=np.int64).copy()
        return bank


def _check_unit_rows(name: str, mat: torch.Tensor) -> None:
    if mat.shape[0] == 0:
        return
    with torch.no_grad():
        worst = float((mat.norm(dim=1) - 1.0).abs().max())
    if worst > _UNIT_NORM_ATOL:
        raise ValueError(f"{name} rows must be unit-norm (worst deviation {worst:.2e})")


def cross_view_infonce(queries: torch.Tensor, keys: torch.Tensor, pairs: PairIndex,
                       tau: float) -> torch.Tensor:
    """One direction of the contrastive loss.

    Per anchor i and positive j, the term is
    -log( exp(q_i . k_j / tau) / sum_{m in negatives(i) + {j}} exp(q_i . k_m / tau) ),
    averaged over positives, then over anchors.
    """
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    n, m = pairs.positives.shape
    if queries.shape[0] != n or keys.shape[0] != m:
        raise ValueError(f"pair masks ({n}, {m}) do not match queries {tuple(queries.shape)} "
                         f"/ keys {tuple(keys.shape)}")
    logits = queries @ keys.T / tau
    neg_mask = torch.from_numpy(pairs.negatives)
    pos_mask = torch.from_numpy(pairs.positives).to(logits.dtype)
    neg_lse = logits.masked_fill(~neg_mask, _NEG_FILL).logsumexp(dim=1, keepdim=True)
    denom = torch.logaddexp(neg_lse, logits)
    per_pair = denom - logits
    per_anchor = (per_pair * pos_mask).sum(dim=1) / pos_mask.sum(dim=1)
    return per_anchor.mean()


def el_loss(q_u: torch.Tensor, q_v: torch.Tensor, k_u: torch.Tensor,
            k_v: torch.Tensor, pairs: PairIndex, tau: float) -> torch.Tensor:
    """Symmetric cross-view loss: expression queries against landmark keys
    plus landmark queries against expression keys.

    k_u / k_v already contain the batch keys followed by any bank keys; the
    pair masks must be built over that same ordering.
    """
    if q_u.shape != q_v.shape:
        raise ValueError("query matrices must share a shape")
    if k_u.shape != k_v.shape:
        raise ValueError("key matrices must share a shape")
    for name, mat in (("q_u", q_u), ("q_v", q_v), ("k_u", k_u), ("k_v", k_v)):
        _check_unit_rows(name, mat)
    return cross_view_infonce(q_u, k_v, pairs, tau) + cross_view_infonce(q_v, k_u, pairs, tau)
