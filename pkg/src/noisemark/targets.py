"""Per-sample label-distribution targets estimated from batch neighborhoods.

For each sample the batch is searched for nearest neighbors by cosine
similarity, independently in the expression-feature space and the
landmark-feature space. A small learned scorer weighs each neighbor's
predicted distribution, the weighted averages of the two spaces are blended,
and an exponential moving average across epochs smooths the result into the
persistent per-sample target used by the KL term and pseudo-labeling.

Neighbor predictions are treated as constants: gradients reach the scorer
networks only, never the backbone through the neighbors.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn

from .core import validate_distribution
from .models import DTYPE, init_module

_ZERO_NORM_TOL = 1e-12


def cosine_similarity_matrix(features: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities of the rows of `features`.

    Raises ValueError when a row has (near-)zero norm.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] == 0:
        raise ValueError(f"expected a non-empty 2-d feature matrix, got shape {f.shape}")
    norms = np.linalg.norm(f, axis=1)
    if np.any(norms < _ZERO_NORM_TOL):
        raise ValueError(f"zero-norm feature row at index {int(np.argmin(norms))}")
    unit = f / norms[:, None]
    return np.clip(unit @ unit.T, -1.0, 1.0)


def knn_neighbors(sim_row: np.ndarray, k: int, self_index: int | None = None) -> np.ndarray:
    """Indices of the k most similar entries of one similarity row.

    `self_index`, when given, is excluded. Ties are broken toward the lower
    index; results are ordered by decreasing similarity.
    """
    s = np.asarray(sim_row, dtype=np.float64)
    if s.ndim != 1:
        raise ValueError(f"expected a 1-d similarity row, got shape {s.shape}")
    available = s.size - (1 if self_index is not None else 0)
    if not 1 <= k <= available:
        raise ValueError(f"k={k} out of range for {available} candidates")
    order = np.argsort(-s, kind="stable")
    if self_index is not None:
        order = order[order != self_index]
    return order[:k]


def knn_matrix(sim: np.ndarray, k: int) -> np.ndarray:
    """Row-wise k nearest neighbors of a square similarity matrix, excluding
    each row's own index. Same tie rule as knn_neighbors."""
    s = np.asarray(sim, dtype=np.float64)
    n = s.shape[0]
    if s.ndim != 2 or s.shape[1] != n:
        raise ValueError(f"expected a square matrix, got shape {s.shape}")
    if not 1 <= k < n:
        raise ValueError(f"k={k} out of range for batch of {n}")
    order = np.argsort(-s, axis=1, kind="stable")
    keep = order != np.arange(n)[:, None]
    return order[keep].reshape(n, n - 1)[:, :k]


class ContributionScorer(nn.Module):
    """Learned pairwise neighbor weights for one feature space.

    Anchor and neighbor features pass through separate embedding MLPs; their
    concatenation is scored by a third MLP and squashed through a sigmoid, so
    every score lies in (0, 1). The sigmoid output is floored at a tiny
    constant: float64 sigmoid underflows to exactly 0 when deeply saturated,
    which would break the positivity requirement downstream.
    """

    SCORE_FLOOR = 1e-12

    def __init__(self, feature_dim: int, gen: torch.Generator,
                 hidden_dim: int = 64, embed_dim: int = 64):
        super().__init__()
        def mlp(d_in, d_out):
            return nn.Sequential(nn.Linear(d_in, hidden_dim, dtype=DTYPE), nn.ReLU(),
                                 nn.Linear(hidden_dim, d_out, dtype=DTYPE))
        self.anchor_embed = init_module(mlp(feature_dim, embed_dim), gen)
        self.neighbor_embed = init_module(mlp(feature_dim, embed_dim), gen)
        self.pair_score = init_module(mlp(2 * embed_dim, 1), gen)

    def pair_scores(self, features: torch.Tensor, anchors: torch.Tensor,
                    neighbors: torch.Tensor) -> torch.Tensor:
        """Scores for explicit (anchor, neighbor) index pairs."""
        a = self.anchor_embed(features)[anchors]
        b = self.neighbor_embed(features)[neighbors]
        raw = torch.sigmoid(self.pair_score(torch.cat([a, b], dim=1)))
        return raw.clamp_min(self.SCORE_FLOOR).squeeze(1)

    def score_neighbors(self, features: torch.Tensor, neighbor_idx: torch.Tensor
                        ) -> torch.Tensor:
        """Scores of shape (n, k) for each row's neighbor list."""
        n, k = neighbor_idx.shape
        a = self.anchor_embed(features)
        b = self.neighbor_embed(features)[neighbor_idx]          # (n, k, e)
        pairs = torch.cat([a.unsqueeze(1).expand(-1, k, -1), b], dim=2)
        return torch.sigmoid(self.pair_score(pairs)).clamp_min(self.SCORE_FLOOR).squeeze(2)


def contribution_scores(scorer: ContributionScorer, features: torch.Tensor,
                        neighbor_idx) -> torch.Tensor:
    """Convenience wrapper: scores for each row's neighbor list."""
    idx = torch.as_tensor(np.asarray(neighbor_idx), dtype=torch.long)
    return scorer.score_neighbors(features, idx)


def aggregate_targets(preds: torch.Tensor, neighbors_u, scores_u: torch.Tensor,
                      neighbors_v=None, scores_v: torch.Tensor | None = None
                      ) -> torch.Tensor:
    """Blend neighbor predictions into fresh per-sample targets.

    Each space contributes the score-weighted average of its neighbors'
    predicted distributions; with both spaces present the result is their
    mean. Predictions are detached; gradients flow only through the scores.
    """
    p = preds.detach()

    def pool(neighbor_idx, scores):
        idx = torch.as_tensor(np.asarray(neighbor_idx), dtype=torch.long)
        if idx.ndim != 2 or idx.shape[1] == 0:
            raise ValueError("neighbor index matrix must be (n, k) with k >= 1")
        if scores.shape != idx.shape:
            raise ValueError(f"scores shape {tuple(scores.shape)} != neighbors {tuple(idx.shape)}")
        if bool((scores <= 0).any()):
            raise ValueError("contribution scores must be positive")
        weights = scores / scores.sum(dim=1, keepdim=True)
        return torch.einsum("nk,nkc->nc", weights, p[idx])

    if (neighbors_v is None) != (scores_v is None):
        raise ValueError("neighbors_v and scores_v must be given together")
    d = pool(neighbors_u, scores_u)
    if neighbors_v is not None:
        d = 0.5 * (d + pool(neighbors_v, scores_v))
    return d / d.sum(dim=1, keepdim=True)


class TargetStore:
    """Persistent per-sample target distributions with epoch-wise EMA updates."""

    def __init__(self, ids, distributions: np.ndarray, epoch: int = 0):
        self.ids = np.asarray(ids, dtype=np.int64)
        self._row = {int(sid): i for i, sid in enumerate(self.ids)}
        if len(self._row) != self.ids.size:
            raise ValueError("duplicate ids in target store")
        mat = np.asarray(distributions, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[0] != self.ids.size:
            raise ValueError(f"distribution matrix shape {mat.shape} does not match ids")
        for row in mat:
            validate_distribution(row)
        self.distributions = mat.copy()
        self.epoch = int(epoch)

    @classmethod
    def from_labels(cls, ids, labels, num_classes: int, smoothing: float = 0.05
                    ) -> "TargetStore":
        """Initialize every target as the given label smoothed with a little
        uniform mass, so no class starts at exactly zero."""
        labels = np.asarray(labels, dtype=np.int64)
        eye = (1.0 - smoothing) * np.eye(num_classes) + smoothing / num_classes
        return cls(ids, eye[labels])

    def __len__(self) -> int:
        return self.ids.size

    @property
    def num_classes(self) -> int:
        return self.distributions.shape[1]

    def _rows(self, ids) -> np.ndarray:
        try:
            return np.array([self._row[int(s)] for s in np.asarray(ids).ravel()])
        except KeyError as exc:
            raise KeyError(f"unknown sample id {exc.args[0]}") from None

    def get(self, ids) -> np.ndarray:
        return self.distributions[self._rows(ids)]

    def ema_update(self, fresh: Mapping[int, np.ndarray], omega: float) -> None:
        """Blend fresh targets into the store and advance the epoch counter.

        Each updated row becomes omega * previous + (1 - omega) * fresh,
        renormalized. Samples absent from `fresh` keep their previous target.
        """
        if not 0.0 <= omega < 1.0:
            raise ValueError(f"omega must lie in [0, 1), got {omega}")
        if fresh:
            ids = list(fresh.keys())
            rows = self._rows(ids)
            mat = np.stack([validate_distribution(fresh[i]) for i in ids])
            blended = omega * self.distributions[rows] + (1.0 - omega) * mat
            blended /= blended.sum(axis=1, keepdims=True)
            for row in blended:
                validate_distribution(row)
            self.distributions[rows] = blended
        self.epoch += 1

    def argmax_labels(self) -> np.ndarray:
        return self.distributions.argmax(axis=1)

    def as_dict(self) -> dict[int, np.ndarray]:
        return {int(sid): self.distributions[i].copy() for i, sid in enumerate(self.ids)}

    def state(self) -> dict:
        return {"ids": self.ids.copy(), "distributions": self.distributions.copy(),
                "epoch": self.epoch}

    @classmethod
    def from_state(cls, state: dict) -> "TargetStore":
        return cls(state["ids"], state["distributions"], state["epoch"])


def export_targets_csv(store: TargetStore, path: str | Path) -> None:
    """Write the store as CSV: id, d_1 .. d_C."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + [f"d_{j + 1}" for j in range(store.num_classes)])
        for i, sid in enumerate(store.ids):
            writer.writerow([int(sid)] + [repr(float(x)) for x in store.distributions[i]])
