"""Distances and the CMIL objective: identity, batch-all triplet and alignment losses."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import torch

__all__ = [
    "DISTANCES",
    "LossConfig",
    "BatchLossReport",
    "distance",
    "pairwise_distance",
    "identity_loss",
    "triplet_loss_batch_all",
    "alignment_loss",
    "total_loss",
    "degenerate_counts",
    "EPS_PROB",
]

DISTANCES = ("euclidean", "cosine")
EPS_PROB = 1e-12

# Incremented whenever a degenerate input is patched up: a zero vector under
# cosine distance, or a predicted probability clamped before the log.
degenerate_counts: Counter = Counter()


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.0
    m_triplet: float = 0.5
    m_align: float = 0.5
    distance: str = "euclidean"

    def __post_init__(self):
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}, got {self.distance!r}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.alpha <= 0 and self.beta <= 0:
            raise ValueError("at least one of alpha (triplet) and beta (identity) must be positive")
        if self.m_triplet < 0 or self.m_align < 0:
            raise ValueError("margins must be nonnegative")


@dataclass
class BatchLossReport:
    """Loss components of one batch; tensors keep the autograd graph."""

    total: torch.Tensor
    triplet: torch.Tensor
    ce: torch.Tensor
    align: torch.Tensor
    num_valid_triplets: int

    def as_floats(self) -> dict[str, float]:
        return {
            "total": float(self.total.detach()),
            "triplet": float(self.triplet.detach()),
            "ce": float(self.ce.detach()),
            "align": float(self.align.detach()),
        }


def _safe_norm(x: torch.Tensor) -> torch.Tensor:
    # zero-norm rows get norm 0 and gradient 0 instead of NaN
    sq = (x * x).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def distance(u: torch.Tensor, v: torch.Tensor, kind: str = "euclidean") -> torch.Tensor:
    """Distance along the last axis, broadcasting over leading axes.

    ``cosine`` is ``1 - cos(u, v)`` in [0, 2]; a zero vector is treated as
    orthogonal to everything (distance 1).
    """
    u = torch.as_tensor(u, dtype=torch.float64)
    v = torch.as_tensor(v, dtype=torch.float64)
    if u.shape[-1] != v.shape[-1]:
        raise ValueError(f"dimension mismatch: {u.shape[-1]} vs {v.shape[-1]}")
    if kind == "euclidean":
        return _safe_norm(u - v)
    if kind == "cosine":
        nu, nv = _safe_norm(u), _safe_norm(v)
        denom = nu * nv
        ok = denom > 0
        n_bad = int((~ok).sum())
        if n_bad:
            degenerate_counts["cosine_zero_vector"] += n_bad
        cos = (u * v).sum(-1) / torch.where(ok, denom, torch.ones_like(denom))
        return torch.where(ok, 1.0 - cos, torch.ones_like(cos))
    raise ValueError(f"unknown distance {kind!r}")


def pairwise_distance(x: torch.Tensor, y: torch.Tensor, kind: str = "euclidean") -> torch.Tensor:
    """(N, D) x (M, D) -> (N, M) distance matrix."""
    return distance(x.unsqueeze(-2), y.unsqueeze(-3), kind)


def identity_loss(probs: torch.Tensor, labels) -> torch.Tensor:
    """Mean cross entropy ``-log p[label]`` over rows; probabilities clamped at 1e-12."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    picked = probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    n_clamped = int((picked < EPS_PROB).sum())
    if n_clamped:
        degenerate_counts["ce_clamped"] += n_clamped
    return -torch.log(picked.clamp_min(EPS_PROB)).mean()


def _label_codes(labels: Sequence) -> torch.Tensor:
    if torch.is_tensor(labels):
        return labels
    index: dict = {}
    return torch.tensor([index.setdefault(lab, len(index)) for lab in labels])


def triplet_loss_batch_all(
    reps: torch.Tensor, labels: Sequence, margin: float, kind: str = "euclidean"
) -> tuple[torch.Tensor, int]:
    """Mean triplet hinge over every valid (anchor, positive, negative).

    A triplet is valid when anchor != positive share a label and the negative
    has a different label.
    """
    codes = _label_codes(labels)
    d = pairwise_distance(reps, reps, kind)
    same = codes.unsqueeze(0) == codes.unsqueeze(1)
    not_self = ~torch.eye(len(codes), dtype=torch.bool)
    valid = (same & not_self).unsqueeze(2) & (~same).unsqueeze(1)
    count = int(valid.sum())
    if count == 0:
        raise ValueError("batch contains no valid triplet; every label needs 2 sub-bags and a negative")
    hinge = torch.relu(d.unsqueeze(2) - d.unsqueeze(1) + margin)
    return hinge[valid].sum() / count, count


def alignment_loss(r: torch.Tensor, crop_embs: torch.Tensor, margin: float, kind: str = "euclidean") -> torch.Tensor:
    """``max(0, min_j d(r, z_j) - margin)``.

    ``r`` is (D,) with ``crop_embs`` (S, D), or batched (B, D) with (B, S, D),
    in which case a (B,) tensor is returned.
    """
    if crop_embs.shape[-2] == 0:
        raise ValueError("alignment loss needs at least one crop embedding")
    d = distance(r.unsqueeze(-2), crop_embs, kind)
    return torch.relu(d.amin(-1) - margin)


def total_loss(
    reps: torch.Tensor,
    crop_embs: torch.Tensor,
    probs: torch.Tensor,
    labels: Sequence,
    class_ids,
    cfg: LossConfig,
) -> BatchLossReport:
    """Weighted objective ``alpha*triplet + beta*ce + gamma*align``.

    ``labels`` are the sub-bag labels used for triplet validity and
    ``class_ids`` their classifier indices. Alignment is always computed so it
    can be logged, even with ``gamma == 0``.
    """
    trip, n_valid = triplet_loss_batch_all(reps, labels, cfg.m_triplet, cfg.distance)
    ce = identity_loss(probs, class_ids)
    align = alignment_loss(reps, crop_embs, cfg.m_align, cfg.distance).mean()
    total = cfg.alpha * trip + cfg.beta * ce + cfg.gamma * align
    return BatchLossReport(total, trip, ce, align, n_valid)
