"""Segmentation and multi-view contrastive objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .core import Tensor, diagonal, logsumexp, sqrt
from .core.tensor import as_tensor
from .errors import ConfigError, ContractError, NumericError, ShapeError

AXIAL, SAGITTAL, CORONAL = "axial", "sagittal", "coronal"

# (anchor, candidate) pairs; the axial view is on one side of every term
CONTRASTIVE_DIRECTIONS = (
    (AXIAL, SAGITTAL),
    (AXIAL, CORONAL),
    (SAGITTAL, AXIAL),
    (CORONAL, AXIAL),
)


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.07
    alpha: float = 0.25
    dice_eps: float = 1e-6

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.dice_eps < 0:
            raise ConfigError(f"dice_eps must be >= 0, got {self.dice_eps}")


def dice_loss(pred: Tensor, target, eps: float = 1e-6) -> Tensor:
    """Soft dice loss ``1 - (2 sum(p g) + eps) / (sum p + sum g + eps)``
    pooled over every pixel of the batch."""
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    g = Tensor(target)
    inter = (pred * g).sum()
    denom = pred.sum() + float(g.data.sum()) + eps
    return 1.0 - (inter * 2.0 + eps) / denom


def _unit_rows(x: Tensor) -> Tensor:
    sq = (x * x).sum(axis=1, keepdims=True)
    if np.any(sq.data <= 0):
        rows = np.flatnonzero(sq.data.reshape(-1) <= 0).tolist()
        raise NumericError(f"zero-norm embedding in rows {rows}")
    return x / sqrt(sq)


def info_nce(anchors, candidates, temperature: float = 0.07) -> Tensor:
    """Directed InfoNCE with cosine similarity, averaged over anchors.

    Row ``i`` of ``anchors`` and row ``i`` of ``candidates`` form the
    positive pair; every candidate row (positive included) enters the
    denominator.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    v, u = as_tensor(anchors), as_tensor(candidates)
    if v.ndim != 2 or v.shape != u.shape:
        raise ShapeError(f"anchors {v.shape} and candidates {u.shape} must be equal (N, D)")
    if v.shape[0] < 1:
        raise ShapeError("info_nce needs at least one pair")
    sim = (_unit_rows(v) @ _unit_rows(u).T) * (1.0 / temperature)
    # -log softmax_i(i) = logsumexp_k(s_ik - s_ii); shifting by the positive
    # keeps identical-embedding cases exact
    pos = diagonal(sim).reshape(-1, 1)
    return logsumexp(sim - pos, axis=1).mean()


def contrastive_terms(embeddings: Mapping[str, Tensor], temperature: float = 0.07) -> dict[tuple[str, str], Tensor]:
    """The directed terms whose views are all present in ``embeddings``."""
    if AXIAL not in embeddings:
        raise ContractError("contrastive loss needs the axial embeddings")
    n = {k: as_tensor(v).shape[0] for k, v in embeddings.items()}
    if len(set(n.values())) != 1:
        raise ShapeError(f"embedding batches are not row-aligned: {n}")
    return {
        (a, b): info_nce(embeddings[a], embeddings[b], temperature)
        for a, b in CONTRASTIVE_DIRECTIONS
        if a in embeddings and b in embeddings
    }


def contrastive_loss(embeddings: Mapping[str, Tensor], temperature: float = 0.07, *, allow_partial: bool = False) -> Tensor:
    """Sum of the four axial-anchored directed InfoNCE terms.

    With ``allow_partial`` a two-view batch is accepted and only the terms
    of the present views are summed.
    """
    missing = [v for v in (AXIAL, SAGITTAL, CORONAL) if v not in embeddings]
    if missing and not allow_partial:
        raise ContractError(f"contrastive loss needs all three views; missing {missing}")
    terms = contrastive_terms(embeddings, temperature)
    if not terms:
        raise ContractError("no contrastive term can be formed from a single view")
    total = None
    for t in terms.values():
        total = t if total is None else total + t
    return total


def total_loss(dice: Tensor, cont: Tensor | None, alpha: float) -> Tensor:
    """``alpha * dice + (1 - alpha) * cont``; ``alpha = 1`` disables the
    contrastive term."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if cont is None:
        if alpha != 1.0:
            raise ContractError("alpha < 1 requires a contrastive term")
        return dice * alpha
    return dice * alpha + cont * (1.0 - alpha)
