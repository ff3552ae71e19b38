"""Per-batch importance weights from score-model outputs.

Softmax weights use max-subtraction and a correctly rounded denominator
(``math.fsum`` / exact rational partial sums).  A batch's denominator is
therefore bit-identical whether it is reduced in one piece or across any
number of logical shards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
import torch

from .autodiff import ParamVector, ShapeError

MODES = ("softmax", "naive")


class WeightingError(ValueError):
    pass


@dataclass(frozen=True)
class ShardLayout:
    sizes: tuple[int, ...]

    @property
    def num_shards(self) -> int:
        return len(self.sizes)

    @property
    def total(self) -> int:
        return sum(self.sizes)

    @classmethod
    def even(cls, n: int, num_shards: int) -> "ShardLayout":
        """Split ``n`` samples into ``num_shards`` contiguous shards, sizes within ±1."""
        k = max(1, min(num_shards, n))
        base, extra = divmod(n, k)
        return cls(tuple(base + (1 if i < extra else 0) for i in range(k)))


@dataclass(frozen=True)
class ScoreBatch:
    shard_id: int
    sample_indices: tuple[int, ...]
    scores: tuple[float, ...]

    def __post_init__(self):
        if len(self.sample_indices) != len(self.scores):
            raise WeightingError(f"shard {self.shard_id}: indices and scores differ in length")
        if not all(math.isfinite(s) for s in self.scores):
            raise WeightingError(f"shard {self.shard_id}: non-finite score")


@dataclass(frozen=True, eq=False)
class ImportanceWeights:
    weights: np.ndarray
    denominator: float  # Σ exp(s_j), unshifted; may overflow to inf for huge raw scores
    log_denominator: float
    layout: ShardLayout
    mode: str = "softmax"

    def __len__(self) -> int:
        return len(self.weights)


def softmax_weights(scores: Sequence[float]) -> ImportanceWeights:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise WeightingError("cannot weight an empty batch")
    if not np.isfinite(s).all():
        raise WeightingError("non-finite score")
    m = float(s.max())
    e = np.exp(s - m)
    den = math.fsum(e.tolist())
    return _finish(e, den, m, ShardLayout((s.size,)))


def naive_weights(scores: Sequence[float]) -> ImportanceWeights:
    """Raw scores used as weights, scaled by 1/B so equal scores of 1 give the plain mean."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise WeightingError("cannot weight an empty batch")
    total = math.fsum(s.tolist())
    return ImportanceWeights(s / s.size, total, math.log(total) if total > 0 else -math.inf,
                             ShardLayout((s.size,)), "naive")


def _finish(e: np.ndarray, den: float, m: float, layout: ShardLayout) -> ImportanceWeights:
    log_den = m + math.log(den)
    try:
        unshifted = math.exp(log_den)
    except OverflowError:
        unshifted = math.inf
    return ImportanceWeights(e / den, unshifted, log_den, layout, "softmax")


def sharded_weights(shards: Sequence[ScoreBatch]) -> ImportanceWeights:
    """Softmax over the concatenation of shards via three collective phases.

    1. every shard reports its local maximum; the global maximum is reduced;
    2. every shard reports its exact partial sum of ``exp(s - max)``; these
       are reduced without rounding and rounded once;
    3. every shard normalises its own weights with the shared denominator.

    Reductions run in ascending ``shard_id`` order.
    """
    if not shards:
        raise WeightingError("no shards")
    shards = sorted(shards, key=lambda b: b.shard_id)
    if [b.shard_id for b in shards] != list(range(len(shards))):
        raise WeightingError(f"shard ids must be 0..{len(shards) - 1}")
    if any(len(b.scores) == 0 for b in shards):
        raise WeightingError("empty shard")
    layout = ShardLayout(tuple(len(b.scores) for b in shards))

    # phase 1
    local_max = [max(b.scores) for b in shards]
    m = max(local_max)
    # phase 2
    local_exp = [np.exp(np.asarray(b.scores, dtype=np.float64) - m) for b in shards]
    partial = [sum((Fraction(float(x)) for x in e), Fraction(0)) for e in local_exp]
    den = float(sum(partial, Fraction(0)))
    # phase 3
    weights = np.concatenate([e / den for e in local_exp])
    return _assemble(weights, den, m, layout)


def _assemble(weights: np.ndarray, den: float, m: float, layout: ShardLayout) -> ImportanceWeights:
    w = _finish(np.ones(1), den, m, layout)
    return ImportanceWeights(weights, w.denominator, w.log_denominator, layout, "softmax")


def split_scores(scores: Sequence[float], layout: ShardLayout) -> list[ScoreBatch]:
    if layout.total != len(scores):
        raise WeightingError(f"layout covers {layout.total} samples, batch has {len(scores)}")
    out, lo = [], 0
    for k, size in enumerate(layout.sizes):
        out.append(ScoreBatch(k, tuple(range(lo, lo + size)), tuple(float(x) for x in scores[lo:lo + size])))
        lo += size
    return out


def batch_weights(scores: Sequence[float], num_shards: int = 1, mode: str = "softmax") -> ImportanceWeights:
    """Importance weights for one mini-batch under the configured mode and shard count."""
    if mode == "naive":
        return naive_weights(scores)
    if mode != "softmax":
        raise WeightingError(f"unknown weighting mode {mode!r}")
    return sharded_weights(split_scores(scores, ShardLayout.even(len(scores), num_shards)))


def torch_weights(h: torch.Tensor, mode: str = "softmax") -> torch.Tensor:
    """Differentiable counterpart of :func:`batch_weights`, used for autodiff cross-checks."""
    if mode == "naive":
        return h / h.shape[0]
    return torch.softmax(h, dim=0)


def contraction_coefficients(weights: ImportanceWeights, scalars: Sequence[float]) -> np.ndarray:
    """Coefficients k_i with Σ_i (∂P_i/∂θs) c_i = Σ_i k_i ∇θs h_i."""
    p = np.asarray(weights.weights, dtype=np.float64)
    c = np.asarray(scalars, dtype=np.float64)
    if weights.mode == "naive":
        return c / len(c)
    cbar = math.fsum((p * c).tolist())
    return p * (c - cbar)


def weight_jacobian_contraction(
    weights: ImportanceWeights,
    head_grads: Sequence[ParamVector],
    scalars: Sequence[float],
) -> ParamVector:
    """Return Σ_i (∂P_i/∂θs) c_i given per-sample score gradients ∇θs h_i.

    For softmax weights this is Σ_i P_i (c_i - Σ_j P_j c_j) ∇θs h_i; for naive
    weights it is Σ_i c_i ∇θs h_i / B.  The caller applies any outer sign.
    """
    n = len(weights)
    if len(head_grads) != n or len(scalars) != n:
        raise WeightingError(
            f"length mismatch: {n} weights, {len(head_grads)} gradients, {len(scalars)} scalars"
        )
    like = head_grads[0]
    for g in head_grads[1:]:
        if not g.conformant(like):
            raise ShapeError("per-sample score gradients are not conformant")
    coef = contraction_coefficients(weights, scalars)
    flats = torch.stack([g.flat() for g in head_grads])
    coef_t = torch.as_tensor(coef, dtype=flats.dtype)
    return ParamVector.from_flat(coef_t @ flats, like)
