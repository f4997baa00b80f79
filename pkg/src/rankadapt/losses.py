"""Pair construction and the combined regression + ranking objective.

The regression term is a Smooth-L1 between predicted and target scores,
averaged over the batch. The ranking term is a margin hinge over ordered
pairs (i, j) with y_i > y_j, encouraging the pairwise head output above 1.
By default the hinge is averaged over the emitted pairs so its weight does
not grow quadratically with batch size; sum_rank=True keeps the raw sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass
class PairSet:
    """Ordered index pairs (i, j) into a batch, each with y_i > y_j."""

    pairs: list = field(default_factory=list)
    eligible: int = 0  # how many ordered pairs were eligible before sampling

    def __len__(self):
        return len(self.pairs)

    @property
    def is_empty(self) -> bool:
        return not self.pairs

    def index_arrays(self):
        if not self.pairs:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        arr = np.asarray(self.pairs, dtype=np.int64)
        return arr[:, 0], arr[:, 1]


def parse_pair_mode(mode: str):
    """'all' -> (all, None); 'sampled:k' -> (sampled, k)."""
    if mode == "all":
        return "all", None
    if mode.startswith("sampled:"):
        k = int(mode.split(":", 1)[1])
        if k < 1:
            raise ValueError(f"sampled pair count must be >= 1, got {k}")
        return "sampled", k
    raise ValueError(f"unknown pair mode {mode!r}; expected 'all' or 'sampled:<k>'")


def build_pairs(y, mode: str = "all", rng: ad.Rng | None = None, groups=None) -> PairSet:
    """Enumerate or sample ordered pairs with strictly greater target score.

    groups, when given, restricts pairs to items sharing a group label
    (items from different queries are never compared). Ties never pair.
    'sampled:k' draws k eligible pairs uniformly with replacement and
    requires an rng; zero eligible pairs yields an empty set either way.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise ValueError(f"scores must be 1-D, got shape {y.shape}")
    if groups is not None and len(groups) != len(y):
        raise ValueError("groups length must match scores length")
    kind, k = parse_pair_mode(mode)

    eligible = []
    n = len(y)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if groups is not None and groups[i] != groups[j]:
                continue
            if y[i] > y[j]:
                eligible.append((i, j))

    if kind == "all":
        return PairSet(pairs=eligible, eligible=len(eligible))
    if rng is None:
        raise ValueError("sampled pair mode needs an rng")
    if not eligible:
        return PairSet(pairs=[], eligible=0)
    picks = rng.integers(0, len(eligible), size=k)
    return PairSet(pairs=[eligible[int(p)] for p in picks], eligible=len(eligible))


def smooth_l1(y: float, s: float) -> float:
    """Pointwise Smooth-L1 between target y and prediction s."""
    e = abs(float(y) - float(s))
    return 0.5 * e * e if e < 1.0 else e - 0.5


def smooth_l1_terms(scores: ad.Tensor, targets) -> ad.Tensor:
    """Elementwise Smooth-L1 of predictions against constant targets.

    Quadratic inside the unit error band, linear outside; the two branches
    meet with matching value and slope at |error| = 1.
    """
    targets = np.asarray(targets, dtype=scores.dtype)
    if targets.shape != scores.shape:
        raise ad.ShapeError(f"targets shape {targets.shape} vs scores {scores.shape}")
    err = ad.add_const(scores, -targets)  # s - y; symmetric under sign
    inside = np.abs(err.values) < 1.0
    quad = ad.scale(ad.mul(err, err), 0.5)
    lin = ad.add_const(ad.absolute(err), -0.5)
    return ad.add(ad.mul_const(quad, inside.astype(scores.dtype)),
                  ad.mul_const(lin, (~inside).astype(scores.dtype)))


def hinge_rank(pair_outputs: ad.Tensor) -> ad.Tensor:
    """Sum over pairs of max(0, 1 - O_ij); zero once every output clears 1."""
    margins = ad.relu(ad.add_const(ad.scale(pair_outputs, -1.0), 1.0))
    return ad.sum_over(margins)


@dataclass
class LossBreakdown:
    """Scalar loss tensors for one batch; total = alpha * l_reg + l_rank."""

    l_reg: ad.Tensor
    l_rank: ad.Tensor
    total: ad.Tensor
    alpha: float

    @property
    def reg_value(self) -> float:
        return self.l_reg.item()

    @property
    def rank_value(self) -> float:
        return self.l_rank.item()

    @property
    def total_value(self) -> float:
        return self.total.item()


def combined_loss(scores: ad.Tensor, targets, pair_outputs: ad.Tensor | None,
                  alpha: float = 0.2, sum_rank: bool = False) -> LossBreakdown:
    """Weighted regression term plus ranking hinge.

    The regression term is averaged over the batch. The hinge is averaged
    over pairs unless sum_rank, which keeps the literal sum. An empty or
    missing pair set contributes exactly zero ranking loss.
    """
    if scores.values.ndim != 1 or scores.values.size == 0:
        raise ad.ShapeError(f"scores must be a nonempty vector, got {scores.shape}")
    l_reg = ad.mean_over(smooth_l1_terms(scores, targets))
    n_pairs = 0 if pair_outputs is None else pair_outputs.values.size
    if n_pairs:
        l_rank = hinge_rank(pair_outputs)
        if not sum_rank:
            l_rank = ad.scale(l_rank, 1.0 / n_pairs)
    else:
        l_rank = ad.tensor(np.zeros((), dtype=scores.dtype))
    total = ad.add(ad.scale(l_reg, alpha), l_rank) if n_pairs else ad.scale(l_reg, alpha)
    return LossBreakdown(l_reg=l_reg, l_rank=l_rank, total=total, alpha=float(alpha))
