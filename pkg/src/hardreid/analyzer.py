"""Per-batch hard-sample assessment and distance-adjustment matrices.

A pair is a hard positive when the same person shows up in different
clothing (or from a different viewpoint), and a hard negative when two
different people wear the same clothing label. Assessment marks those
pairs; adjustment turns the marks into multiplicative distance scalings.
"""

from dataclasses import dataclass

import numpy as np

from .data import UNKNOWN, label_arrays
from .errors import ConfigError, ContractError


@dataclass(frozen=True, eq=False)
class AssessmentMatrices:
    """Boolean hard-positive / hard-negative pair masks for one batch.

    Symmetric, false on the diagonal, and mutually exclusive: a hard
    positive needs equal identities, a hard negative different ones.
    """

    is_hp: np.ndarray
    is_hn: np.ndarray
    n: int

    def __post_init__(self):
        for name, m in (("is_hp", self.is_hp), ("is_hn", self.is_hn)):
            if m.dtype != np.bool_ or m.shape != (self.n, self.n):
                raise ContractError(f"{name} must be a {self.n}x{self.n} boolean matrix")
            if not np.array_equal(m, m.T):
                raise ContractError(f"{name} must be symmetric")
            if m.diagonal().any():
                raise ContractError(f"{name} must have an all-false diagonal")
        if (self.is_hp & self.is_hn).any():
            raise ContractError("is_hp and is_hn must be disjoint")


@dataclass(frozen=True, eq=False)
class AdjustmentMatrices:
    """Distance scalings: 1+alpha on hard positives, 1-alpha on hard negatives."""

    hp_m: np.ndarray
    hn_m: np.ndarray
    alpha: float

    def __post_init__(self):
        if self.hp_m.shape != self.hn_m.shape or self.hp_m.ndim != 2:
            raise ContractError("hp_m and hn_m must be square matrices of equal shape")
        for name, m in (("hp_m", self.hp_m), ("hn_m", self.hn_m)):
            if not np.array_equal(m, m.T):
                raise ContractError(f"{name} must be symmetric")
            if not np.array_equal(m.diagonal(), np.ones(m.shape[0])):
                raise ContractError(f"{name} must have a unit diagonal")


def build_assessment_matrices(batch, viewpoint_hardness=True):
    """Mark hard-positive and hard-negative pairs in a batch of samples.

    UNKNOWN clothing differs from everything for the positive test (a
    generated sample with unlabeled clothing is presumed re-dressed) and
    matches nothing for the negative test. UNKNOWN viewpoints are never
    treated as different. The diagonal is always false.
    """
    if len(batch) == 0:
        raise ContractError("batch must be non-empty")
    y, c, v = label_arrays(batch)
    same_id = y[:, None] == y[None, :]
    c_unknown = c == UNKNOWN
    either_unknown = c_unknown[:, None] | c_unknown[None, :]
    clothing_differs = (c[:, None] != c[None, :]) | either_unknown
    clothing_matches = (c[:, None] == c[None, :]) & ~either_unknown
    v_known = v != UNKNOWN
    view_differs = (v[:, None] != v[None, :]) & v_known[:, None] & v_known[None, :]

    hard = clothing_differs
    if viewpoint_hardness:
        hard = hard | view_differs
    is_hp = same_id & hard
    is_hn = ~same_id & clothing_matches
    np.fill_diagonal(is_hp, False)
    np.fill_diagonal(is_hn, False)
    return AssessmentMatrices(is_hp=is_hp, is_hn=is_hn, n=len(batch))


def build_adjustment_matrices(assess, alpha):
    """Turn assessment masks into multiplicative distance adjustments."""
    if not 0.0 <= alpha < 1.0:
        raise ConfigError(f"alpha must be in [0, 1), got {alpha}")
    hp_m = 1.0 + alpha * assess.is_hp
    hn_m = 1.0 - alpha * assess.is_hn
    return AdjustmentMatrices(hp_m=hp_m, hn_m=hn_m, alpha=float(alpha))
