"""Distances, triplet losses (plain, adjusted, aggregated), cross-entropy.

Everything here returns analytic gradients alongside the loss value; the
trainer stitches them together and the gradient-check tests compare them
against central finite differences. Hot paths go through hardreid.kernels.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError

DISTANCE_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    """Pairwise distance matrix: symmetric, non-negative, zero diagonal."""

    d: np.ndarray
    squared: bool = False
    eps: float = DISTANCE_EPS

    def __post_init__(self):
        d = self.d
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ContractError(f"distance matrix must be square, got shape {d.shape}")
        if d.diagonal().any():
            raise ContractError("distance matrix must have a zero diagonal")
        if not np.array_equal(d, d.T):
            raise ContractError("distance matrix must be symmetric")
        if (d < 0.0).any():
            raise ContractError("distance matrix must be non-negative")

    @property
    def n(self):
        return self.d.shape[0]


@dataclass(frozen=True, eq=False)
class TripletResult:
    loss: float
    grad: np.ndarray
    num_active: int
    num_terms: int

    @property
    def all_skipped(self):
        """True when no anchor had both a positive and a negative."""
        return self.num_terms == 0


@dataclass(frozen=True, eq=False)
class AggregatedResult:
    loss: float
    grad: np.ndarray
    raw: TripletResult
    adjusted: TripletResult
    adj_weight: float


def pairwise_distance(features, eps=DISTANCE_EPS):
    """Euclidean distances d(i,j) = sqrt(||f_i - f_j||^2 + eps), zero diagonal.

    eps smooths the sqrt at duplicate rows so the backward pass stays finite.
    """
    f = np.ascontiguousarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 1:
        raise ContractError(f"features must be a non-empty (n, d) matrix, got shape {f.shape}")
    if eps < 0.0:
        raise ConfigError(f"eps must be >= 0, got {eps}")
    return DistanceMatrix(d=kernels.pairwise_distance(f, eps), squared=False, eps=eps)


def pairwise_distance_backward(features, dist, grad_dist):
    """Gradient of a scalar through the distance matrix back to the features."""
    if grad_dist.shape != dist.d.shape:
        raise ContractError(f"grad shape {grad_dist.shape} != distance shape {dist.d.shape}")
    return kernels.pairwise_distance_backward(features, dist.d, grad_dist)


def adjust_distances(dist, adj):
    """Scale each pair distance by its hard-positive / hard-negative factor."""
    if adj.hp_m.shape != dist.d.shape:
        raise ContractError(
            f"adjustment shape {adj.hp_m.shape} does not match distance shape {dist.d.shape}"
        )
    return DistanceMatrix(d=dist.d * adj.hp_m * adj.hn_m, squared=dist.squared, eps=dist.eps)


def _identity_vector(identities, n):
    y = np.ascontiguousarray(identities, dtype=np.int64)
    if y.shape != (n,):
        raise ContractError(f"identities shape {y.shape} does not match batch size {n}")
    return y


def triplet_loss(dist, identities, margin, mining="batch_hard"):
    """Hinge triplet loss on a distance matrix with in-batch mining.

    batch_hard uses each anchor's farthest positive and nearest negative;
    batch_all averages over every valid triplet. Anchors without a positive
    or a negative are skipped; if all are skipped the loss is 0 and the
    result's all_skipped flag is set. The gradient is with respect to the
    distance entries, with subgradient 0 at the hinge boundary.
    """
    code = kernels.mining_code(mining)
    y = _identity_vector(identities, dist.n)
    loss, grad, num_active, num_terms = kernels.triplet_forward_backward(
        dist.d, y, float(margin), code
    )
    return TripletResult(loss=loss, grad=grad, num_active=num_active, num_terms=num_terms)


def hsda_triplet_loss(dist, adj, identities, margin, mining="batch_hard"):
    """Triplet loss on adjusted distances, gradient w.r.t. the raw distances.

    Mining runs on the adjusted matrix; the chain rule multiplies the
    adjusted-distance gradient by the per-pair scaling factors, which is
    exactly how the hinge sees hard positives amplified by 1+alpha and hard
    negatives shrunk by 1-alpha.
    """
    adjusted = adjust_distances(dist, adj)
    res = triplet_loss(adjusted, identities, margin, mining)
    grad_raw = res.grad * adj.hp_m * adj.hn_m
    return TripletResult(
        loss=res.loss, grad=grad_raw, num_active=res.num_active, num_terms=res.num_terms
    )


def aggregated_triplet_loss(dist, adj, identities, margin, mining="batch_hard", adj_weight=0.5):
    """Sum of the plain triplet loss and adj_weight times the adjusted one."""
    raw = triplet_loss(dist, identities, margin, mining)
    adjusted = hsda_triplet_loss(dist, adj, identities, margin, mining)
    return AggregatedResult(
        loss=raw.loss + adj_weight * adjusted.loss,
        grad=raw.grad + adj_weight * adjusted.grad,
        raw=raw,
        adjusted=adjusted,
        adj_weight=adj_weight,
    )


def cross_entropy(logits, targets):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits.

    targets are dense 0-based class indices. Softmax is computed with
    max-subtraction; grad = (softmax - one_hot) / batch_size.
    """
    z = np.ascontiguousarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] < 2:
        raise ContractError(f"logits must be (n, C) with C >= 2, got shape {z.shape}")
    n, c = z.shape
    t = np.ascontiguousarray(targets, dtype=np.int64)
    if t.shape != (n,):
        raise ContractError(f"targets shape {t.shape} does not match logits rows {n}")
    if t.min() < 0 or t.max() >= c:
        raise ContractError(f"targets must lie in [0, {c}), got range [{t.min()}, {t.max()}]")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    loss = float(-log_p[np.arange(n), t].mean())
    grad = np.exp(log_p)
    grad[np.arange(n), t] -= 1.0
    grad /= n
    return loss, grad


def total_loss(l_cls, l_hatrip, lam):
    """Overall objective: classification plus lam times the aggregated triplet."""
    if lam < 0.0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    return l_cls + lam * l_hatrip


@dataclass(frozen=True)
class LossReport:
    """Per-step loss breakdown; construction re-checks the combination identities."""

    l_cls: float
    l_tri_raw: float
    l_tri_adj: float
    l_hatrip: float
    l_total: float
    active_triplets_raw: int
    active_triplets_adj: int
    lam: float
    adj_weight: float = 0.5

    def __post_init__(self):
        if min(self.l_cls, self.l_tri_raw, self.l_tri_adj) < 0.0:
            raise ContractError("loss components must be non-negative")
        if abs(self.l_hatrip - (self.l_tri_raw + self.adj_weight * self.l_tri_adj)) > 1e-12:
            raise ContractError("l_hatrip does not match its components")
        if abs(self.l_total - (self.l_cls + self.lam * self.l_hatrip)) > 1e-12:
            raise ContractError("l_total does not match its components")
