"""NumPy reference implementations of the training hot kernels.

These are the fallback backend when the compiled extension is unavailable
and the ground truth the extension is tested against. All functions take
and return float64 arrays; labels are int64.
"""

import numpy as np

BACKEND_NAME = "python"

MINING_BATCH_HARD = 0
MINING_BATCH_ALL = 1


def pairwise_distance(features, eps):
    """Smoothed Euclidean distance matrix, d(i,j) = sqrt(||f_i-f_j||^2 + eps).

    The diagonal is forced to exactly 0 regardless of eps.
    """
    f = np.ascontiguousarray(features, dtype=np.float64)
    diff = f[:, None, :] - f[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    d = np.sqrt(sq + eps)
    np.fill_diagonal(d, 0.0)
    return d


def pairwise_distance_backward(features, dist, grad_dist):
    """Backpropagate a gradient on the distance matrix to the features.

    Entries (i,j) and (j,i) are treated as independent outputs that both
    depend on f_i and f_j; the forced-zero diagonal carries no gradient.
    Pairs at exactly zero distance contribute zero (subgradient choice).
    """
    f = np.ascontiguousarray(features, dtype=np.float64)
    d = np.asarray(dist, dtype=np.float64)
    g = np.asarray(grad_dist, dtype=np.float64)
    safe = np.where(d > 0.0, d, 1.0)
    w = np.where(d > 0.0, (g + g.T) / safe, 0.0)
    np.fill_diagonal(w, 0.0)
    return w.sum(axis=1)[:, None] * f - w @ f


def triplet_forward_backward(dist, labels, margin, mining):
    """Triplet hinge loss on a distance matrix with in-batch mining.

    batch_hard: per anchor, hardest positive vs hardest negative, hinge
    averaged over anchors that have at least one of each; batch_all:
    hinge averaged over every valid (a, p, n) triplet. Ties in the
    mining argmax/argmin resolve to the lowest index. Returns
    (loss, grad_wrt_dist, num_active, num_terms) where num_terms is the
    averaging denominator (anchors used resp. valid triplets); a zero
    num_terms means every anchor was skipped and the loss is 0.
    """
    d = np.asarray(dist, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = d.shape[0]
    same = y[:, None] == y[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    grad = np.zeros_like(d)

    if mining == MINING_BATCH_HARD:
        valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
        n_valid = int(valid.sum())
        if n_valid == 0:
            return 0.0, grad, 0, 0
        pd = np.where(pos_mask, d, -np.inf)
        nd = np.where(neg_mask, d, np.inf)
        p_star = pd.argmax(axis=1)
        n_star = nd.argmin(axis=1)
        hinge = np.zeros(n)
        hinge[valid] = np.maximum(
            0.0, pd.max(axis=1)[valid] - nd.min(axis=1)[valid] + margin
        )
        loss = float(hinge[valid].sum() / n_valid)
        active = valid & (hinge > 0.0)
        rows = np.nonzero(active)[0]
        coeff = 1.0 / n_valid
        grad[rows, p_star[rows]] += coeff
        grad[rows, n_star[rows]] -= coeff
        return loss, grad, int(active.sum()), n_valid

    if mining == MINING_BATCH_ALL:
        tri_mask = pos_mask[:, :, None] & neg_mask[:, None, :]
        n_terms = int(tri_mask.sum())
        if n_terms == 0:
            return 0.0, grad, 0, 0
        hinge = d[:, :, None] - d[:, None, :] + margin
        active = tri_mask & (hinge > 0.0)
        loss = float(np.where(active, hinge, 0.0).sum() / n_terms)
        coeff = 1.0 / n_terms
        grad += active.sum(axis=2) * coeff
        grad -= active.sum(axis=1) * coeff
        return loss, grad, int(active.sum()), n_terms

    raise ValueError(f"unknown mining code: {mining!r}")
