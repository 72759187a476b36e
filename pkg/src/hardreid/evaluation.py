"""Retrieval evaluation: CMC (Rank-k) and mAP under clothing protocols.

The cloth-changing protocol removes same-identity same-clothing gallery
entries, so a model can only score by recognizing the person across
outfits; the same-clothes protocol keeps exactly those entries instead.
The gap between the two is the clothing-shortcut signature this package's
scenarios are built to expose.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .data import UNKNOWN, stack_features
from .errors import ConfigError, ContractError

MODES = ("standard", "cloth_changing", "same_clothes")

DEFAULT_RANKS = (1, 5, 10)


@dataclass(frozen=True)
class EvalProtocol:
    mode: str = "cloth_changing"
    exclude_same_camera: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass(frozen=True, eq=False)
class EvalReport:
    """Metrics are None (undefined, not 0) when no query was usable."""

    rank_k: dict
    map_score: float | None
    num_queries_used: int
    num_queries_skipped: int
    per_query_ap: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if self.num_queries_used == 0:
            if self.map_score is not None or any(v is not None for v in self.rank_k.values()):
                raise ContractError("metrics must be undefined when no query was usable")
            return
        values = [self.rank_k[k] for k in sorted(self.rank_k)]
        if any(not 0.0 <= v <= 1.0 for v in values) or not 0.0 <= self.map_score <= 1.0:
            raise ContractError("metrics must lie in [0, 1]")
        if any(a > b for a, b in zip(values, values[1:])):
            raise ContractError("rank-k accuracy must be nondecreasing in k")

    def to_dict(self):
        return {
            "rank_k": {str(k): v for k, v in sorted(self.rank_k.items())},
            "map": self.map_score,
            "num_queries_used": self.num_queries_used,
            "num_queries_skipped": self.num_queries_skipped,
        }


def valid_gallery_mask(query, gallery, protocol):
    """Boolean (valid, positive) masks of the gallery for one query.

    Camera exclusion drops same-identity entries seen by the same camera
    (only when both viewpoints are known). Clothing comparisons likewise
    require both labels: an UNKNOWN garment is never "the same clothing".
    """
    y = np.fromiter((s.identity for s in gallery), dtype=np.int64, count=len(gallery))
    c = np.fromiter((s.clothing for s in gallery), dtype=np.int64, count=len(gallery))
    v = np.fromiter((s.viewpoint for s in gallery), dtype=np.int64, count=len(gallery))
    same_id = y == query.identity
    same_cam = (v == query.viewpoint) & (v != UNKNOWN) & (query.viewpoint != UNKNOWN)
    same_clothes = (c == query.clothing) & (c != UNKNOWN) & (query.clothing != UNKNOWN)
    valid = np.ones(len(gallery), dtype=bool)
    if protocol.exclude_same_camera:
        valid &= ~(same_id & same_cam)
    if protocol.mode == "cloth_changing":
        valid &= ~(same_id & same_clothes)
    elif protocol.mode == "same_clothes":
        valid &= ~(same_id & ~same_clothes)
    positive = valid & same_id
    return valid, positive


def evaluate(query_features, gallery_features, query_samples, gallery_samples,
             protocol, ranks=DEFAULT_RANKS):
    """Rank the gallery for every query and reduce to CMC and mAP.

    Per query, distances to the valid gallery entries are sorted ascending
    with ties broken by gallery index; AP is the mean of precision at each
    positive's rank, and mAP averages AP over queries that have at least
    one valid positive. Queries without one are skipped and counted.
    """
    q = np.ascontiguousarray(query_features, dtype=np.float64)
    g = np.ascontiguousarray(gallery_features, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ContractError(f"feature shapes {q.shape} / {g.shape} do not align")
    if len(query_samples) != q.shape[0] or len(gallery_samples) != g.shape[0]:
        raise ContractError("sample lists must match the feature matrices")
    if q.shape[0] < 1:
        raise ContractError("need at least one query")

    hits = {k: 0 for k in ranks}
    ap_rows = []
    skipped = 0
    for i, qs in enumerate(query_samples):
        valid, positive = valid_gallery_mask(qs, gallery_samples, protocol)
        if not positive.any():
            skipped += 1
            continue
        diff = g[valid] - q[i]
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        order = np.argsort(dist, kind="stable")
        pos_sorted = positive[valid][order]
        pos_ranks = np.nonzero(pos_sorted)[0] + 1
        precision = np.arange(1, len(pos_ranks) + 1) / pos_ranks
        ap_rows.append((qs.sample_id, float(precision.mean())))
        first = pos_ranks[0]
        for k in ranks:
            if first <= k:
                hits[k] += 1

    used = len(ap_rows)
    if used == 0:
        return EvalReport(
            rank_k={k: None for k in ranks},
            map_score=None,
            num_queries_used=0,
            num_queries_skipped=skipped,
        )
    return EvalReport(
        rank_k={k: hits[k] / used for k in ranks},
        map_score=float(sum(ap for _, ap in ap_rows) / used),
        num_queries_used=used,
        num_queries_skipped=skipped,
        per_query_ap=tuple(ap_rows),
    )


def evaluate_split(features_by_id, dataset, protocol, ranks=DEFAULT_RANKS):
    """Evaluate a dataset that already carries query/gallery splits.

    features_by_id maps sample_id to an embedding; pass None to use the
    samples' own feature vectors.
    """
    queries = [s for s in dataset.samples if s.split == "query"]
    gallery = [s for s in dataset.samples if s.split == "gallery"]
    if not queries or not gallery:
        raise ContractError("dataset needs both query and gallery samples")
    if features_by_id is None:
        qf, gf = stack_features(queries), stack_features(gallery)
    else:
        qf = np.stack([features_by_id[s.sample_id] for s in queries])
        gf = np.stack([features_by_id[s.sample_id] for s in gallery])
    return evaluate(qf, gf, queries, gallery, protocol, ranks)


def write_report(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")


def write_per_query_ap(report, path):
    """Per-query AP rows for curve plotting."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("sample_id,ap\n")
        for sample_id, ap in report.per_query_ap:
            fh.write(f"{sample_id},{repr(ap)}\n")
