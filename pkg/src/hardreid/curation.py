"""Selection machinery for generated-image curation, plus the generation
planner and its definition-based cross-check.

The pose detector and quality assessor consume precomputed keypoint files
and raw PGM images; nothing here runs a vision model. plan_generation
evaluates the closed-form pair-count formulas, enumerate_hard_pairs counts
pairs straight from the definitions, and the discrepancy report documents
where the two systematically disagree.
"""

import json
from dataclasses import dataclass

import numpy as np

from .data import UNKNOWN, Dataset, Sample
from .errors import ConfigError, ParseError, ValidationError

LANDMARK_NAMES = ("nose", "left_eye", "right_eye", "left_ear", "right_ear")

GENERATION_PROMPT = "generate a new cloth for the person."


@dataclass(frozen=True, eq=False)
class KeypointRecord:
    """Five face landmarks as name -> (x, y, visibility), all in [0, 1]."""

    sample_id: str
    landmarks: dict

    def __post_init__(self):
        for name in LANDMARK_NAMES:
            if name not in self.landmarks:
                raise ValidationError(f"{self.sample_id!r}: missing landmark {name!r}")
            point = self.landmarks[name]
            if len(point) != 3:
                raise ValidationError(f"{self.sample_id!r}: landmark {name!r} needs (x, y, visibility)")
            if any(not 0.0 <= float(v) <= 1.0 for v in point):
                raise ValidationError(f"{self.sample_id!r}: landmark {name!r} out of [0, 1]: {point}")
        extra = set(self.landmarks) - set(LANDMARK_NAMES)
        if extra:
            raise ValidationError(f"{self.sample_id!r}: unknown landmarks {sorted(extra)}")

    def point(self, name):
        x, y, vis = self.landmarks[name]
        return float(x), float(y), float(vis)


def read_keypoints(path):
    """JSON-lines keypoint file -> list of KeypointRecord."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from None
            try:
                records.append(
                    KeypointRecord(
                        sample_id=rec["sample_id"],
                        landmarks={k: tuple(v) for k, v in rec["landmarks"].items()},
                    )
                )
            except (KeyError, TypeError):
                raise ParseError(f"{path}:{lineno}: expected sample_id and landmarks keys") from None
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return records


@dataclass(frozen=True)
class PoseThresholds:
    vis_min: float = 0.7
    eps_y: float = 0.05
    eps_v: float = 0.30
    min_interocular: float = 0.04

    def __post_init__(self):
        if not 0.0 <= self.vis_min < 1.0:
            raise ConfigError(f"vis_min must be in [0, 1), got {self.vis_min}")
        if self.eps_y <= 0.0 or self.eps_v <= 0.0:
            raise ConfigError("eps_y and eps_v must be > 0")
        if self.min_interocular < 0.0:
            raise ConfigError(f"min_interocular must be >= 0, got {self.min_interocular}")


def detect_frontal_pose(rec, thresholds=PoseThresholds()):
    """(passes, score) frontal test for one keypoint record.

    Passes when the face is visible (nose or both eyes strictly above
    vis_min), the eyes are level, the interocular gap is wide enough to
    rule out a profile view, and ear visibility is roughly symmetric. The
    score is the mean of the visibility / eye-level / ear-symmetry margin
    ratios, each clipped to [0, 1], and is computed whether or not the
    record passes.
    """
    x_nose, y_nose, vis_nose = rec.point("nose")
    x_le, y_le, vis_le = rec.point("left_eye")
    x_re, y_re, vis_re = rec.point("right_eye")
    _, _, vis_le_ear = rec.point("left_ear")
    _, _, vis_re_ear = rec.point("right_ear")

    vis_eff = max(vis_nose, min(vis_le, vis_re))
    d_y = abs(y_le - y_re)
    d_x = abs(x_le - x_re)
    d_ear = abs(vis_le_ear - vis_re_ear)

    passed = (
        vis_eff > thresholds.vis_min
        and d_y < thresholds.eps_y
        and d_x >= thresholds.min_interocular
        and d_ear < thresholds.eps_v
    )
    margins = (
        (vis_eff - thresholds.vis_min) / (1.0 - thresholds.vis_min),
        (thresholds.eps_y - d_y) / thresholds.eps_y,
        (thresholds.eps_v - d_ear) / thresholds.eps_v,
    )
    score = float(np.mean([min(1.0, max(0.0, m)) for m in margins]))
    return passed, score


@dataclass(frozen=True)
class QualityScore:
    """Resolution, Laplacian-variance sharpness, and corpus-relative composite."""

    resolution: int
    sharpness: float
    composite: float | None = None

    def __post_init__(self):
        if self.resolution < 0 or self.sharpness < 0.0:
            raise ValidationError("resolution and sharpness must be >= 0")
        if self.composite is not None and not 0.0 <= self.composite <= 1.0:
            raise ValidationError(f"composite must be in [0, 1], got {self.composite}")


def read_pgm(path):
    """Binary 8-bit PGM (P5) -> (h, w) uint8 array. Comments allowed."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated PGM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval, then raw pixels
    if fields[0] != b"P5":
        raise ParseError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError:
        raise ParseError(f"{path}: non-numeric PGM header fields") from None
    if w < 1 or h < 1:
        raise ValidationError(f"{path}: empty raster {w}x{h}")
    if maxval > 255 or maxval < 1:
        raise ValidationError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    pixels = data[pos : pos + w * h]
    if len(pixels) != w * h:
        raise ParseError(f"{path}: expected {w * h} pixel bytes, got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def write_pgm(image, path):
    arr = np.asarray(image, dtype=np.uint8)
    if arr.ndim != 2:
        raise ValidationError(f"image must be 2-d, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def assess_quality(image):
    """Resolution and sharpness for one image (composite left for the corpus pass).

    Sharpness is the population variance of the 4-neighbor Laplacian
    (center -4, N/S/E/W +1) over interior pixels; images too small to have
    an interior score 0.
    """
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.size == 0:
        raise ValidationError(f"expected a non-empty 2-d raster, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer) or arr.min() < 0 or arr.max() > 255:
        raise ValidationError("image must be 8-bit integer valued")
    h, w = arr.shape
    if h < 3 or w < 3:
        return QualityScore(resolution=int(w * h), sharpness=0.0)
    f = arr.astype(np.float64)
    lap = (
        -4.0 * f[1:-1, 1:-1]
        + f[:-2, 1:-1]
        + f[2:, 1:-1]
        + f[1:-1, :-2]
        + f[1:-1, 2:]
    )
    return QualityScore(resolution=int(w * h), sharpness=float(lap.var()))


def _rank_percentile(values):
    """Mid-rank percentile in (0, 1) for each value within the corpus."""
    arr = np.asarray(values, dtype=np.float64)
    n = arr.shape[0]
    less = (arr[:, None] > arr[None, :]).sum(axis=1)
    equal = (arr[:, None] == arr[None, :]).sum(axis=1)
    return (less + 0.5 * equal) / n


def score_corpus(scores):
    """Fill composites: equal-weight blend of resolution and sharpness percentiles."""
    scores = list(scores)
    if not scores:
        return []
    pct_r = _rank_percentile([s.resolution for s in scores])
    pct_s = _rank_percentile([s.sharpness for s in scores])
    return [
        QualityScore(
            resolution=s.resolution,
            sharpness=s.sharpness,
            composite=float(0.5 * r + 0.5 * v),
        )
        for s, r, v in zip(scores, pct_r, pct_s)
    ]


@dataclass(frozen=True)
class Candidate:
    sample_id: str
    pose_pass: bool
    pose_score: float
    quality: QualityScore
    identity: int | None = None


def select_top(candidates, k, scope="global_top_m"):
    """Ids of the best pose-passing candidates.

    Ranking is composite quality descending, then pose score descending,
    then sample_id ascending. global_top_m ranks the whole corpus;
    per_identity_top_n ranks within each identity and returns identities
    in ascending order.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if scope not in ("global_top_m", "per_identity_top_n"):
        raise ConfigError(f"unknown scope {scope!r}")
    eligible = [c for c in candidates if c.pose_pass]
    for c in eligible:
        if c.quality.composite is None:
            raise ValidationError(f"candidate {c.sample_id!r} has no composite; run score_corpus first")

    def order(c):
        return (-c.quality.composite, -c.pose_score, c.sample_id)

    if scope == "global_top_m":
        return [c.sample_id for c in sorted(eligible, key=order)[:k]]
    groups = {}
    for c in eligible:
        if c.identity is None:
            raise ValidationError(f"candidate {c.sample_id!r} needs an identity for per-identity selection")
        groups.setdefault(c.identity, []).append(c)
    out = []
    for identity in sorted(groups):
        out.extend(c.sample_id for c in sorted(groups[identity], key=order)[:k])
    return out


@dataclass(frozen=True)
class GenerationPlan:
    """Closed-form hard-pair yield for a generation budget.

    For each identity with k_i usable photos, n anchors are re-dressed in
    each of m shared library garments; n_hp and n_hn are the formula's
    predicted hard-positive / hard-negative pair counts.
    """

    num_identities: int
    library_garments: int
    anchors_per_identity: int
    photos_per_identity: tuple
    n_hp: int
    n_hn: int


def plan_generation(num_identities, m, n, photos_per_identity):
    """Evaluate the pair-count formulas for a generation budget.

    n_hp = sum_i m*n*(k_i + m*n - 1); n_hn = (m*n*C) * (n*(C-1)).
    """
    k = tuple(int(v) for v in photos_per_identity)
    if len(k) != num_identities:
        raise ValidationError(f"need one photo count per identity: {len(k)} != {num_identities}")
    if m < 0 or n < 0:
        raise ValidationError(f"m and n must be >= 0, got m={m}, n={n}")
    for i, k_i in enumerate(k):
        if k_i < 0:
            raise ValidationError(f"photo count for identity {i + 1} must be >= 0, got {k_i}")
    mn = m * n
    n_hp = sum(mn * (k_i + mn - 1) for k_i in k)
    n_hn = mn * num_identities * n * (num_identities - 1)
    return GenerationPlan(
        num_identities=num_identities,
        library_garments=m,
        anchors_per_identity=n,
        photos_per_identity=k,
        n_hp=n_hp,
        n_hn=n_hn,
    )


def enumerate_hard_pairs(dataset):
    """Count hard pairs straight from the definitions, as ordered pairs.

    Deliberately a naive double loop over samples so it stays an
    independent oracle for the analyzer and the planner; do not vectorize.
    UNKNOWN clothing differs from everything for the positive test and
    matches nothing for the negative test; viewpoints only count when both
    are known.
    """
    samples = dataset.samples
    hp = 0
    hn = 0
    for i, a in enumerate(samples):
        for j, b in enumerate(samples):
            if i == j:
                continue
            clothing_known = a.clothing != UNKNOWN and b.clothing != UNKNOWN
            clothing_differs = not clothing_known or a.clothing != b.clothing
            views_known = a.viewpoint != UNKNOWN and b.viewpoint != UNKNOWN
            if a.identity == b.identity:
                if clothing_differs or (views_known and a.viewpoint != b.viewpoint):
                    hp += 1
            else:
                if clothing_known and a.clothing == b.clothing:
                    hn += 1
    return hp, hn


def _mock_generated_dataset(num_identities, m, n, photos_per_identity):
    """Smallest dataset realizing the plan's setting for the enumerator.

    Originals of one identity share a private garment and a single
    viewpoint; each of its n anchors reuses that viewpoint and is
    re-dressed in all m shared library garments.
    """
    samples = []
    library_base = num_identities
    for y in range(1, num_identities + 1):
        for p in range(1, photos_per_identity[y - 1] + 1):
            samples.append(
                Sample(
                    sample_id=f"orig-{y}-{p}",
                    identity=y,
                    clothing=y,
                    viewpoint=1,
                    split="train",
                    origin="real",
                    image_ref=f"mock/orig-{y}-{p}.pgm",
                )
            )
        for a in range(1, n + 1):
            for g in range(1, m + 1):
                samples.append(
                    Sample(
                        sample_id=f"gen-{y}-{a}-{g}",
                        identity=y,
                        clothing=library_base + g,
                        viewpoint=1,
                        split="train",
                        origin="fine_generated",
                        image_ref=f"mock/gen-{y}-{a}-{g}.pgm",
                    )
                )
    return Dataset.from_samples(samples)


def plan_discrepancy_report(plan):
    """Compare the plan's formula counts with the definition-based enumerator.

    The two disagree systematically on hard positives: the formula counts
    generated-generated pairs in both directions but generated-original
    pairs only once, and it credits same-garment pairs from different
    anchors that the definition rejects (same clothing label, same
    viewpoint). Hard negatives agree exactly under ordered counting.
    Findings list every such structural mismatch with its magnitude.
    """
    c, m, n = plan.num_identities, plan.library_garments, plan.anchors_per_identity
    mock = _mock_generated_dataset(c, m, n, plan.photos_per_identity)
    enum_hp, enum_hn = enumerate_hard_pairs(mock)
    mn = m * n
    total_photos = sum(plan.photos_per_identity)
    findings = []
    if mn > 1:
        findings.append(
            {
                "code": "asymmetric_pair_direction",
                "magnitude": mn * total_photos,
                "detail": (
                    "the formula counts generated-generated pairs in both orders "
                    "(m*n*(m*n-1) per identity) but generated-original pairs in one "
                    "(m*n*k_i); the ordered enumerator sees the reverse direction too"
                ),
            }
        )
    if mn > 1 and n > 1:
        findings.append(
            {
                "code": "same_garment_anchor_pairs",
                "magnitude": c * mn * (n - 1),
                "detail": (
                    "pairs of generated samples wearing the same library garment are "
                    "counted as hard positives by the formula but fail the definition "
                    "(equal clothing labels, equal viewpoint)"
                ),
            }
        )
    if enum_hp != plan.n_hp:
        findings.append(
            {
                "code": "hard_positive_count_mismatch",
                "magnitude": enum_hp - plan.n_hp,
                "detail": f"enumerator counts {enum_hp} ordered hard-positive pairs, formula predicts {plan.n_hp}",
            }
        )
    if enum_hn != plan.n_hn:
        findings.append(
            {
                "code": "hard_negative_count_mismatch",
                "magnitude": enum_hn - plan.n_hn,
                "detail": f"enumerator counts {enum_hn} ordered hard-negative pairs, formula predicts {plan.n_hn}",
            }
        )
    return {
        "formula": {"n_hp": plan.n_hp, "n_hn": plan.n_hn},
        "enumerated": {"n_hp": enum_hp, "n_hn": enum_hn},
        "pair_convention": "ordered",
        "findings": findings,
    }


def plan_to_dict(plan, include_discrepancy=True):
    """JSON-ready plan document, with the try-on budget and prompt recorded."""
    doc = {
        "num_identities": plan.num_identities,
        "library_garments": plan.library_garments,
        "anchors_per_identity": plan.anchors_per_identity,
        "photos_per_identity": list(plan.photos_per_identity),
        "n_hp": plan.n_hp,
        "n_hn": plan.n_hn,
        "try_on_budget_per_identity": plan.library_garments * plan.anchors_per_identity,
        "prompt": GENERATION_PROMPT,
    }
    if include_discrepancy:
        doc["discrepancy"] = plan_discrepancy_report(plan)
    return doc
