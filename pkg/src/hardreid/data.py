"""Dataset model, manifest I/O, label unification, and P*K batch sampling.

A manifest is JSON-lines, one sample per line, with feature vectors stored
inline (desk scale keeps d small). Images are referenced by path only and
never decoded here; that is curation's job.
"""

import csv
import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ContractError, DataError, ParseError, ValidationError

UNKNOWN = -1

SPLITS = ("train", "query", "gallery")
ORIGINS = ("real", "coarse_generated", "fine_generated")
SCHEMES = ("per_identity_tag", "global_tag")

_MANIFEST_KEYS = frozenset(
    ("sample_id", "identity", "clothing", "viewpoint", "split", "origin",
     "features", "image_ref")
)


def _check_label(name, value):
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
        raise ValidationError(f"{name} must be an integer, got {value!r}")
    if value != UNKNOWN and value < 1:
        raise ValidationError(f"{name} must be >= 1 or UNKNOWN ({UNKNOWN}), got {value}")


@dataclass(frozen=True, eq=False)
class Sample:
    """One pedestrian observation.

    identity is always known (>= 1); clothing and viewpoint may be UNKNOWN.
    Exactly one of features / image_ref is present: the trainer consumes
    feature vectors, curation consumes image references.
    """

    sample_id: str
    identity: int
    clothing: int
    viewpoint: int
    split: str
    origin: str
    features: np.ndarray | None = None
    image_ref: str | None = None

    def __post_init__(self):
        if not isinstance(self.sample_id, str) or not self.sample_id:
            raise ValidationError(f"sample_id must be a non-empty string, got {self.sample_id!r}")
        if not isinstance(self.identity, (int, np.integer)) or isinstance(self.identity, bool):
            raise ValidationError(f"identity must be an integer, got {self.identity!r}")
        if self.identity < 1:
            raise ValidationError(f"identity must be >= 1, got {self.identity} (sample {self.sample_id!r})")
        _check_label(f"clothing (sample {self.sample_id!r})", self.clothing)
        _check_label(f"viewpoint (sample {self.sample_id!r})", self.viewpoint)
        if self.split not in SPLITS:
            raise ValidationError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.origin not in ORIGINS:
            raise ValidationError(f"origin must be one of {ORIGINS}, got {self.origin!r}")
        if self.origin == "fine_generated" and self.clothing == UNKNOWN:
            raise ValidationError(f"fine_generated sample {self.sample_id!r} must carry a clothing label")
        if self.origin == "coarse_generated" and self.clothing != UNKNOWN:
            raise ValidationError(f"coarse_generated sample {self.sample_id!r} must have clothing UNKNOWN")
        if (self.features is None) == (self.image_ref is None):
            raise ValidationError(f"sample {self.sample_id!r} needs exactly one of features / image_ref")
        if self.features is not None:
            f = np.ascontiguousarray(self.features, dtype=np.float64)
            if f.ndim != 1:
                raise ValidationError(f"features of {self.sample_id!r} must be a 1-d vector, got shape {f.shape}")
            if not np.all(np.isfinite(f)):
                raise ValidationError(f"features of {self.sample_id!r} contain non-finite values")
            f.setflags(write=False)
            object.__setattr__(self, "features", f)

    def with_split(self, split):
        return replace(self, split=split)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable, validated collection of samples. Build via from_samples."""

    samples: tuple
    num_identities: int
    clothing_vocab: frozenset
    feature_dim: int | None

    @classmethod
    def from_samples(cls, samples):
        samples = tuple(samples)
        seen = set()
        dim = None
        for s in samples:
            if not isinstance(s, Sample):
                raise ValidationError(f"expected Sample, got {type(s).__name__}")
            if s.sample_id in seen:
                raise ValidationError(f"duplicate sample_id {s.sample_id!r}")
            seen.add(s.sample_id)
            if s.features is not None:
                if dim is None:
                    dim = s.features.shape[0]
                elif s.features.shape[0] != dim:
                    raise ValidationError(
                        f"feature dim mismatch: sample {s.sample_id!r} has "
                        f"{s.features.shape[0]}, expected {dim}"
                    )
        vocab = frozenset(s.clothing for s in samples if s.clothing != UNKNOWN)
        c = len({s.identity for s in samples})
        return cls(samples=samples, num_identities=c, clothing_vocab=vocab, feature_dim=dim)

    def __len__(self):
        return len(self.samples)

    def identities(self):
        """Distinct identity labels, sorted ascending."""
        return sorted({s.identity for s in self.samples})

    def identity_codes(self):
        """Map raw identity labels onto dense 0-based class indices."""
        return {y: k for k, y in enumerate(self.identities())}

    def restrict(self, predicate):
        """New Dataset keeping only samples where predicate(sample) is true."""
        return Dataset.from_samples(s for s in self.samples if predicate(s))


def merge(*datasets):
    """Union of datasets; sample ids must stay globally unique."""
    out = []
    for ds in datasets:
        out.extend(ds.samples)
    return Dataset.from_samples(out)


def stack_features(samples):
    """Stack sample feature vectors into an (n, d) float64 matrix."""
    rows = []
    for s in samples:
        if s.features is None:
            raise DataError(f"sample {s.sample_id!r} has no feature vector")
        rows.append(s.features)
    return np.stack(rows)


def label_arrays(samples):
    """(identity, clothing, viewpoint) int64 label vectors for a batch."""
    y = np.fromiter((s.identity for s in samples), dtype=np.int64, count=len(samples))
    c = np.fromiter((s.clothing for s in samples), dtype=np.int64, count=len(samples))
    v = np.fromiter((s.viewpoint for s in samples), dtype=np.int64, count=len(samples))
    return y, c, v


def _sample_from_record(rec, where):
    if not isinstance(rec, dict):
        raise ParseError(f"{where}: expected a JSON object, got {type(rec).__name__}")
    keys = set(rec)
    if keys != _MANIFEST_KEYS:
        missing = sorted(_MANIFEST_KEYS - keys)
        extra = sorted(keys - _MANIFEST_KEYS)
        parts = []
        if missing:
            parts.append(f"missing keys {missing}")
        if extra:
            parts.append(f"unknown keys {extra}")
        raise ParseError(f"{where}: {', '.join(parts)}")
    features = rec["features"]
    if features is not None:
        features = np.asarray(features, dtype=np.float64)
    try:
        return Sample(
            sample_id=rec["sample_id"],
            identity=rec["identity"],
            clothing=rec["clothing"],
            viewpoint=rec["viewpoint"],
            split=rec["split"],
            origin=rec["origin"],
            features=features,
            image_ref=rec["image_ref"],
        )
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from None


def load_manifest(path):
    """Read a JSON-lines manifest into a validated Dataset."""
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from None
            samples.append(_sample_from_record(rec, f"{path}:{lineno}"))
    return Dataset.from_samples(samples)


def write_manifest(dataset, path):
    """Write a Dataset back to JSON-lines; floats round-trip exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in dataset.samples:
            rec = {
                "sample_id": s.sample_id,
                "identity": int(s.identity),
                "clothing": int(s.clothing),
                "viewpoint": int(s.viewpoint),
                "split": s.split,
                "origin": s.origin,
                "features": None if s.features is None else [float(v) for v in s.features],
                "image_ref": s.image_ref,
            }
            fh.write(json.dumps(rec) + "\n")


def unify_labels(raw, scheme):
    """Map raw (identity, clothes_tag, camera_tag) triples onto integer labels.

    per_identity_tag mints a fresh clothing id per distinct (identity, tag)
    pair, global_tag per distinct tag across all identities; the latter is
    what lets the same garment appear on two people. Viewpoints are always
    global. Ids start at 1 in first-appearance order, so the mapping is
    deterministic given the input order.
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    clothes_ids = {}
    camera_ids = {}
    out = []
    for identity, clothes_tag, camera_tag in raw:
        if not clothes_tag:
            raise ValidationError(f"empty clothes tag for identity {identity}")
        if not camera_tag:
            raise ValidationError(f"empty camera tag for identity {identity}")
        ckey = (identity, clothes_tag) if scheme == "per_identity_tag" else clothes_tag
        if ckey not in clothes_ids:
            clothes_ids[ckey] = len(clothes_ids) + 1
        if camera_tag not in camera_ids:
            camera_ids[camera_tag] = len(camera_ids) + 1
        out.append((clothes_ids[ckey], camera_ids[camera_tag]))
    return out


def read_raw_labels_csv(path):
    """Read a raw-label mapping CSV; returns (rows, scheme) for unify_labels."""
    required = ("identity", "raw_clothes_tag", "raw_camera_tag", "scheme")
    rows = []
    schemes = set()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(required).issubset(reader.fieldnames):
            raise ParseError(f"{path}: expected columns {list(required)}, got {reader.fieldnames}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                identity = int(rec["identity"])
            except (TypeError, ValueError):
                raise ParseError(f"{path}:{lineno}: identity {rec['identity']!r} is not an integer") from None
            rows.append((identity, rec["raw_clothes_tag"], rec["raw_camera_tag"]))
            schemes.add(rec["scheme"])
    if len(schemes) > 1:
        raise ValidationError(f"{path}: mixed schemes {sorted(schemes)}; one scheme per dataset")
    scheme = schemes.pop() if schemes else "global_tag"
    return rows, scheme


@dataclass(frozen=True)
class BatchSpec:
    """P identities x K instances per batch; triplets need P,K >= 2."""

    p: int = 8
    k: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.p < 2:
            raise ConfigError(f"batch spec needs P >= 2, got {self.p}")
        if self.k < 2:
            raise ConfigError(f"batch spec needs K >= 2, got {self.k}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")

    @property
    def batch_size(self):
        return self.p * self.k


def sample_batch_pk(dataset, spec, step):
    """Identity-balanced batch, fully determined by (spec.seed, step).

    Draws P distinct identities, then K training samples per identity:
    without replacement when the identity has at least K, with replacement
    otherwise.
    """
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    by_id = {}
    for idx, s in enumerate(dataset.samples):
        if s.split == "train":
            by_id.setdefault(s.identity, []).append(idx)
    ids = sorted(by_id)
    if len(ids) < spec.p:
        raise ConfigError(f"need >= {spec.p} identities with training samples, found {len(ids)}")
    rng = np.random.default_rng((spec.seed, step))
    chosen = rng.permutation(len(ids))[: spec.p]
    batch = []
    for pos in chosen:
        pool = by_id[ids[pos]]
        if len(pool) >= spec.k:
            picks = rng.permutation(len(pool))[: spec.k]
        else:
            picks = rng.integers(0, len(pool), size=spec.k)
        batch.extend(dataset.samples[pool[j]] for j in picks)
    return batch
