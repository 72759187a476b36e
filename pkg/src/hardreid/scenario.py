"""Synthetic feature-space cloth-change scenarios.

Each sample is a sum of identity, garment, and viewpoint prototype vectors
living in orthogonal subspaces, plus isotropic noise. Making the garment
coefficient larger than the identity coefficient bakes in the failure mode
this toolkit targets: clothing is the dominant cue, so a plain metric
learner latches onto it and collapses under clothing change.

The base set gives every identity its own garments (so no two people ever
share a clothing label and hard negatives cannot exist). The fine set
re-dresses per-identity anchors in a small shared garment library, which
is what introduces cross-identity shared clothing. The coarse set draws
fresh unlabeled garments per sample.
"""

import json
from dataclasses import dataclass, fields

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .data import UNKNOWN, Dataset, Sample
from .errors import ConfigError, ParseError

# Tags for per-purpose RNG streams, hashed together with the seed so that
# every prototype and every identity's sample block is independently
# reproducible (and generation could run per identity in parallel).
_TAG_BASIS = 0
_TAG_IDENTITY = 1
_TAG_GARMENT = 2
_TAG_VIEW = 3
_TAG_BASE = 4
_TAG_FINE = 5
_TAG_COARSE = 6


@dataclass(frozen=True)
class ScenarioConfig:
    num_identities: int = 50
    feature_dim: int = 32
    garments_per_identity: int = 2
    viewpoints: int = 2
    samples_per_cell: int = 5
    sigma_noise: float = 0.2
    beta_identity: float = 1.0
    beta_clothing: float = 2.0
    beta_view: float = 0.5
    garment_library_m: int = 2
    topn_n: int = 2
    coarse_per_identity: int = 4
    eval_identities: int = 20
    seed: int = 0

    def __post_init__(self):
        counts = {
            "num_identities": self.num_identities,
            "garments_per_identity": self.garments_per_identity,
            "viewpoints": self.viewpoints,
            "samples_per_cell": self.samples_per_cell,
            "garment_library_m": self.garment_library_m,
            "topn_n": self.topn_n,
            "coarse_per_identity": self.coarse_per_identity,
            "eval_identities": self.eval_identities,
        }
        for name, value in counts.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.feature_dim < 3:
            raise ConfigError(f"feature_dim must be >= 3, got {self.feature_dim}")
        if self.sigma_noise < 0.0:
            raise ConfigError(f"sigma_noise must be >= 0, got {self.sigma_noise}")
        if self.beta_clothing <= self.beta_identity:
            raise ConfigError(
                "beta_clothing must exceed beta_identity; the clothing shortcut "
                f"is the point of the scenario (got {self.beta_clothing} <= {self.beta_identity})"
            )
        if self.eval_identities >= self.num_identities:
            raise ConfigError(
                f"eval_identities ({self.eval_identities}) must leave at least "
                f"one training identity out of {self.num_identities}"
            )
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")

    def train_identity_range(self):
        """Training identities (evaluation takes the highest ids)."""
        return range(1, self.num_identities - self.eval_identities + 1)

    def eval_identity_range(self):
        return range(self.num_identities - self.eval_identities + 1, self.num_identities + 1)

    def num_base_garments(self):
        return self.num_identities * self.garments_per_identity

    def library_clothing_ids(self):
        """Clothing ids of the shared garment library (above all base ids)."""
        first = self.num_base_garments() + 1
        return range(first, first + self.garment_library_m)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, raw):
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown scenario config keys {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_file(cls, path):
        with open(path, "rb") as fh:
            text = fh.read()
        if str(path).endswith(".json"):
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: invalid JSON: {exc.msg}") from None
        else:
            try:
                raw = tomllib.loads(text.decode("utf-8"))
            except tomllib.TOMLDecodeError as exc:
                raise ParseError(f"{path}: invalid TOML: {exc}") from None
        if not isinstance(raw, dict):
            raise ParseError(f"{path}: config must be a table/object")
        return cls.from_dict(raw)


@dataclass(frozen=True, eq=False)
class GeneratedSet:
    """Base, coarse, and fine datasets plus the recipe that produced them."""

    base: Dataset
    coarse: Dataset
    fine: Dataset
    provenance: ScenarioConfig
    excluded_identities: tuple = ()

    def base_train(self):
        return self.base.restrict(lambda s: s.split == "train")

    def eval_pool(self):
        return self.base.restrict(lambda s: s.split in ("query", "gallery"))


class _Prototypes:
    """Unit-norm prototype vectors in orthogonal subspaces."""

    def __init__(self, config):
        d = config.feature_dim
        sub = (3 * d) // 8
        rng = np.random.default_rng((config.seed, _TAG_BASIS))
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        self.id_basis = q[:, :sub]
        self.cloth_basis = q[:, sub : 2 * sub]
        self.view_basis = q[:, 2 * sub :]
        self.seed = config.seed

    @staticmethod
    def _unit(vec):
        return vec / np.linalg.norm(vec)

    def _project(self, basis, rng):
        return self._unit(basis @ rng.normal(size=basis.shape[1]))

    def identity(self, y):
        return self._project(self.id_basis, np.random.default_rng((self.seed, _TAG_IDENTITY, y)))

    def garment(self, c):
        """Prototype for a labeled clothing id (base or library)."""
        return self._project(self.cloth_basis, np.random.default_rng((self.seed, _TAG_GARMENT, c)))

    def view(self, v):
        return self._project(self.view_basis, np.random.default_rng((self.seed, _TAG_VIEW, v)))

    def fresh_garment(self, rng):
        """Unlabeled garment drawn from a caller-owned stream (coarse branch)."""
        return self._project(self.cloth_basis, rng)


def _compose(config, u_id, g_cloth, w_view, noise):
    return (
        config.beta_identity * u_id
        + config.beta_clothing * g_cloth
        + config.beta_view * w_view
        + noise
    )


def generate_scenario(config):
    """Build the full synthetic scenario, bit-for-bit reproducible from config.

    Base samples cover every (identity, garment, viewpoint) cell
    samples_per_cell times. Fine samples re-dress topn_n anchors per
    training identity in each of the garment_library_m shared garments; an
    anchor fixes one viewpoint and one noise draw, so its m variants differ
    only in the garment term (the try-on analogy). Coarse samples get
    fresh unlabeled garments. Evaluation identities keep only base samples,
    split into query/gallery by the cross-camera rule.
    """
    protos = _Prototypes(config)
    g_per = config.garments_per_identity
    views = [protos.view(v) for v in range(1, config.viewpoints + 1)]
    ids_u = {y: protos.identity(y) for y in range(1, config.num_identities + 1)}
    library = {c: protos.garment(c) for c in config.library_clothing_ids()}

    train_ids = set(config.train_identity_range())

    base_samples = []
    for y in range(1, config.num_identities + 1):
        rng = np.random.default_rng((config.seed, _TAG_BASE, y))
        for g in range(1, g_per + 1):
            c = (y - 1) * g_per + g
            g_proto = protos.garment(c)
            for v in range(1, config.viewpoints + 1):
                for s in range(1, config.samples_per_cell + 1):
                    noise = config.sigma_noise * rng.normal(size=config.feature_dim)
                    base_samples.append(
                        Sample(
                            sample_id=f"base-{y}-{c}-{v}-{s}",
                            identity=y,
                            clothing=c,
                            viewpoint=v,
                            split="train",
                            origin="real",
                            features=_compose(config, ids_u[y], g_proto, views[v - 1], noise),
                        )
                    )

    fine_samples = []
    for y in sorted(train_ids):
        rng = np.random.default_rng((config.seed, _TAG_FINE, y))
        for a in range(1, config.topn_n + 1):
            v = int(rng.integers(1, config.viewpoints + 1))
            noise = config.sigma_noise * rng.normal(size=config.feature_dim)
            for c in config.library_clothing_ids():
                fine_samples.append(
                    Sample(
                        sample_id=f"fine-{y}-{a}-{c}",
                        identity=y,
                        clothing=c,
                        viewpoint=v,
                        split="train",
                        origin="fine_generated",
                        features=_compose(config, ids_u[y], library[c], views[v - 1], noise),
                    )
                )

    coarse_samples = []
    for y in sorted(train_ids):
        rng = np.random.default_rng((config.seed, _TAG_COARSE, y))
        for k in range(1, config.coarse_per_identity + 1):
            garment = protos.fresh_garment(rng)
            v = int(rng.integers(1, config.viewpoints + 1))
            noise = config.sigma_noise * rng.normal(size=config.feature_dim)
            coarse_samples.append(
                Sample(
                    sample_id=f"coarse-{y}-{k}",
                    identity=y,
                    clothing=UNKNOWN,
                    viewpoint=v,
                    split="train",
                    origin="coarse_generated",
                    features=_compose(config, ids_u[y], garment, views[v - 1], noise),
                )
            )

    train_part = [s for s in base_samples if s.identity in train_ids]
    eval_part = Dataset.from_samples(s for s in base_samples if s.identity not in train_ids)
    eval_split, excluded = split_query_gallery(eval_part, rule="cross_camera", seed=config.seed)
    base = Dataset.from_samples(train_part + list(eval_split.samples))
    return GeneratedSet(
        base=base,
        coarse=Dataset.from_samples(coarse_samples),
        fine=Dataset.from_samples(fine_samples),
        provenance=config,
        excluded_identities=excluded,
    )


def split_query_gallery(dataset, rule="cross_camera", seed=0):
    """Assign query/gallery splits per identity; returns (dataset, excluded).

    cross_camera picks one viewpoint per identity as the query side and
    sends every other sample to the gallery; random sends half of each
    identity's samples (rounded down) to the query side. Identities the
    rule cannot represent (too few samples, or a single known viewpoint
    under cross_camera) are dropped and reported in excluded.
    """
    if rule not in ("cross_camera", "random"):
        raise ConfigError(f"unknown split rule {rule!r}")
    groups = {}
    for s in dataset.samples:
        groups.setdefault(s.identity, []).append(s)
    out = []
    excluded = []
    for y in sorted(groups):
        samples = groups[y]
        rng = np.random.default_rng((seed, y))
        if len(samples) < 2:
            excluded.append(y)
            continue
        if rule == "cross_camera":
            views = sorted({s.viewpoint for s in samples if s.viewpoint != UNKNOWN})
            if len(views) < 2:
                excluded.append(y)
                continue
            v_q = views[int(rng.integers(len(views)))]
            for s in samples:
                out.append(s.with_split("query" if s.viewpoint == v_q else "gallery"))
        else:
            order = rng.permutation(len(samples))
            n_query = len(samples) // 2
            query_idx = set(order[:n_query].tolist())
            for i, s in enumerate(samples):
                out.append(s.with_split("query" if i in query_idx else "gallery"))
    return Dataset.from_samples(out), tuple(excluded)
