"""Two-phase training loop: optional coarse pretraining, then fine-tuning
with hard-sample adaptive learning, under a hand-rolled Adam optimizer.

Every run is fully determined by (config, dataset): batches are a pure
function of (seed, step) and the optimizer is single-threaded. Wall-clock
times are logged but kept out of the metrics CSV so that file stays
bitwise reproducible.
"""

import json
import time
from dataclasses import dataclass, fields, replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from . import analyzer
from .data import BatchSpec, label_arrays, sample_batch_pk, stack_features
from .errors import ConfigError, NumericError, ParseError
from .losses import (
    LossReport,
    aggregated_triplet_loss,
    cross_entropy,
    pairwise_distance,
    pairwise_distance_backward,
    total_loss,
    triplet_loss,
)
from .model import backward, forward

MINING_STRATEGIES = ("batch_hard", "batch_all")


@dataclass(frozen=True)
class TrainConfig:
    batch_p: int = 8
    batch_k: int = 4
    epochs: int = 15
    batches_per_epoch: int = 40
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 0.1
    lam: float = 0.1
    margin: float = 0.3
    mining: str = "batch_hard"
    hsal_enabled: bool = True
    viewpoint_hardness: bool = True
    adj_weight: float = 0.5
    pretrain_epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batches_per_epoch < 1:
            raise ConfigError(f"batches_per_epoch must be >= 1, got {self.batches_per_epoch}")
        if self.lr < 0.0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigError(f"beta1/beta2 must lie in [0, 1), got {self.beta1}/{self.beta2}")
        if self.adam_eps <= 0.0:
            raise ConfigError(f"adam_eps must be > 0, got {self.adam_eps}")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"alpha must be in [0, 1), got {self.alpha}")
        if self.lam < 0.0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.margin < 0.0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")
        if self.mining not in MINING_STRATEGIES:
            raise ConfigError(f"mining must be one of {MINING_STRATEGIES}, got {self.mining!r}")
        if self.pretrain_epochs < 0:
            raise ConfigError(f"pretrain_epochs must be >= 0, got {self.pretrain_epochs}")
        self.batch_spec()  # validate P/K/seed early

    def batch_spec(self):
        return BatchSpec(p=self.batch_p, k=self.batch_k, seed=self.seed)

    def to_dict(self):
        """Plain dict mirror; the aggregated-loss weight key is 'lambda'."""
        out = {}
        for f in fields(self):
            out["lambda" if f.name == "lam" else f.name] = getattr(self, f.name)
        return out

    @classmethod
    def from_dict(cls, raw):
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            name = "lam" if key == "lambda" else key
            if name not in known:
                raise ConfigError(f"unknown train config key {key!r}")
            kwargs[name] = value
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path):
        """Read a TOML or JSON config mirroring the TrainConfig fields."""
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


@dataclass(frozen=True)
class TrainLogRow:
    epoch: int
    step: int
    l_cls: float
    l_tri_raw: float
    l_tri_adj: float
    l_total: float
    active_raw: int
    active_adj: int
    wall_ms: float


@dataclass(frozen=True, eq=False)
class AdamState:
    m: tuple
    v: tuple

    @classmethod
    def zeros_like(cls, params):
        return cls(
            m=tuple(np.zeros_like(a) for a in params.arrays()),
            v=tuple(np.zeros_like(a) for a in params.arrays()),
        )


def adam_step(params, grads, state, config, t):
    """One bias-corrected Adam update; purely functional."""
    if t < 1:
        raise ConfigError(f"step index must be >= 1, got {t}")
    b1, b2 = config.beta1, config.beta2
    new_m, new_v, new_arrays = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_m.append(m)
        new_v.append(v)
        new_arrays.append(p - config.lr * m_hat / (np.sqrt(v_hat) + config.adam_eps))
    return params.replace_arrays(new_arrays), AdamState(m=tuple(new_m), v=tuple(new_v))


def _train_step(params, batch, config, id_to_class):
    """Forward, losses, gradients for one batch. Returns (grads, LossReport)."""
    feats = stack_features(batch)
    y_raw, _, _ = label_arrays(batch)
    targets = np.fromiter((id_to_class[s.identity] for s in batch), dtype=np.int64, count=len(batch))
    emb, logits, cache = forward(params, feats)
    l_cls, g_logits = cross_entropy(logits, targets)
    dist = pairwise_distance(emb)
    if config.hsal_enabled:
        assess = analyzer.build_assessment_matrices(batch, config.viewpoint_hardness)
        adj = analyzer.build_adjustment_matrices(assess, config.alpha)
        agg = aggregated_triplet_loss(
            dist, adj, y_raw, config.margin, config.mining, config.adj_weight
        )
        l_raw, l_adj = agg.raw.loss, agg.adjusted.loss
        active_raw, active_adj = agg.raw.num_active, agg.adjusted.num_active
        l_hatrip, grad_dist = agg.loss, agg.grad
    else:
        tri = triplet_loss(dist, y_raw, config.margin, config.mining)
        l_raw, l_adj = tri.loss, 0.0
        active_raw, active_adj = tri.num_active, 0
        l_hatrip, grad_dist = tri.loss, tri.grad
    g_emb = pairwise_distance_backward(emb, dist, config.lam * grad_dist)
    grads = backward(params, cache, g_emb, g_logits)
    report = LossReport(
        l_cls=l_cls,
        l_tri_raw=l_raw,
        l_tri_adj=l_adj,
        l_hatrip=l_hatrip,
        l_total=total_loss(l_cls, l_hatrip, config.lam),
        active_triplets_raw=active_raw,
        active_triplets_adj=active_adj,
        lam=config.lam,
        adj_weight=config.adj_weight,
    )
    return grads, report


def _class_map(train_set, params, id_to_class):
    if id_to_class is None:
        id_to_class = train_set.identity_codes()
    num_classes = params.config.num_classes
    for identity, code in id_to_class.items():
        if not 0 <= code < num_classes:
            raise ConfigError(
                f"class index {code} for identity {identity} outside [0, {num_classes})"
            )
    return id_to_class


def fit(params, train_set, config, id_to_class=None, hooks=None):
    """Run the full training loop; returns (params, log rows).

    Executes exactly epochs * batches_per_epoch steps. The global step
    index drives both the batch sampler and Adam's bias correction. When
    hsal_enabled, each batch goes through assessment and distance
    adjustment and the aggregated triplet loss; otherwise the plain
    triplet loss on raw distances is used. A non-finite loss aborts with
    the step and component values in the diagnostic.
    """
    id_to_class = _class_map(train_set, params, id_to_class)
    spec = config.batch_spec()
    hooks = hooks or {}
    state = AdamState.zeros_like(params)
    rows = []
    for epoch in range(1, config.epochs + 1):
        for b in range(1, config.batches_per_epoch + 1):
            t0 = time.perf_counter()
            step = (epoch - 1) * config.batches_per_epoch + b
            batch = sample_batch_pk(train_set, spec, step)
            grads, report = _train_step(params, batch, config, id_to_class)
            components = {
                "l_cls": report.l_cls,
                "l_tri_raw": report.l_tri_raw,
                "l_tri_adj": report.l_tri_adj,
                "l_total": report.l_total,
            }
            if not all(np.isfinite(v) for v in components.values()):
                raise NumericError(f"non-finite loss at step {step}: {components}")
            try:
                params, state = adam_step(params, grads, state, config, step)
            except NumericError as exc:
                raise NumericError(f"step {step}: {exc} (components {components})") from None
            rows.append(
                TrainLogRow(
                    epoch=epoch,
                    step=step,
                    l_cls=report.l_cls,
                    l_tri_raw=report.l_tri_raw,
                    l_tri_adj=report.l_tri_adj,
                    l_total=report.l_total,
                    active_raw=report.active_triplets_raw,
                    active_adj=report.active_triplets_adj,
                    wall_ms=(time.perf_counter() - t0) * 1e3,
                )
            )
        on_epoch_end = hooks.get("on_epoch_end")
        if on_epoch_end is not None:
            on_epoch_end(epoch, params)
    return params, rows


def pretrain_coarse(params, coarse_set, config, collect=None):
    """Pretraining phase on coarse-generated samples; returns updated params.

    Coarse samples carry no clothing labels, so hard-sample adjustment is
    off and the loss is classification plus the plain triplet term. With
    pretrain_epochs=0 the params are returned unchanged. Pass a list as
    collect to receive the phase's log rows.
    """
    if len(coarse_set) == 0:
        raise ConfigError("pretraining needs a non-empty coarse set")
    bad = [s.sample_id for s in coarse_set.samples if s.origin != "coarse_generated"]
    if bad:
        raise ConfigError(f"coarse set contains non-coarse samples, e.g. {bad[0]!r}")
    if config.pretrain_epochs == 0:
        return params
    phase = replace(config, epochs=config.pretrain_epochs, hsal_enabled=False)
    params, rows = fit(params, coarse_set, phase)
    if collect is not None:
        collect.extend(rows)
    return params


_LOG_COLUMNS = (
    "epoch", "step", "l_cls", "l_tri_raw", "l_tri_adj", "l_total",
    "active_raw", "active_adj",
)


def _format_cell(value):
    return repr(float(value)) if isinstance(value, float) else str(value)


def write_train_log(rows, path):
    """Full per-step log, wall-clock column included (not reproducible)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(_LOG_COLUMNS + ("wall_ms",)) + "\n")
        for r in rows:
            cells = [_format_cell(getattr(r, c)) for c in _LOG_COLUMNS] + [repr(r.wall_ms)]
            fh.write(",".join(cells) + "\n")


def write_train_metrics(rows, path):
    """Deterministic per-step metrics: identical runs give identical bytes."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(_LOG_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(_format_cell(getattr(r, c)) for c in _LOG_COLUMNS) + "\n")
