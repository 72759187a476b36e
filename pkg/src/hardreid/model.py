"""Small feed-forward embedding net with a linear classifier head.

Forward and backward passes are written out explicitly in NumPy; there is
no autodiff anywhere in this package, which is what makes the
finite-difference gradient suite meaningful.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ParseError, ValidationError

CHECKPOINT_FORMAT = "hardreid-checkpoint-v1"

_NORM_EPS = 1e-12


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    hidden_dims: tuple = (64,)
    embed_dim: int = 16
    num_classes: int = 2
    activation: str = "relu"
    l2_normalize: bool = False
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, self.embed_dim) + self.hidden_dims
        if any(d < 1 for d in dims):
            raise ConfigError(f"all layer dims must be >= 1, got {dims}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    def layer_dims(self):
        """Linear layer sizes: input -> hidden... -> embed."""
        return (self.input_dim,) + self.hidden_dims + (self.embed_dim,)


@dataclass(frozen=True, eq=False)
class NetParams:
    """Parameter set (or a NetParams-shaped gradient) for one NetConfig."""

    config: NetConfig
    weights: tuple
    biases: tuple
    cls_w: np.ndarray
    cls_b: np.ndarray

    def __post_init__(self):
        dims = self.config.layer_dims()
        n_layers = len(dims) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ContractError(f"expected {n_layers} layers, got {len(self.weights)}")
        for i in range(n_layers):
            if self.weights[i].shape != (dims[i], dims[i + 1]):
                raise ContractError(
                    f"layer {i} weight shape {self.weights[i].shape} != {(dims[i], dims[i + 1])}"
                )
            if self.biases[i].shape != (dims[i + 1],):
                raise ContractError(f"layer {i} bias shape {self.biases[i].shape}")
        c, d_e = self.config.num_classes, self.config.embed_dim
        if self.cls_w.shape != (c, d_e) or self.cls_b.shape != (c,):
            raise ContractError(
                f"classifier shapes {self.cls_w.shape}/{self.cls_b.shape} != {(c, d_e)}/{(c,)}"
            )
        for arr in self.arrays():
            if not np.all(np.isfinite(arr)):
                raise NumericError("non-finite parameter value")

    def arrays(self):
        """All parameter arrays in a fixed order (layers, then classifier)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        out.append(self.cls_w)
        out.append(self.cls_b)
        return out

    def replace_arrays(self, arrays):
        """New NetParams built from arrays in the arrays() order."""
        n_layers = len(self.weights)
        weights = tuple(arrays[2 * i] for i in range(n_layers))
        biases = tuple(arrays[2 * i + 1] for i in range(n_layers))
        return NetParams(
            config=self.config,
            weights=weights,
            biases=biases,
            cls_w=arrays[2 * n_layers],
            cls_b=arrays[2 * n_layers + 1],
        )


@dataclass(frozen=True, eq=False)
class ForwardCache:
    layer_inputs: tuple
    relu_masks: tuple
    raw_embed: np.ndarray
    norm: np.ndarray | None
    embeddings: np.ndarray


def init_params(config):
    """Uniform +-sqrt(6/fan_in) weights, zero biases, seeded by init_seed."""
    rng = np.random.default_rng(config.init_seed)
    dims = config.layer_dims()
    weights = []
    biases = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    bound = np.sqrt(6.0 / config.embed_dim)
    cls_w = rng.uniform(-bound, bound, size=(config.num_classes, config.embed_dim))
    cls_b = np.zeros(config.num_classes)
    return NetParams(
        config=config, weights=tuple(weights), biases=tuple(biases), cls_w=cls_w, cls_b=cls_b
    )


def forward(params, batch_features):
    """Embeddings, logits and the activation cache for one batch."""
    x = np.ascontiguousarray(batch_features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.config.input_dim:
        raise ContractError(
            f"batch shape {x.shape} does not match input_dim {params.config.input_dim}"
        )
    if not np.all(np.isfinite(x)):
        raise ContractError("non-finite values in batch features")
    n_layers = len(params.weights)
    a = x
    inputs = []
    masks = []
    for i in range(n_layers):
        inputs.append(a)
        z = a @ params.weights[i] + params.biases[i]
        if i < n_layers - 1:
            mask = z > 0.0
            masks.append(mask)
            a = z * mask
        else:
            a = z
    raw = a
    if params.config.l2_normalize:
        norm = np.sqrt((raw * raw).sum(axis=1, keepdims=True) + _NORM_EPS)
        emb = raw / norm
    else:
        norm = None
        emb = raw
    logits = emb @ params.cls_w.T + params.cls_b
    cache = ForwardCache(
        layer_inputs=tuple(inputs),
        relu_masks=tuple(masks),
        raw_embed=raw,
        norm=norm,
        embeddings=emb,
    )
    return emb, logits, cache


def backward(params, cache, grad_embeddings, grad_logits):
    """Exact reverse-mode gradients for the combined upstream gradients.

    grad_embeddings feeds the metric-loss path, grad_logits the classifier
    path; both flow into the shared trunk. ReLU uses subgradient 0 at 0.
    Returns a NetParams-shaped gradient.
    """
    emb = cache.embeddings
    n = emb.shape[0]
    if grad_embeddings.shape != emb.shape:
        raise ContractError(f"grad_embeddings shape {grad_embeddings.shape} != {emb.shape}")
    if grad_logits.shape != (n, params.config.num_classes):
        raise ContractError(f"grad_logits shape {grad_logits.shape}")
    g_cls_w = grad_logits.T @ emb
    g_cls_b = grad_logits.sum(axis=0)
    g = grad_embeddings + grad_logits @ params.cls_w
    if params.config.l2_normalize:
        raw, s = cache.raw_embed, cache.norm
        g = g / s - raw * ((g * raw).sum(axis=1, keepdims=True) / s**3)
    n_layers = len(params.weights)
    g_w = [None] * n_layers
    g_b = [None] * n_layers
    dz = g
    for i in reversed(range(n_layers)):
        g_w[i] = cache.layer_inputs[i].T @ dz
        g_b[i] = dz.sum(axis=0)
        if i > 0:
            dz = (dz @ params.weights[i].T) * cache.relu_masks[i - 1]
    return NetParams(
        config=params.config,
        weights=tuple(g_w),
        biases=tuple(g_b),
        cls_w=g_cls_w,
        cls_b=g_cls_b,
    )


def save_checkpoint(params, path):
    """Versioned JSON dump; float round-trip is exact."""
    cfg = params.config
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": {
            "input_dim": cfg.input_dim,
            "hidden_dims": list(cfg.hidden_dims),
            "embed_dim": cfg.embed_dim,
            "num_classes": cfg.num_classes,
            "activation": cfg.activation,
            "l2_normalize": cfg.l2_normalize,
            "init_seed": cfg.init_seed,
        },
        "arrays": {
            name: {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}
            for name, arr in zip(array_names(params), params.arrays())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON: {exc.msg}") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"{path}: expected format {CHECKPOINT_FORMAT!r}, got {doc.get('format')!r}")
    cfg_doc = dict(doc["config"])
    cfg_doc["hidden_dims"] = tuple(cfg_doc["hidden_dims"])
    config = NetConfig(**cfg_doc)
    template = init_params(config)
    arrays = []
    for name, ref in zip(array_names(template), template.arrays()):
        entry = doc["arrays"].get(name)
        if entry is None:
            raise ValidationError(f"{path}: missing array {name!r}")
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != ref.shape:
            raise ValidationError(f"{path}: array {name!r} shape {arr.shape} != {ref.shape}")
        arrays.append(arr)
    return template.replace_arrays(arrays)


def array_names(params):
    """Stable names matching the arrays() order."""
    names = []
    for i in range(len(params.weights)):
        names.append(f"w{i}")
        names.append(f"b{i}")
    names.append("cls_w")
    names.append("cls_b")
    return names
