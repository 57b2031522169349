"""Two-logit sparse-feature model: embeddings + ReLU MLP, hand-rolled gradients.

The network maps per-field categorical ids through embedding tables,
concatenates them, and applies an MLP whose final layer has width exactly 2:
index 0 is the nonclick logit, index 1 the click logit.  Everything runs in
float64 numpy with deterministic seeding, which keeps the finite-difference
gradient checks tight.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .context import Sample
from .errors import ConfigError, InputError, TrainingError


@dataclass(frozen=True)
class LogitPair:
    """Model output for one sample: (nonclick logit, click logit)."""

    nonclick: float
    click: float


@dataclass
class ModelConfig:
    vocab_sizes: tuple[int, ...]
    embed_dim: int
    hidden_dims: tuple[int, ...]
    seed: int
    init_scale: float = 0.05

    def __post_init__(self):
        self.vocab_sizes = tuple(int(v) for v in self.vocab_sizes)
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if not self.vocab_sizes or any(v < 1 for v in self.vocab_sizes):
            raise ConfigError(f"vocab_sizes must all be >= 1, got {self.vocab_sizes}")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"hidden_dims must be non-empty positive, got {self.hidden_dims}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if not np.isfinite(self.init_scale) or self.init_scale < 0:
            raise ConfigError(f"init_scale must be a finite nonnegative real, got {self.init_scale}")

    @property
    def input_dim(self) -> int:
        return len(self.vocab_sizes) * self.embed_dim

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, 2]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class _ForwardCache:
    ids: np.ndarray           # (B, F) feature ids
    hiddens: list[np.ndarray]  # post-activation inputs of each layer, hiddens[0] = embeddings
    preacts: list[np.ndarray]  # pre-activation outputs of each layer


@dataclass
class ModelParams:
    """Parameters with paired gradient and Adam-moment storage."""

    config: ModelConfig
    embeddings: list[np.ndarray]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    grad_embeddings: list[np.ndarray]
    grad_weights: list[np.ndarray]
    grad_biases: list[np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    cache: _ForwardCache | None = field(default=None, repr=False)

    def blocks(self):
        """Yield (name, value, grad) for every parameter block."""
        for f, e in enumerate(self.embeddings):
            yield f"embeddings[{f}]", e, self.grad_embeddings[f]
        for l, w in enumerate(self.weights):
            yield f"weights[{l}]", w, self.grad_weights[l]
        for l, b in enumerate(self.biases):
            yield f"biases[{l}]", b, self.grad_biases[l]

    def zero_grads(self) -> None:
        for _, _, g in self.blocks():
            g[...] = 0.0


def init_model(config: ModelConfig) -> ModelParams:
    """Deterministically initialize parameters: uniform in [-init_scale, +init_scale]."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    s = config.init_scale

    def draw(shape):
        return rng.uniform(-s, s, shape) if s > 0 else np.zeros(shape)

    embeddings = [draw((v, config.embed_dim)) for v in config.vocab_sizes]
    weights, biases = [], []
    for d_in, d_out in config.layer_dims:
        weights.append(draw((d_in, d_out)))
        biases.append(draw((d_out,)))
    params = ModelParams(
        config=config,
        embeddings=embeddings,
        weights=weights,
        biases=biases,
        grad_embeddings=[np.zeros_like(e) for e in embeddings],
        grad_weights=[np.zeros_like(w) for w in weights],
        grad_biases=[np.zeros_like(b) for b in biases],
        m={},
        v={},
    )
    params.m = {name: np.zeros_like(p) for name, p, _ in params.blocks()}
    params.v = {name: np.zeros_like(p) for name, p, _ in params.blocks()}
    return params


def _feature_ids(params: ModelParams, batch: Sequence[Sample]) -> np.ndarray:
    n_fields = len(params.config.vocab_sizes)
    ids = np.full((len(batch), n_fields), -1, dtype=np.int64)
    for i, sample in enumerate(batch):
        for f, v in sample.features:
            if not 0 <= f < n_fields:
                raise InputError(f"sample {i}: unknown feature field {f}")
            ids[i, f] = v
    for f in range(n_fields):
        col = ids[:, f]
        if (col < 0).any():
            i = int(np.argmax(col < 0))
            raise InputError(f"sample {i}: no id for feature field {f}")
        hi = int(col.max())
        if hi >= params.config.vocab_sizes[f]:
            i = int(np.argmax(col == hi))
            raise InputError(
                f"sample {i}: feature id {hi} out of vocabulary for field {f} "
                f"(size {params.config.vocab_sizes[f]})"
            )
    return ids


def forward(params: ModelParams, batch: Sequence[Sample]) -> np.ndarray:
    """Compute logits of shape (B, 2); activations are saved for backward."""
    ids = _feature_ids(params, batch)
    h = np.concatenate(
        [params.embeddings[f][ids[:, f]] for f in range(ids.shape[1])], axis=1
    )
    hiddens, preacts = [h], []
    n_layers = len(params.weights)
    for l in range(n_layers):
        z = h @ params.weights[l] + params.biases[l]
        preacts.append(z)
        h = np.maximum(z, 0.0) if l < n_layers - 1 else z
        if l < n_layers - 1:
            hiddens.append(h)
    params.cache = _ForwardCache(ids=ids, hiddens=hiddens, preacts=preacts)
    return preacts[-1]


def logit_pairs(logits: np.ndarray) -> list[LogitPair]:
    return [LogitPair(float(t0), float(t1)) for t0, t1 in logits]


def backward(params: ModelParams, dloss_dlogits: np.ndarray) -> None:
    """Accumulate parameter gradients for the loss whose logit gradients are given."""
    cache = params.cache
    if cache is None:
        raise InputError("backward requires a preceding forward on the same batch")
    d = np.asarray(dloss_dlogits, dtype=np.float64)
    if d.shape != cache.preacts[-1].shape:
        raise InputError(
            f"dloss_dlogits shape {d.shape} does not match forward batch "
            f"{cache.preacts[-1].shape}"
        )
    n_layers = len(params.weights)
    dz = d
    for l in range(n_layers - 1, -1, -1):
        params.grad_weights[l] += cache.hiddens[l].T @ dz
        params.grad_biases[l] += dz.sum(axis=0)
        if l > 0:
            dh = dz @ params.weights[l].T
            dz = dh * (cache.preacts[l - 1] > 0)
    dinput = dz @ params.weights[0].T
    e = params.config.embed_dim
    for f in range(cache.ids.shape[1]):
        np.add.at(params.grad_embeddings[f], cache.ids[:, f], dinput[:, f * e:(f + 1) * e])


def adam_step(
    params: ModelParams,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update; gradients are zeroed and the step counter advances."""
    t = params.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p, g in params.blocks():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter block {name}")
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        g[...] = 0.0
    params.step = t


def sgd_step(params: ModelParams, lr: float) -> None:
    """Plain gradient-descent update (linear in the gradient); zeroes grads."""
    for name, p, g in params.blocks():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter block {name}")
        p -= lr * g
        g[...] = 0.0
    params.step += 1
