import numpy as np
import pytest

from ctrlab.context import ContextBatch, Sample, build_mask
from ctrlab.model import ModelConfig, forward, init_model


def make_samples(ids, labels=None, users=None, timestamps=None, attrs=None):
    """Samples from an (B, F) id matrix plus optional metadata columns."""
    ids = np.asarray(ids)
    n = ids.shape[0]
    labels = labels if labels is not None else [0] * n
    users = users if users is not None else list(range(n))
    timestamps = timestamps if timestamps is not None else [float(i) for i in range(n)]
    attrs = attrs if attrs is not None else [{} for _ in range(n)]
    return [
        Sample(
            features=[(f, int(ids[i, f])) for f in range(ids.shape[1])],
            label=int(labels[i]),
            user_id=users[i],
            timestamp=float(timestamps[i]),
            attrs=dict(attrs[i]),
        )
        for i in range(n)
    ]


def random_instance(rng, max_batch=8, max_embed=4):
    """A random small model + batch + context mask for gradient checks."""
    n_fields = rng.integers(1, 4)
    vocab_sizes = tuple(int(v) for v in rng.integers(2, 6, n_fields))
    config = ModelConfig(
        vocab_sizes=vocab_sizes,
        embed_dim=int(rng.integers(1, max_embed + 1)),
        hidden_dims=(int(rng.integers(2, 6)),),
        seed=int(rng.integers(0, 2**32)),
        init_scale=0.5,
    )
    params = init_model(config)
    b = int(rng.integers(2, max_batch + 1))
    ids = np.stack([rng.integers(0, v, b) for v in vocab_sizes], axis=1)
    labels = rng.integers(0, 2, b)
    keys = rng.integers(0, max(1, b // 2), b)
    samples = make_samples(ids, labels=labels)
    return params, samples, np.asarray(labels), build_mask(keys)


def fd_param_gradients(params, samples, loss_fn, eps=1e-4):
    """Central finite differences of loss_fn(logits) w.r.t. every parameter.

    loss_fn maps the (B, 2) logits to a scalar; this is the independent
    oracle for the analytic backward pass.
    """
    grads = {}
    for name, p, _ in params.blocks():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + eps
            up = loss_fn(forward(params, samples))
            p[idx] = orig - eps
            down = loss_fn(forward(params, samples))
            p[idx] = orig
            g[idx] = (up - down) / (2 * eps)
            it.iternext()
        grads[name] = g
    return grads


def max_rel_err(analytic: dict, numeric: dict) -> float:
    """Scale-aware max relative error over parameter blocks."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(20240612)
