"""Training losses for two-logit CTR models, plus their one-logit baselines.

Two families share this module:

* two-logit losses (`calib_loss`, `rank_loss`, `jrc_loss`) operating on
  (nonclick, click) logit pairs, where the predicted CTR is
  sigmoid(click - nonclick);
* one-logit baselines (`pointwise_loss`, `ranknet_loss`, `listnet_loss`,
  `combined_loss`) operating on a scalar score per sample.

Every loss returns its scalar value (mean over the batch) together with the
gradient w.r.t. its logit inputs, so the model's backward pass can consume it
directly.  All softmax/log-softmax reductions use max-subtraction, and
out-of-context entries are excluded from reductions exactly (no additive
-1e9 surrogate), so values stay finite for logits up to 1e4 and beyond.

`ebm_conditionals` exposes the probabilistic reading of the logit pairs as
unnormalized joint energies: the per-sample label posterior, the in-context
conditional of a sample given its label, and the per-context label marginal.
All three are ratios in which the global normalizer cancels, so it is never
materialized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .model import LogitPair


@dataclass(frozen=True)
class JrcWeights:
    """Mixing weight between the calibration and rank terms.

    alpha in [0, 1] weights the calibration term; the rank term gets 1-alpha.
    Equivalently parameterized by weight_ratio = (1-alpha)/alpha.
    """

    alpha: float

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and 0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")

    @classmethod
    def from_ratio(cls, weight_ratio: float) -> "JrcWeights":
        if not np.isfinite(weight_ratio) or weight_ratio < 0:
            raise ConfigError(f"weight_ratio must be >= 0, got {weight_ratio}")
        return cls(alpha=1.0 / (1.0 + weight_ratio))

    @property
    def weight_ratio(self) -> float:
        return (1.0 - self.alpha) / self.alpha if self.alpha > 0 else np.inf


@dataclass
class LossResult:
    """Scalar loss (batch mean) and the gradient w.r.t. the loss's logit inputs.

    dlogits has shape (B, 2) for two-logit losses and (B,) for scalar-score
    losses.  terms holds per-sample contributions before reduction where the
    loss has a natural per-sample decomposition.  pair_count is set by
    ranknet_loss.
    """

    value: float
    dlogits: np.ndarray
    terms: np.ndarray | None = None
    pair_count: int | None = None
    components: dict[str, float] | None = None


@dataclass
class LossInputs:
    """A batch as seen by the two-logit losses: logit pairs, labels, context mask."""

    logits: np.ndarray  # (B, 2) float, [:, 0] nonclick, [:, 1] click
    labels: np.ndarray  # (B,) in {0, 1}
    mask: np.ndarray    # (B, B) bool, mask[i, j] = same-context indicator

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        n = self.logits.shape[0]
        if self.logits.ndim != 2 or self.logits.shape[1] != 2:
            raise InputError(f"logits must have shape (B, 2), got {self.logits.shape}")
        if self.labels.shape != (n,):
            raise InputError("labels length does not match logits")
        if self.mask.shape != (n, n):
            raise InputError("mask shape does not match batch size")
        if not np.all(np.isfinite(self.logits)):
            raise InputError("logits must be finite")
        if not np.isin(self.labels, (0, 1)).all():
            raise InputError("labels must be 0 or 1")
        _check_equivalence_mask(self.mask)

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]

    def context_groups(self) -> list[np.ndarray]:
        """Index arrays of the mask's equivalence classes, by first member."""
        reps = np.argmax(self.mask, axis=1)
        return [np.flatnonzero(reps == r) for r in np.unique(reps)]


def _check_equivalence_mask(mask: np.ndarray) -> None:
    n = mask.shape[0]
    if n and not mask.diagonal().all():
        raise InputError("mask must have a unit diagonal")
    if not np.array_equal(mask, mask.T):
        raise InputError("mask must be symmetric")
    reps = np.argmax(mask, axis=1)
    if n and not np.array_equal(mask, reps[:, None] == reps[None, :]):
        raise InputError("mask must encode an equivalence (shared-context) relation")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable sigmoid, branch on sign."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)) without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _logsumexp(x: np.ndarray) -> float:
    hi = np.max(x)
    return float(hi + np.log(np.exp(x - hi).sum()))


def predict_ctr(logit):
    """Predicted click probability sigmoid(click - nonclick).

    Identical to the softmax of the two logits at the click index; invariant
    to adding a constant to both logits.  Accepts a LogitPair (returns float)
    or an (N, 2) array (returns an (N,) array).
    """
    if isinstance(logit, LogitPair):
        arr = np.array([[logit.nonclick, logit.click]], dtype=np.float64)
        scalar = True
    else:
        arr = np.asarray(logit, dtype=np.float64)
        scalar = arr.ndim == 1
        arr = np.atleast_2d(arr)
    if arr.shape[-1] != 2:
        raise InputError(f"expected logit pairs of width 2, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError("logits must be finite")
    p = _sigmoid(arr[:, 1] - arr[:, 0])
    return float(p[0]) if scalar else p


def _bce_with_logits(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample binary cross-entropy of sigmoid(score) and d/dscore (unscaled)."""
    y = labels.astype(np.float64)
    terms = np.where(labels == 1, _softplus(-scores), _softplus(scores))
    return terms, _sigmoid(scores) - y


def calib_loss(inputs: LossInputs) -> LossResult:
    """Pointwise two-logit cross-entropy: mean of -log softmax(t0, t1)[y].

    Computed through the logit subtraction, so it coincides bit-for-bit with
    binary cross-entropy of predict_ctr.  Per sample, the gradient is
    (p_hat - y)/B on the click logit and its negation on the nonclick logit.
    """
    s = inputs.logits[:, 1] - inputs.logits[:, 0]
    terms, dscore = _bce_with_logits(s, inputs.labels)
    n = inputs.batch_size
    ds = dscore / n
    dlogits = np.stack([-ds, ds], axis=1)
    return LossResult(value=float(terms.mean()), dlogits=dlogits, terms=terms)


def rank_loss(
    inputs: LossInputs,
    participation: np.ndarray | None = None,
    per_context_size_norm: bool = False,
) -> LossResult:
    """In-batch listwise generative loss over same-context samples.

    Each participating sample i contributes
        -log [ exp(t_i^{y_i}) / sum_{j in C_i} exp(t_j^{y_i}) ],
    where C_i is the set of participating samples sharing i's context and the
    logit side follows i's own label (click logits for positives, nonclick
    logits for negatives).  The value is the mean of these terms over the
    participating samples.  This matches the masked tiled formulation that
    divides each context column by its mask column sum: that division cancels
    over a context's columns, leaving the plain per-sample mean.

    per_context_size_norm=True additionally divides each sample's term by its
    context size before averaging (comparison variant; not the default).

    participation flags (see drop_for_rank) remove samples from both the
    softmax sets and the terms; the mean then runs over participants only,
    and an empty participant set yields loss 0 with zero gradients.
    """
    n = inputs.batch_size
    dlogits = np.zeros((n, 2))
    terms = np.zeros(n)
    if participation is None:
        active = np.ones(n, dtype=bool)
    else:
        active = np.asarray(participation, dtype=bool)
        if active.shape != (n,):
            raise InputError("participation flags must match the batch size")
    n_active = int(active.sum())
    if n_active == 0:
        return LossResult(value=0.0, dlogits=dlogits, terms=terms)

    for members in inputs.context_groups():
        group = members[active[members]]
        if group.size == 0:
            continue
        weight = 1.0 / (n_active * group.size) if per_context_size_norm else 1.0 / n_active
        for side in (0, 1):
            owners = group[inputs.labels[group] == side]
            if owners.size == 0:
                continue
            logits = inputs.logits[group, side]
            hi = logits.max()
            ex = np.exp(logits - hi)
            lse = hi + np.log(ex.sum())
            softmax = ex / ex.sum()
            terms[owners] = lse - inputs.logits[owners, side]
            dlogits[group, side] += weight * owners.size * softmax
            dlogits[owners, side] -= weight
    if per_context_size_norm:
        # per-sample participant counts of each sample's own context
        counts = (inputs.mask & active[None, :]).sum(axis=1)
        value = float(terms[active] @ (1.0 / counts[active]) / n_active)
    else:
        value = float(terms[active].sum() / n_active)
    return LossResult(value=value, dlogits=dlogits, terms=terms)


def jrc_loss(
    inputs: LossInputs,
    weights: JrcWeights,
    participation: np.ndarray | None = None,
    rank_scale: float = 1.0,
) -> LossResult:
    """alpha * calib_loss + (1 - alpha) * rank_loss, gradients combined linearly.

    rank_scale pre-scales the rank term before mixing (useful when matching
    the magnitudes of the two terms for ratio sweeps).
    """
    a = weights.alpha
    c = calib_loss(inputs)
    r = rank_loss(inputs, participation=participation)
    value = a * c.value + (1.0 - a) * rank_scale * r.value
    dlogits = a * c.dlogits + (1.0 - a) * rank_scale * r.dlogits
    return LossResult(
        value=float(value),
        dlogits=dlogits,
        components={"calib": c.value, "rank": r.value},
    )


def _validate_scores(scores, labels, mask=None):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 1:
        raise InputError(f"scores must be one-dimensional, got shape {scores.shape}")
    if labels.shape != scores.shape:
        raise InputError("labels length does not match scores")
    if not np.all(np.isfinite(scores)):
        raise InputError("scores must be finite")
    if not np.isin(labels, (0, 1)).all():
        raise InputError("labels must be 0 or 1")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (scores.size, scores.size):
            raise InputError("mask shape does not match batch size")
        _check_equivalence_mask(mask)
    return scores, labels, mask


def _mask_groups(mask: np.ndarray) -> list[np.ndarray]:
    reps = np.argmax(mask, axis=1)
    return [np.flatnonzero(reps == r) for r in np.unique(reps)]


def pointwise_loss(scores, labels) -> LossResult:
    """Mean binary cross-entropy of sigmoid(score) against the labels."""
    scores, labels, _ = _validate_scores(scores, labels)
    terms, dscore = _bce_with_logits(scores, labels)
    return LossResult(
        value=float(terms.mean()), dlogits=dscore / scores.size, terms=terms
    )


def ranknet_loss(scores, labels, mask) -> LossResult:
    """Mean pairwise logistic loss -log sigmoid(s_pos - s_neg) over in-context pairs.

    With no (positive, negative) pair in any context, returns loss 0 with
    zero gradients and pair_count=0.
    """
    scores, labels, mask = _validate_scores(scores, labels, mask)
    n = scores.size
    dscores = np.zeros(n)
    total = 0.0
    pairs = 0
    for group in _mask_groups(mask):
        pos = group[labels[group] == 1]
        neg = group[labels[group] == 0]
        if pos.size == 0 or neg.size == 0:
            continue
        diff = scores[pos][:, None] - scores[neg][None, :]
        total += _softplus(-diff).sum()
        g = _sigmoid(diff) - 1.0
        np.add.at(dscores, pos, g.sum(axis=1))
        np.add.at(dscores, neg, -g.sum(axis=0))
        pairs += pos.size * neg.size
    if pairs == 0:
        return LossResult(value=0.0, dlogits=dscores, pair_count=0)
    return LossResult(value=float(total / pairs), dlogits=dscores / pairs, pair_count=pairs)


def listnet_loss(scores, labels, mask) -> LossResult:
    """Listwise softmax loss: positives' -log softmax-over-context, batch mean.

    Negatives contribute no term of their own (an all-negative context costs
    zero) but do appear in every normalizer of their context.
    """
    scores, labels, mask = _validate_scores(scores, labels, mask)
    n = scores.size
    dscores = np.zeros(n)
    terms = np.zeros(n)
    for group in _mask_groups(mask):
        pos = group[labels[group] == 1]
        if pos.size == 0:
            continue
        s = scores[group]
        hi = s.max()
        ex = np.exp(s - hi)
        lse = hi + np.log(ex.sum())
        softmax = ex / ex.sum()
        terms[pos] = lse - scores[pos]
        dscores[group] += pos.size * softmax / n
        dscores[pos] -= 1.0 / n
    return LossResult(value=float(terms.sum() / n), dlogits=dscores, terms=terms)


def combined_loss(scores, labels, mask, weights: JrcWeights, kind: str = "pair") -> LossResult:
    """alpha * pointwise + (1 - alpha) * (ranknet | listnet) on a shared score."""
    if kind not in ("pair", "list"):
        raise ConfigError(f"combined loss kind must be 'pair' or 'list', got {kind!r}")
    a = weights.alpha
    p = pointwise_loss(scores, labels)
    r = ranknet_loss(scores, labels, mask) if kind == "pair" else listnet_loss(scores, labels, mask)
    return LossResult(
        value=float(a * p.value + (1.0 - a) * r.value),
        dlogits=a * p.dlogits + (1.0 - a) * r.dlogits,
        pair_count=r.pair_count,
    )


@dataclass
class EbmConditionals:
    """Conditional probabilities implied by reading logit pairs as joint energies.

    p_y_given_x[i, s]:  softmax over sample i's own two logits.
    p_x_given_yz[i, s]: probability of sample i among its context's samples
                        on logit side s (the in-batch stand-in for the
                        context population).
    p_y_given_z[rep]:   label marginal of the context represented by sample
                        index rep, a length-2 array.
    context_reps[i]:    representative (first member) of sample i's context.
    """

    p_y_given_x: np.ndarray
    p_x_given_yz: np.ndarray
    p_y_given_z: dict[int, np.ndarray]
    context_reps: np.ndarray


def ebm_conditionals(logits, labels, mask) -> EbmConditionals:
    """Compute the label posterior, in-context sample conditional, and context
    label marginal from one set of logit pairs.

    All three are ratios of summed exponentiated logits over subsets of the
    batch, so the global normalization constant cancels and is never computed.
    """
    inputs = LossInputs(logits=logits, labels=labels, mask=mask)
    t = inputs.logits
    p1 = _sigmoid(t[:, 1] - t[:, 0])
    p_y_given_x = np.stack([1.0 - p1, p1], axis=1)

    n = inputs.batch_size
    p_x_given_yz = np.zeros((n, 2))
    p_y_given_z: dict[int, np.ndarray] = {}
    reps = np.argmax(inputs.mask, axis=1)
    for members in inputs.context_groups():
        lse = np.array([_logsumexp(t[members, side]) for side in (0, 1)])
        for side in (0, 1):
            p_x_given_yz[members, side] = np.exp(t[members, side] - lse[side])
        lse_all = _logsumexp(lse)
        p_y_given_z[int(members[0])] = np.exp(lse - lse_all)
    return EbmConditionals(
        p_y_given_x=p_y_given_x,
        p_x_given_yz=p_x_given_yz,
        p_y_given_z=p_y_given_z,
        context_reps=reps,
    )


LOSS_KINDS = ("pointwise", "ranknet", "listnet", "combined_pair", "combined_list", "jrc")


def loss_for_kind(
    kind: str,
    logits: np.ndarray,
    labels: np.ndarray,
    mask: np.ndarray,
    weights: JrcWeights | None = None,
    participation: np.ndarray | None = None,
    rank_scale: float = 1.0,
) -> LossResult:
    """Evaluate any supported loss on two-logit model outputs.

    One-logit baselines score with the logit subtraction click - nonclick, so
    returned gradients are always (B, 2) and feed the model's backward pass
    unchanged.  This keeps parameter counts identical across methods.
    """
    if kind == "jrc":
        inputs = LossInputs(logits=logits, labels=labels, mask=mask)
        if weights is None:
            raise ConfigError("jrc loss requires JrcWeights")
        return jrc_loss(inputs, weights, participation=participation, rank_scale=rank_scale)
    logits = np.asarray(logits, dtype=np.float64)
    scores = logits[:, 1] - logits[:, 0]
    if kind == "pointwise":
        res = pointwise_loss(scores, labels)
    elif kind == "ranknet":
        res = ranknet_loss(scores, labels, mask)
    elif kind == "listnet":
        res = listnet_loss(scores, labels, mask)
    elif kind in ("combined_pair", "combined_list"):
        if weights is None:
            raise ConfigError(f"{kind} requires JrcWeights")
        res = combined_loss(scores, labels, mask, weights, kind=kind.removeprefix("combined_"))
    else:
        raise ConfigError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    ds = res.dlogits
    res.dlogits = np.stack([-ds, ds], axis=1)
    return res
