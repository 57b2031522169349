"""Ranking and calibration metrics: AUC, GAUC, LogLoss, ECE, PCOC.

AUC is the Mann-Whitney statistic (ties count 0.5) computed by sorting in
O(n log n); GAUC is the impression-weighted mean of per-user AUCs, skipping
users whose labels are single-class.  ECE partitions [0, 1) into K equal
buckets and sums absolute per-bucket label/prediction gaps, normalized by the
dataset size; PCOC is the ratio of summed predictions to summed labels.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UndefinedMetricError

METRIC_NAMES = ("auc", "gauc", "logloss", "ece", "pcoc")


@dataclass(frozen=True)
class Prediction:
    p_hat: float
    label: int
    user_id: object = None


@dataclass
class EceBucket:
    lo: float
    hi: float
    count: int
    mean_p: float | None
    mean_y: float | None


@dataclass
class MetricsReport:
    """All five metrics for one evaluation run; None marks an undefined metric."""

    auc: float | None
    gauc: float | None
    logloss: float | None
    ece: float | None
    pcoc: float | None
    n_samples: int = 0
    excluded_user_count: int = 0
    ece_buckets: list[EceBucket] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def csv_row(self) -> dict:
        row = {k: ("" if v is None else repr(float(v))) for k, v in self.as_dict().items()}
        row["n_samples"] = str(self.n_samples)
        row["excluded_users"] = str(self.excluded_user_count)
        return row

    def format_table(self) -> str:
        lines = [f"{'metric':<10} value"]
        for name, v in self.as_dict().items():
            lines.append(f"{name:<10} " + ("n/a" if v is None else f"{v:.6f}"))
        lines.append(f"{'samples':<10} {self.n_samples}")
        lines.append(f"{'excl.users':<10} {self.excluded_user_count}")
        return "\n".join(lines)


def _split(preds) -> tuple[np.ndarray, np.ndarray]:
    scores = np.array([p.p_hat for p in preds], dtype=np.float64)
    labels = np.array([p.label for p in preds], dtype=np.int64)
    return scores, labels


def _auc_arrays(scores: np.ndarray, labels: np.ndarray) -> float:
    n_pos = int((labels == 1).sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC undefined: {n_pos} positives, {n_neg} negatives"
        )
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    # midranks: average the 1-based ranks inside each tie group
    ranks = np.empty(s.size, dtype=np.float64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        ranks[i:j + 1] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[labels[order] == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc(preds) -> float:
    """Fraction of (positive, negative) pairs ranked correctly, ties at 0.5."""
    scores, labels = _split(preds)
    return _auc_arrays(scores, labels)


def _gauc_impl(preds) -> tuple[float | None, int]:
    by_user: dict = defaultdict(list)
    for p in preds:
        by_user[p.user_id].append(p)
    total = 0.0
    weight = 0
    excluded = 0
    for user in by_user:
        scores, labels = _split(by_user[user])
        try:
            user_auc = _auc_arrays(scores, labels)
        except UndefinedMetricError:
            excluded += 1
            continue
        total += scores.size * user_auc
        weight += scores.size
    if weight == 0:
        return None, excluded
    return total / weight, excluded


def gauc(preds) -> tuple[float, int]:
    """Impression-weighted mean of per-user AUC.

    Users whose labels are single-class have no defined AUC; they are removed
    from both numerator and denominator and reported in the second element.
    """
    if not len(preds):
        raise UndefinedMetricError("GAUC undefined on empty input")
    value, excluded = _gauc_impl(preds)
    if value is None:
        raise UndefinedMetricError(
            f"GAUC undefined: all {excluded} users are single-class"
        )
    return value, excluded


def logloss(preds, clamp_eps: float = 1e-7) -> float:
    """Mean negative log-likelihood with predictions clamped away from {0, 1}."""
    if not len(preds):
        raise UndefinedMetricError("LogLoss undefined on empty input")
    if not 0 < clamp_eps < 0.5:
        raise ConfigError(f"clamp_eps must be in (0, 0.5), got {clamp_eps}")
    p, y = _split(preds)
    p = np.clip(p, clamp_eps, 1.0 - clamp_eps)
    return float(-(y * np.log(p) + (1 - y) * np.log1p(-p)).mean())


def ece(preds, n_buckets: int = 10) -> tuple[float, list[EceBucket]]:
    """Expected calibration error over equal-width buckets of [0, 1).

    Value is (1/N) * sum_k | sum_{i in bucket k} (y_i - p_i) |; predictions of
    exactly 1.0 land in the top bucket.
    """
    if n_buckets < 1:
        raise ConfigError(f"ece bucket count must be >= 1, got {n_buckets}")
    if not len(preds):
        raise UndefinedMetricError("ECE undefined on empty input")
    p, y = _split(preds)
    idx = np.minimum((p * n_buckets).astype(np.int64), n_buckets - 1)
    value = 0.0
    buckets = []
    for k in range(n_buckets):
        in_k = idx == k
        cnt = int(in_k.sum())
        if cnt:
            value += abs(float((y[in_k] - p[in_k]).sum()))
        buckets.append(
            EceBucket(
                lo=k / n_buckets,
                hi=(k + 1) / n_buckets,
                count=cnt,
                mean_p=float(p[in_k].mean()) if cnt else None,
                mean_y=float(y[in_k].mean()) if cnt else None,
            )
        )
    return value / p.size, buckets


def pcoc(preds) -> float:
    """Sum of predictions over sum of labels (ideal value 1.0)."""
    p, y = _split(preds)
    if y.sum() == 0:
        raise UndefinedMetricError("PCOC undefined without positive labels")
    return float(p.sum() / y.sum())


def compute_report(preds, n_buckets: int = 10, clamp_eps: float = 1e-7) -> MetricsReport:
    """All five metrics at once; undefined metrics become None, not failures."""
    values: dict = {}
    excluded = 0
    buckets: list[EceBucket] = []
    try:
        values["auc"] = auc(preds)
    except UndefinedMetricError:
        values["auc"] = None
    if len(preds):
        values["gauc"], excluded = _gauc_impl(preds)
    else:
        values["gauc"] = None
    try:
        values["logloss"] = logloss(preds, clamp_eps=clamp_eps)
    except UndefinedMetricError:
        values["logloss"] = None
    try:
        values["ece"], buckets = ece(preds, n_buckets=n_buckets)
    except UndefinedMetricError:
        values["ece"] = None
    try:
        values["pcoc"] = pcoc(preds)
    except UndefinedMetricError:
        values["pcoc"] = None
    return MetricsReport(
        n_samples=len(preds),
        excluded_user_count=excluded,
        ece_buckets=buckets,
        **values,
    )
