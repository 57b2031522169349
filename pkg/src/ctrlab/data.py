"""Synthetic impression streams with known ground-truth CTR, and CSV ingestion.

The generator draws a logistic ground truth,

    true_ctr = sigmoid(base_logit + <user_vec, item_vec> + domain_bias + session_noise),

so a well-specified learner can in principle reach PCOC close to 1, making
calibration failures attributable to the training loss rather than model
misspecification.  The noise term is drawn once per session and shared by the
session's impressions, which gives sessions correlated preferences: within a
session the noise shifts every logit equally and cancels out of any
within-session contrast.

Categorical CSV columns are dictionary-encoded (token -> dense id in
first-seen order) rather than hashed, for exactness at desk scale; the
resulting vocabularies round-trip through two-column (token, id) CSV files.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .context import Sample
from .errors import ConfigError, DataError

SESSION_SPAN_SECONDS = 600.0  # impressions of one session stay inside this window
DOMAIN_BIAS_SCALE = 0.2


@dataclass
class SynthConfig:
    n_users: int = 2500
    n_items: int = 400
    n_domains: int = 4
    sessions_per_user: int = 10
    items_per_session: int = 10
    latent_dim: int = 8
    base_logit: float = -1.0
    noise_scale: float = 1.0
    seed: int = 20240501
    activity_skew: float = 0.75

    def __post_init__(self):
        counts = {
            "n_users": self.n_users,
            "n_items": self.n_items,
            "n_domains": self.n_domains,
            "sessions_per_user": self.sessions_per_user,
            "items_per_session": self.items_per_session,
        }
        for name, v in counts.items():
            if int(v) != v or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v}")
        if self.latent_dim < 0 or int(self.latent_dim) != self.latent_dim:
            raise ConfigError(f"latent_dim must be a nonnegative integer, got {self.latent_dim}")
        if self.noise_scale < 0:
            raise ConfigError(f"noise_scale must be >= 0, got {self.noise_scale}")
        if self.activity_skew < 0:
            raise ConfigError(f"activity_skew must be >= 0, got {self.activity_skew}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @property
    def vocab_sizes(self) -> tuple[int, int, int]:
        """Feature vocabularies in field order (user, item, domain)."""
        return (self.n_users, self.n_items, self.n_domains)


@dataclass
class LabeledSample(Sample):
    true_ctr: float = field(kw_only=True, default=0.5)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def generate(config: SynthConfig) -> list[LabeledSample]:
    """Deterministic synthetic impression log, sorted by timestamp.

    Users are assigned a gender attribute and a per-session placement domain;
    each session's impressions share a timestamp window well inside
    SESSION_SPAN_SECONDS.  activity_skew > 0 gives users lognormal-weighted
    session counts, producing the click-history imbalance used by the
    user-group analysis.
    """
    rng = np.random.Generator(np.random.PCG64(config.seed))
    d = config.latent_dim
    if d > 0:
        user_vecs = rng.normal(0.0, 1.0 / np.sqrt(d), (config.n_users, d))
        item_vecs = rng.normal(0.0, 1.0 / np.sqrt(d), (config.n_items, d))
    else:
        user_vecs = np.zeros((config.n_users, 1))
        item_vecs = np.zeros((config.n_items, 1))
    domain_bias = rng.normal(0.0, DOMAIN_BIAS_SCALE, config.n_domains)
    domain_bias -= domain_bias.mean()
    gender = rng.integers(0, 2, config.n_users)

    if config.activity_skew > 0:
        w = np.exp(config.activity_skew * rng.normal(0.0, 1.0, config.n_users)
                   - 0.5 * config.activity_skew**2)
    else:
        w = np.ones(config.n_users)
    sessions_per_user = np.maximum(1, np.rint(config.sessions_per_user * w)).astype(np.int64)

    session_user = np.repeat(np.arange(config.n_users), sessions_per_user)
    n_sessions = session_user.size
    horizon = 60.0 * n_sessions
    session_start = rng.uniform(0.0, horizon, n_sessions)
    session_domain = rng.integers(0, config.n_domains, n_sessions)
    session_noise = (
        rng.normal(0.0, config.noise_scale, n_sessions)
        if config.noise_scale > 0
        else np.zeros(n_sessions)
    )

    k = config.items_per_session
    items = rng.integers(0, config.n_items, (n_sessions, k))
    spacing = min(20.0, (SESSION_SPAN_SECONDS * 0.9) / max(1, k - 1))
    ts = session_start[:, None] + spacing * np.arange(k)[None, :]
    logit = (
        config.base_logit
        + np.einsum("sd,skd->sk", user_vecs[session_user], item_vecs[items])
        + domain_bias[session_domain][:, None]
        + session_noise[:, None]
    )
    p = _stable_sigmoid(logit)
    labels = (rng.random((n_sessions, k)) < p).astype(np.int64)

    flat_ts = ts.ravel()
    order = np.argsort(flat_ts, kind="mergesort")
    users = np.repeat(session_user, k)
    domains = np.repeat(session_domain, k)
    samples = []
    items_flat = items.ravel()
    labels_flat = labels.ravel()
    p_flat = p.ravel()
    for i in order:
        u = int(users[i])
        dom = int(domains[i])
        samples.append(
            LabeledSample(
                features=[(0, u), (1, int(items_flat[i])), (2, dom)],
                label=int(labels_flat[i]),
                user_id=u,
                timestamp=float(flat_ts[i]),
                attrs={"gender": int(gender[u]), "domain": dom},
                true_ctr=float(p_flat[i]),
            )
        )
    return samples


@dataclass
class CsvSchema:
    """Column mapping for reading impression logs from CSV."""

    label_col: str
    feature_cols: list[str]
    user_col: str | None = None
    timestamp_col: str | None = None
    gender_col: str | None = None
    domain_col: str | None = None
    delimiter: str = ","
    header: bool = True

    def __post_init__(self):
        if not self.label_col:
            raise ConfigError("schema requires a label column")
        if not self.feature_cols:
            raise ConfigError("schema requires at least one feature column")
        if len(set(self.feature_cols)) != len(self.feature_cols):
            raise ConfigError("feature columns must be distinct")
        if self.label_col in self.feature_cols:
            raise ConfigError("label column cannot also be a feature column")

    def encoded_cols(self) -> list[str]:
        """Columns that get dictionary-encoded, in vocabulary order."""
        cols = list(self.feature_cols)
        for extra in (self.user_col, self.gender_col, self.domain_col):
            if extra is not None and extra not in cols:
                cols.append(extra)
        return cols


def read_csv(
    path,
    schema: CsvSchema,
    vocabs: dict[str, dict[str, int]] | None = None,
    max_bad_rows: int = 100,
) -> tuple[list[Sample], dict[str, dict[str, int]]]:
    """Parse a CSV into samples plus the (possibly grown) vocabulary maps.

    Categorical columns are dictionary-encoded in first-seen order unless a
    vocabulary is supplied, in which case unseen tokens extend it.  Malformed
    rows are skipped and counted; more than max_bad_rows of them aborts with
    the offending line numbers.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    vocabs = {c: dict(vocabs.get(c, {})) if vocabs else {} for c in schema.encoded_cols()}

    def encode(col: str, token: str) -> int:
        vocab = vocabs[col]
        if token not in vocab:
            vocab[token] = len(vocab)
        return vocab[token]

    samples: list[Sample] = []
    bad: list[tuple[int, str]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        if schema.header:
            try:
                names = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty file where a header row was expected")
            col_idx = {name: i for i, name in enumerate(names)}
            missing = [
                c
                for c in [schema.label_col, *schema.encoded_cols(),
                          *( [schema.timestamp_col] if schema.timestamp_col else [] )]
                if c not in col_idx
            ]
            if schema.label_col in missing:
                raise DataError(f"{path}: label column {schema.label_col!r} not in header {names}")
            if missing:
                raise DataError(f"{path}: columns missing from header: {missing}")
        else:
            col_idx = None

        for lineno, row in enumerate(reader, start=2 if schema.header else 1):
            try:
                samples.append(_parse_row(row, schema, col_idx, encode))
            except (ValueError, IndexError, KeyError) as exc:
                bad.append((lineno, str(exc)))
                if len(bad) > max_bad_rows:
                    listed = ", ".join(str(l) for l, _ in bad[:20])
                    raise DataError(
                        f"{path}: more than {max_bad_rows} malformed rows "
                        f"(lines {listed}{', ...' if len(bad) > 20 else ''})"
                    )
    return samples, vocabs


def _parse_row(row, schema: CsvSchema, col_idx, encode) -> Sample:
    def get(col: str) -> str:
        i = col_idx[col] if col_idx is not None else int(col)
        if i >= len(row):
            raise ValueError(f"row too short for column {col!r}")
        return row[i]

    label = int(float(get(schema.label_col)))
    if label not in (0, 1):
        raise ValueError(f"label must be 0/1, got {label}")
    features = [(f, encode(col, get(col))) for f, col in enumerate(schema.feature_cols)]
    user = encode(schema.user_col, get(schema.user_col)) if schema.user_col else None
    ts = float(get(schema.timestamp_col)) if schema.timestamp_col else 0.0
    attrs = {}
    if schema.gender_col:
        attrs["gender"] = encode(schema.gender_col, get(schema.gender_col))
    if schema.domain_col:
        attrs["domain"] = encode(schema.domain_col, get(schema.domain_col))
    return Sample(features=features, label=label, user_id=user, timestamp=ts, attrs=attrs)


def write_csv(samples, path) -> CsvSchema:
    """Write samples as UTF-8 CSV and return the schema that reads them back.

    Columns: label, user_id, timestamp, gender/domain attrs when present on
    the first sample, then one feat<i> column per feature field.
    """
    path = Path(path)
    samples = list(samples)
    if not samples:
        raise DataError("refusing to write an empty sample set")
    n_fields = len(samples[0].features)
    has_gender = "gender" in samples[0].attrs
    has_domain = "domain" in samples[0].attrs
    feat_cols = [f"feat{f}" for f in range(n_fields)]
    header = ["label", "user_id", "timestamp"]
    if has_gender:
        header.append("gender")
    if has_domain:
        header.append("domain")
    header += feat_cols
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in samples:
            by_field = dict(s.features)
            row = [str(s.label), str(s.user_id), repr(float(s.timestamp))]
            if has_gender:
                row.append(str(s.attrs["gender"]))
            if has_domain:
                row.append(str(s.attrs["domain"]))
            row += [str(by_field[f]) for f in range(n_fields)]
            writer.writerow(row)
    return CsvSchema(
        label_col="label",
        feature_cols=feat_cols,
        user_col="user_id",
        timestamp_col="timestamp",
        gender_col="gender" if has_gender else None,
        domain_col="domain" if has_domain else None,
    )


def identity_vocabs(schema: CsvSchema, samples) -> dict[str, dict[str, int]]:
    """Vocabularies mapping each integer-valued token to itself.

    Useful to re-read a CSV written by write_csv into ids identical to the
    originals instead of first-seen order.
    """
    vocabs: dict[str, dict[str, int]] = {}
    samples = list(samples)
    for f, col in enumerate(schema.feature_cols):
        ids = {v for s in samples for ff, v in s.features if ff == f}
        vocabs[col] = {str(v): v for v in sorted(ids)}
    if schema.user_col and schema.user_col not in vocabs:
        vocabs[schema.user_col] = {str(s.user_id): int(s.user_id) for s in samples}
    for col, attr in ((schema.gender_col, "gender"), (schema.domain_col, "domain")):
        if col and col not in vocabs:
            vocabs[col] = {str(s.attrs[attr]): int(s.attrs[attr]) for s in samples}
    return vocabs


def write_vocab(vocab: dict[str, int], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["token", "id"])
        for token, idx in sorted(vocab.items(), key=lambda kv: kv[1]):
            writer.writerow([token, str(idx)])


def read_vocab(path) -> dict[str, int]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["token", "id"]:
            raise DataError(f"{path}: expected header token,id, got {header}")
        return {token: int(idx) for token, idx in reader}
