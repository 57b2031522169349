"""Experiment driver: train/evaluate any loss on any data source and context policy.

One `ExperimentConfig` fully determines a run: replicates are the entries of
`seeds`, and each replicate derives its data seed, model seed and
rank-subsampling seeds from the replicate seed, so a run re-executed from its
logged config reproduces its metric tables byte for byte.

One-logit baselines (pointwise/ranknet/listnet/combined_*) reuse the same
two-logit network and score with the logit subtraction click - nonclick, so
parameter counts match across methods and the loss is the only experimental
variable.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy import stats

from .context import ContextPolicy, Sample, drop_for_rank, stream_batcher
from .data import CsvSchema, SynthConfig, generate, read_csv
from .errors import ConfigError, DataError
from .losses import LOSS_KINDS, JrcWeights, loss_for_kind, predict_ctr
from .metrics import METRIC_NAMES, MetricsReport, Prediction, _gauc_impl, compute_report
from .model import ModelConfig, adam_step, backward, forward, init_model

logger = logging.getLogger(__name__)

EVAL_CHUNK = 8192


@dataclass
class ExperimentConfig:
    loss: str = "pointwise"
    alpha: float | None = None
    weight_ratio: float | None = 1.0
    context: ContextPolicy = field(default_factory=lambda: ContextPolicy("batch"))
    embed_dim: int = 8
    hidden_dims: tuple[int, ...] = (32,)
    init_scale: float = 0.05
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1
    batch_size: int = 256
    synth: SynthConfig | None = field(default_factory=SynthConfig)
    csv_path: str | None = None
    csv_schema: CsvSchema | None = None
    eval_frac: float = 0.2
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    ece_buckets: int = 10
    clamp_eps: float = 1e-7
    drop_rate: float = 0.0
    rank_prescale: float = 1.0

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss!r}; expected one of {LOSS_KINDS}")
        if (self.synth is None) == (self.csv_path is None):
            raise ConfigError("exactly one data source (synth or csv) must be set")
        if self.csv_path is not None and self.csv_schema is None:
            raise ConfigError("csv data source requires a schema")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not 0.0 < self.eval_frac < 1.0:
            raise ConfigError(f"eval_frac must be in (0, 1), got {self.eval_frac}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.drop_rate <= 1.0:
            raise ConfigError(f"drop_rate must be in [0, 1], got {self.drop_rate}")
        if self.rank_prescale <= 0:
            raise ConfigError("rank_prescale must be positive")
        self.seeds = tuple(int(s) for s in self.seeds)
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)

    def weights(self) -> JrcWeights:
        if self.alpha is not None:
            return JrcWeights(alpha=float(self.alpha))
        if self.weight_ratio is not None:
            return JrcWeights.from_ratio(float(self.weight_ratio))
        raise ConfigError("either alpha or weight_ratio must be set")

    def label(self) -> str:
        bits = [self.loss]
        if self.loss in ("jrc", "combined_pair", "combined_list"):
            bits.append(f"ratio={self.weights().weight_ratio:g}")
        bits.append(self.context.kind)
        if self.drop_rate:
            bits.append(f"drop={self.drop_rate:g}")
        return " ".join(bits)


@dataclass
class SeedOutcome:
    """Everything retained from one replicate."""

    seed: int
    report: MetricsReport
    predictions: list[Prediction]
    user_train_clicks: dict
    mean_calib_term: float | None = None
    mean_rank_term: float | None = None


@dataclass
class RunResult:
    config: ExperimentConfig
    outcomes: list[SeedOutcome]

    @property
    def reports(self) -> list[MetricsReport]:
        return [o.report for o in self.outcomes]

    def metric_values(self, name: str) -> list[float | None]:
        return [getattr(r, name) for r in self.reports]

    def mean(self, name: str) -> float | None:
        vals = [v for v in self.metric_values(name) if v is not None]
        return float(np.mean(vals)) if vals else None

    def std(self, name: str) -> float | None:
        vals = [v for v in self.metric_values(name) if v is not None]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else None

    def summary_row(self) -> dict:
        row: dict = {"run": self.config.label()}
        for name in METRIC_NAMES:
            m, s = self.mean(name), self.std(name)
            row[f"{name}_mean"] = m
            row[f"{name}_std"] = s
        return row


def _derive_seed(*parts: int) -> int:
    ss = np.random.SeedSequence([int(p) & (2**63 - 1) for p in parts])
    return int(ss.generate_state(1, np.uint64)[0])


def _load_samples(config: ExperimentConfig, seed: int) -> tuple[list[Sample], tuple[int, ...]]:
    if config.synth is not None:
        synth = replace(config.synth, seed=_derive_seed(config.synth.seed, seed, 1))
        return generate(synth), synth.vocab_sizes
    samples, vocabs = read_csv(config.csv_path, config.csv_schema)
    sizes = tuple(
        max(1, len(vocabs[c])) for c in config.csv_schema.feature_cols
    )
    return samples, sizes


def temporal_split(samples: list[Sample], eval_frac: float) -> tuple[list[Sample], list[Sample]]:
    """Hold out the last fraction by timestamp (stable for ties)."""
    ordered = sorted(range(len(samples)), key=lambda i: (samples[i].timestamp, i))
    n_eval = int(round(len(samples) * eval_frac))
    cut = len(samples) - n_eval
    train = [samples[i] for i in ordered[:cut]]
    evals = [samples[i] for i in ordered[cut:]]
    return train, evals


def _train_one_seed(config: ExperimentConfig, seed: int) -> SeedOutcome:
    samples, vocab_sizes = _load_samples(config, seed)
    train, evals = temporal_split(samples, config.eval_frac)
    if not train or not evals:
        raise DataError("temporal split produced an empty train or eval set")

    params = init_model(
        ModelConfig(
            vocab_sizes=vocab_sizes,
            embed_dim=config.embed_dim,
            hidden_dims=config.hidden_dims,
            seed=_derive_seed(seed, 2),
            init_scale=config.init_scale,
        )
    )
    weights = config.weights() if config.loss != "pointwise" else None
    calib_sum = rank_sum = 0.0
    n_steps = 0
    for epoch in range(config.epochs):
        for step, batch in enumerate(
            stream_batcher(iter(train), config.context, config.batch_size)
        ):
            logits = forward(params, batch.samples)
            participation = None
            if config.loss == "jrc" and config.drop_rate > 0.0:
                participation = drop_for_rank(
                    batch, config.drop_rate, seed=_derive_seed(seed, 3, epoch, step)
                )
            res = loss_for_kind(
                config.loss,
                logits,
                batch.labels(),
                batch.mask,
                weights=weights,
                participation=participation,
                rank_scale=config.rank_prescale,
            )
            backward(params, res.dlogits)
            adam_step(params, config.lr, config.beta1, config.beta2, config.adam_eps)
            if res.components:
                calib_sum += res.components["calib"]
                rank_sum += res.components["rank"]
            n_steps += 1

    predictions = []
    for lo in range(0, len(evals), EVAL_CHUNK):
        chunk = evals[lo:lo + EVAL_CHUNK]
        logits = forward(params, chunk)
        p = predict_ctr(logits)
        predictions.extend(
            Prediction(p_hat=float(p[i]), label=chunk[i].label, user_id=chunk[i].user_id)
            for i in range(len(chunk))
        )
    report = compute_report(
        predictions, n_buckets=config.ece_buckets, clamp_eps=config.clamp_eps
    )
    clicks: dict = {}
    for s in train:
        if s.label:
            clicks[s.user_id] = clicks.get(s.user_id, 0) + 1
    mean_calib = calib_sum / n_steps if n_steps and config.loss == "jrc" else None
    mean_rank = rank_sum / n_steps if n_steps and config.loss == "jrc" else None
    if mean_calib is not None:
        logger.info(
            "seed %d: mean per-step loss terms calib=%.4f rank=%.4f",
            seed, mean_calib, mean_rank,
        )
    return SeedOutcome(
        seed=seed,
        report=report,
        predictions=predictions,
        user_train_clicks=clicks,
        mean_calib_term=mean_calib,
        mean_rank_term=mean_rank,
    )


def train_eval(config: ExperimentConfig) -> RunResult:
    """Train and evaluate one configuration across all its replicate seeds."""
    outcomes = [_train_one_seed(config, seed) for seed in config.seeds]
    return RunResult(config=config, outcomes=outcomes)


def paired_ttest(run: RunResult, baseline: RunResult) -> dict[str, float | None]:
    """Two-sided paired t-test per metric over seed replicates.

    Returns None for a metric when it is undefined in any replicate or the
    paired differences have zero variance.
    """
    if len(run.outcomes) != len(baseline.outcomes):
        raise ConfigError("paired t-test requires equal replicate counts")
    out: dict[str, float | None] = {}
    for name in METRIC_NAMES:
        a = run.metric_values(name)
        b = baseline.metric_values(name)
        if any(v is None for v in a + b) or len(a) < 2:
            out[name] = None
            continue
        diffs = np.asarray(a) - np.asarray(b)
        if np.allclose(diffs.std(ddof=0), 0.0):
            out[name] = None
            continue
        out[name] = float(stats.ttest_rel(a, b).pvalue)
    return out


def sweep_alpha(config: ExperimentConfig, ratios) -> list[tuple[float, RunResult]]:
    """One jrc run per weight ratio (1-alpha)/alpha, shared seeds."""
    ratios = list(ratios)
    if not ratios:
        raise ConfigError("ratio list must not be empty")
    for r in ratios:
        if not math.isfinite(r) or r < 0:
            raise ConfigError(f"weight ratio must be >= 0, got {r}")
    rows = []
    for r in ratios:
        cfg = replace(config, loss="jrc", alpha=None, weight_ratio=float(r))
        rows.append((float(r), train_eval(cfg)))
    return rows


def sweep_context(config: ExperimentConfig, kinds) -> list[tuple[str, RunResult]]:
    """One run per context kind, shared seeds and data."""
    kinds = list(kinds)
    if not kinds:
        raise ConfigError("context kind list must not be empty")
    rows = []
    for kind in kinds:
        policy = ContextPolicy(kind, config.context.session_window_seconds)
        rows.append((kind, train_eval(replace(config, context=policy))))
    return rows


def sweep_droprate(config: ExperimentConfig, rates) -> list[tuple[float, RunResult]]:
    """One jrc run per rank-loss drop rate; the calibration term is untouched."""
    rates = list(rates)
    if not rates:
        raise ConfigError("drop rate list must not be empty")
    for r in rates:
        if not 0.0 <= r <= 1.0:
            raise ConfigError(f"drop rate must be in [0, 1], got {r}")
    rows = []
    for r in rates:
        rows.append((float(r), train_eval(replace(config, drop_rate=float(r)))))
    return rows


def user_group_report(
    run: RunResult, n_groups: int = 4, baseline: RunResult | None = None
) -> list[dict]:
    """Per-activity-group GAUC of a run against a baseline run.

    Users are ordered by historical (train-split) click count and their eval
    samples are cut into n_groups contiguous groups of equal sample counts
    (sizes differ by at most one; a user on a boundary can span two groups).
    Group GAUC is averaged over seeds; lift is (run - baseline) / baseline.
    """
    if n_groups < 1:
        raise ConfigError("n_groups must be >= 1")
    if baseline is None:
        raise ConfigError("user_group_report requires a baseline run")
    if [o.seed for o in run.outcomes] != [o.seed for o in baseline.outcomes]:
        raise ConfigError("run and baseline must share the same seeds")

    per_group_run: list[list[float]] = [[] for _ in range(n_groups)]
    per_group_base: list[list[float]] = [[] for _ in range(n_groups)]
    group_sizes = np.zeros(n_groups, dtype=np.int64)
    for o_run, o_base in zip(run.outcomes, baseline.outcomes):
        clicks = o_run.user_train_clicks
        order = sorted(
            range(len(o_run.predictions)),
            key=lambda i: (
                clicks.get(o_run.predictions[i].user_id, 0),
                str(o_run.predictions[i].user_id),
                i,
            ),
        )
        bounds = np.linspace(0, len(order), n_groups + 1).round().astype(np.int64)
        for g in range(n_groups):
            idx = order[bounds[g]:bounds[g + 1]]
            group_sizes[g] += len(idx)
            g_run, _ = _gauc_impl([o_run.predictions[i] for i in idx])
            g_base, _ = _gauc_impl([o_base.predictions[i] for i in idx])
            if g_run is not None:
                per_group_run[g].append(g_run)
            if g_base is not None:
                per_group_base[g].append(g_base)

    rows = []
    for g in range(n_groups):
        m_run = float(np.mean(per_group_run[g])) if per_group_run[g] else None
        m_base = float(np.mean(per_group_base[g])) if per_group_base[g] else None
        lift = (
            (m_run - m_base) / m_base
            if m_run is not None and m_base is not None and m_base
            else None
        )
        rows.append(
            {
                "group": g + 1,
                "samples": int(group_sizes[g]),
                "gauc": m_run,
                "gauc_baseline": m_base,
                "lift": lift,
            }
        )
    return rows


# --- flat key=value (de)serialization -------------------------------------

_SYNTH_FIELDS = {f.name for f in fields(SynthConfig)}
_SCHEMA_FIELDS = {f.name for f in fields(CsvSchema)}
_TOP_FIELDS = {
    f.name for f in fields(ExperimentConfig)
} - {"context", "synth", "csv_path", "csv_schema"}


def config_to_flat(config: ExperimentConfig) -> dict[str, str]:
    """Flatten a config to dotted key=value strings; inverse of config_from_flat."""
    flat: dict[str, str] = {}
    for name in sorted(_TOP_FIELDS):
        flat[name] = _fmt(getattr(config, name))
    flat["context.kind"] = config.context.kind
    flat["context.session_window_seconds"] = str(config.context.session_window_seconds)
    if config.synth is not None:
        flat["data"] = "synth"
        for f in fields(SynthConfig):
            flat[f"synth.{f.name}"] = _fmt(getattr(config.synth, f.name))
    else:
        flat["data"] = "csv"
        flat["csv.path"] = config.csv_path
        for f in fields(CsvSchema):
            flat[f"csv.{f.name}"] = _fmt(getattr(config.csv_schema, f.name))
    return flat


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def config_from_flat(flat: dict[str, str]) -> ExperimentConfig:
    """Build an ExperimentConfig from flat dotted key=value strings."""
    flat = dict(flat)
    data_kind = flat.pop("data", "synth")
    kwargs: dict = {}
    ctx_kwargs: dict = {"kind": "batch"}
    synth_kwargs: dict = {}
    csv_kwargs: dict = {}
    csv_path = None
    for key, raw in flat.items():
        if key.startswith("context."):
            name = key.removeprefix("context.")
            if name == "kind":
                ctx_kwargs["kind"] = raw
            elif name == "session_window_seconds":
                ctx_kwargs[name] = _coerce(key, raw, int)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        elif key.startswith("synth."):
            name = key.removeprefix("synth.")
            if name not in _SYNTH_FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            kind = float if name in ("base_logit", "noise_scale", "activity_skew") else int
            synth_kwargs[name] = _coerce(key, raw, kind)
        elif key.startswith("csv."):
            name = key.removeprefix("csv.")
            if name == "path":
                csv_path = raw
            elif name in ("feature_cols",):
                csv_kwargs[name] = [c for c in raw.split(",") if c]
            elif name == "header":
                csv_kwargs[name] = _coerce(key, raw, bool)
            elif name in _SCHEMA_FIELDS:
                csv_kwargs[name] = raw or None
            else:
                raise ConfigError(f"unknown config key {key!r}")
        elif key in _TOP_FIELDS:
            kwargs[key] = _coerce_top(key, raw)
        else:
            raise ConfigError(f"unknown config key {key!r}")

    kwargs["context"] = ContextPolicy(**ctx_kwargs)
    if data_kind == "synth":
        kwargs["synth"] = SynthConfig(**synth_kwargs)
        kwargs["csv_path"] = None
        kwargs["csv_schema"] = None
    elif data_kind == "csv":
        if csv_path is None:
            raise ConfigError("csv data source requires csv.path")
        kwargs["synth"] = None
        kwargs["csv_path"] = csv_path
        kwargs["csv_schema"] = CsvSchema(**csv_kwargs)
    else:
        raise ConfigError(f"data must be 'synth' or 'csv', got {data_kind!r}")
    return ExperimentConfig(**kwargs)


_TOP_TYPES = {
    "loss": str,
    "alpha": float,
    "weight_ratio": float,
    "embed_dim": int,
    "hidden_dims": "int_tuple",
    "init_scale": float,
    "lr": float,
    "beta1": float,
    "beta2": float,
    "adam_eps": float,
    "epochs": int,
    "batch_size": int,
    "eval_frac": float,
    "seeds": "int_tuple",
    "ece_buckets": int,
    "clamp_eps": float,
    "drop_rate": float,
    "rank_prescale": float,
}


def _coerce_top(key: str, raw: str):
    kind = _TOP_TYPES[key]
    if raw == "":
        return None
    if kind == "int_tuple":
        return tuple(_coerce(key, part, int) for part in raw.split(",") if part)
    return _coerce(key, raw, kind)


def _coerce(key: str, raw: str, kind):
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse config value {key}={raw!r} as {kind.__name__}")


def parse_flat_file(text: str) -> dict[str, str]:
    """Parse 'key = value' lines; blank lines and full-line # comments ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno} is not key=value: {line!r}")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def flat_to_text(flat: dict[str, str]) -> str:
    return "\n".join(f"{k} = {v}" for k, v in flat.items()) + "\n"
