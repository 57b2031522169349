"""Command line interface.

Subcommands: train, eval, sweep-alpha, sweep-context, sweep-droprate,
user-groups, gen-data.  Every experiment subcommand reads an optional flat
key=value config file (--config) and accepts the same dotted keys as
command-line overrides (e.g. --loss jrc --synth.n_users 500).

Outputs are CSV tables plus aligned plain-text tables.  Exit codes:
0 success, 2 configuration error, 3 data/input error, 4 training error,
1 anything unexpected.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .context import CONTEXT_KINDS
from .data import generate, identity_vocabs, read_csv, write_csv, write_vocab
from .errors import (
    ConfigError,
    CtrLabError,
    DataError,
    InputError,
    StreamError,
    TrainingError,
    UndefinedMetricError,
)
from .harness import (
    ExperimentConfig,
    RunResult,
    config_from_flat,
    config_to_flat,
    flat_to_text,
    paired_ttest,
    parse_flat_file,
    sweep_alpha,
    sweep_context,
    sweep_droprate,
    train_eval,
    user_group_report,
)
from .metrics import METRIC_NAMES, Prediction, compute_report

EXIT_CODES = (
    (ConfigError, 2),
    (StreamError, 3),
    (DataError, 3),
    (InputError, 3),
    (UndefinedMetricError, 3),
    (TrainingError, 4),
)


def _fmt_cell(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def format_table(rows: list[dict]) -> str:
    """Aligned plain-text table from a list of uniform dicts."""
    if not rows:
        return "(empty)"
    cols = list(rows[0].keys())
    cells = [[_fmt_cell(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip()]
    for row in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
    return "\n".join(lines)


def write_csv_table(rows: list[dict], path: Path) -> None:
    """CSV with full-precision floats (repr), suitable for byte-level comparison."""
    with path.open("w", newline="", encoding="utf-8") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for r in rows:
            writer.writerow(
                {k: ("" if v is None else repr(v) if isinstance(v, float) else str(v))
                 for k, v in r.items()}
            )


def _metric_rows(result: RunResult) -> tuple[list[dict], list[dict]]:
    per_seed = []
    for o in result.outcomes:
        row: dict = {"run": result.config.label(), "seed": o.seed}
        row.update({name: getattr(o.report, name) for name in METRIC_NAMES})
        row["n_samples"] = o.report.n_samples
        row["excluded_users"] = o.report.excluded_user_count
        per_seed.append(row)
    return per_seed, [result.summary_row()]


def _load_config(args, overrides: dict[str, str]) -> ExperimentConfig:
    flat: dict[str, str] = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        flat.update(parse_flat_file(path.read_text(encoding="utf-8")))
    flat.update(overrides)
    return config_from_flat(flat)


def _collect_overrides(extras: list[str]) -> dict[str, str]:
    """Turn leftover args of the form --key value / --key=value into a dict."""
    out: dict[str, str] = {}
    i = 0
    while i < len(extras):
        token = extras[i]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument {token!r}")
        body = token[2:]
        if "=" in body:
            key, _, value = body.partition("=")
            i += 1
        else:
            key = body
            if i + 1 >= len(extras):
                raise ConfigError(f"flag --{key} is missing a value")
            value = extras[i + 1]
            i += 2
        out[key] = value
    return out


def _write_run_outputs(out_dir: Path, config: ExperimentConfig, result: RunResult) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.txt").write_text(
        flat_to_text(config_to_flat(config)), encoding="utf-8"
    )
    per_seed, summary = _metric_rows(result)
    write_csv_table(per_seed, out_dir / "per_seed.csv")
    write_csv_table(summary, out_dir / "summary.csv")
    (out_dir / "summary.txt").write_text(
        format_table(per_seed) + "\n\n" + format_table(summary) + "\n", encoding="utf-8"
    )


def _write_sweep_outputs(out_dir: Path | None, axis_name: str, rows, base: ExperimentConfig) -> list[dict]:
    table = []
    for value, result in rows:
        row = {axis_name: value}
        row.update(result.summary_row())
        table.append(row)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_csv_table(table, out_dir / "sweep.csv")
        (out_dir / "sweep.txt").write_text(format_table(table) + "\n", encoding="utf-8")
        for i, (value, result) in enumerate(rows):
            (out_dir / f"row_{i}.config.txt").write_text(
                flat_to_text(config_to_flat(result.config)), encoding="utf-8"
            )
    return table


def cmd_train(args, overrides) -> int:
    config = _load_config(args, overrides)
    result = train_eval(config)
    per_seed, summary = _metric_rows(result)
    print(format_table(per_seed))
    print()
    print(format_table(summary))
    if args.baseline:
        base_cfg = _load_config(args, dict(overrides, loss=args.baseline))
        baseline = train_eval(base_cfg)
        pvals = paired_ttest(result, baseline)
        print()
        print("paired t-test vs " + baseline.config.label() + " (replicates = seeds):")
        print(format_table([{"metric": k, "p_value": v} for k, v in pvals.items()]))
    if args.out:
        _write_run_outputs(Path(args.out), config, result)
    if args.dump_preds:
        for o in result.outcomes:
            path = Path(args.dump_preds.format(seed=o.seed))
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["p_hat", "label", "user_id"])
                for p in o.predictions:
                    w.writerow([repr(p.p_hat), p.label, p.user_id])
    return 0


def cmd_eval(args, overrides) -> int:
    if overrides:
        raise ConfigError(f"eval does not accept config overrides: {sorted(overrides)}")
    path = Path(args.preds)
    if not path.exists():
        raise DataError(f"predictions file not found: {path}")
    preds = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {args.p_col, args.label_col}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(
                f"{path}: expected columns {sorted(required)}, got {reader.fieldnames}"
            )
        for row in reader:
            preds.append(
                Prediction(
                    p_hat=float(row[args.p_col]),
                    label=int(float(row[args.label_col])),
                    user_id=row.get(args.user_col),
                )
            )
    report = compute_report(preds, n_buckets=args.ece_buckets, clamp_eps=args.clamp_eps)
    print(report.format_table())
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_csv_table([report.csv_row()], out_dir / "metrics.csv")
        (out_dir / "metrics.txt").write_text(report.format_table() + "\n", encoding="utf-8")
    return 0


def _float_list(raw: str) -> list[float]:
    try:
        return [float(x) for x in raw.split(",") if x]
    except ValueError:
        raise ConfigError(f"cannot parse float list {raw!r}")


def cmd_sweep_alpha(args, overrides) -> int:
    config = _load_config(args, overrides)
    rows = sweep_alpha(config, _float_list(args.ratios))
    table = _write_sweep_outputs(Path(args.out) if args.out else None, "weight_ratio", rows, config)
    print(format_table(table))
    return 0


def cmd_sweep_context(args, overrides) -> int:
    config = _load_config(args, overrides)
    kinds = [k for k in args.kinds.split(",") if k]
    rows = sweep_context(config, kinds)
    table = _write_sweep_outputs(Path(args.out) if args.out else None, "context", rows, config)
    print(format_table(table))
    return 0


def cmd_sweep_droprate(args, overrides) -> int:
    config = _load_config(args, overrides)
    rows = sweep_droprate(config, _float_list(args.rates))
    table = _write_sweep_outputs(Path(args.out) if args.out else None, "drop_rate", rows, config)
    print(format_table(table))
    return 0


def cmd_user_groups(args, overrides) -> int:
    config = _load_config(args, overrides)
    if not args.baseline:
        raise ConfigError("user-groups requires --baseline <loss kind>")
    run = train_eval(config)
    baseline = train_eval(_load_config(args, dict(overrides, loss=args.baseline)))
    rows = user_group_report(run, n_groups=args.groups, baseline=baseline)
    print(format_table(rows))
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_csv_table(rows, out_dir / "user_groups.csv")
        (out_dir / "user_groups.txt").write_text(format_table(rows) + "\n", encoding="utf-8")
    return 0


def cmd_gen_data(args, overrides) -> int:
    flat = {k: v for k, v in overrides.items()}
    unknown = [k for k in flat if not k.startswith("synth.")]
    if unknown:
        raise ConfigError(f"gen-data only accepts synth.* overrides, got {unknown}")
    config = config_from_flat(dict(flat, data="synth")).synth
    samples = generate(config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    schema = write_csv(samples, out_dir / "data.csv")
    vocabs = identity_vocabs(schema, samples)
    for col, vocab in vocabs.items():
        write_vocab(vocab, out_dir / f"vocab_{col}.csv")
    flat_schema = {
        "data": "csv",
        "csv.path": str(out_dir / "data.csv"),
        "csv.label_col": schema.label_col,
        "csv.feature_cols": ",".join(schema.feature_cols),
        "csv.user_col": schema.user_col or "",
        "csv.timestamp_col": schema.timestamp_col or "",
        "csv.gender_col": schema.gender_col or "",
        "csv.domain_col": schema.domain_col or "",
    }
    (out_dir / "schema.txt").write_text(flat_to_text(flat_schema), encoding="utf-8")
    mean_ctr = sum(s.true_ctr for s in samples) / len(samples)
    click_rate = sum(s.label for s in samples) / len(samples)
    print(
        f"wrote {len(samples)} samples to {out_dir / 'data.csv'} "
        f"(mean true ctr {mean_ctr:.4f}, click rate {click_rate:.4f})"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctrlab",
        description="Train and evaluate ranking/calibration losses for CTR models.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="enable info logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_parser(name: str, help_: str):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--out", help="output directory for CSV and text tables")
        return p

    p = experiment_parser("train", "train one configuration and evaluate it")
    p.add_argument("--baseline", help="also run this loss kind and report paired t-tests")
    p.add_argument("--dump-preds", help="per-seed predictions CSV path, '{seed}' placeholder")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compute metrics for a predictions CSV")
    p.add_argument("--preds", required=True, help="CSV with prediction rows")
    p.add_argument("--p-col", default="p_hat")
    p.add_argument("--label-col", default="label")
    p.add_argument("--user-col", default="user_id")
    p.add_argument("--ece-buckets", type=int, default=10)
    p.add_argument("--clamp-eps", type=float, default=1e-7)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_eval)

    p = experiment_parser("sweep-alpha", "sweep the rank/calibration weight ratio")
    p.add_argument("--ratios", default="0.01,0.1,1,10,100,1000,10000")
    p.set_defaults(func=cmd_sweep_alpha)

    p = experiment_parser("sweep-context", "compare context policies")
    p.add_argument("--kinds", default=",".join(CONTEXT_KINDS))
    p.set_defaults(func=cmd_sweep_context)

    p = experiment_parser("sweep-droprate", "sweep the rank-loss drop rate")
    p.add_argument("--rates", default="0,0.2,0.4,0.6,0.8,1.0")
    p.set_defaults(func=cmd_sweep_droprate)

    p = experiment_parser("user-groups", "per-activity-group GAUC vs a baseline")
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--baseline", help="baseline loss kind (required)")
    p.set_defaults(func=cmd_user_groups)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        overrides = _collect_overrides(extras)
        return args.func(args, overrides)
    except CtrLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for klass, code in EXIT_CODES:
            if isinstance(exc, klass):
                return code
        return 1


def entry() -> None:
    sys.exit(main(argv=None))
