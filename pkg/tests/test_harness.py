"""Harness tests: config round-trips, degenerate-loss identities, sweeps,
user groups, reproducibility.  End-to-end trend claims live in test_acceptance."""

import numpy as np
import pytest

from ctrlab.context import ContextPolicy
from ctrlab.data import SynthConfig
from ctrlab.errors import ConfigError, DataError
from ctrlab.harness import (
    ExperimentConfig,
    config_from_flat,
    config_to_flat,
    flat_to_text,
    paired_ttest,
    parse_flat_file,
    sweep_alpha,
    sweep_context,
    sweep_droprate,
    temporal_split,
    train_eval,
    user_group_report,
)
from ctrlab.metrics import METRIC_NAMES


def small_synth(**kw):
    base = dict(
        n_users=60, n_items=20, n_domains=3, sessions_per_user=3,
        items_per_session=4, latent_dim=4, seed=100,
    )
    base.update(kw)
    return SynthConfig(**base)


def small_config(**kw):
    base = dict(
        loss="pointwise",
        synth=small_synth(),
        seeds=(1, 2),
        batch_size=48,
        lr=0.01,
        context=ContextPolicy("session"),
    )
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfig:
    def test_two_data_sources_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(synth=small_synth(), csv_path="x.csv")

    def test_no_data_source_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(synth=None)

    def test_empty_seeds_rejected(self):
        with pytest.raises(ConfigError):
            small_config(seeds=())

    def test_unknown_loss_rejected(self):
        with pytest.raises(ConfigError):
            small_config(loss="hinge")

    def test_flat_round_trip(self):
        config = small_config(loss="jrc", weight_ratio=0.25, drop_rate=0.4)
        flat = config_to_flat(config)
        rebuilt = config_from_flat(flat)
        assert config_to_flat(rebuilt) == flat

    def test_flat_round_trip_csv_source(self):
        from ctrlab.data import CsvSchema

        config = ExperimentConfig(
            synth=None,
            csv_path="/tmp/x.csv",
            csv_schema=CsvSchema(
                label_col="label", feature_cols=["a", "b"], user_col="u",
                timestamp_col="ts",
            ),
            seeds=(3,),
        )
        rebuilt = config_from_flat(config_to_flat(config))
        assert rebuilt.csv_schema.feature_cols == ["a", "b"]
        assert rebuilt.csv_schema.gender_col is None
        assert config_to_flat(rebuilt) == config_to_flat(config)

    def test_parse_flat_file(self):
        text = "# comment\nloss = jrc\n\nweight_ratio=2.0\ncontext.kind = session\n"
        flat = parse_flat_file(text)
        assert flat == {"loss": "jrc", "weight_ratio": "2.0", "context.kind": "session"}

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="mystery"):
            config_from_flat({"mystery": "1"})

    def test_bad_value_names_key(self):
        with pytest.raises(ConfigError, match="lr"):
            config_from_flat({"lr": "fast"})


class TestTemporalSplit:
    def test_last_fraction_by_timestamp(self):
        from conftest import make_samples

        samples = make_samples(
            np.zeros((10, 1), dtype=int), timestamps=[9, 3, 5, 1, 7, 0, 8, 2, 6, 4]
        )
        train, evals = temporal_split(samples, 0.3)
        assert len(train) == 7 and len(evals) == 3
        assert max(s.timestamp for s in train) <= min(s.timestamp for s in evals)


class TestTrainEval:
    def test_deterministic_given_config(self):
        a = train_eval(small_config())
        b = train_eval(small_config())
        for ra, rb in zip(a.reports, b.reports):
            assert ra.as_dict() == rb.as_dict()

    def test_jrc_alpha_one_identical_to_pointwise(self):
        # same network, same seeds: the calibration-only objective and the
        # pointwise objective on the logit subtraction coincide exactly
        jrc = train_eval(small_config(loss="jrc", alpha=1.0, weight_ratio=None))
        pw = train_eval(small_config(loss="pointwise"))
        for rj, rp in zip(jrc.reports, pw.reports):
            assert rj.as_dict() == rp.as_dict()

    def test_combined_pair_alpha_one_identical_to_pointwise(self):
        cp = train_eval(small_config(loss="combined_pair", alpha=1.0, weight_ratio=None))
        pw = train_eval(small_config(loss="pointwise"))
        for rc, rp in zip(cp.reports, pw.reports):
            assert rc.as_dict() == rp.as_dict()

    def test_all_losses_run(self):
        for loss in ("ranknet", "listnet", "combined_list", "jrc"):
            result = train_eval(small_config(loss=loss, seeds=(1,)))
            assert result.reports[0].n_samples > 0

    def test_mean_and_std_over_seeds(self):
        result = train_eval(small_config(seeds=(1, 2, 3)))
        assert len(result.reports) == 3
        assert result.mean("auc") is not None
        assert result.std("auc") is not None

    def test_paired_ttest_identical_runs_degenerate(self):
        a = train_eval(small_config())
        b = train_eval(small_config())
        pvals = paired_ttest(a, b)
        assert set(pvals) == set(METRIC_NAMES)
        assert all(v is None for v in pvals.values())

    def test_paired_ttest_differs(self):
        a = train_eval(small_config(seeds=(1, 2, 3)))
        b = train_eval(small_config(seeds=(1, 2, 3), lr=0.05))
        pvals = paired_ttest(a, b)
        assert pvals["logloss"] is None or 0.0 <= pvals["logloss"] <= 1.0


class TestSweeps:
    def test_alpha_ratio_zero_equals_pointwise_row(self):
        config = small_config(loss="jrc")
        rows = sweep_alpha(config, [0.0])
        pw = train_eval(small_config(loss="pointwise"))
        for rj, rp in zip(rows[0][1].reports, pw.reports):
            assert rj.as_dict() == rp.as_dict()

    def test_alpha_table_shape(self):
        rows = sweep_alpha(small_config(seeds=(1,)), [0.1, 1.0])
        assert [r[0] for r in rows] == [0.1, 1.0]
        for _, result in rows:
            assert set(result.summary_row()) > {"run", "auc_mean"}

    def test_negative_ratio_rejected(self):
        with pytest.raises(ConfigError):
            sweep_alpha(small_config(), [-1.0])

    def test_context_sweep_rows(self):
        rows = sweep_context(small_config(loss="jrc", seeds=(1,)), ["batch", "session"])
        assert [r[0] for r in rows] == ["batch", "session"]

    def test_context_sweep_empty_rejected(self):
        with pytest.raises(ConfigError):
            sweep_context(small_config(), [])

    def test_droprate_zero_equals_base_run(self):
        config = small_config(loss="jrc", weight_ratio=1.0, seeds=(1,))
        base = train_eval(config)
        rows = sweep_droprate(config, [0.0])
        for rd, rb in zip(rows[0][1].reports, base.reports):
            assert rd.as_dict() == rb.as_dict()

    def test_droprate_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            sweep_droprate(small_config(loss="jrc"), [1.5])


class TestUserGroups:
    def test_requires_baseline(self):
        run = train_eval(small_config(seeds=(1,)))
        with pytest.raises(ConfigError):
            user_group_report(run, n_groups=2, baseline=None)

    def test_single_group_equals_overall_gauc(self):
        config = small_config(seeds=(1,))
        run = train_eval(config)
        base = train_eval(small_config(loss="jrc", weight_ratio=1.0, seeds=(1,)))
        rows = user_group_report(run, n_groups=1, baseline=base)
        assert len(rows) == 1
        assert rows[0]["gauc"] == pytest.approx(run.reports[0].gauc, abs=1e-12)

    def test_equal_sample_counts_within_one(self):
        config = small_config(seeds=(1,))
        run = train_eval(config)
        base = train_eval(config)
        rows = user_group_report(run, n_groups=4, baseline=base)
        sizes = [r["samples"] for r in rows]
        assert max(sizes) - min(sizes) <= 1
        assert sum(sizes) == run.reports[0].n_samples

    def test_group_boundaries_reproducible(self):
        config = small_config(seeds=(1, 2))
        run = train_eval(config)
        base = train_eval(config)
        rows_a = user_group_report(run, n_groups=3, baseline=base)
        rows_b = user_group_report(run, n_groups=3, baseline=base)
        assert rows_a == rows_b

    def test_lift_zero_against_itself(self):
        config = small_config(seeds=(1,))
        run = train_eval(config)
        rows = user_group_report(run, n_groups=2, baseline=run)
        for row in rows:
            if row["lift"] is not None:
                assert row["lift"] == 0.0


class TestDropRateGradientIdentity:
    def test_full_drop_reduces_jrc_to_scaled_calibration(self):
        # one training step at drop_rate=1.0: the jrc gradient must be exactly
        # alpha times the pointwise-on-subtraction gradient
        from ctrlab.losses import JrcWeights, loss_for_kind
        from ctrlab.model import ModelConfig, backward, forward, init_model
        from conftest import make_samples

        rng = np.random.default_rng(0)
        params = init_model(
            ModelConfig(vocab_sizes=(5, 5), embed_dim=3, hidden_dims=(4,), seed=8, init_scale=0.3)
        )
        ids = np.stack([rng.integers(0, 5, 6), rng.integers(0, 5, 6)], axis=1)
        samples = make_samples(ids, labels=rng.integers(0, 2, 6))
        labels = np.array([s.label for s in samples])
        mask = np.ones((6, 6), dtype=bool)
        alpha = 0.3

        logits = forward(params, samples)
        res_jrc = loss_for_kind(
            "jrc", logits, labels, mask,
            weights=JrcWeights(alpha=alpha),
            participation=np.zeros(6, dtype=bool),
        )
        res_pw = loss_for_kind("pointwise", logits, labels, mask)

        forward(params, samples)
        backward(params, res_jrc.dlogits)
        g_jrc = {name: g.copy() for name, _, g in params.blocks()}
        params.zero_grads()
        forward(params, samples)
        backward(params, res_pw.dlogits)
        for name, _, g in params.blocks():
            assert np.max(np.abs(g_jrc[name] - alpha * g)) <= 1e-10
