"""Fold construction, leakage rules, windowing, training loops, evaluation."""

import numpy as np
import pytest

from aadkit.bundles import TrialBundle
from aadkit.errors import ConfigurationError, ContractError
from aadkit.harness import (
    EVAL_WINDOW_LENGTHS,
    CATCNDecider,
    FoldAssignment,
    RandomDecider,
    ResultRow,
    ResultsTable,
    TrainConfig,
    assert_no_leakage,
    augment_swap,
    evaluate,
    expected_window_count,
    finetune_ss,
    make_folds,
    train_si,
    window_stream,
)
from aadkit.model import CATCNConfig, CATCNModel
from aadkit.synth import CohortSpec, gen_cohort


def tiny_cohort(n_subjects=3, trials=8, duration=6.0, channels=4, snr=30.0,
                seed=0, pool_factor=4):
    return gen_cohort(n_subjects, trials,
                      CohortSpec(n_channels=channels, snr_db=snr,
                                 distractor_gain=0.5, duration_s=duration,
                                 audio_pool_factor=pool_factor), seed=seed)


def small_model_config(channels=4):
    return CATCNConfig(n_channels=channels, feat_eeg=8, feat_stim=8,
                       depth_eeg=2, depth_stim=2)


class TestMakeFolds:
    def test_ss_fold_sizes_92(self):
        trials = []
        rng = np.random.default_rng(0)
        for i in range(92):
            trials.append(TrialBundle(
                subject_id="s00", trial_id=f"t{i:03d}",
                audio_id_attended=f"a{i}", audio_id_unattended=f"u{i}",
                eeg=rng.normal(size=(128, 2)), env_a=rng.normal(size=128),
                env_b=rng.normal(size=128), attended="A"))
        plan = make_folds(trials, "SS", seed=1)
        sizes = sorted(len(f.test) for f in plan.folds)
        assert sizes == [11, 11, 11, 11, 12, 12, 12, 12]
        covered = [k for f in plan.folds for k in f.test]
        assert len(covered) == 92 and len(set(covered)) == 92

    def test_audio_leakage_excluded(self):
        rng = np.random.default_rng(1)
        trials = []
        for i in range(16):
            trials.append(TrialBundle(
                subject_id="s00", trial_id=f"t{i:03d}",
                audio_id_attended=f"a{i % 4}",  # heavy attended-id reuse
                audio_id_unattended=f"u{i}",
                eeg=rng.normal(size=(128, 2)), env_a=rng.normal(size=128),
                env_b=rng.normal(size=128), attended="A"))
        plan = make_folds(trials, "SS", seed=0)
        by_key = {t.key: t for t in trials}
        for fold in plan.folds:
            test_ids = {by_key[k].audio_id_attended for k in fold.test}
            for k in fold.train + fold.val:
                assert by_key[k].audio_id_attended not in test_ids
        assert any(fold.excluded for fold in plan.folds)

    def test_si_partitions(self):
        trials = tiny_cohort(n_subjects=3, trials=6, duration=2.0)
        plan = make_folds(trials, "SI", seed=0)
        assert len(plan.folds) == 3
        for fold in plan.folds:
            train_subjects = {k[0] for k in fold.train + fold.val}
            assert fold.subject not in train_subjects
            assert all(k[0] == fold.subject for k in fold.test)

    def test_no_leakage_invariant(self):
        trials = tiny_cohort(n_subjects=4, trials=8, duration=2.0, pool_factor=3)
        for mode in ("SS", "SI"):
            plan = make_folds(trials, mode, seed=3)
            assert_no_leakage(plan, trials)

    def test_leakage_detector_fires(self):
        trials = tiny_cohort(n_subjects=2, trials=8, duration=2.0)
        plan = make_folds(trials, "SI", seed=0)
        plan.folds[0].train.append(plan.folds[0].test[0])
        with pytest.raises(ContractError):
            assert_no_leakage(plan, trials)

    def test_too_few_trials_ss(self):
        trials = tiny_cohort(n_subjects=2, trials=4, duration=2.0)
        with pytest.raises(ConfigurationError):
            make_folds(trials, "SS", seed=0)

    def test_too_few_subjects_si(self):
        trials = [t for t in tiny_cohort(2, 8, 2.0) if t.subject_id == "s00"]
        with pytest.raises(ConfigurationError):
            make_folds(trials, "SI", seed=0)

    def test_deterministic(self):
        trials = tiny_cohort(n_subjects=3, trials=8, duration=2.0)
        p1 = make_folds(trials, "SS", seed=9)
        p2 = make_folds(trials, "SS", seed=9)
        for f1, f2 in zip(p1.folds, p2.folds):
            assert f1.train == f2.train and f1.val == f2.val and f1.test == f2.test


class TestWindows:
    def _trial(self, seconds, fs=64.0):
        n = int(seconds * fs)
        rng = np.random.default_rng(0)
        return TrialBundle(subject_id="s", trial_id="t", audio_id_attended="a",
                           audio_id_unattended="u", eeg=rng.normal(size=(n, 2)),
                           env_a=rng.normal(size=n), env_b=rng.normal(size=n),
                           attended="A", fs=fs)

    def test_26s_trial_5s_75pct(self):
        wins = window_stream([self._trial(26.0)], 5.0, 0.75)
        assert len(wins) == 17
        assert expected_window_count(1664, 320, 80) == 17

    def test_non_overlapping(self):
        wins = window_stream([self._trial(50.0)], 10.0, 0.0)
        assert len(wins) == 5

    def test_one_second_windows(self):
        wins = window_stream([self._trial(26.0)], 1.0, 0.0)
        assert len(wins) == 26

    def test_short_trial_skipped(self, caplog):
        with caplog.at_level("WARNING"):
            wins = window_stream([self._trial(4.0)], 10.0, 0.0)
        assert wins == []
        assert any("skipped" in r.message for r in caplog.records)

    def test_augment_swap_doubles_and_balances(self):
        wins = window_stream([self._trial(26.0)], 5.0, 0.75)
        aug = augment_swap(wins)
        assert len(aug) == 2 * len(wins)
        labels = [w.label for w in aug]
        assert labels.count("A") == labels.count("B")
        mirror = aug[len(wins)]
        orig = aug[0]
        assert mirror.label != orig.label
        np.testing.assert_array_equal(mirror.env_a, orig.env_b)
        np.testing.assert_array_equal(mirror.env_b, orig.env_a)
        np.testing.assert_array_equal(mirror.eeg, orig.eeg)


class _OracleDecider:
    def decide_many(self, windows):
        return [w.label for w in windows]


class TestEvaluate:
    def test_perfect_decoder(self):
        trials = tiny_cohort(n_subjects=2, trials=2, duration=26.0)
        rows = evaluate(_OracleDecider(), trials, dataset="synthetic",
                        model_name="oracle", mode="SI", subject="s00")
        assert rows and all(r.accuracy == 1.0 for r in rows)

    def test_coin_flip_near_chance(self):
        trials = tiny_cohort(n_subjects=2, trials=20, duration=26.0)
        rows = evaluate(RandomDecider(seed=4), trials, window_lengths=(1.0,))
        assert rows[0].n_windows >= 1000
        assert 0.45 <= rows[0].accuracy <= 0.55

    def test_50s_absent_for_26s_trials(self):
        trials = tiny_cohort(n_subjects=2, trials=2, duration=26.0)
        rows = evaluate(_OracleDecider(), trials)
        lengths = {r.window_s for r in rows}
        assert 50.0 not in lengths and 25.0 in lengths

    def test_window_lengths_constant(self):
        assert EVAL_WINDOW_LENGTHS == (1.0, 2.0, 5.0, 10.0, 25.0, 50.0)

    def test_results_table_roundtrip(self, tmp_path):
        rows = [ResultRow("synthetic", "ridge", "SI", "s00", 0, 5.0, 40, 0.85),
                ResultRow("synthetic", "ridge", "SI", "s01", 0, 5.0, 40, 0.95)]
        table = ResultsTable(rows)
        table.write_csv(tmp_path / "r.csv")
        back = ResultsTable.read_csv(tmp_path / "r.csv")
        assert [r.__dict__ for r in back.rows] == [r.__dict__ for r in rows]
        summary = table.summary()
        np.testing.assert_allclose(summary["5"]["mean"], 0.9)

    def test_reproducible_results(self):
        trials = tiny_cohort(n_subjects=2, trials=4, duration=10.0)
        r1 = evaluate(RandomDecider(seed=3), trials, window_lengths=(2.0,))
        r2 = evaluate(RandomDecider(seed=3), trials, window_lengths=(2.0,))
        assert [r.__dict__ for r in r1] == [r.__dict__ for r in r2]


class TestTraining:
    def _setup(self, seed=0, snr=30.0):
        trials = tiny_cohort(n_subjects=3, trials=8, duration=6.0, channels=4,
                             snr=snr, seed=seed)
        plan = make_folds(trials, "SI", seed=seed)
        by_key = {t.key: t for t in trials}
        return trials, plan, by_key

    def test_si_training_improves_loss(self):
        trials, plan, by_key = self._setup()
        cfg = TrainConfig(max_epochs=5, patience=5, batch_size=32, seed=1)
        model = CATCNModel(small_model_config(), seed=11)
        ckpt = train_si(model, plan.folds[0], by_key, cfg)
        hist = ckpt.metadata["history"]
        assert hist[-1]["train_loss"] < hist[0]["train_loss"]

    def test_best_checkpoint_is_min_val(self):
        trials, plan, by_key = self._setup(seed=2)
        cfg = TrainConfig(max_epochs=4, patience=4, batch_size=32, seed=2)
        model = CATCNModel(small_model_config(), seed=5)
        ckpt = train_si(model, plan.folds[0], by_key, cfg)
        hist = ckpt.metadata["history"]
        vals = [h["val_loss"] for h in hist]
        assert ckpt.metadata["best_val_loss"] == pytest.approx(min(vals))

    def test_same_seed_bitwise_identical(self):
        trials, plan, by_key = self._setup(seed=3)
        cfg = TrainConfig(max_epochs=2, patience=2, batch_size=32, seed=3)
        ckpts = []
        for _ in range(2):
            model = CATCNModel(small_model_config(), seed=7)
            ckpts.append(train_si(model, plan.folds[0], by_key, cfg))
        for name in ckpts[0].arrays:
            assert np.array_equal(ckpts[0].arrays[name], ckpts[1].arrays[name])

    def test_finetune_metadata_and_lr(self):
        trials, plan, by_key = self._setup(seed=4)
        cfg = TrainConfig(max_epochs=2, patience=2, batch_size=32, seed=4)
        model = CATCNModel(small_model_config(), seed=9)
        si_ckpt = train_si(model, plan.folds[0], by_key, cfg)
        ss_plan = make_folds(trials, "SS", seed=4)
        ss_fold = next(f for f in ss_plan.folds if f.subject == plan.folds[0].subject)
        ss_ckpt = finetune_ss(si_ckpt, ss_fold, by_key, cfg)
        assert ss_ckpt.metadata["lr"] == pytest.approx(2.5e-5)
        assert ss_ckpt.metadata["mode"] == "SS"

    def test_finetune_never_worse_than_baseline(self):
        # anti-learning data: training windows carry swapped envelopes so
        # every epoch hurts; the fine-tuned checkpoint must fall back to the
        # input state (best epoch 0)
        trials, plan, by_key = self._setup(seed=5)
        cfg = TrainConfig(max_epochs=3, patience=2, batch_size=32, seed=5)
        model = CATCNModel(small_model_config(), seed=13)
        si_ckpt = train_si(model, plan.folds[0], by_key, cfg)

        corrupted = {}
        for k, t in by_key.items():
            corrupted[k] = TrialBundle(
                subject_id=t.subject_id, trial_id=t.trial_id,
                audio_id_attended=t.audio_id_attended,
                audio_id_unattended=t.audio_id_unattended,
                eeg=t.eeg, env_a=t.env_b, env_b=t.env_a,  # swapped, label kept
                attended=t.attended, fs=t.fs)
        ss_plan = make_folds(trials, "SS", seed=5)
        ss_fold = next(f for f in ss_plan.folds if f.subject == plan.folds[0].subject)
        # validation stays clean so the baseline is the best achievable
        clean_val = {k: by_key[k] for k in ss_fold.val}
        mixed = dict(corrupted)
        mixed.update(clean_val)
        ss_ckpt = finetune_ss(si_ckpt, ss_fold, mixed, cfg)
        hist = ss_ckpt.metadata["history"]
        baseline_is_best = ss_ckpt.metadata["best_epoch"] == 0
        if baseline_is_best:
            for name in si_ckpt.arrays:
                assert np.array_equal(ss_ckpt.arrays[name], si_ckpt.arrays[name])
        else:
            assert ss_ckpt.metadata["best_val_loss"] <= min(h["val_loss"] for h in hist)

    def test_channel_mismatch_rejected(self):
        trials, plan, by_key = self._setup(seed=6)
        cfg = TrainConfig(max_epochs=1, patience=1, batch_size=32, seed=6)
        model = CATCNModel(small_model_config(), seed=1)
        si_ckpt = train_si(model, plan.folds[0], by_key, cfg)
        other = tiny_cohort(n_subjects=2, trials=8, duration=6.0, channels=6,
                            seed=7)
        other_plan = make_folds(other, "SS", seed=7)
        other_by_key = {t.key: t for t in other}
        with pytest.raises(ConfigurationError):
            finetune_ss(si_ckpt, other_plan.folds[0], other_by_key, cfg)

    def test_decider_runs_after_training(self):
        trials, plan, by_key = self._setup(seed=8)
        cfg = TrainConfig(max_epochs=1, patience=1, batch_size=32, seed=8)
        model = CATCNModel(small_model_config(), seed=2)
        ckpt = train_si(model, plan.folds[0], by_key, cfg)
        test_trials = [by_key[k] for k in plan.folds[0].test]
        rows = evaluate(CATCNDecider(ckpt.to_model()), test_trials,
                        window_lengths=(2.0, 5.0), model_name="catcn",
                        subject=plan.folds[0].subject)
        assert len(rows) == 2
        assert all(0.0 <= r.accuracy <= 1.0 for r in rows)


class TestTrainConfig:
    def test_lr_ss_derived(self):
        cfg = TrainConfig(lr_si=5e-5)
        assert cfg.lr_ss == pytest.approx(2.5e-5)

    def test_defaults_match_protocol(self):
        cfg = TrainConfig()
        assert cfg.max_epochs == 200 and cfg.patience == 5
        assert cfg.window_s == 5.0 and cfg.overlap == 0.75
        assert cfg.weight_decay == 1e-4

    def test_invalid_overlap(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(overlap=1.0)
