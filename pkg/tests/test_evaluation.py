from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from attnpipe.data_model import Condition
from attnpipe.errors import TooFewWindows
from attnpipe.evaluation import (
    PipelineKind,
    PipelineSpec,
    WindowPrediction,
    compare_modalities,
    compute_metrics,
    evaluate_dataset,
    participant_seed,
    position_accuracy_analysis,
    repeat_eval,
    run_pipeline,
)
from attnpipe.simulate import SimConfig, simulate_dataset
from attnpipe.splits import SplitPolicy, split_chronological, split_trial_sensitive
from attnpipe.stats import significance_threshold

R, V = Condition.REAL, Condition.VIRTUAL
GAZE_SPEC = PipelineSpec(kind=PipelineKind.GAZE)


@pytest.fixture
def gaze_records(window_factory, rng):
    """視線特徴量の第 1 成分だけで完全に分離できる窓."""
    out = []
    for w in window_factory(10):
        values = rng.standard_normal(10)
        if w.condition is V:
            values[0] += 10.0
        out.append(replace(w, gaze_values=values))
    return out


@pytest.fixture(scope="module")
def small_eval(small_dataset):
    return evaluate_dataset(small_dataset, policy=SplitPolicy.TRIAL_SENSITIVE, n_runs=2, seed=0)


def _prediction(pos: int, correct: bool, run: int, pid: str = "P01") -> WindowPrediction:
    return WindowPrediction(
        window_id=f"{pid}-r{run}-{pos}",
        participant_id=pid,
        position_index=pos,
        true_label=R,
        label=R if correct else V,
        confidence=0.9,
        decided_by="eeg",
        run_index=run,
    )


# ---------- 指標 ----------


def test_compute_metrics():
    m = compute_metrics([R, R, V, V], [R, V, V, V])
    assert m.accuracy == 0.75
    assert m.confusion == ((1, 1), (0, 2))
    assert m.precision == {"Real": 1.0, "Virtual": pytest.approx(2 / 3)}
    assert m.recall == {"Real": 0.5, "Virtual": 1.0}
    assert m.support == {"Real": 2, "Virtual": 2}
    assert m.n_test == 4


def test_compute_metrics_accepts_strings():
    assert compute_metrics(["real", "Virtual"], ["Real", "virtual"]).accuracy == 1.0


def test_compute_metrics_needs_windows():
    with pytest.raises(TooFewWindows):
        compute_metrics([], [])


# ---------- 繰り返し評価 ----------


def test_separable_gaze_features_are_perfect(gaze_records):
    report = repeat_eval(
        gaze_records, lambda ws, s: split_trial_sensitive(ws, seed=s), n_runs=3, spec=GAZE_SPEC
    )
    assert len(report.runs) == 3
    assert np.all(report.accuracies == 1.0)
    assert report.n_test == 30
    assert report.significant
    assert report.eeg_fraction is None


def test_run_pipeline_single_split(gaze_records):
    metrics = run_pipeline(gaze_records, split_trial_sensitive(gaze_records, seed=0), GAZE_SPEC)
    assert metrics.accuracy == 1.0
    assert metrics.n_test == 30
    assert metrics.confusion == ((15, 0), (0, 15))


def test_chronological_repeats_are_identical(gaze_records):
    report = repeat_eval(gaze_records, lambda ws, s: split_chronological(ws, seed=s), n_runs=4, spec=GAZE_SPEC)
    assert report.std_accuracy == 0.0
    assert [r.seed for r in report.runs] == [None] * 4


def test_repeat_eval_uses_consecutive_seeds(gaze_records):
    report = repeat_eval(
        gaze_records, lambda ws, s: split_trial_sensitive(ws, seed=s), n_runs=3, base_seed=7, spec=GAZE_SPEC
    )
    assert [r.seed for r in report.runs] == [7, 8, 9]
    summary = report.summary()
    assert summary["min_accuracy"] <= summary["mean_accuracy"] <= summary["max_accuracy"]


def test_participant_seed_is_stable():
    assert participant_seed(0, 1) == participant_seed(0, 1)
    assert participant_seed(0, 1) != participant_seed(0, 2)
    assert participant_seed(0, 1) != participant_seed(1, 1)


# ---------- 窓位置 ----------


def test_overall_accuracy_is_position_weighted(small_eval):
    report = small_eval.reports[0]
    analysis = report.positions()
    preds = report.predictions
    overall = np.mean([p.correct for p in preds])
    weighted = sum(c * a for c, a in zip(analysis.counts, analysis.accuracy, strict=True)) / sum(analysis.counts)
    assert weighted == pytest.approx(overall)
    assert overall == pytest.approx(report.mean_accuracy)


def test_uniform_positions_are_not_flagged():
    preds = []
    for run in range(10):
        for pos in range(5):
            for k in range(10):
                preds.append(_prediction(pos, k < run % 5 + 4, run))
    analysis = position_accuracy_analysis(preds)
    assert not analysis.flags[0.05].any()
    assert analysis.counts == (100,) * 5


def test_degraded_position_is_flagged():
    rng = np.random.default_rng(7)
    preds = []
    for run in range(20):
        for pos in range(5):
            rate = 0.5 if pos == 4 else 0.8
            preds.extend(_prediction(pos, bool(rng.random() < rate), run) for _ in range(40))
    analysis = position_accuracy_analysis(preds)
    assert len(analysis.flagged_against(4, 0.05)) >= 3
    assert len(analysis.flagged_against(4, 0.001)) >= 3
    assert analysis.accuracy[4] < min(analysis.accuracy[:4])
    rows = analysis.to_rows()
    assert rows[4]["p_vs_4"] is None
    assert rows[4]["p_vs_0"] == pytest.approx(rows[0]["p_vs_4"])


def test_single_group_uses_individual_predictions():
    preds = [_prediction(pos, k % 2 == 0, 0) for pos in range(5) for k in range(8)]
    analysis = position_accuracy_analysis(preds)
    assert analysis.accuracy == (0.5,) * 5
    assert all(s is not None for s in analysis.stderr)


# ---------- データセット評価 ----------


def test_evaluate_dataset_per_participant(small_eval):
    assert small_eval.policy == "trial_sensitive"
    assert [r.participant_id for r in small_eval.reports] == ["P01", "P02"]
    for report in small_eval.reports:
        assert len(report.runs) == 2
        assert report.n_test == 10
        assert 0.0 <= report.mean_accuracy <= 1.0
        assert report.threshold == pytest.approx(significance_threshold(10))
    assert small_eval.skipped == {}


def test_evaluate_dataset_is_independent_of_jobs(small_dataset, small_eval):
    parallel = evaluate_dataset(small_dataset, policy=SplitPolicy.TRIAL_SENSITIVE, n_runs=2, seed=0, jobs=2)
    np.testing.assert_array_equal(parallel.participant_means, small_eval.participant_means)


def test_loso_holds_out_each_participant(small_dataset):
    result = evaluate_dataset(small_dataset, spec=GAZE_SPEC, policy=SplitPolicy.LOSO)
    assert [r.participant_id for r in result.reports] == ["P01", "P02"]
    for report in result.reports:
        assert len(report.runs) == 1
        assert report.n_test == 40


def test_participant_without_gaze_is_skipped():
    dataset = simulate_dataset(SimConfig(n_participants=2, trials_per_condition=2, gaze_missing_fraction=0.5, seed=1))
    result = evaluate_dataset(dataset, spec=GAZE_SPEC, n_runs=1)
    assert [r.participant_id for r in result.reports] == ["P01"]
    assert set(result.skipped) == {"P02"}


def test_compare_modalities_on_shared_participants(small_dataset, small_eval):
    gaze = evaluate_dataset(small_dataset, spec=GAZE_SPEC, n_runs=2, seed=0)
    fusion = evaluate_dataset(small_dataset, spec=PipelineSpec(kind=PipelineKind.FUSION), n_runs=2, seed=0)
    comparison = compare_modalities(small_eval.by_participant(), gaze.by_participant(), fusion.by_participant())
    assert comparison.participants == ("P01", "P02")
    assert set(comparison.tests) == {"eeg_vs_gaze", "fusion_vs_eeg", "fusion_vs_gaze"}
    assert 0.0 <= comparison.eeg_fraction_mean <= 1.0
    doc = comparison.to_dict()
    assert doc["n_eeg_better"] + doc["n_gaze_better"] <= 2


@pytest.mark.slow
def test_planted_alpha_effect_beats_threshold():
    cfg = SimConfig(n_participants=1, trials_per_condition=20, alpha_attenuation_pct=60.0, effect_jitter=0.0, seed=1)
    result = evaluate_dataset(simulate_dataset(cfg), n_runs=3, seed=0)
    report = result.reports[0]
    assert report.n_test == 60
    assert report.mean_accuracy > 0.6225
    assert report.significant


@pytest.fixture(scope="module")
def null_dataset():
    cfg = SimConfig(n_participants=4, trials_per_condition=20, alpha_attenuation_pct=0.0, gaze_effect=False, seed=11)
    return simulate_dataset(cfg)


@pytest.mark.slow
@pytest.mark.parametrize("policy", [SplitPolicy.TRIAL_SENSITIVE, SplitPolicy.CHRONOLOGICAL])
def test_null_effect_stays_below_threshold(null_dataset, policy):
    result = evaluate_dataset(null_dataset, policy=policy, n_runs=3, seed=0)
    assert len(result.reports) == 4
    assert result.n_significant <= 1
    assert result.mean_accuracy < min(r.threshold for r in result.reports)


@pytest.mark.slow
def test_trial_oblivious_split_inflates_accuracy():
    dataset = simulate_dataset(SimConfig(n_participants=3, trials_per_condition=20, seed=7))
    oblivious = evaluate_dataset(dataset, policy=SplitPolicy.TRIAL_OBLIVIOUS, n_runs=3, seed=0)
    sensitive = evaluate_dataset(dataset, policy=SplitPolicy.TRIAL_SENSITIVE, n_runs=3, seed=0)
    assert oblivious.mean_accuracy > sensitive.mean_accuracy
