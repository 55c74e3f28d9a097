from __future__ import annotations

import json

import numpy as np
import pandas as pd
import pytest

from attnpipe.data_model import Condition
from attnpipe.evaluation import DatasetEvaluation, EvalReport, RunOutcome, WindowPrediction, compute_metrics
from attnpipe.report import (
    overview_display,
    overview_frame,
    thresholds_frame,
    write_evaluation,
    write_overview,
    write_table,
)


def _eval_report(pid: str, n_correct: int, n: int = 10) -> EvalReport:
    preds = []
    for k in range(n):
        truth = Condition.REAL if k % 2 == 0 else Condition.VIRTUAL
        other = Condition.VIRTUAL if truth is Condition.REAL else Condition.REAL
        preds.append(
            WindowPrediction(
                window_id=f"{pid}-t{k + 1:03d}-w{k % 5}",
                participant_id=pid,
                position_index=k % 5,
                true_label=truth,
                label=truth if k < n_correct else other,
                confidence=0.8,
                decided_by="eeg",
            )
        )
    metrics = compute_metrics([p.true_label for p in preds], [p.label for p in preds])
    run = RunOutcome(run_index=0, seed=0, metrics=metrics, predictions=tuple(preds))
    return EvalReport(pid, "trial_sensitive", "eeg", (run,))


@pytest.fixture
def evaluation() -> DatasetEvaluation:
    return DatasetEvaluation("trial_sensitive", "eeg", (_eval_report("P01", 10), _eval_report("P02", 5)))


def test_thresholds_frame():
    frame = thresholds_frame()
    assert frame["n"].tolist() == [60, 45, 200]
    np.testing.assert_allclose(frame["threshold"], [0.6225, 0.64, 0.5686], atol=5e-4)
    assert len(thresholds_frame([100])) == 1


def test_write_table_turns_nan_into_null(tmp_path):
    frame = pd.DataFrame({"a": [1.0, np.nan], "b": ["x", "y"]})
    csv_path, json_path = write_table(frame, tmp_path, "t")
    assert csv_path.read_text() == "a,b\n1,x\n,y\n"
    assert json.loads(json_path.read_text()) == [{"a": 1.0, "b": "x"}, {"a": None, "b": "y"}]


def test_overview_marks_significant_cells(evaluation):
    frame = overview_frame({"trial_sensitive/eeg": evaluation})
    assert frame["participant_id"].tolist() == ["P01", "P02"]
    assert frame["trial_sensitive/eeg_significant"].tolist() == [True, False]
    display = overview_display(frame)
    assert display["trial_sensitive/eeg"].tolist() == ["1.0000*", "0.5000", "0.7500", "0.2500"]
    assert display["participant_id"].tolist()[-2:] == ["Mean", "Std"]


def test_overview_with_missing_participant(evaluation):
    other = DatasetEvaluation("trial_sensitive", "gaze", (_eval_report("P01", 6),))
    frame = overview_frame({"a": evaluation, "b": other})
    assert np.isnan(frame.loc[1, "b"])
    assert overview_display(frame).loc[1, "b"] == ""


def test_write_evaluation_files(evaluation, tmp_path):
    written = write_evaluation(evaluation, tmp_path)
    names = {p.name for p in written}
    for table in ("participants", "class_metrics", "runs", "positions"):
        assert f"trial_sensitive_eeg_{table}.csv" in names
        assert f"trial_sensitive_eeg_{table}.json" in names
    doc = json.loads((tmp_path / "trial_sensitive_eeg_report.json").read_text())
    assert doc["n_participants"] == 2
    assert doc["n_significant"] == 1
    assert doc["mean_accuracy"] == pytest.approx(0.75)
    assert [p["participant_id"] for p in doc["participants"]] == ["P01", "P02"]


def test_write_overview(evaluation, tmp_path):
    written = write_overview({"trial_sensitive/eeg": evaluation}, tmp_path)
    assert {p.name for p in written} == {
        "overview.csv",
        "overview.json",
        "overview_display.csv",
        "overview_display.json",
    }
