from __future__ import annotations

import pandas as pd
import pytest

from attnpipe.epoching import extract_windows
from attnpipe.errors import InvariantViolation
from attnpipe.montage import DEFAULT_LABELS
from attnpipe.psd_analysis import (
    META_COLUMNS,
    minmax_scale_per_participant,
    psd_feature_names,
    psd_feature_table,
    psd_group_analysis,
    psd_session_table,
)
from attnpipe.simulate import SimConfig, simulate_dataset


def _table(rows: list[tuple[str, str, float, float]]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "participant_id": pid,
                "window_id": f"{pid}-t{i:03d}-w0",
                "condition": cond,
                "position_index": 0,
                "Alpha/C3": a,
                "Beta/C3": b,
            }
            for i, (pid, cond, a, b) in enumerate(rows)
        ]
    )


def test_feature_names_cover_every_electrode_and_band():
    names = psd_feature_names(DEFAULT_LABELS)
    assert len(names) == 64
    assert names[:4] == ["Theta/Cz", "Alpha/Cz", "Beta/Cz", "Gamma/Cz"]
    assert "Alpha/C3" in names


def test_feature_table_has_one_row_per_window(hand_session):
    windows = extract_windows(hand_session)
    table = psd_feature_table(windows, hand_session.channel_names)
    assert len(table) == 5
    assert list(table.columns[:4]) == META_COLUMNS
    assert table.shape[1] == 4 + 64
    assert (table[psd_feature_names(hand_session.channel_names)] > 0).all().all()


def test_minmax_scaling_within_participant():
    table = _table([("P01", "Real", 1.0, 4.0), ("P01", "Virtual", 2.0, 4.0), ("P01", "Real", 3.0, 4.0)])
    scaled, bounds = minmax_scale_per_participant(table)
    assert scaled["Alpha/C3"].tolist() == [0.0, 0.5, 1.0]
    # 一定値の特徴量は 0.5
    assert scaled["Beta/C3"].tolist() == [0.5, 0.5, 0.5]
    row = bounds[(bounds["participant_id"] == "P01") & (bounds["feature"] == "Alpha/C3")].iloc[0]
    assert (row["min"], row["max"]) == (1.0, 3.0)


def test_minmax_scaling_is_per_participant():
    table = _table(
        [
            ("P01", "Real", 1.0, 0.0),
            ("P01", "Virtual", 3.0, 1.0),
            ("P02", "Real", 10.0, 0.0),
            ("P02", "Virtual", 20.0, 1.0),
        ]
    )
    scaled, _ = minmax_scale_per_participant(table)
    assert scaled["Alpha/C3"].tolist() == [0.0, 1.0, 0.0, 1.0]


def test_group_analysis_needs_both_conditions():
    table = _table([("P01", "Real", 1.0, 2.0), ("P01", "Real", 2.0, 3.0)])
    with pytest.raises(InvariantViolation):
        psd_group_analysis(table)


def test_group_analysis_rows():
    table = _table(
        [("P01", "Real", 1.0 + 0.1 * k, 2.0 + 0.05 * (k % 3)) for k in range(6)]
        + [("P01", "Virtual", 5.0 + 0.1 * k, 2.0 + 0.05 * (k % 3)) for k in range(6)]
    )
    report = psd_group_analysis(table)
    assert report.rows["feature"].tolist() == ["Alpha/C3", "Beta/C3"]
    assert report.selected_features == ["Alpha/C3"]
    alpha_row = report.rows.iloc[0]
    assert alpha_row["mean_real"] < alpha_row["mean_virtual"]
    assert report.to_dict()["n_features"] == 2


@pytest.mark.slow
def test_planted_alpha_electrodes_are_selected():
    cfg = SimConfig(n_participants=3, trials_per_condition=20, alpha_attenuation_pct=40.0, effect_jitter=0.0, seed=2)
    table = pd.concat([psd_session_table(s) for s in simulate_dataset(cfg)], ignore_index=True)
    report = psd_group_analysis(table)
    assert len(report.rows) == 64
    assert {"Alpha/C3", "Alpha/Fp1"} <= set(report.selected_features)
    c3 = report.rows.set_index("feature").loc["Alpha/C3"]
    assert c3["mean_real"] > c3["mean_virtual"]
