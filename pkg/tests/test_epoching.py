from __future__ import annotations

from collections import Counter

import numpy as np
import pytest

from attnpipe.data_model import Condition, Recording, Session, TrialEvent, exclude_trials
from attnpipe.epoching import (
    N_POSITIONS,
    WINDOW_OFFSETS,
    EpochWindow,
    epoch_session,
    extract_windows,
    window_counts,
    window_counts_frame,
    window_id,
    window_sample_range,
)
from attnpipe.errors import InvariantViolation, TrialOutOfBounds

FS = 500.0


def _session(events, seconds: float, n_channels: int = 2) -> Session:
    n = int(seconds * FS)
    samples = np.tile(np.arange(n, dtype=float), (n_channels, 1))
    samples[1:] *= -1.0
    return Session(participant_id="P01", recording=Recording(samples=samples, fs=FS), events=tuple(events))


def _balanced_events(n_trials: int) -> list[TrialEvent]:
    return [
        TrialEvent(
            trial_id=k + 1,
            condition=Condition.REAL if k % 2 == 0 else Condition.VIRTUAL,
            memory_onset=2.0 + 21.0 * k,
        )
        for k in range(n_trials)
    ]


def test_window_sample_ranges_from_onset():
    session = _session([TrialEvent(1, Condition.REAL, 100.0)], seconds=130.0)
    windows = extract_windows(session)
    expected = [(51500, 53000), (53000, 54500), (54500, 56000), (56000, 57500), (57500, 59000)]
    assert [window_sample_range(session.recording, w.start) for w in windows] == expected
    for w, (lo, hi) in zip(windows, expected, strict=True):
        assert np.array_equal(w.eeg, session.recording.samples[:, lo:hi])
        assert w.eeg.shape == (2, 1500)


def test_forty_trials_give_two_hundred_windows():
    windows = extract_windows(_session(_balanced_events(40), seconds=2.0 + 21.0 * 40 + 5.0))
    assert len(windows) == 200
    per_class = Counter(w.condition for w in windows)
    assert per_class[Condition.REAL] == per_class[Condition.VIRTUAL] == 100
    assert len({w.window_id for w in windows}) == 200


def test_window_positions_and_ids():
    windows = extract_windows(_session([TrialEvent(7, Condition.VIRTUAL, 10.0)], seconds=40.0))
    assert [w.position_index for w in windows] == list(range(N_POSITIONS))
    assert [w.start - w.onset for w in windows] == list(WINDOW_OFFSETS)
    assert windows[2].window_id == window_id("P01", 7, 2) == "P01-t007-w2"


def test_trial_beyond_recording_is_skipped():
    events = [TrialEvent(1, Condition.REAL, 5.0), TrialEvent(2, Condition.VIRTUAL, 30.0)]
    result = epoch_session(_session(events, seconds=45.0))
    assert len(result.windows) == N_POSITIONS
    assert {w.trial_id for w in result.windows} == {1}
    assert len(result.skipped) == 1
    assert isinstance(result.skipped[0], TrialOutOfBounds)
    assert result.skipped[0].details["trial"] == 2


def test_window_rejects_wrong_length():
    with pytest.raises(InvariantViolation):
        EpochWindow("P01", 1, Condition.REAL, 0, 0.0, np.zeros((2, 1499)))


def test_gaze_slice_follows_window(hand_session):
    windows = extract_windows(hand_session)
    for w in windows:
        assert w.gaze_slice is not None
        assert len(w.gaze_slice) > 0
        assert w.gaze_slice.timestamps[0] >= w.start
        assert w.gaze_slice.timestamps[-1] < w.start + 3.0


def test_window_counts_balanced():
    windows = extract_windows(_session(_balanced_events(40), seconds=2.0 + 21.0 * 40 + 5.0))
    counts = window_counts(windows)
    for pos in range(N_POSITIONS):
        assert counts[("P01", "Real", pos)] == 20
        assert counts[("P01", "Virtual", pos)] == 20
        assert counts[("P01", "Real", pos)] + counts[("P01", "Virtual", pos)] == 40


def test_window_counts_empty():
    assert window_counts([]) == Counter()
    assert window_counts_frame([]).empty


def test_excluded_trial_reduces_counts():
    session = _session(_balanced_events(40), seconds=2.0 + 21.0 * 40 + 5.0)
    before = window_counts(extract_windows(session))
    after = window_counts(extract_windows(exclude_trials(session, [1])))
    for pos in range(N_POSITIONS):
        assert after[("P01", "Real", pos)] == before[("P01", "Real", pos)] - 1
        assert after[("P01", "Virtual", pos)] == before[("P01", "Virtual", pos)]
