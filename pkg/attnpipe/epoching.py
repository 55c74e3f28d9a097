from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from attnpipe.data_model import Condition, GazeTrack, Recording, Session, TrialEvent
from attnpipe.errors import InvariantViolation, TrialOutOfBounds

logger = logging.getLogger(__name__)

WINDOW_SECONDS = 3.0
# Memory-Phase 開始からの窓開始オフセット（秒）. 最初と最後の 1 秒強は使わない
WINDOW_OFFSETS: tuple[float, ...] = (3.0, 6.0, 9.0, 12.0, 15.0)
N_POSITIONS = len(WINDOW_OFFSETS)


def window_id(participant_id: str, trial_id: int, position_index: int) -> str:
    """窓の一意 ID（例: "P01-t007-w2"）."""
    return f"{participant_id}-t{trial_id:03d}-w{position_index}"


@dataclass(frozen=True)
class EpochWindow:
    """ラベル付き 3 秒窓（分類の最小単位）."""

    participant_id: str
    trial_id: int
    condition: Condition
    position_index: int
    onset: float
    eeg: np.ndarray
    fs: float = 500.0
    gaze_slice: GazeTrack | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.position_index not in range(N_POSITIONS):
            raise InvariantViolation(f"position_index {self.position_index} not in 0..4", rule="window.position")
        expected = int(round(WINDOW_SECONDS * self.fs))
        if self.eeg.ndim != 2 or self.eeg.shape[1] != expected:
            raise InvariantViolation(
                f"window has shape {self.eeg.shape}, expected (channels, {expected})", rule="window.samples"
            )

    @property
    def window_id(self) -> str:
        return window_id(self.participant_id, self.trial_id, self.position_index)

    @property
    def start(self) -> float:
        """窓の開始時刻（秒）."""
        return self.onset + WINDOW_OFFSETS[self.position_index]

    @property
    def n_channels(self) -> int:
        return int(self.eeg.shape[0])


@dataclass(frozen=True)
class EpochResult:
    windows: list[EpochWindow]
    skipped: list[TrialOutOfBounds]


def window_sample_range(rec: Recording, start_time: float) -> tuple[int, int]:
    """開始時刻から [start, stop) のサンプル範囲を返す（長さは常に 3 秒 × fs）."""
    start = int(round((start_time - rec.t0) * rec.fs))
    return start, start + int(round(WINDOW_SECONDS * rec.fs))


def _check_bounds(rec: Recording, event: TrialEvent) -> None:
    first, _ = window_sample_range(rec, event.memory_onset + WINDOW_OFFSETS[0])
    _, last = window_sample_range(rec, event.memory_onset + WINDOW_OFFSETS[-1])
    if event.memory_onset < rec.t0 or event.memory_end > rec.t_end or first < 0 or last > rec.n_samples:
        raise TrialOutOfBounds(
            f"trial {event.trial_id}: memory phase [{event.memory_onset}, {event.memory_end}] "
            f"outside recording [{rec.t0}, {rec.t_end}]",
            trial=event.trial_id,
        )


def epoch_session(session: Session, recording: Recording | None = None) -> EpochResult:
    """Memory-Phase を 5 つの 3 秒窓に切り出し、範囲外の試行は報告付きでスキップする関数.

    引数:
        session (Session): ラベル・視線・イベントの取得元。
        recording (Recording | None): 前処理済みの記録。None なら session.recording をそのまま使います。

    戻り値:
        EpochResult: 窓のリスト（試行順・位置順）とスキップした試行の例外。

    注意:
        窓の EEG は記録配列のスライス（ビューで読み取り専用）なので、元の記録とビット単位で一致します。
        Recall-Phase は切り出しません。
    """
    rec = recording if recording is not None else session.recording
    windows: list[EpochWindow] = []
    skipped: list[TrialOutOfBounds] = []
    for ev in session.events:
        try:
            _check_bounds(rec, ev)
        except TrialOutOfBounds as exc:
            logger.warning("%s: %s (skipped)", session.participant_id, exc.message)
            skipped.append(exc)
            continue
        for pos, offset in enumerate(WINDOW_OFFSETS):
            start_time = ev.memory_onset + offset
            lo, hi = window_sample_range(rec, start_time)
            gaze = session.gaze.between(start_time, start_time + WINDOW_SECONDS) if session.gaze is not None else None
            windows.append(
                EpochWindow(
                    participant_id=session.participant_id,
                    trial_id=ev.trial_id,
                    condition=ev.condition,
                    position_index=pos,
                    onset=ev.memory_onset,
                    eeg=rec.samples[:, lo:hi],
                    fs=rec.fs,
                    gaze_slice=gaze,
                )
            )
    return EpochResult(windows=windows, skipped=skipped)


def extract_windows(session: Session, recording: Recording | None = None) -> list[EpochWindow]:
    """有効な各試行から 5 窓ずつ切り出す（スキップはログに記録）."""
    return epoch_session(session, recording).windows


def window_counts(windows) -> Counter:
    """(participant_id, condition, position_index) ごとの窓数."""
    return Counter((w.participant_id, Condition.parse(w.condition).value, int(w.position_index)) for w in windows)


def window_counts_frame(windows) -> pd.DataFrame:
    counts = window_counts(windows)
    rows = [
        {"participant_id": pid, "condition": cond, "position_index": pos, "count": n}
        for (pid, cond, pos), n in sorted(counts.items())
    ]
    return pd.DataFrame(rows, columns=["participant_id", "condition", "position_index", "count"])
