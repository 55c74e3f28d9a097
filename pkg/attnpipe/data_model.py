from __future__ import annotations

import logging
import re
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd

from attnpipe.core_foundation import read_json, write_json
from attnpipe.errors import InvariantViolation, IoFailure, MalformedRow, MissingFile
from attnpipe.montage import ElectrodeMontage, default_montage, montage_from_labels

logger = logging.getLogger(__name__)

FORMAT_VERSION = "attnpipe-session/1"
FIELD_SIZES: tuple[str, ...] = ("5x5", "4x3", "7x2", "4x4")
MAX_TRIALS_PER_CONDITION = 20
NOMINAL_GAZE_RATE = 120.0
CSV_FLOAT_FORMAT = "%.10g"

MANIFEST = "manifest.json"
EEG_CSV = "eeg.csv"
GAZE_CSV = "gaze.csv"
EVENTS_CSV = "events.csv"
GAZE_COLUMNS = ["timestamp", "x", "y", "confidence"]
EVENT_COLUMNS = ["trial_id", "condition", "memory_onset", "memory_duration", "field_size"]


class Condition(str, Enum):
    """注視対象のクラスラベル."""

    REAL = "Real"
    VIRTUAL = "Virtual"

    @classmethod
    def parse(cls, value: str | Condition) -> Condition:
        if isinstance(value, Condition):
            return value
        for member in cls:
            if member.value.casefold() == str(value).strip().casefold():
                return member
        raise InvariantViolation(f"condition label {value!r} is not Real/Virtual", rule="event.condition")


def _frozen(arr: np.ndarray, dtype=float) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Recording:
    """channels × time の電位行列（µV）."""

    samples: np.ndarray
    fs: float = 500.0
    t0: float = 0.0

    def __post_init__(self) -> None:
        data = np.asarray(self.samples, dtype=float)
        if data.ndim != 2:
            raise InvariantViolation("recording samples must be a channels x time matrix", rule="recording.shape")
        if not self.fs > 0:
            raise InvariantViolation(f"sampling rate must be positive, got {self.fs}", rule="recording.fs")
        if not np.all(np.isfinite(data)):
            raise InvariantViolation("recording contains non-finite samples", rule="recording.finite")
        object.__setattr__(self, "samples", _frozen(data))
        object.__setattr__(self, "fs", float(self.fs))
        object.__setattr__(self, "t0", float(self.t0))

    @property
    def n_channels(self) -> int:
        return int(self.samples.shape[0])

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[1])

    @property
    def t_end(self) -> float:
        """最終サンプルの直後の時刻（秒）."""
        return self.t0 + self.n_samples / self.fs

    def with_samples(self, samples: np.ndarray) -> Recording:
        return Recording(samples=samples, fs=self.fs, t0=self.t0)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Recording):
            return NotImplemented
        return self.fs == other.fs and self.t0 == other.t0 and np.array_equal(self.samples, other.samples)


@dataclass(frozen=True)
class GazeTrack:
    """2D 注視点（正規化座標）と検出信頼度の時系列."""

    timestamps: np.ndarray
    x: np.ndarray
    y: np.ndarray
    confidence: np.ndarray

    def __post_init__(self) -> None:
        cols = [np.asarray(c, dtype=float).ravel() for c in (self.timestamps, self.x, self.y, self.confidence)]
        if len({len(c) for c in cols}) != 1:
            raise InvariantViolation("gaze columns must have equal length", rule="gaze.equal_length")
        if len(cols[0]) > 1 and not np.all(np.diff(cols[0]) > 0):
            raise InvariantViolation("gaze timestamps must be strictly increasing", rule="gaze.increasing")
        for name, col in zip(("timestamps", "x", "y", "confidence"), cols, strict=True):
            object.__setattr__(self, name, _frozen(col))

    def __len__(self) -> int:
        return int(self.timestamps.shape[0])

    @classmethod
    def empty(cls) -> GazeTrack:
        z = np.zeros(0)
        return cls(z, z, z, z)

    def between(self, start: float, end: float) -> GazeTrack:
        """[start, end) に入るサンプルだけを持つ GazeTrack を返す."""
        lo = int(np.searchsorted(self.timestamps, start, side="left"))
        hi = int(np.searchsorted(self.timestamps, end, side="left"))
        return GazeTrack(self.timestamps[lo:hi], self.x[lo:hi], self.y[lo:hi], self.confidence[lo:hi])

    def median_rate(self) -> float | None:
        if len(self) < 2:
            return None
        return float(1.0 / np.median(np.diff(self.timestamps)))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GazeTrack):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in ("timestamps", "x", "y", "confidence")
        )


@dataclass(frozen=True)
class TrialEvent:
    """1 試行の Memory-Phase マーカー."""

    trial_id: int
    condition: Condition
    memory_onset: float
    memory_duration: float = 20.0
    field_size: str = "4x4"

    def __post_init__(self) -> None:
        object.__setattr__(self, "trial_id", int(self.trial_id))
        object.__setattr__(self, "condition", Condition.parse(self.condition))
        object.__setattr__(self, "memory_onset", float(self.memory_onset))
        object.__setattr__(self, "memory_duration", float(self.memory_duration))
        if not self.memory_duration > 18.0:
            raise InvariantViolation(
                f"trial {self.trial_id}: memory_duration {self.memory_duration} must exceed 18 s",
                rule="event.memory_duration",
                trial=self.trial_id,
            )
        if self.field_size not in FIELD_SIZES:
            raise InvariantViolation(
                f"trial {self.trial_id}: field_size {self.field_size!r} not in {FIELD_SIZES}",
                rule="event.field_size",
                trial=self.trial_id,
            )

    @property
    def memory_end(self) -> float:
        return self.memory_onset + self.memory_duration


@dataclass(frozen=True)
class Session:
    """参加者 1 名分の記録（EEG・視線・試行イベント・不良チャンネル）."""

    participant_id: str
    recording: Recording
    events: tuple[TrialEvent, ...]
    gaze: GazeTrack | None = None
    bad_channels: frozenset[str] = frozenset()
    montage: ElectrodeMontage = field(default_factory=default_montage)

    def __post_init__(self) -> None:
        object.__setattr__(self, "events", tuple(self.events))
        object.__setattr__(self, "bad_channels", frozenset(self.bad_channels))

    @property
    def channel_names(self) -> tuple[str, ...]:
        return self.montage.names


@dataclass(frozen=True)
class Dataset:
    """複数セッションの集合（participant_id は一意）."""

    sessions: tuple[Session, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "sessions", tuple(self.sessions))
        dupes = [pid for pid, n in Counter(s.participant_id for s in self.sessions).items() if n > 1]
        if dupes:
            raise InvariantViolation(f"duplicate participant ids: {dupes}", rule="dataset.unique_participants")

    def __len__(self) -> int:
        return len(self.sessions)

    def __iter__(self):
        return iter(self.sessions)

    @property
    def participant_ids(self) -> list[str]:
        return [s.participant_id for s in self.sessions]


@dataclass(frozen=True)
class ValidationEntry:
    session: str
    trial: int | None
    rule: str
    message: str
    severity: str = "violation"


@dataclass(frozen=True)
class ValidationReport:
    """セッションごとの違反一覧. severity="info" の項目は違反に数えない."""

    entries: tuple[ValidationEntry, ...] = ()

    @property
    def violations(self) -> list[ValidationEntry]:
        return [e for e in self.entries if e.severity == "violation"]

    @property
    def infos(self) -> list[ValidationEntry]:
        return [e for e in self.entries if e.severity == "info"]

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [e.__dict__ for e in self.entries], columns=["session", "trial", "rule", "message", "severity"]
        )


# ---------- 検証 ----------


def session_violations(
    session: Session, max_trials_per_condition: int = MAX_TRIALS_PER_CONDITION
) -> list[ValidationEntry]:
    """セッションの不変条件をチェックし、違反・情報項目を返す関数.

    引数:
        session (Session): 検査対象。
        max_trials_per_condition (int): 条件ごとの最大試行数（プロトコル既定 20）。

    戻り値:
        List[ValidationEntry]: 見つかった項目（空なら問題なし）。

    注意:
        視線データが無いことは違反ではなく info として報告します
        （視線は一部の参加者にしか無いのが普通です）。
    """
    pid = session.participant_id
    rec = session.recording
    out: list[ValidationEntry] = []

    if rec.n_channels != len(session.montage):
        out.append(
            ValidationEntry(
                pid, None, "session.channel_count",
                f"recording has {rec.n_channels} channels, montage has {len(session.montage)}",
            )
        )
    unknown = sorted(set(session.bad_channels) - set(session.montage.names))
    if unknown:
        out.append(ValidationEntry(pid, None, "session.bad_channels", f"bad channels not in montage: {unknown}"))

    counts = Counter(ev.trial_id for ev in session.events)
    for tid, n in sorted(counts.items()):
        if n > 1:
            out.append(ValidationEntry(pid, tid, "session.unique_trial_ids", f"trial_id {tid} appears {n} times"))

    for ev in session.events:
        if ev.memory_onset < rec.t0 or ev.memory_end > rec.t_end:
            out.append(
                ValidationEntry(
                    pid, ev.trial_id, "session.event_within_recording",
                    f"memory phase [{ev.memory_onset}, {ev.memory_end}] outside recording [{rec.t0}, {rec.t_end}]",
                )
            )

    per_condition = Counter(ev.condition for ev in session.events)
    for cond in Condition:
        n = per_condition.get(cond, 0)
        if n > max_trials_per_condition:
            out.append(
                ValidationEntry(
                    pid, None, "session.trials_per_condition",
                    f"{n} {cond.value} trials exceeds {max_trials_per_condition}",
                )
            )
        elif n < max_trials_per_condition:
            out.append(
                ValidationEntry(
                    pid, None, "session.reduced_trials",
                    f"{n} of {max_trials_per_condition} {cond.value} trials present", severity="info",
                )
            )

    if session.gaze is None:
        out.append(ValidationEntry(pid, None, "session.gaze_missing", "no gaze recording", severity="info"))
    else:
        rate = session.gaze.median_rate()
        if rate is not None and not (0.8 * NOMINAL_GAZE_RATE <= rate <= 1.2 * NOMINAL_GAZE_RATE):
            out.append(
                ValidationEntry(pid, None, "gaze.rate", f"gaze rate {rate:.1f} Hz outside 120 Hz ± 20%")
            )
    return out


def validate_dataset(dataset: Dataset | Iterable[Session]) -> ValidationReport:
    """データセット全体を検査し ValidationReport を返す関数.

    引数:
        dataset (Dataset | Iterable[Session]): 検査対象。

    戻り値:
        ValidationReport: 違反が無ければ `ok` が True（info 項目は残り得る）。
    """
    sessions = list(dataset.sessions if isinstance(dataset, Dataset) else dataset)
    entries: list[ValidationEntry] = []
    for pid, n in Counter(s.participant_id for s in sessions).items():
        if n > 1:
            entries.append(ValidationEntry(pid, None, "dataset.unique_participants", f"{pid} appears {n} times"))
    for s in sessions:
        entries.extend(session_violations(s))
    return ValidationReport(tuple(entries))


def _raise_first(session: Session) -> None:
    for entry in session_violations(session):
        if entry.severity == "violation":
            raise InvariantViolation(entry.message, rule=entry.rule, session=entry.session, trial=entry.trial)


def exclude_trials(session: Session, trial_ids: Iterable[int]) -> Session:
    """指定した試行を除外した新しい Session を返す（技術的問題のあった試行の除外用）."""
    drop = {int(t) for t in trial_ids}
    kept = tuple(ev for ev in session.events if ev.trial_id not in drop)
    if len(kept) != len(session.events):
        logger.info("%s: excluded %d trials", session.participant_id, len(session.events) - len(kept))
    return replace(session, events=kept)


# ---------- 読み込み ----------


def _require(path: Path) -> Path:
    if not path.is_file():
        raise MissingFile(f"required file missing: {path}", path=str(path))
    return path


def _read_numeric_csv(path: Path, expected_columns: Sequence[str] | None = None) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError as exc:
        raise MalformedRow("file is empty", file=path.name, line=1) from exc
    except pd.errors.ParserError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise MalformedRow(str(exc), file=path.name, line=int(m.group(1)) if m else 0) from exc
    if expected_columns is not None and list(df.columns) != list(expected_columns):
        raise MalformedRow(
            f"header {list(df.columns)} does not match {list(expected_columns)}", file=path.name, line=1
        )
    numeric = df.apply(pd.to_numeric, errors="coerce")
    bad_rows = np.flatnonzero(numeric.isna().any(axis=1).to_numpy())
    if bad_rows.size:
        # ヘッダーが 1 行目
        raise MalformedRow("missing or non-numeric value", file=path.name, line=int(bad_rows[0]) + 2)
    return numeric


def _read_events(path: Path) -> tuple[TrialEvent, ...]:
    try:
        df = pd.read_csv(path, dtype={"condition": str, "field_size": str}, keep_default_na=False)
    except pd.errors.EmptyDataError as exc:
        raise MalformedRow("file is empty", file=path.name, line=1) from exc
    except pd.errors.ParserError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise MalformedRow(str(exc), file=path.name, line=int(m.group(1)) if m else 0) from exc
    if list(df.columns) != EVENT_COLUMNS:
        raise MalformedRow(f"header {list(df.columns)} does not match {EVENT_COLUMNS}", file=path.name, line=1)
    events = []
    for i, row in enumerate(df.itertuples(index=False), start=2):
        try:
            trial_id = int(row.trial_id)
            onset = float(row.memory_onset)
            duration = float(row.memory_duration)
        except (TypeError, ValueError) as exc:
            raise MalformedRow(f"non-numeric event field: {exc}", file=path.name, line=i) from exc
        if not (np.isfinite(onset) and np.isfinite(duration)):
            raise MalformedRow("non-finite event time", file=path.name, line=i)
        events.append(
            TrialEvent(
                trial_id=trial_id,
                condition=Condition.parse(row.condition),
                memory_onset=onset,
                memory_duration=duration,
                field_size=str(row.field_size),
            )
        )
    return tuple(events)


def load_session(path: str | Path) -> Session:
    """ディレクトリからセッションを読み込む関数.

    引数:
        path (str | Path): manifest.json, eeg.csv, events.csv（任意で gaze.csv）を含むディレクトリ。

    戻り値:
        Session: 全ての不変条件を満たすセッション。チャンネル順は manifest に従います。

    例外:
        MissingFile: 必須ファイルが無い場合。
        MalformedRow: CSV の行が壊れている場合（行番号付き）。
        InvariantViolation: 読み込んだ内容が不変条件を破る場合（ルール名付き）。
    """
    root = Path(path)
    manifest = read_json(_require(root / MANIFEST))
    eeg_path = _require(root / EEG_CSV)
    events_path = _require(root / EVENTS_CSV)

    channels = [str(c) for c in manifest["channels"]]
    if "positions" in manifest:
        montage = ElectrodeMontage(names=tuple(channels), positions=np.array(manifest["positions"], dtype=float))
    else:
        montage = montage_from_labels(channels)

    eeg = _read_numeric_csv(eeg_path, expected_columns=channels)
    recording = Recording(
        samples=eeg.to_numpy(dtype=float).T, fs=float(manifest.get("fs", 500.0)), t0=float(manifest.get("t0", 0.0))
    )

    gaze = None
    gaze_path = root / GAZE_CSV
    if gaze_path.is_file():
        g = _read_numeric_csv(gaze_path, expected_columns=GAZE_COLUMNS)
        gaze = GazeTrack(
            timestamps=g["timestamp"].to_numpy(), x=g["x"].to_numpy(), y=g["y"].to_numpy(),
            confidence=g["confidence"].to_numpy(),
        )

    session = Session(
        participant_id=str(manifest["participant_id"]),
        recording=recording,
        events=_read_events(events_path),
        gaze=gaze,
        bad_channels=frozenset(manifest.get("bad_channels", [])),
        montage=montage,
    )
    _raise_first(session)
    logger.debug("loaded %s: %d events, gaze=%s", session.participant_id, len(session.events), gaze is not None)
    return session


def load_dataset(path: str | Path) -> Dataset:
    """manifest.json を持つサブディレクトリを名前順に読み込む."""
    root = Path(path)
    if not root.is_dir():
        raise MissingFile(f"dataset directory missing: {root}", path=str(root))
    dirs = sorted(p for p in root.iterdir() if (p / MANIFEST).is_file())
    if not dirs:
        raise MissingFile(f"no session directories under {root}", path=str(root))
    return Dataset(tuple(load_session(d) for d in dirs))


# ---------- 書き出し ----------


def save_session(session: Session, path: str | Path) -> Path:
    """セッションをディレクトリ形式で書き出す関数.

    引数:
        session (Session): 保存するセッション。
        path (str | Path): 出力ディレクトリ（無ければ作成）。

    戻り値:
        Path: 出力ディレクトリ。

    例外:
        IoFailure: 書き込めない場合。

    注意:
        数値は 10 桁の有効数字で書くため、load_session で相対誤差 1e-9 以内に戻ります。
        同じ入力からは常に同じバイト列になります。
    """
    root = Path(path)
    rec = session.recording
    manifest = {
        "format": FORMAT_VERSION,
        "participant_id": session.participant_id,
        "fs": rec.fs,
        "t0": rec.t0,
        "channels": list(session.montage.names),
        "positions": session.montage.positions,
        "bad_channels": sorted(session.bad_channels),
        "has_gaze": session.gaze is not None,
    }
    try:
        root.mkdir(parents=True, exist_ok=True)
        write_json(root / MANIFEST, manifest)
        pd.DataFrame(rec.samples.T, columns=list(session.montage.names)).to_csv(
            root / EEG_CSV, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n"
        )
        events = pd.DataFrame(
            [
                {
                    "trial_id": ev.trial_id,
                    "condition": ev.condition.value,
                    "memory_onset": ev.memory_onset,
                    "memory_duration": ev.memory_duration,
                    "field_size": ev.field_size,
                }
                for ev in session.events
            ],
            columns=EVENT_COLUMNS,
        )
        events.to_csv(root / EVENTS_CSV, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
        gaze_path = root / GAZE_CSV
        if session.gaze is not None:
            g = session.gaze
            pd.DataFrame(
                {"timestamp": g.timestamps, "x": g.x, "y": g.y, "confidence": g.confidence}, columns=GAZE_COLUMNS
            ).to_csv(gaze_path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
        elif gaze_path.exists():
            gaze_path.unlink()
    except IoFailure:
        raise
    except OSError as exc:
        raise IoFailure(f"cannot write session to {root}: {exc}", path=str(root)) from exc
    return root


def save_dataset(dataset: Dataset, path: str | Path) -> Path:
    """各セッションを `<path>/<participant_id>/` に書き出す."""
    root = Path(path)
    for s in dataset.sessions:
        save_session(s, root / s.participant_id)
    return root
