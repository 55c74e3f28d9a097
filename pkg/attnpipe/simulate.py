from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np
from joblib import Parallel, delayed

from attnpipe.core_foundation import write_json
from attnpipe.data_model import (
    FIELD_SIZES,
    MAX_TRIALS_PER_CONDITION,
    Condition,
    Dataset,
    GazeTrack,
    Recording,
    Session,
    TrialEvent,
    save_dataset,
)
from attnpipe.errors import InvalidConfig
from attnpipe.montage import DEFAULT_LABELS, default_montage

logger = logging.getLogger(__name__)

SIM_JSON = "sim.json"
BLOCK_SIZE = 4


@dataclass(frozen=True)
class SimConfig:
    """疑似セッション生成の設定（振幅は µV、時間は秒、座標は正規化単位）."""

    n_participants: int = 20
    trials_per_condition: int = 20
    fs: float = 500.0
    gaze_rate: float = 120.0
    seed: int = 0
    # 1 試行のタイムライン
    lead_seconds: float = 2.0
    cue_seconds: float = 2.0
    memory_seconds: float = 20.0
    recall_seconds: float = 10.0
    feedback_seconds: float = 2.0
    # 仕込む効果
    effect_electrodes: tuple[str, ...] = ("C3", "Fp1", "PO8")
    alpha_attenuation_pct: float = 20.0
    effect_jitter: float = 0.25
    extra_effect_electrodes: int = 1
    drift_per_trial: float = 0.0
    gaze_effect: bool = True
    position4_effect_removal: bool = False
    disjoint_effects: bool = False
    # 背景信号
    pink_scale: float = 10.0
    alpha_amplitude: float = 10.0
    alpha_envelope_sd: float = 0.3
    line_noise_amplitude: float = 5.0
    nonstationarity: float = 0.1
    gain_variation: float = 0.1
    max_bad_channels: int = 1
    # 視線
    with_gaze: bool = True
    gaze_missing_fraction: float = 0.0
    fixation_real: float = 0.25
    fixation_virtual: float = 0.35
    gaze_jitter: float = 0.0015
    calibration_offset_sd: float = 0.03
    blink_rate: float = 0.25

    def __post_init__(self) -> None:
        object.__setattr__(self, "effect_electrodes", tuple(self.effect_electrodes))

    @property
    def trial_seconds(self) -> float:
        return self.cue_seconds + self.memory_seconds + self.recall_seconds + self.feedback_seconds

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["effect_electrodes"] = list(self.effect_electrodes)
        return d

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> SimConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise InvalidConfig(f"unknown simulation fields: {unknown}", fields=unknown)
        return cls(**doc)


def validate_sim_config(cfg: SimConfig) -> None:
    """設定の値域を検査する関数.

    例外:
        InvalidConfig: 値域外の項目がある場合（最初に見つかった項目名を details に含みます）。
    """
    checks = [
        ("n_participants", cfg.n_participants >= 1, "must be >= 1"),
        (
            "trials_per_condition",
            2 <= cfg.trials_per_condition <= MAX_TRIALS_PER_CONDITION,
            f"must be in [2, {MAX_TRIALS_PER_CONDITION}]",
        ),
        ("fs", cfg.fs > 100.0, "must exceed 100 Hz (notch at 50 Hz)"),
        ("gaze_rate", cfg.gaze_rate > 0, "must be positive"),
        ("memory_seconds", cfg.memory_seconds > 18.0, "must exceed 18 s"),
        ("alpha_attenuation_pct", 0.0 <= cfg.alpha_attenuation_pct <= 100.0, "must be in [0, 100]"),
        ("effect_jitter", 0.0 <= cfg.effect_jitter < 1.0, "must be in [0, 1)"),
        ("drift_per_trial", cfg.drift_per_trial >= 0.0, "must be >= 0"),
        ("nonstationarity", cfg.nonstationarity >= 0.0, "must be >= 0"),
        ("max_bad_channels", 0 <= cfg.max_bad_channels <= 2, "must be in [0, 2]"),
        ("gaze_missing_fraction", 0.0 <= cfg.gaze_missing_fraction <= 1.0, "must be in [0, 1]"),
        ("fixation_real", cfg.fixation_real > 0, "must be positive"),
        ("fixation_virtual", cfg.fixation_virtual > 0, "must be positive"),
        ("effect_electrodes", set(cfg.effect_electrodes) <= set(DEFAULT_LABELS), "unknown electrode label"),
        (
            "extra_effect_electrodes",
            0 <= cfg.extra_effect_electrodes <= len(DEFAULT_LABELS) - len(set(cfg.effect_electrodes)),
            "out of range",
        ),
    ]
    for name, ok, why in checks:
        if not ok:
            raise InvalidConfig(f"SimConfig.{name} {why} (got {getattr(cfg, name)!r})", field=name)


@dataclass(frozen=True)
class SimulatedParticipant:
    session: Session
    truth: dict[str, Any]


def participant_rng(cfg: SimConfig, participant_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(cfg.seed), int(participant_index)]))


# ---------- タイムライン ----------


def _trial_schedule(cfg: SimConfig, rng: np.random.Generator) -> tuple[list[TrialEvent], list[str]]:
    # 同条件 4 試行のブロックを無作為な順に並べる
    blocks = []
    for cond in Condition:
        remaining = cfg.trials_per_condition
        while remaining > 0:
            size = min(BLOCK_SIZE, remaining)
            blocks.append((cond, size))
            remaining -= size
    order = rng.permutation(len(blocks))
    events = []
    block_labels = []
    t = cfg.lead_seconds
    trial_id = 1
    for b in order:
        cond, size = blocks[b]
        block_labels.append(cond.value)
        for _ in range(size):
            onset = t + cfg.cue_seconds
            events.append(
                TrialEvent(
                    trial_id=trial_id,
                    condition=cond,
                    memory_onset=onset,
                    memory_duration=cfg.memory_seconds,
                    field_size=str(rng.choice(FIELD_SIZES)),
                )
            )
            trial_id += 1
            t += cfg.trial_seconds
    return events, block_labels


# ---------- EEG ----------


def pink_noise(rng: np.random.Generator, n_channels: int, n_samples: int, fs: float) -> np.ndarray:
    """1/√f の振幅整形で作る単位分散のピンクノイズ (n_channels, n_samples)."""
    spectrum = np.fft.rfft(rng.standard_normal((n_channels, n_samples)), axis=-1)
    f = np.fft.rfftfreq(n_samples, 1.0 / fs)
    shape = np.zeros_like(f)
    shape[1:] = 1.0 / np.sqrt(f[1:])
    x = np.fft.irfft(spectrum * shape, n=n_samples, axis=-1)
    return x / x.std(axis=-1, keepdims=True)


def _slow_process(rng: np.random.Generator, n_channels: int, t: np.ndarray, sd: float, step: float = 1.0):
    knots = np.arange(t[0], t[-1] + 2 * step, step)
    values = rng.normal(0.0, sd, size=(n_channels, knots.size))
    return np.stack([np.interp(t, knots, v) for v in values])


def _trial_log_gain(
    rng: np.random.Generator, events: list[TrialEvent], n_channels: int, t: np.ndarray, sd: float
) -> np.ndarray:
    # 試行中は一定、試行間はコサインで次の試行の値へ移る
    out = np.zeros((n_channels, t.size))
    if not events:
        return out
    gains = rng.normal(0.0, sd, size=(len(events), n_channels))
    out[:] = gains[0][:, None]
    for k, ev in enumerate(events):
        inside = (t >= ev.memory_onset) & (t < ev.memory_end)
        out[:, inside] = gains[k][:, None]
        if k + 1 < len(events):
            nxt = events[k + 1]
            gap = (t >= ev.memory_end) & (t < nxt.memory_onset)
            phase = (t[gap] - ev.memory_end) / (nxt.memory_onset - ev.memory_end)
            w = 0.5 - 0.5 * np.cos(np.pi * phase)
            out[:, gap] = gains[k][:, None] * (1.0 - w) + gains[k + 1][:, None] * w
        else:
            out[:, t >= ev.memory_end] = gains[k][:, None]
    return out


def _alpha_multiplier(
    cfg: SimConfig, events: list[TrialEvent], t: np.ndarray, strength: float
) -> np.ndarray:
    m = np.ones(t.size)
    for ev in events:
        if ev.condition is not Condition.VIRTUAL:
            continue
        end = ev.memory_onset + 15.0 if cfg.position4_effect_removal else ev.memory_end
        m[(t >= ev.memory_onset) & (t < end)] = 1.0 - strength
    return m


def _simulate_eeg(
    cfg: SimConfig,
    rng: np.random.Generator,
    events: list[TrialEvent],
    n_samples: int,
    effect_rows: list[int],
    strength: float,
    bad_rows: list[int],
) -> tuple[np.ndarray, dict[str, Any]]:
    n_ch = len(DEFAULT_LABELS)
    t = np.arange(n_samples) / cfg.fs

    noise = pink_noise(rng, n_ch, n_samples, cfg.fs) * cfg.pink_scale
    noise *= 1.0 + cfg.nonstationarity * (t / t[-1])

    alpha_freq = float(rng.uniform(9.5, 10.5))
    phases = rng.uniform(0.0, 2 * np.pi, size=n_ch)
    envelope = cfg.alpha_amplitude * np.exp(_slow_process(rng, n_ch, t, cfg.alpha_envelope_sd))
    alpha = envelope * np.sin(2 * np.pi * alpha_freq * t[None, :] + phases[:, None])
    if effect_rows and strength > 0:
        alpha[effect_rows] *= _alpha_multiplier(cfg, events, t, strength)[None, :]

    line_amp = cfg.line_noise_amplitude * rng.uniform(0.5, 1.5, size=n_ch)
    line = line_amp[:, None] * np.sin(2 * np.pi * 50.0 * t[None, :] + rng.uniform(0, 2 * np.pi, n_ch)[:, None])

    gain = np.exp(rng.normal(0.0, cfg.gain_variation, size=n_ch))
    eeg = noise
    eeg += alpha
    del alpha
    if cfg.drift_per_trial > 0:
        eeg *= np.exp(_trial_log_gain(rng, events, n_ch, t, cfg.drift_per_trial))
    eeg *= gain[:, None]
    eeg += line

    for row in bad_rows:
        eeg[row] = 5.0 * cfg.pink_scale * rng.standard_normal(n_samples) + 50.0 * np.sin(2 * np.pi * 0.05 * t)

    meta = {"alpha_freq": alpha_freq, "channel_gain": gain.tolist()}
    return eeg, meta


# ---------- 視線 ----------


def _fixation_schedule(
    cfg: SimConfig, rng: np.random.Generator, events: list[TrialEvent], t_end: float, gaze_effect: bool
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    # 注視（点）とサッカード（40 ms の線形移動）の交互列
    starts, ends, xs, ys = [], [], [], []
    onsets = np.array([ev.memory_onset for ev in events])
    conds = [ev.condition for ev in events]
    neutral = 0.5 * (cfg.fixation_real + cfg.fixation_virtual)
    t = 0.0
    while t < t_end:
        mean = neutral
        if gaze_effect and onsets.size:
            k = int(np.searchsorted(onsets, t, side="right")) - 1
            if k >= 0 and t < events[k].memory_end:
                mean = cfg.fixation_real if conds[k] is Condition.REAL else cfg.fixation_virtual
        dur = float(rng.gamma(4.0, mean / 4.0))
        starts.append(t)
        ends.append(t + dur)
        xs.append(float(rng.uniform(0.1, 0.9)))
        ys.append(float(rng.uniform(0.1, 0.9)))
        t += dur + 0.04
    return np.array(starts), np.array(ends), np.array(xs), np.array(ys)


def _simulate_gaze(
    cfg: SimConfig, rng: np.random.Generator, events: list[TrialEvent], t_end: float, gaze_effect: bool
) -> tuple[GazeTrack, dict[str, Any]]:
    n = int(np.floor(t_end * cfg.gaze_rate))
    ts = (np.arange(n) + rng.uniform(-0.1, 0.1, size=n)) / cfg.gaze_rate
    ts[0] = max(ts[0], 0.0)
    starts, ends, fx, fy = _fixation_schedule(cfg, rng, events, t_end, gaze_effect)

    k = np.clip(np.searchsorted(starts, ts, side="right") - 1, 0, starts.size - 1)
    in_saccade = ts > ends[k]
    nxt = np.minimum(k + 1, starts.size - 1)
    frac = np.clip((ts - ends[k]) / 0.04, 0.0, 1.0)
    x = np.where(in_saccade, fx[k] + frac * (fx[nxt] - fx[k]), fx[k])
    y = np.where(in_saccade, fy[k] + frac * (fy[nxt] - fy[k]), fy[k])

    offset = rng.normal(0.0, cfg.calibration_offset_sd, size=2)
    x = x + offset[0] + rng.normal(0.0, cfg.gaze_jitter, size=n)
    y = y + offset[1] + rng.normal(0.0, cfg.gaze_jitter, size=n)
    conf = rng.uniform(0.85, 1.0, size=n)

    n_blinks = int(rng.poisson(cfg.blink_rate * t_end))
    for b in rng.uniform(0.0, t_end, size=n_blinks):
        hit = (ts >= b) & (ts < b + 0.15)
        conf[hit] = rng.uniform(0.0, 0.3, size=int(hit.sum()))
        x[hit] = 0.0
        y[hit] = 0.0
    track = GazeTrack(timestamps=ts, x=x, y=y, confidence=conf)
    return track, {"calibration_offset": offset.tolist(), "n_blinks": n_blinks}


# ---------- 公開 API ----------


def simulate_participant(cfg: SimConfig, participant_index: int) -> SimulatedParticipant:
    """参加者 1 名分のセッションと仕込んだ正解情報を生成する関数.

    引数:
        cfg (SimConfig): 生成設定。
        participant_index (int): 0 始まりの参加者番号（ID は P01, P02, …）。

    戻り値:
        SimulatedParticipant: Session と truth（効果電極・効果量・不良チャンネルなど）。

    例外:
        InvalidConfig: 設定が値域外の場合。

    注意:
        (cfg.seed, participant_index) から乱数列を導くので、同じ入力からは常に同じセッションになります。
    """
    validate_sim_config(cfg)
    rng = participant_rng(cfg, participant_index)
    pid = f"P{participant_index + 1:02d}"
    montage = default_montage()
    labels = list(montage.names)

    events, block_order = _trial_schedule(cfg, rng)
    t_end = events[-1].memory_end + cfg.recall_seconds + cfg.feedback_seconds + cfg.lead_seconds
    n_samples = int(round(t_end * cfg.fs))

    eeg_effect = not cfg.disjoint_effects or participant_index % 2 == 0
    gaze_effect = cfg.gaze_effect and (not cfg.disjoint_effects or participant_index % 2 == 1)

    effect_labels = list(cfg.effect_electrodes)
    others = [lab for lab in labels if lab not in effect_labels]
    if cfg.extra_effect_electrodes:
        effect_labels += sorted(rng.choice(others, size=cfg.extra_effect_electrodes, replace=False).tolist())
    strength = cfg.alpha_attenuation_pct / 100.0 * float(rng.uniform(1 - cfg.effect_jitter, 1 + cfg.effect_jitter))
    strength = min(strength, 1.0) if eeg_effect else 0.0

    candidates = [lab for lab in labels if lab not in effect_labels]
    n_bad = int(rng.integers(0, cfg.max_bad_channels + 1))
    bad = sorted(rng.choice(candidates, size=n_bad, replace=False).tolist()) if n_bad else []

    eeg, eeg_meta = _simulate_eeg(
        cfg, rng, events, n_samples, [labels.index(e) for e in effect_labels], strength,
        [labels.index(b) for b in bad],
    )

    gaze = None
    gaze_meta: dict[str, Any] = {}
    n_missing = int(round(cfg.gaze_missing_fraction * cfg.n_participants))
    has_gaze = cfg.with_gaze and participant_index < cfg.n_participants - n_missing
    if has_gaze:
        gaze, gaze_meta = _simulate_gaze(cfg, rng, events, n_samples / cfg.fs, gaze_effect)

    session = Session(
        participant_id=pid,
        recording=Recording(samples=eeg, fs=cfg.fs, t0=0.0),
        events=tuple(events),
        gaze=gaze,
        bad_channels=frozenset(bad),
        montage=montage,
    )
    truth = {
        "participant_id": pid,
        "participant_index": participant_index,
        "eeg_effect": bool(eeg_effect and strength > 0),
        "gaze_effect": bool(gaze_effect and has_gaze),
        "effect_electrodes": effect_labels,
        "alpha_attenuation": strength,
        "position4_effect_removal": cfg.position4_effect_removal,
        "bad_channels": bad,
        "block_order": block_order,
        "has_gaze": has_gaze,
        **eeg_meta,
        **gaze_meta,
    }
    logger.debug("simulated %s: %d trials, bad=%s", pid, len(events), bad)
    return SimulatedParticipant(session=session, truth=truth)


def simulate_session(cfg: SimConfig, participant_index: int) -> Session:
    """参加者 1 名分の Session を生成する."""
    return simulate_participant(cfg, participant_index).session


def simulate_dataset_with_truth(cfg: SimConfig, jobs: int = 1) -> tuple[Dataset, list[dict[str, Any]]]:
    validate_sim_config(cfg)
    results = Parallel(n_jobs=jobs)(delayed(simulate_participant)(cfg, i) for i in range(cfg.n_participants))
    return Dataset(tuple(r.session for r in results)), [r.truth for r in results]


def simulate_dataset(cfg: SimConfig, jobs: int = 1) -> Dataset:
    """n_participants 名分のデータセットを生成する（参加者ごとに独立な乱数列）."""
    return simulate_dataset_with_truth(cfg, jobs)[0]


def write_simulation(cfg: SimConfig, out_dir: str | Path, jobs: int = 1) -> Path:
    """データセットをディレクトリ形式で書き出し、設定と正解情報を sim.json に記録する関数.

    戻り値:
        Path: 出力ディレクトリ（参加者ごとのサブディレクトリと sim.json を含む）。
    """
    dataset, truth = simulate_dataset_with_truth(cfg, jobs)
    root = save_dataset(dataset, out_dir)
    write_json(root / SIM_JSON, {"config": cfg.to_dict(), "participants": truth})
    logger.info("wrote %d simulated sessions to %s", len(dataset), root)
    return root
