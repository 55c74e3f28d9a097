from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from attnpipe.data_model import GazeTrack
from attnpipe.eeg_features import FeatureVector

GAZE_FEATURE_NAMES: tuple[str, ...] = (
    "outlier_rate",
    "n_fixations",
    "mean_fixation_duration",
    "fixation_time_fraction",
    "n_saccades",
    "mean_saccade_amplitude",
    "path_length",
    "mean_velocity",
    "peak_velocity",
    "dispersion_total",
)


@dataclass(frozen=True)
class GazeParams:
    """視線特徴量のパラメータ（座標は正規化単位、時間は秒）."""

    dispersion_threshold: float = 0.02
    min_duration: float = 0.1
    confidence_threshold: float = 0.6
    window_seconds: float = 3.0

    def as_dict(self) -> dict[str, float]:
        return {
            "dispersion_threshold": self.dispersion_threshold,
            "min_duration": self.min_duration,
            "confidence_threshold": self.confidence_threshold,
            "window_seconds": self.window_seconds,
        }


@dataclass(frozen=True)
class Fixation:
    start: float
    end: float
    centroid: tuple[float, float]
    dispersion: float

    @property
    def duration(self) -> float:
        return self.end - self.start


def valid_mask(track: GazeTrack, confidence_threshold: float = 0.6) -> np.ndarray:
    """信頼度が閾値以上で、座標が [0,1]² に入るサンプル."""
    return (
        (track.confidence >= confidence_threshold)
        & (track.x >= 0.0) & (track.x <= 1.0)
        & (track.y >= 0.0) & (track.y <= 1.0)
    )


def detect_fixations(
    track: GazeTrack,
    dispersion_threshold: float = 0.02,
    min_duration: float = 0.1,
    confidence_threshold: float = 0.6,
) -> list[Fixation]:
    """分散閾値法（I-DT）で注視を検出する関数.

    引数:
        track (GazeTrack): 視線サンプル。外れ値（低信頼度・範囲外）は除外してから検出します。
        dispersion_threshold (float): (max−min of x) + (max−min of y) の上限。
        min_duration (float): 注視とみなす最短時間（秒）。最初と最後のサンプルの時刻差で測ります。
        confidence_threshold (float): 有効サンプルとみなす信頼度の下限。

    戻り値:
        List[Fixation]: 時刻順で互いに重ならない注視。空の場合もあります。
    """
    keep = valid_mask(track, confidence_threshold)
    t, x, y = track.timestamps[keep], track.x[keep], track.y[keep]
    n = t.size
    out: list[Fixation] = []
    i = 0
    while i < n:
        xmin = xmax = x[i]
        ymin = ymax = y[i]
        j = i
        while j + 1 < n:
            nxmin, nxmax = min(xmin, x[j + 1]), max(xmax, x[j + 1])
            nymin, nymax = min(ymin, y[j + 1]), max(ymax, y[j + 1])
            if (nxmax - nxmin) + (nymax - nymin) > dispersion_threshold:
                break
            xmin, xmax, ymin, ymax = nxmin, nxmax, nymin, nymax
            j += 1
        if t[j] - t[i] >= min_duration:
            out.append(
                Fixation(
                    start=float(t[i]),
                    end=float(t[j]),
                    centroid=(float(x[i : j + 1].mean()), float(y[i : j + 1].mean())),
                    dispersion=float((xmax - xmin) + (ymax - ymin)),
                )
            )
            i = j + 1
        else:
            i += 1
    return out


def gaze_feature_vector(track: GazeTrack, params: GazeParams = GazeParams()) -> FeatureVector:
    """視線窓から 10 個の特徴量を計算する関数.

    引数:
        track (GazeTrack): 3 秒窓に切り出した視線サンプル。
        params (GazeParams): 注視検出と外れ値判定のパラメータ。

    戻り値:
        FeatureVector: GAZE_FEATURE_NAMES の順。台が空の統計量は 0。

    注意:
        速度は有効サンプル同士の隣接ペアで |Δpos|/Δt として計算し、peak_velocity はその 95 パーセンタイルです。
        fixation_time_fraction は注視時間の合計を窓長で割り、[0, 1] に収めます。
    """
    n = len(track)
    keep = valid_mask(track, params.confidence_threshold)
    outlier_rate = 1.0 - keep.sum() / n if n else 0.0

    fixations = detect_fixations(
        track, params.dispersion_threshold, params.min_duration, params.confidence_threshold
    )
    durations = np.array([f.duration for f in fixations])
    centroids = np.array([f.centroid for f in fixations]).reshape(-1, 2)
    amplitudes = np.hypot(*np.diff(centroids, axis=0).T) if len(fixations) > 1 else np.zeros(0)

    t, x, y = track.timestamps[keep], track.x[keep], track.y[keep]
    steps = np.hypot(np.diff(x), np.diff(y))
    dt = np.diff(t)
    speeds = steps / dt if steps.size else np.zeros(0)

    values = [
        outlier_rate,
        float(len(fixations)),
        float(durations.mean()) if durations.size else 0.0,
        float(np.clip(durations.sum() / params.window_seconds, 0.0, 1.0)) if durations.size else 0.0,
        float(max(len(fixations) - 1, 0)),
        float(amplitudes.mean()) if amplitudes.size else 0.0,
        float(steps.sum()),
        float(speeds.mean()) if speeds.size else 0.0,
        float(np.percentile(speeds, 95)) if speeds.size else 0.0,
        float((x.max() - x.min()) + (y.max() - y.min())) if x.size else 0.0,
    ]
    return FeatureVector(values=np.array(values), names=GAZE_FEATURE_NAMES)
