from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
import pandas as pd

from attnpipe.data_model import Condition, Session
from attnpipe.epoching import EpochWindow, epoch_session
from attnpipe.errors import DegenerateVariance, InvariantViolation
from attnpipe.signal import DEFAULT_BANDS, BandDefinition, PreprocessParams, band_power, preprocess_recording, welch_psd
from attnpipe.stats import welch_ttest

logger = logging.getLogger(__name__)

META_COLUMNS = ["participant_id", "window_id", "condition", "position_index"]
PSD_ALPHA = 0.001


def psd_feature_names(channels: Sequence[str], bands: Sequence[BandDefinition] = DEFAULT_BANDS) -> list[str]:
    """特徴量名（"Alpha/C3" 形式、電極 × 帯域、電極順）."""
    return [f"{b.name}/{ch}" for ch in channels for b in bands]


def window_band_powers(eeg: np.ndarray, fs: float, bands: Sequence[BandDefinition] = DEFAULT_BANDS) -> np.ndarray:
    """窓の各電極・各帯域のパワー（Welch PSD の台形積分）を (channels × bands) で返す."""
    psd = welch_psd(eeg, fs)
    return np.stack([band_power(psd, b) for b in bands], axis=-1)


def psd_feature_table(
    windows: Sequence[EpochWindow], channels: Sequence[str], bands: Sequence[BandDefinition] = DEFAULT_BANDS
) -> pd.DataFrame:
    """窓ごとに 1 行、電極 × 帯域の列を持つ特徴量表を作る関数.

    引数:
        windows (Sequence[EpochWindow]): 前処理済みの窓。
        channels (Sequence[str]): チャンネル名（窓の行順）。
        bands (Sequence[BandDefinition]): 帯域。

    戻り値:
        pd.DataFrame: META_COLUMNS + psd_feature_names(channels, bands)。
    """
    names = psd_feature_names(channels, bands)
    rows = []
    for w in windows:
        values = window_band_powers(w.eeg, w.fs, bands).ravel()
        rows.append(
            [w.participant_id, w.window_id, Condition.parse(w.condition).value, w.position_index, *values.tolist()]
        )
    return pd.DataFrame(rows, columns=META_COLUMNS + names)


def psd_session_table(
    session: Session,
    preprocess: PreprocessParams = PreprocessParams(),
    bands: Sequence[BandDefinition] = DEFAULT_BANDS,
) -> pd.DataFrame:
    """1 セッションを前処理・窓切り出しして特徴量表にする."""
    rec = preprocess_recording(session.recording, session.montage, session.bad_channels, preprocess)
    windows = epoch_session(session, rec).windows
    logger.info("%s: PSD features for %d windows", session.participant_id, len(windows))
    return psd_feature_table(windows, session.montage.names, bands)


def minmax_scale_per_participant(
    table: pd.DataFrame, feature_columns: Sequence[str] | None = None
) -> tuple[pd.DataFrame, pd.DataFrame]:
    """参加者ごと・特徴量ごとに (x − min)/(max − min) で [0, 1] に揃える関数.

    引数:
        table (pd.DataFrame): participant_id 列と特徴量列を持つ表。
        feature_columns (Sequence[str] | None): 対象列。None なら META_COLUMNS 以外の全列。

    戻り値:
        Tuple[pd.DataFrame, pd.DataFrame]: (スケール後の表, 参加者 × 特徴量の min/max 表)。

    注意:
        参加者内で一定値の特徴量は 0.5 にします。
    """
    cols = list(feature_columns) if feature_columns is not None else [c for c in table.columns if c not in META_COLUMNS]
    scaled = table.copy()
    grouped = table.groupby("participant_id", sort=True)[cols]
    lo = grouped.transform("min")
    hi = grouped.transform("max")
    span = hi - lo
    values = (table[cols] - lo) / span.where(span > 0)
    scaled[cols] = values.where(span > 0, 0.5).clip(0.0, 1.0)

    mins, maxs = grouped.min(), grouped.max()
    bounds = (
        pd.concat({"min": mins.stack(), "max": maxs.stack()}, axis=1)
        .rename_axis(["participant_id", "feature"])
        .reset_index()
    )
    return scaled, bounds


@dataclass(frozen=True)
class FeatureDiffReport:
    """電極 × 帯域の特徴量ごとの Real vs Virtual 検定結果."""

    rows: pd.DataFrame
    bounds: pd.DataFrame
    alpha: float = PSD_ALPHA

    @property
    def selected_features(self) -> list[str]:
        return self.rows.loc[self.rows["selected"], "feature"].tolist()

    def to_dict(self) -> dict[str, Any]:
        return {
            "alpha": self.alpha,
            "n_features": int(len(self.rows)),
            "selected": self.selected_features,
            "rows": self.rows.to_dict(orient="records"),
        }


def psd_group_analysis(
    data: pd.DataFrame | Sequence[EpochWindow],
    channels: Sequence[str] | None = None,
    bands: Sequence[BandDefinition] = DEFAULT_BANDS,
    alpha: float = PSD_ALPHA,
) -> FeatureDiffReport:
    """PSD 帯域パワーの群分析を行う関数.

    窓ごとの 64 特徴量を参加者内で min-max スケーリングし、全参加者をプールして特徴量ごとに
    Real と Virtual を Welch の t 検定で比較します。p < alpha の特徴量を selected とします。

    引数:
        data (pd.DataFrame | Sequence[EpochWindow]): psd_feature_table 形式の表、または前処理済みの窓。
        channels (Sequence[str] | None): 窓を渡す場合のチャンネル名。
        bands (Sequence[BandDefinition]): 帯域（既定 Theta/Alpha/Beta/Gamma）。
        alpha (float): 選択の有意水準（既定 0.001）。

    戻り値:
        FeatureDiffReport: 電極 × 帯域の行（既定モンタージュで 64 行）。

    例外:
        InvariantViolation: どちらかの条件の窓が無い場合。
    """
    if isinstance(data, pd.DataFrame):
        table = data
    else:
        if channels is None:
            raise InvariantViolation("channel names are required for window input", rule="psd.channels")
        table = psd_feature_table(data, channels, bands)
    cols = [c for c in table.columns if c not in META_COLUMNS]
    is_real = (table["condition"] == Condition.REAL.value).to_numpy()
    if is_real.all() or not is_real.any():
        raise InvariantViolation("PSD group analysis needs windows of both conditions", rule="psd.conditions")

    scaled, bounds = minmax_scale_per_participant(table, cols)
    rows = []
    for col in cols:
        band, electrode = col.split("/", 1)
        real = scaled.loc[is_real, col].to_numpy()
        virtual = scaled.loc[~is_real, col].to_numpy()
        try:
            res = welch_ttest(real, virtual)
            t, df, p = res.t, res.df, res.p
        except DegenerateVariance:
            t, df, p = 0.0, float(real.size + virtual.size - 2), 1.0
        rows.append(
            {
                "feature": col,
                "electrode": electrode,
                "band": band,
                "t": t,
                "df": df,
                "p": p,
                "selected": bool(p < alpha),
                "mean_real": float(real.mean()),
                "mean_virtual": float(virtual.mean()),
            }
        )
    report = FeatureDiffReport(rows=pd.DataFrame(rows), bounds=bounds, alpha=alpha)
    logger.info("PSD analysis: %d of %d features selected at p < %g", len(report.selected_features), len(cols), alpha)
    return report
