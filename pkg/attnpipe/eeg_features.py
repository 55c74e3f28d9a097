from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import linalg

from attnpipe.data_model import Condition
from attnpipe.epoching import EpochWindow
from attnpipe.errors import (
    DegenerateEpoch,
    DimensionMismatch,
    InvariantViolation,
    NameMismatch,
    SingleClassTraining,
    SingularComposite,
)
from attnpipe.signal import DEFAULT_BANDS, DEFAULT_TRANSITION, BandDefinition, design_fir, filter_array

logger = logging.getLogger(__name__)

CSP_RIDGE = 1e-8
LOG_FLOOR = 1e-12
# 合成共分散の固有値がこれ未満（最大値比）の方向は捨てる（平均参照・補間でランク落ちするため）
RANK_TOLERANCE = 1e-6


@dataclass(frozen=True)
class FeatureVector:
    """名前付きの特徴量ベクトル."""

    values: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float).ravel()
        names = tuple(self.names)
        if v.size != len(names):
            raise InvariantViolation(f"{v.size} values for {len(names)} names", rule="features.equal_length")
        if not np.all(np.isfinite(v)):
            raise InvariantViolation("feature values must be finite", rule="features.finite")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "names", names)

    def __len__(self) -> int:
        return len(self.names)

    def ordered(self, names: Sequence[str]) -> np.ndarray:
        """`names` の順に並べた値を返す（名前集合が違えば NameMismatch）."""
        if tuple(names) == self.names:
            return self.values
        if sorted(names) != sorted(self.names):
            raise NameMismatch(
                f"feature names differ: expected {list(names)}, got {list(self.names)}",
                expected=list(names),
                got=list(self.names),
            )
        lookup = dict(zip(self.names, self.values, strict=True))
        return np.array([lookup[n] for n in names])

    def as_dict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.values, strict=True)}


@dataclass(frozen=True)
class CspFilters:
    """1 帯域分の CSP 空間フィルタ（行ベクトル）と一般化固有値（降順）."""

    projection: np.ndarray
    eigenvalues: np.ndarray

    @property
    def n_filters(self) -> int:
        return int(self.projection.shape[0])

    @property
    def n_channels(self) -> int:
        return int(self.projection.shape[1])


@dataclass(frozen=True)
class FbcspModel:
    """フィルタバンク CSP モデル."""

    bands: tuple[BandDefinition, ...]
    per_band: tuple[CspFilters, ...]
    m_pairs: int
    feature_names: tuple[str, ...]
    fs: float = 500.0
    transition: float = DEFAULT_TRANSITION

    def __post_init__(self) -> None:
        if len(self.bands) != len(self.per_band):
            raise InvariantViolation("one CSP filter set per band required", rule="fbcsp.per_band")
        if len(self.feature_names) != sum(f.n_filters for f in self.per_band):
            raise InvariantViolation("feature name count does not match filter count", rule="fbcsp.dimension")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise InvariantViolation("feature names must be unique", rule="fbcsp.unique_names")

    @property
    def n_channels(self) -> int:
        return self.per_band[0].n_channels

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def projections(self) -> np.ndarray:
        """(n_bands, 2·m_pairs, n_channels) の射影行列."""
        return np.stack([f.projection for f in self.per_band])

    def to_dict(self) -> dict[str, Any]:
        return {
            "bands": [b.as_dict() for b in self.bands],
            "m_pairs": self.m_pairs,
            "fs": self.fs,
            "transition": self.transition,
            "feature_names": list(self.feature_names),
            "per_band": [
                {"projection": f.projection.tolist(), "eigenvalues": f.eigenvalues.tolist()} for f in self.per_band
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> FbcspModel:
        return cls(
            bands=tuple(BandDefinition(str(b["name"]), float(b["lo"]), float(b["hi"])) for b in doc["bands"]),
            per_band=tuple(
                CspFilters(np.array(f["projection"], dtype=float), np.array(f["eigenvalues"], dtype=float))
                for f in doc["per_band"]
            ),
            m_pairs=int(doc["m_pairs"]),
            feature_names=tuple(doc["feature_names"]),
            fs=float(doc.get("fs", 500.0)),
            transition=float(doc.get("transition", DEFAULT_TRANSITION)),
        )


# ---------- 共分散 ----------


def _raw_covariance(eeg: np.ndarray) -> np.ndarray:
    x = eeg - eeg.mean(axis=-1, keepdims=True)
    return x @ x.T / x.shape[-1]


def epoch_covariance(eeg: np.ndarray) -> np.ndarray:
    """窓の標本共分散をトレースで正規化したものを返す関数.

    引数:
        eeg (np.ndarray): (channels, samples)。samples > channels が必要。

    戻り値:
        np.ndarray: 対称半正定値、トレース 1。

    例外:
        DegenerateEpoch: サンプル数が足りない、または分散が 0 の場合。
    """
    x = np.asarray(eeg, dtype=float)
    if x.ndim != 2 or x.shape[1] <= x.shape[0]:
        raise DegenerateEpoch(f"epoch of shape {x.shape} needs more samples than channels", shape=list(x.shape))
    cov = _raw_covariance(x)
    tr = float(np.trace(cov))
    if not tr > 0:
        raise DegenerateEpoch("epoch has zero variance")
    cov = cov / tr
    return 0.5 * (cov + cov.T)


def band_covariances(
    eeg: np.ndarray,
    fs: float,
    bands: Sequence[BandDefinition] = DEFAULT_BANDS,
    transition: float = DEFAULT_TRANSITION,
) -> np.ndarray:
    """各帯域で帯域通過した窓の（正規化前の）共分散を (n_bands, C, C) で返す.

    特徴量 log(wᵀΣw) も CSP 学習もこの行列から計算するので、生の窓を保持し続ける必要はありません。
    """
    x = np.asarray(eeg, dtype=float)
    out = np.empty((len(bands), x.shape[0], x.shape[0]))
    for i, band in enumerate(bands):
        band.check_fs(fs)
        kernel = design_fir("bandpass", band.lo, band.hi, fs, transition)
        out[i] = _raw_covariance(filter_array(kernel, x, min_length_factor=1))
    return out


def _normalize_trace(covs: np.ndarray) -> np.ndarray:
    tr = np.trace(covs, axis1=-2, axis2=-1)
    if np.any(tr <= 0):
        raise DegenerateEpoch("training window with zero in-band variance")
    return covs / tr[..., None, None]


# ---------- CSP ----------


def _fix_sign(vectors: np.ndarray) -> np.ndarray:
    # 各列で絶対値最大の成分を正にする
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def fit_csp(c1: np.ndarray, c2: np.ndarray, m_pairs: int) -> CspFilters:
    """CSP 空間フィルタを学習する関数.

    一般化固有値問題 C1 w = λ (C1 + C2 + εI) w を解き、λ の大きい m_pairs 本と小さい m_pairs 本を残します。

    引数:
        c1 (np.ndarray): クラス 1（Real）の平均共分散。
        c2 (np.ndarray): クラス 2（Virtual）の平均共分散。
        m_pairs (int): 両端から残すフィルタ数。

    戻り値:
        CspFilters: 射影は行ベクトル、固有値は降順。Wᵀ(C1 + C2 + εI)W = I を満たします。

    例外:
        DimensionMismatch: 形状が揃わない、または 2·m_pairs > d の場合。
        SingularComposite: 合成共分散の数値ランクが 2·m_pairs 未満の場合。

    注意:
        固有ベクトルの符号は、絶対値最大の成分が正になるように固定します。
    """
    a = np.asarray(c1, dtype=float)
    b = np.asarray(c2, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape != b.shape:
        raise DimensionMismatch(f"covariances of shape {a.shape} and {b.shape}")
    d = a.shape[0]
    if m_pairs < 1 or 2 * m_pairs > d:
        raise DimensionMismatch(f"2*m_pairs={2 * m_pairs} exceeds dimension {d}", m_pairs=m_pairs, d=d)

    composite = a + b + CSP_RIDGE * np.eye(d)
    composite = 0.5 * (composite + composite.T)
    evals, evecs = linalg.eigh(composite)
    if not evals[-1] > 0:
        raise SingularComposite("composite covariance is not positive")
    keep = evals > RANK_TOLERANCE * evals[-1]
    if keep.sum() < 2 * m_pairs:
        raise SingularComposite(
            f"composite covariance has numerical rank {int(keep.sum())} < {2 * m_pairs}", rank=int(keep.sum())
        )
    whitening = evecs[:, keep] / np.sqrt(evals[keep])

    m = whitening.T @ a @ whitening
    lam, v = linalg.eigh(0.5 * (m + m.T))
    k = lam.size
    order = np.r_[np.arange(k - 1, k - 1 - m_pairs, -1), np.arange(m_pairs - 1, -1, -1)]
    filters = _fix_sign(whitening @ v[:, order])
    return CspFilters(projection=filters.T.copy(), eigenvalues=lam[order].copy())


def _labels_array(labels: Sequence[Condition | str]) -> np.ndarray:
    return np.array([Condition.parse(c) is Condition.REAL for c in labels])


def fit_fbcsp_covariances(
    covs: np.ndarray,
    labels: Sequence[Condition | str],
    bands: Sequence[BandDefinition] = DEFAULT_BANDS,
    m_pairs: int = 3,
    fs: float = 500.0,
    transition: float = DEFAULT_TRANSITION,
) -> FbcspModel:
    """事前計算した帯域別共分散 (n_windows, n_bands, C, C) から FBCSP を学習する."""
    covs = np.asarray(covs, dtype=float)
    is_real = _labels_array(labels)
    if covs.shape[0] != is_real.size:
        raise DimensionMismatch(f"{covs.shape[0]} covariance sets for {is_real.size} labels")
    if is_real.all() or not is_real.any():
        raise SingleClassTraining("FBCSP training needs windows of both classes")
    if covs.shape[1] != len(bands):
        raise DimensionMismatch(f"covariances have {covs.shape[1]} bands, model has {len(bands)}")
    normed = _normalize_trace(covs)
    per_band = []
    names: list[str] = []
    for i, band in enumerate(bands):
        c1 = normed[is_real, i].mean(axis=0)
        c2 = normed[~is_real, i].mean(axis=0)
        filters = fit_csp(c1, c2, m_pairs)
        per_band.append(filters)
        names.extend(f"{band.name}/csp{j}" for j in range(filters.n_filters))
        logger.debug("%s: CSP eigenvalues %s", band.name, np.round(filters.eigenvalues, 4).tolist())
    return FbcspModel(
        bands=tuple(bands),
        per_band=tuple(per_band),
        m_pairs=m_pairs,
        feature_names=tuple(names),
        fs=float(fs),
        transition=float(transition),
    )


def fit_fbcsp(
    train_windows: Sequence[EpochWindow],
    bands: Sequence[BandDefinition] = DEFAULT_BANDS,
    m_pairs: int = 3,
    transition: float = DEFAULT_TRANSITION,
) -> FbcspModel:
    """学習窓から FBCSP モデルを学習する関数.

    引数:
        train_windows (Sequence[EpochWindow]): 学習用の窓（両クラスを含むこと）。
        bands (Sequence[BandDefinition]): フィルタバンク。既定は Theta/Alpha/Beta/Gamma。
        m_pairs (int): 帯域ごとに両端から残すフィルタ数。

    戻り値:
        FbcspModel: 特徴量名は "Alpha/csp0" の形式。

    例外:
        SingleClassTraining: 学習窓が 1 クラスしか含まない場合。
    """
    if not train_windows:
        raise SingleClassTraining("no training windows")
    labels = [w.condition for w in train_windows]
    if len({Condition.parse(c) for c in labels}) < 2:
        raise SingleClassTraining("FBCSP training needs windows of both classes")
    fs = train_windows[0].fs
    covs = np.stack([band_covariances(w.eeg, fs, bands, transition) for w in train_windows])
    return fit_fbcsp_covariances(covs, labels, bands, m_pairs, fs=fs, transition=transition)


# ---------- 特徴量 ----------


def features_from_covariances(model: FbcspModel, covs: np.ndarray) -> np.ndarray:
    """帯域別共分散 (n, n_bands, C, C) → log 分散特徴量 (n, n_features)."""
    covs = np.asarray(covs, dtype=float)
    single = covs.ndim == 3
    if single:
        covs = covs[None]
    if covs.shape[1:] != (len(model.bands), model.n_channels, model.n_channels):
        raise DimensionMismatch(
            f"covariances of shape {covs.shape[1:]} do not match model "
            f"({len(model.bands)}, {model.n_channels}, {model.n_channels})"
        )
    w = model.projections()
    var = np.einsum("bfc,nbcd,bfd->nbf", w, covs, w)
    out = np.log(np.maximum(var, 0.0) + LOG_FLOOR).reshape(covs.shape[0], -1)
    return out[0] if single else out


def fbcsp_features(model: FbcspModel, window: EpochWindow | np.ndarray) -> FeatureVector:
    """窓の FBCSP 特徴量 log(var(wᵀx) + 1e-12) を返す関数.

    例外:
        DimensionMismatch: 窓のチャンネル数がモデルと異なる場合。
    """
    eeg = window.eeg if isinstance(window, EpochWindow) else np.asarray(window, dtype=float)
    if eeg.shape[0] != model.n_channels:
        raise DimensionMismatch(
            f"window has {eeg.shape[0]} channels, model expects {model.n_channels}",
            got=int(eeg.shape[0]),
            expected=model.n_channels,
        )
    covs = band_covariances(eeg, model.fs, model.bands, model.transition)
    return FeatureVector(values=features_from_covariances(model, covs), names=model.feature_names)
