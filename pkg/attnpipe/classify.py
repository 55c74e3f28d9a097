from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, replace
from typing import Any

import numpy as np
from scipy import linalg
from scipy.special import expit

from attnpipe.data_model import Condition
from attnpipe.eeg_features import FeatureVector
from attnpipe.errors import ConfigInvalid, InvariantViolation, NameMismatch, SingleClassTraining

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.7
DEFAULT_RIDGE_SCALE = 1e-6


@dataclass(frozen=True)
class LdaModel:
    """線形判別器. 決定値が負なら Real、正なら Virtual."""

    weights: np.ndarray
    bias: float
    feature_names: tuple[str, ...]

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float).ravel()
        if not self.feature_names:
            raise InvariantViolation("LDA model needs feature names", rule="lda.names")
        if w.size != len(self.feature_names):
            raise InvariantViolation("weight count does not match feature names", rule="lda.dimension")
        if not (np.all(np.isfinite(w)) and np.isfinite(self.bias)):
            raise InvariantViolation("LDA weights must be finite", rule="lda.finite")
        w = w.copy()
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    def decision(self, x: np.ndarray) -> np.ndarray:
        """(n, d) または (d,) の特徴量に対する決定値 wᵀx + b."""
        return np.asarray(x, dtype=float) @ self.weights + self.bias

    def to_dict(self) -> dict[str, Any]:
        return {"weights": self.weights.tolist(), "bias": self.bias, "feature_names": list(self.feature_names)}

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> LdaModel:
        return cls(
            weights=np.array(doc["weights"], dtype=float),
            bias=float(doc["bias"]),
            feature_names=tuple(doc["feature_names"]),
        )


@dataclass(frozen=True)
class Prediction:
    """1 窓分の予測. confidence = σ(|score|) ∈ [0.5, 1]."""

    label: Condition
    confidence: float
    score: float
    decided_by: str | None = None


def _matrix(features: Sequence[FeatureVector]) -> tuple[np.ndarray, tuple[str, ...]]:
    names = features[0].names
    return np.stack([f.ordered(names) for f in features]), names


def fit_lda_matrix(
    x: np.ndarray,
    labels: Sequence[Condition | str],
    feature_names: Sequence[str],
    ridge_scale: float = DEFAULT_RIDGE_SCALE,
) -> LdaModel:
    """特徴量行列 (n, d) から LDA を学習する関数.

    引数:
        x (np.ndarray): 学習特徴量。
        labels (Sequence[Condition | str]): 各行のクラス。
        feature_names (Sequence[str]): 列名。
        ridge_scale (float): プール共分散 S に λ = ridge_scale·trace(S)/d を加えます。

    戻り値:
        LdaModel: w = S⁻¹(μ_Virtual − μ_Real)、クラス平均の中点で決定値が 0。

    例外:
        SingleClassTraining: 1 クラスしか無い場合。

    注意:
        S が特異なら最小二乗解にフォールバックし、WARNING を出します。事前確率は等しいものとします。
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    is_virtual = np.array([Condition.parse(c) is Condition.VIRTUAL for c in labels])
    if is_virtual.size != x.shape[0]:
        raise InvariantViolation(f"{x.shape[0]} rows for {is_virtual.size} labels", rule="lda.labels")
    if is_virtual.all() or not is_virtual.any():
        raise SingleClassTraining("LDA training needs both classes")

    mu_real = x[~is_virtual].mean(axis=0)
    mu_virtual = x[is_virtual].mean(axis=0)
    centered = np.where(is_virtual[:, None], x - mu_virtual, x - mu_real)
    d = x.shape[1]
    s = centered.T @ centered / max(x.shape[0] - 2, 1)
    ridge = ridge_scale * float(np.trace(s)) / d
    s = s + ridge * np.eye(d)
    diff = mu_virtual - mu_real
    try:
        w = linalg.solve(s, diff, assume_a="sym")
    except (linalg.LinAlgError, ValueError):
        logger.warning("pooled covariance is singular, using least-squares solution")
        w = np.linalg.lstsq(s, diff, rcond=None)[0]
    if not np.all(np.isfinite(w)):
        logger.warning("non-finite LDA weights, using least-squares solution")
        w = np.linalg.lstsq(s, diff, rcond=None)[0]
    bias = -float(w @ (mu_real + mu_virtual)) / 2.0
    return LdaModel(weights=w, bias=bias, feature_names=tuple(feature_names))


def fit_lda(
    features: Sequence[FeatureVector],
    labels: Sequence[Condition | str],
    ridge_scale: float = DEFAULT_RIDGE_SCALE,
) -> LdaModel:
    """FeatureVector のリストから LDA を学習する（名前が揃っていなければ NameMismatch）."""
    if not features:
        raise SingleClassTraining("no training features")
    x, names = _matrix(features)
    return fit_lda_matrix(x, labels, names, ridge_scale)


def _from_score(score: float) -> Prediction:
    label = Condition.VIRTUAL if score > 0 else Condition.REAL
    return Prediction(label=label, confidence=float(expit(abs(score))), score=float(score))


def predict(model: LdaModel, f: FeatureVector) -> Prediction:
    """決定値の符号でラベルを決める（0 は Real）. 特徴量は名前で並べ替えて適用します."""
    if sorted(f.names) != sorted(model.feature_names):
        raise NameMismatch(
            f"feature names {list(f.names)} do not match model {list(model.feature_names)}",
            expected=list(model.feature_names),
        )
    return _from_score(float(model.decision(f.ordered(model.feature_names))))


def predict_matrix(model: LdaModel, x: np.ndarray) -> list[Prediction]:
    """モデルの列順に並んだ特徴量行列に対する予測."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != len(model.feature_names):
        raise NameMismatch(f"{x.shape[-1]} feature columns for {len(model.feature_names)} model features")
    return [_from_score(float(s)) for s in np.atleast_1d(model.decision(x))]


def fuse(eeg_pred: Prediction, gaze_pred: Prediction, tau: float = DEFAULT_TAU) -> Prediction:
    """EEG の信頼度が tau を超えれば EEG、それ以外は視線の予測を採用する関数.

    引数:
        eeg_pred (Prediction): EEG モデルの予測。
        gaze_pred (Prediction): 視線モデルの予測。
        tau (float): 閾値 [0.5, 1]。比較は厳密な「>」なので confidence = 0.5 は常に視線側。

    戻り値:
        Prediction: 採用した予測（decided_by に "eeg" / "gaze"）。
    """
    if not (0.5 <= tau <= 1.0):
        raise ConfigInvalid(f"tau must be in [0.5, 1], got {tau}", field="tau")
    if eeg_pred.confidence > tau:
        return replace(eeg_pred, decided_by="eeg")
    return replace(gaze_pred, decided_by="gaze")
