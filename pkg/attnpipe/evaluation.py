from __future__ import annotations

import logging
from collections import defaultdict
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
from joblib import Parallel, delayed
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support

from attnpipe.classify import DEFAULT_RIDGE_SCALE, DEFAULT_TAU, LdaModel, Prediction, fit_lda_matrix, fuse, predict_matrix
from attnpipe.data_model import Condition, Dataset, Session
from attnpipe.eeg_features import FbcspModel, band_covariances, features_from_covariances, fit_fbcsp_covariances
from attnpipe.epoching import N_POSITIONS, EpochWindow, epoch_session, window_id
from attnpipe.errors import DegenerateVariance, InvariantViolation, TooFewWindows
from attnpipe.gaze_features import GAZE_FEATURE_NAMES, GazeParams, gaze_feature_vector
from attnpipe.signal import DEFAULT_BANDS, DEFAULT_TRANSITION, BandDefinition, PreprocessParams, preprocess_recording
from attnpipe.splits import SPLIT_FUNCTIONS, Split, SplitPolicy, split_loso
from attnpipe.stats import TTestResult, paired_ttest, pearson_r, significance_threshold, welch_ttest

logger = logging.getLogger(__name__)

CLASS_LABELS: tuple[str, ...] = (Condition.REAL.value, Condition.VIRTUAL.value)
POSITION_ALPHAS: tuple[float, float] = (0.05, 0.001)


class PipelineKind(str, Enum):
    EEG = "eeg"
    GAZE = "gaze"
    FUSION = "fusion"


@dataclass(frozen=True)
class PipelineSpec:
    """学習・予測パイプラインの指定."""

    kind: PipelineKind = PipelineKind.EEG
    bands: tuple[BandDefinition, ...] = DEFAULT_BANDS
    m_pairs: int = 3
    ridge_scale: float = DEFAULT_RIDGE_SCALE
    tau: float = DEFAULT_TAU
    transition: float = DEFAULT_TRANSITION
    gaze: GazeParams = GazeParams()

    @property
    def needs_eeg(self) -> bool:
        return self.kind in (PipelineKind.EEG, PipelineKind.FUSION)

    @property
    def needs_gaze(self) -> bool:
        return self.kind in (PipelineKind.GAZE, PipelineKind.FUSION)


# ---------- 窓の特徴量キャッシュ ----------


@dataclass(frozen=True)
class WindowRecord:
    """生データを持たない窓の要約（帯域別共分散と視線特徴量）."""

    participant_id: str
    trial_id: int
    condition: Condition
    position_index: int
    onset: float
    fs: float = 500.0
    band_covs: np.ndarray | None = field(default=None, compare=False)
    gaze_values: np.ndarray | None = field(default=None, compare=False)

    @property
    def window_id(self) -> str:
        return window_id(self.participant_id, self.trial_id, self.position_index)


def record_window(window: EpochWindow, spec: PipelineSpec) -> WindowRecord:
    covs = band_covariances(window.eeg, window.fs, spec.bands, spec.transition) if spec.needs_eeg else None
    gaze = None
    if spec.needs_gaze and window.gaze_slice is not None:
        gaze = gaze_feature_vector(window.gaze_slice, spec.gaze).values
    return WindowRecord(
        participant_id=window.participant_id,
        trial_id=window.trial_id,
        condition=window.condition,
        position_index=window.position_index,
        onset=window.onset,
        fs=window.fs,
        band_covs=covs,
        gaze_values=gaze,
    )


def prepare_windows(windows: Sequence[EpochWindow], spec: PipelineSpec) -> list[WindowRecord]:
    return [record_window(w, spec) for w in windows]


def prepare_session(
    session: Session, spec: PipelineSpec, preprocess: PreprocessParams = PreprocessParams()
) -> list[WindowRecord]:
    """前処理 → 窓切り出し → 特徴量キャッシュ を 1 セッション分まとめて行う関数.

    引数:
        session (Session): 対象セッション。
        spec (PipelineSpec): 必要な特徴量（EEG / 視線）の判定に使います。
        preprocess (PreprocessParams): 前処理パラメータ。

    戻り値:
        List[WindowRecord]: 範囲外の試行はスキップ済み（WARNING ログ）。
    """
    rec = preprocess_recording(session.recording, session.montage, session.bad_channels, preprocess)
    records = prepare_windows(epoch_session(session, rec).windows, spec)
    logger.info("%s: %d windows prepared", session.participant_id, len(records))
    return records


# ---------- 指標 ----------


@dataclass(frozen=True)
class Metrics:
    """正解率・クラス別指標・混同行列（行 = 正解、列 = 予測、順序は Real, Virtual）."""

    accuracy: float
    precision: dict[str, float]
    recall: dict[str, float]
    f1: dict[str, float]
    support: dict[str, int]
    n_test: int
    confusion: tuple[tuple[int, int], tuple[int, int]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "support": self.support,
            "n_test": self.n_test,
            "confusion": [list(r) for r in self.confusion],
        }


def compute_metrics(y_true: Sequence[Condition | str], y_pred: Sequence[Condition | str]) -> Metrics:
    """正解ラベルと予測ラベルから Metrics を計算する."""
    yt = [Condition.parse(c).value for c in y_true]
    yp = [Condition.parse(c).value for c in y_pred]
    if not yt:
        raise TooFewWindows("no test windows to score")
    p, r, f, s = precision_recall_fscore_support(yt, yp, labels=list(CLASS_LABELS), zero_division=0)
    cm = confusion_matrix(yt, yp, labels=list(CLASS_LABELS))
    return Metrics(
        accuracy=float(np.trace(cm)) / len(yt),
        precision={c: float(v) for c, v in zip(CLASS_LABELS, p, strict=True)},
        recall={c: float(v) for c, v in zip(CLASS_LABELS, r, strict=True)},
        f1={c: float(v) for c, v in zip(CLASS_LABELS, f, strict=True)},
        support={c: int(v) for c, v in zip(CLASS_LABELS, s, strict=True)},
        n_test=len(yt),
        confusion=((int(cm[0, 0]), int(cm[0, 1])), (int(cm[1, 0]), int(cm[1, 1]))),
    )


# ---------- 学習・予測 ----------


@dataclass(frozen=True)
class FittedModels:
    fbcsp: FbcspModel | None = None
    eeg_lda: LdaModel | None = None
    gaze_lda: LdaModel | None = None


@dataclass(frozen=True)
class WindowPrediction:
    window_id: str
    participant_id: str
    position_index: int
    true_label: Condition
    label: Condition
    confidence: float
    decided_by: str
    run_index: int = 0

    @property
    def correct(self) -> bool:
        return self.true_label is self.label


@dataclass(frozen=True)
class RunOutcome:
    run_index: int
    seed: int | None
    metrics: Metrics
    predictions: tuple[WindowPrediction, ...]

    @property
    def eeg_fraction(self) -> float:
        """EEG 側が採用された予測の割合."""
        if not self.predictions:
            return 0.0
        return float(np.mean([p.decided_by == "eeg" for p in self.predictions]))


def _gaze_matrix(records: Sequence[WindowRecord]) -> np.ndarray:
    missing = [r.window_id for r in records if r.gaze_values is None]
    if missing:
        raise InvariantViolation(
            f"{len(missing)} windows have no gaze features (first: {missing[0]})", rule="pipeline.gaze_missing"
        )
    return np.stack([r.gaze_values for r in records])


def _cov_stack(records: Sequence[WindowRecord]) -> np.ndarray:
    missing = [r.window_id for r in records if r.band_covs is None]
    if missing:
        raise InvariantViolation(f"{len(missing)} windows have no EEG covariances", rule="pipeline.eeg_missing")
    return np.stack([r.band_covs for r in records])


def fit_models(train: Sequence[WindowRecord], spec: PipelineSpec) -> FittedModels:
    """学習窓だけからモデルを学習する（テスト窓はこの関数に渡らない）."""
    fs = train[0].fs if train else 500.0
    labels = [r.condition for r in train]
    fbcsp = eeg_lda = gaze_lda = None
    if spec.needs_eeg:
        covs = _cov_stack(train)
        fbcsp = fit_fbcsp_covariances(covs, labels, spec.bands, spec.m_pairs, fs=fs, transition=spec.transition)
        eeg_lda = fit_lda_matrix(features_from_covariances(fbcsp, covs), labels, fbcsp.feature_names, spec.ridge_scale)
    if spec.needs_gaze:
        gaze_lda = fit_lda_matrix(_gaze_matrix(train), labels, GAZE_FEATURE_NAMES, spec.ridge_scale)
    return FittedModels(fbcsp=fbcsp, eeg_lda=eeg_lda, gaze_lda=gaze_lda)


def apply_models(models: FittedModels, records: Sequence[WindowRecord], spec: PipelineSpec) -> list[Prediction]:
    """窓の特徴量にモデルを適用する（ラベルは参照しない）."""
    eeg_preds = gaze_preds = None
    if spec.needs_eeg:
        eeg_preds = predict_matrix(models.eeg_lda, features_from_covariances(models.fbcsp, _cov_stack(records)))
    if spec.needs_gaze:
        gaze_preds = predict_matrix(models.gaze_lda, _gaze_matrix(records))
    if spec.kind is PipelineKind.EEG:
        return [_decided(p, "eeg") for p in eeg_preds]
    if spec.kind is PipelineKind.GAZE:
        return [_decided(p, "gaze") for p in gaze_preds]
    return [fuse(e, g, spec.tau) for e, g in zip(eeg_preds, gaze_preds, strict=True)]


def _decided(pred: Prediction, modality: str) -> Prediction:
    return Prediction(pred.label, pred.confidence, pred.score, decided_by=modality)


def run_pipeline_detailed(
    windows: Sequence[WindowRecord], split: Split, spec: PipelineSpec, run_index: int = 0
) -> RunOutcome:
    """分割に従って学習・予測し、予測の詳細付きで結果を返す関数.

    引数:
        windows (Sequence[WindowRecord]): 分割対象の窓。
        split (Split): 学習／テストの窓 ID。
        spec (PipelineSpec): EEG / 視線 / 融合。
        run_index (int): 繰り返し番号（予測レコードに残します）。

    戻り値:
        RunOutcome: Metrics とテスト窓ごとの予測。

    例外:
        InvariantViolation: 分割が窓に無い ID を含む場合。
    """
    by_id = {w.window_id: w for w in windows}
    unknown = (split.train_ids | split.test_ids) - by_id.keys()
    if unknown:
        raise InvariantViolation(f"split references {len(unknown)} unknown windows", rule="split.subset")
    train = [by_id[i] for i in sorted(split.train_ids)]
    test = [by_id[i] for i in sorted(split.test_ids)]
    models = fit_models(train, spec)
    preds = apply_models(models, test, spec)
    # ラベルはここで初めて参照する
    truth = [w.condition for w in test]
    metrics = compute_metrics(truth, [p.label for p in preds])
    records = tuple(
        WindowPrediction(
            window_id=w.window_id,
            participant_id=w.participant_id,
            position_index=w.position_index,
            true_label=Condition.parse(w.condition),
            label=p.label,
            confidence=p.confidence,
            decided_by=p.decided_by or spec.kind.value,
            run_index=run_index,
        )
        for w, p in zip(test, preds, strict=True)
    )
    return RunOutcome(run_index=run_index, seed=split.seed, metrics=metrics, predictions=records)


def run_pipeline(windows: Sequence[WindowRecord], split: Split, spec: PipelineSpec) -> Metrics:
    return run_pipeline_detailed(windows, split, spec).metrics


# ---------- 窓位置 ----------


@dataclass(frozen=True)
class PositionAnalysis:
    """窓位置 0..4 ごとの正解率と位置間の Welch t 検定."""

    accuracy: tuple[float | None, ...]
    stderr: tuple[float | None, ...]
    counts: tuple[int, ...]
    p_values: np.ndarray
    flags: dict[float, np.ndarray]

    def flagged_against(self, position: int, alpha: float = 0.05) -> list[int]:
        return [j for j in range(N_POSITIONS) if j != position and bool(self.flags[alpha][position, j])]

    def to_rows(self) -> list[dict[str, Any]]:
        rows = []
        for i in range(N_POSITIONS):
            row: dict[str, Any] = {
                "position_index": i,
                "accuracy": self.accuracy[i],
                "stderr": self.stderr[i],
                "count": self.counts[i],
            }
            for j in range(N_POSITIONS):
                row[f"p_vs_{j}"] = None if i == j else float(self.p_values[i, j])
            rows.append(row)
        return rows


def _pair_p(a: np.ndarray, b: np.ndarray) -> float:
    if a.size < 2 or b.size < 2:
        return 1.0
    try:
        return welch_ttest(a, b).p
    except DegenerateVariance:
        return 1.0 if np.isclose(a.mean(), b.mean(), rtol=0, atol=1e-12) else 0.0


def position_accuracy_analysis(predictions: Sequence[WindowPrediction]) -> PositionAnalysis:
    """窓位置ごとの正解率と、位置間の差の検定を行う関数.

    引数:
        predictions (Sequence[WindowPrediction]): 全繰り返し分の予測（position_index 付き）。

    戻り値:
        PositionAnalysis: 正解率は位置ごとの正解数 / 予測数。標準誤差と検定は (参加者, 繰り返し) 単位の
        正解率で計算し、グループが 2 未満なら予測 1 件ずつの 0/1 で計算します。α = 0.05 と 0.001 のフラグ付き。
    """
    correct = defaultdict(list)
    grouped: dict[tuple[str, int], dict[int, list[bool]]] = defaultdict(lambda: defaultdict(list))
    for p in predictions:
        correct[p.position_index].append(p.correct)
        grouped[(p.participant_id, p.run_index)][p.position_index].append(p.correct)

    samples: list[np.ndarray] = []
    for pos in range(N_POSITIONS):
        if len(grouped) >= 2:
            samples.append(np.array([np.mean(g[pos]) for g in grouped.values() if g[pos]]))
        else:
            samples.append(np.array(correct[pos], dtype=float))

    accuracy, stderr, counts = [], [], []
    for pos in range(N_POSITIONS):
        hits = np.array(correct[pos], dtype=float)
        counts.append(int(hits.size))
        accuracy.append(float(hits.mean()) if hits.size else None)
        s = samples[pos]
        stderr.append(float(s.std(ddof=1) / np.sqrt(s.size)) if s.size >= 2 else None)

    p_values = np.ones((N_POSITIONS, N_POSITIONS))
    for i in range(N_POSITIONS):
        for j in range(i + 1, N_POSITIONS):
            p_values[i, j] = p_values[j, i] = _pair_p(samples[i], samples[j])
    flags = {alpha: (p_values < alpha) & ~np.eye(N_POSITIONS, dtype=bool) for alpha in POSITION_ALPHAS}
    return PositionAnalysis(tuple(accuracy), tuple(stderr), tuple(counts), p_values, flags)


# ---------- 繰り返し評価 ----------


@dataclass(frozen=True)
class EvalReport:
    """1 参加者（LOSO なら 1 fold）分の繰り返し評価結果."""

    participant_id: str
    policy: str
    pipeline: str
    runs: tuple[RunOutcome, ...]
    alpha: float = 0.05

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([r.metrics.accuracy for r in self.runs])

    @property
    def mean_accuracy(self) -> float:
        return float(self.accuracies.mean())

    @property
    def std_accuracy(self) -> float:
        return float(self.accuracies.std())

    @property
    def n_test(self) -> int:
        return int(round(float(np.mean([r.metrics.n_test for r in self.runs]))))

    @property
    def threshold(self) -> float:
        return significance_threshold(self.n_test, alpha=self.alpha)

    @property
    def significant(self) -> bool:
        """参加者自身のテスト数 n に対する閾値を超えたか."""
        return self.mean_accuracy > self.threshold

    @property
    def eeg_fraction(self) -> tuple[float, float] | None:
        if self.pipeline != PipelineKind.FUSION.value:
            return None
        fr = np.array([r.eeg_fraction for r in self.runs])
        return float(fr.mean()), float(fr.std())

    @property
    def predictions(self) -> list[WindowPrediction]:
        return [p for r in self.runs for p in r.predictions]

    def positions(self) -> PositionAnalysis:
        return position_accuracy_analysis(self.predictions)

    def class_metrics(self) -> dict[str, dict[str, float]]:
        """クラス別 precision / recall / F1 の繰り返し平均."""
        out: dict[str, dict[str, float]] = {}
        for c in CLASS_LABELS:
            out[c] = {
                "precision": float(np.mean([r.metrics.precision[c] for r in self.runs])),
                "recall": float(np.mean([r.metrics.recall[c] for r in self.runs])),
                "f1": float(np.mean([r.metrics.f1[c] for r in self.runs])),
            }
        return out

    def summary(self) -> dict[str, Any]:
        row: dict[str, Any] = {
            "participant_id": self.participant_id,
            "policy": self.policy,
            "pipeline": self.pipeline,
            "n_runs": len(self.runs),
            "n_test": self.n_test,
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "min_accuracy": float(self.accuracies.min()),
            "max_accuracy": float(self.accuracies.max()),
            "threshold": self.threshold,
            "significant": self.significant,
        }
        fr = self.eeg_fraction
        if fr is not None:
            row["eeg_fraction_mean"], row["eeg_fraction_std"] = fr
        return row

    def to_dict(self) -> dict[str, Any]:
        return {
            **self.summary(),
            "class_metrics": self.class_metrics(),
            "runs": [
                {"run_index": r.run_index, "seed": r.seed, **r.metrics.to_dict(), "eeg_fraction": r.eeg_fraction}
                for r in self.runs
            ],
            "positions": self.positions().to_rows(),
        }


def repeat_eval(
    windows: Sequence[WindowRecord],
    split_fn: Callable[[Sequence[WindowRecord], int], Split],
    n_runs: int = 10,
    base_seed: int = 0,
    spec: PipelineSpec = PipelineSpec(),
    participant_id: str = "ALL",
    policy: str = SplitPolicy.TRIAL_SENSITIVE.value,
    alpha: float = 0.05,
) -> EvalReport:
    """シード base_seed + i で n_runs 回 分割・学習・評価を繰り返す関数.

    引数:
        windows (Sequence[WindowRecord]): 評価対象の窓。
        split_fn (Callable): (windows, seed) → Split。
        n_runs (int): 繰り返し回数（1 以上）。
        base_seed (int): 最初の繰り返しのシード。

    戻り値:
        EvalReport: 繰り返しごとの Metrics と予測を保持します。
    """
    if n_runs < 1:
        raise InvariantViolation(f"n_runs must be >= 1, got {n_runs}", rule="eval.n_runs")
    runs = []
    for i in range(n_runs):
        seed = base_seed + i
        runs.append(run_pipeline_detailed(windows, split_fn(windows, seed), spec, run_index=i))
    report = EvalReport(participant_id, policy, spec.kind.value, tuple(runs), alpha)
    logger.info(
        "%s %s/%s: %.3f ± %.3f (n=%d)",
        participant_id, policy, spec.kind.value, report.mean_accuracy, report.std_accuracy, report.n_test,
    )
    return report


def participant_seed(master_seed: int, participant_index: int) -> int:
    """(マスターシード, 参加者番号) から参加者ごとの基準シードを導く."""
    return int(np.random.SeedSequence([int(master_seed), int(participant_index)]).generate_state(1)[0])


# ---------- データセット評価 ----------


@dataclass(frozen=True)
class DatasetEvaluation:
    policy: str
    pipeline: str
    reports: tuple[EvalReport, ...]
    skipped: dict[str, str] = field(default_factory=dict)

    @property
    def participant_means(self) -> np.ndarray:
        return np.array([r.mean_accuracy for r in self.reports])

    @property
    def mean_accuracy(self) -> float:
        return float(self.participant_means.mean()) if self.reports else float("nan")

    @property
    def std_accuracy(self) -> float:
        return float(self.participant_means.std()) if self.reports else float("nan")

    @property
    def n_significant(self) -> int:
        return sum(r.significant for r in self.reports)

    def by_participant(self) -> dict[str, EvalReport]:
        return {r.participant_id: r for r in self.reports}

    def positions(self) -> PositionAnalysis:
        return position_accuracy_analysis([p for r in self.reports for p in r.predictions])


def _evaluate_participant(
    session: Session,
    index: int,
    spec: PipelineSpec,
    preprocess: PreprocessParams,
    policy: SplitPolicy,
    n_runs: int,
    seed: int,
    test_frac: float,
    alpha: float,
) -> EvalReport | None:
    if spec.needs_gaze and session.gaze is None:
        logger.warning("%s: no gaze recording, skipped for %s pipeline", session.participant_id, spec.kind.value)
        return None
    records = prepare_session(session, spec, preprocess)
    split = SPLIT_FUNCTIONS[policy]

    def split_fn(ws, s):
        return split(ws, test_frac=test_frac, seed=s)

    return repeat_eval(
        records, split_fn, n_runs, participant_seed(seed, index), spec, session.participant_id, policy.value, alpha
    )


def _loso_fold(records: Sequence[WindowRecord], held_out: str, spec: PipelineSpec, alpha: float) -> EvalReport:
    outcome = run_pipeline_detailed(records, split_loso(records, held_out), spec)
    report = EvalReport(held_out, SplitPolicy.LOSO.value, spec.kind.value, (outcome,), alpha)
    logger.info("LOSO %s: %.3f (n=%d)", held_out, report.mean_accuracy, report.n_test)
    return report


def evaluate_dataset(
    dataset: Dataset,
    *,
    spec: PipelineSpec = PipelineSpec(),
    preprocess: PreprocessParams = PreprocessParams(),
    policy: SplitPolicy = SplitPolicy.TRIAL_SENSITIVE,
    n_runs: int = 10,
    seed: int = 0,
    test_frac: float = 0.3,
    alpha: float = 0.05,
    jobs: int = 1,
) -> DatasetEvaluation:
    """データセット全体を指定の分割方式で評価する関数.

    引数:
        dataset (Dataset): 評価対象。
        spec (PipelineSpec): パイプライン。視線を使う場合、視線の無い参加者はスキップします。
        policy (SplitPolicy): 分割方式。LOSO は参加者ごとに 1 fold、それ以外は参加者ごとに n_runs 回。
        jobs (int): joblib の並列数。結果は参加者順に並ぶので jobs によらず同一です。

    戻り値:
        DatasetEvaluation: 参加者ごとの EvalReport。
    """
    sessions = list(dataset.sessions)
    skipped: dict[str, str] = {}
    if policy is SplitPolicy.LOSO:
        if spec.needs_gaze:
            for s in sessions:
                if s.gaze is None:
                    skipped[s.participant_id] = "no gaze recording"
                    logger.warning("%s: no gaze recording, excluded from LOSO", s.participant_id)
            sessions = [s for s in sessions if s.gaze is not None]
        prepared = Parallel(n_jobs=jobs)(delayed(prepare_session)(s, spec, preprocess) for s in sessions)
        records = [r for recs in prepared for r in recs]
        reports = Parallel(n_jobs=jobs)(
            delayed(_loso_fold)(records, s.participant_id, spec, alpha) for s in sessions
        )
    else:
        results = Parallel(n_jobs=jobs)(
            delayed(_evaluate_participant)(s, i, spec, preprocess, policy, n_runs, seed, test_frac, alpha)
            for i, s in enumerate(sessions)
        )
        reports = []
        for s, rep in zip(sessions, results, strict=True):
            if rep is None:
                skipped[s.participant_id] = "no gaze recording"
            else:
                reports.append(rep)
    return DatasetEvaluation(policy.value, spec.kind.value, tuple(reports), skipped)


# ---------- モダリティ比較 ----------


@dataclass(frozen=True)
class ModalityComparison:
    """EEG・視線・融合の参加者別平均正解率の比較."""

    participants: tuple[str, ...]
    eeg: np.ndarray
    gaze: np.ndarray
    fusion: np.ndarray
    tests: dict[str, TTestResult | None]
    pearson_eeg_gaze: float | None
    eeg_fraction_mean: float
    eeg_fraction_std: float

    @property
    def n_eeg_better(self) -> int:
        return int(np.sum(self.eeg > self.gaze))

    @property
    def n_gaze_better(self) -> int:
        return int(np.sum(self.gaze > self.eeg))

    def to_dict(self) -> dict[str, Any]:
        return {
            "participants": list(self.participants),
            "mean": {
                "eeg": float(self.eeg.mean()) if self.eeg.size else None,
                "gaze": float(self.gaze.mean()) if self.gaze.size else None,
                "fusion": float(self.fusion.mean()) if self.fusion.size else None,
            },
            "tests": {k: (v.as_dict() if v is not None else None) for k, v in self.tests.items()},
            "pearson_eeg_gaze": self.pearson_eeg_gaze,
            "n_eeg_better": self.n_eeg_better,
            "n_gaze_better": self.n_gaze_better,
            "eeg_fraction_mean": self.eeg_fraction_mean,
            "eeg_fraction_std": self.eeg_fraction_std,
        }


def _safe(fn, *args):
    try:
        return fn(*args)
    except (DegenerateVariance, InvariantViolation) as exc:
        logger.warning("modality comparison: %s", exc)
        return None


def compare_modalities(
    eeg: Mapping[str, EvalReport], gaze: Mapping[str, EvalReport], fusion: Mapping[str, EvalReport]
) -> ModalityComparison:
    """3 パイプラインすべての結果がある参加者について、対応のある t 検定と相関を計算する関数.

    戻り値:
        ModalityComparison: 検定は "eeg_vs_gaze", "fusion_vs_eeg", "fusion_vs_gaze"。分散が 0 の組は None。
    """
    pids = tuple(sorted(set(eeg) & set(gaze) & set(fusion)))
    e = np.array([eeg[p].mean_accuracy for p in pids])
    g = np.array([gaze[p].mean_accuracy for p in pids])
    f = np.array([fusion[p].mean_accuracy for p in pids])
    fractions = np.array([fusion[p].eeg_fraction[0] for p in pids if fusion[p].eeg_fraction is not None])
    return ModalityComparison(
        participants=pids,
        eeg=e,
        gaze=g,
        fusion=f,
        tests={
            "eeg_vs_gaze": _safe(paired_ttest, e, g),
            "fusion_vs_eeg": _safe(paired_ttest, f, e),
            "fusion_vs_gaze": _safe(paired_ttest, f, g),
        },
        pearson_eeg_gaze=_safe(pearson_r, e, g),
        eeg_fraction_mean=float(fractions.mean()) if fractions.size else 0.0,
        eeg_fraction_std=float(fractions.std()) if fractions.size else 0.0,
    )
