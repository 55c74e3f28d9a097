from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from attnpipe.core_foundation import write_json
from attnpipe.data_model import CSV_FLOAT_FORMAT
from attnpipe.errors import IoFailure
from attnpipe.evaluation import CLASS_LABELS, DatasetEvaluation, ModalityComparison, PositionAnalysis
from attnpipe.psd_analysis import FeatureDiffReport
from attnpipe.stats import thresholds_table

logger = logging.getLogger(__name__)

SIGNIFICANT_MARK = "*"


# ---------- 表の作成 ----------


def overview_frame(evaluations: Mapping[str, DatasetEvaluation]) -> pd.DataFrame:
    """参加者 × 評価方式の平均正解率表を作る関数.

    引数:
        evaluations (Mapping[str, DatasetEvaluation]): 列名（例 "trial_sensitive/eeg"）→ 評価結果。

    戻り値:
        pd.DataFrame: participant_id 列と、方式ごとに平均正解率の列と有意フラグ列（"<方式>_significant"）。
        参加者は ID 順。結果の無い参加者のセルは NaN / False。
    """
    pids = sorted({r.participant_id for ev in evaluations.values() for r in ev.reports})
    frame = pd.DataFrame({"participant_id": pids})
    for name, ev in evaluations.items():
        by_pid = ev.by_participant()
        frame[name] = [by_pid[p].mean_accuracy if p in by_pid else np.nan for p in pids]
        frame[f"{name}_significant"] = [bool(by_pid[p].significant) if p in by_pid else False for p in pids]
    return frame


def overview_display(frame: pd.DataFrame, digits: int = 4) -> pd.DataFrame:
    """overview_frame を表示用の文字列表にする（有意なセルに "*"、末尾に Mean と Std の行）."""
    approaches = [c for c in frame.columns if c != "participant_id" and not c.endswith("_significant")]
    rows = []
    for _, r in frame.iterrows():
        row = {"participant_id": r["participant_id"]}
        for a in approaches:
            value = r[a]
            row[a] = "" if pd.isna(value) else f"{value:.{digits}f}{SIGNIFICANT_MARK if r[f'{a}_significant'] else ''}"
        rows.append(row)
    for label, fn in (("Mean", np.nanmean), ("Std", np.nanstd)):
        row = {"participant_id": label}
        for a in approaches:
            values = frame[a].to_numpy(dtype=float)
            row[a] = f"{fn(values):.{digits}f}" if np.isfinite(values).any() else ""
        rows.append(row)
    return pd.DataFrame(rows, columns=["participant_id", *approaches])


def participant_frame(evaluation: DatasetEvaluation) -> pd.DataFrame:
    """参加者ごとの要約（平均・標準偏差・n・閾値・有意）."""
    return pd.DataFrame([r.summary() for r in evaluation.reports])


def class_metrics_frame(evaluation: DatasetEvaluation) -> pd.DataFrame:
    """参加者 × クラスの precision / recall / F1 表（繰り返し平均）."""
    rows = []
    for rep in evaluation.reports:
        cm = rep.class_metrics()
        for c in CLASS_LABELS:
            rows.append({"participant_id": rep.participant_id, "class": c, **cm[c]})
    return pd.DataFrame(rows, columns=["participant_id", "class", "precision", "recall", "f1"])


def runs_frame(evaluation: DatasetEvaluation) -> pd.DataFrame:
    rows = []
    for rep in evaluation.reports:
        for run in rep.runs:
            m = run.metrics
            rows.append(
                {
                    "participant_id": rep.participant_id,
                    "run_index": run.run_index,
                    "seed": run.seed,
                    "accuracy": m.accuracy,
                    "n_test": m.n_test,
                    "eeg_fraction": run.eeg_fraction,
                }
            )
    return pd.DataFrame(rows)


def positions_frame(analysis: PositionAnalysis) -> pd.DataFrame:
    return pd.DataFrame(analysis.to_rows())


def feature_diff_frame(report: FeatureDiffReport) -> pd.DataFrame:
    return report.rows.copy()


def thresholds_frame(sizes: Sequence[int] | None = None, p: float = 0.5, alpha: float = 0.05) -> pd.DataFrame:
    rows = thresholds_table(sizes, p, alpha) if sizes is not None else thresholds_table(p=p, alpha=alpha)
    return pd.DataFrame(rows, columns=["n", "p", "alpha", "threshold"])


# ---------- 書き出し ----------


def write_table(frame: pd.DataFrame, out_dir: str | Path, name: str) -> tuple[Path, Path]:
    """表を <name>.csv と <name>.json の 2 形式で書き出す関数.

    引数:
        frame (pd.DataFrame): 書き出す表。
        out_dir (str | Path): 実行ディレクトリ。
        name (str): ファイル名（拡張子なし）。

    戻り値:
        Tuple[Path, Path]: (CSV のパス, JSON のパス)。

    注意:
        CSV の数値は有効数字 10 桁（%.10g）、改行は LF、UTF-8 です。JSON は行のリスト（キー順固定）です。
    """
    out = Path(out_dir)
    csv_path, json_path = out / f"{name}.csv", out / f"{name}.json"
    try:
        frame.to_csv(csv_path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {csv_path}: {exc}", path=str(csv_path)) from exc
    write_json(json_path, _records(frame))
    logger.debug("wrote %s (%d rows)", csv_path, len(frame))
    return csv_path, json_path


def _records(frame: pd.DataFrame) -> list[dict[str, Any]]:
    # NaN は JSON の null にする
    return frame.astype(object).where(frame.notna(), None).to_dict(orient="records")


def write_evaluation(evaluation: DatasetEvaluation, out_dir: str | Path, prefix: str = "") -> list[Path]:
    """1 つの評価方式の結果一式（要約・クラス別・繰り返し・窓位置・詳細 JSON）を書き出す関数."""
    out = Path(out_dir)
    stem = f"{prefix}{evaluation.policy}_{evaluation.pipeline}"
    written: list[Path] = []
    written += write_table(participant_frame(evaluation), out, f"{stem}_participants")
    written += write_table(class_metrics_frame(evaluation), out, f"{stem}_class_metrics")
    written += write_table(runs_frame(evaluation), out, f"{stem}_runs")
    if evaluation.reports:
        written += write_table(positions_frame(evaluation.positions()), out, f"{stem}_positions")
    summary = {
        "policy": evaluation.policy,
        "pipeline": evaluation.pipeline,
        "n_participants": len(evaluation.reports),
        "mean_accuracy": evaluation.mean_accuracy,
        "std_accuracy": evaluation.std_accuracy,
        "n_significant": evaluation.n_significant,
        "skipped": dict(sorted(evaluation.skipped.items())),
        "participants": [r.to_dict() for r in evaluation.reports],
    }
    written.append(write_json(out / f"{stem}_report.json", summary))
    return written


def write_overview(evaluations: Mapping[str, DatasetEvaluation], out_dir: str | Path) -> list[Path]:
    """全方式の概要表（数値版と "*" 付きの表示版）を書き出す."""
    frame = overview_frame(evaluations)
    return [*write_table(frame, out_dir, "overview"), *write_table(overview_display(frame), out_dir, "overview_display")]


def write_comparison(comparison: ModalityComparison, out_dir: str | Path, name: str = "modality_comparison") -> Path:
    return write_json(Path(out_dir) / f"{name}.json", comparison.to_dict())


def write_feature_diff(report: FeatureDiffReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    written = [*write_table(feature_diff_frame(report), out, "psd_features")]
    written += write_table(report.bounds, out, "psd_minmax_bounds")
    written.append(write_json(out / "psd_report.json", report.to_dict()))
    return written
