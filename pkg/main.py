"""attnpipe のコマンドライン.

- サブコマンド: simulate / evaluate / psd / fit / serve / classify / reproduce-thresholds / config init
- 設定の優先順位: コマンドライン > 設定ファイル（--config）> 既定値。ATTNPIPE_SEED は設定ファイルの seed を上書き
- 各コマンドは <out>/<YYYYmmdd-HHMMSS>_<command>/ に config.json と結果（JSON + CSV）を書き出します
- 失敗時は error.json と標準エラーに 1 行の JSON を書き、終了コード 2（想定外の例外は 1）
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any

import pandas as pd
from joblib import Parallel, delayed

from attnpipe.config import RunConfig, resolve_config, write_config
from attnpipe.core_foundation import configure_logging, dumps_stable, prepare_run_dir, write_json
from attnpipe.data_model import Dataset, Session, load_dataset, validate_dataset
from attnpipe.epoching import extract_windows, window_counts_frame
from attnpipe.errors import AttnPipeError, ConfigInvalid, UnknownParticipant
from attnpipe.evaluation import DatasetEvaluation, PipelineKind, compare_modalities, evaluate_dataset
from attnpipe.psd_analysis import psd_group_analysis, psd_session_table
from attnpipe.report import (
    thresholds_frame,
    write_comparison,
    write_evaluation,
    write_feature_diff,
    write_overview,
    write_table,
)
from attnpipe.simulate import write_simulation
from attnpipe.stream import (
    ModelBundle,
    StreamPrediction,
    classify_stream,
    fit_bundle,
    offline_window_predictions,
    serve_session,
)

logger = logging.getLogger("attnpipe.cli")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_ERROR = 2
CONFIG_JSON = "config.json"
ERROR_JSON = "error.json"


# ---------- 引数 ----------


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="設定ファイル（JSON）")
    common.add_argument("--out", dest="out_dir", help="実行ディレクトリを作るルート（既定 runs）")
    common.add_argument("--seed", type=int, help="乱数シード（ATTNPIPE_SEED より優先）")
    common.add_argument("--jobs", type=int, help="並列数（joblib、-1 で全コア）")
    common.add_argument("-v", "--verbose", action="store_true", help="DEBUG ログを出す")
    return common


def _dataset_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", dest="dataset_dir", help="データセットのディレクトリ")


def _stream_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--host", help="アドレス（既定 127.0.0.1）")
    p.add_argument("--port", type=int, help="ポート（既定 17324）")


def build_parser() -> argparse.ArgumentParser:
    """全サブコマンドの ArgumentParser を作る関数."""
    common = _common_options()
    parser = argparse.ArgumentParser(prog="attnpipe", description="EEG と視線による注意対象（Real / Virtual）の分類")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="疑似データセットを生成する")
    p.add_argument("--dataset-out", help="データセットの出力先（既定 <実行ディレクトリ>/dataset）")
    p.add_argument("--participants", type=int, dest="n_participants")
    p.add_argument("--trials", type=int, dest="trials_per_condition", help="条件ごとの試行数")
    p.add_argument("--null", action="store_true", help="効果を仕込まない（帰無データ）")
    p.add_argument("--no-gaze", action="store_true", help="視線を記録しない")
    p.add_argument("--drift", type=float, dest="drift_per_trial", help="試行ごとのゆっくりしたドリフト")
    p.add_argument("--disjoint-effects", action="store_true", help="EEG と視線の効果を別々の参加者に仕込む")
    p.add_argument("--position4-removal", action="store_true", help="最後の窓位置で効果を消す")

    p = sub.add_parser("evaluate", parents=[common], help="分割方式ごとに分類性能を評価する")
    _dataset_options(p)
    p.add_argument("--policy", help="分割方式（カンマ区切りで複数可）")
    p.add_argument("--pipeline", help="eeg / gaze / fusion（カンマ区切りで複数可）")
    p.add_argument("--runs", type=int, dest="n_runs")
    p.add_argument("--tau", type=float)
    p.add_argument("--m-pairs", type=int, dest="m_pairs")
    p.add_argument("--test-frac", type=float, dest="test_frac")
    p.add_argument("--alpha", type=float)

    p = sub.add_parser("psd", parents=[common], help="電極 × 帯域の PSD 群分析")
    _dataset_options(p)
    p.add_argument("--alpha", type=float, dest="alpha_strict", help="選択の有意水準（既定 0.001）")

    p = sub.add_parser("fit", parents=[common], help="1 参加者の全窓でストリーム用モデルを学習する")
    _dataset_options(p)
    p.add_argument("--participant")
    p.add_argument("--pipeline")
    p.add_argument("--tau", type=float)
    p.add_argument("--models", dest="models_path", help="モデルの出力先（既定 <実行ディレクトリ>/models.json）")

    p = sub.add_parser("serve", parents=[common], help="1 参加者のセッションをソケットで再生する")
    _dataset_options(p)
    _stream_options(p)
    p.add_argument("--participant")
    p.add_argument("--speed", type=float, dest="speed_factor", help="再生速度（1 = 実時間、0 = 最速）")
    p.add_argument("--clients", type=int, default=1, help="再生するクライアント数（0 で停止まで）")

    p = sub.add_parser("classify", parents=[common], help="再生ストリームを受信しながら分類する")
    _stream_options(p)
    p.add_argument("--models", dest="models_path")
    p.add_argument("--hop", type=float)
    p.add_argument("--dataset", dest="dataset_dir", help="オフライン計算と照合する場合のデータセット")
    p.add_argument("--participant", help="照合する参加者")

    p = sub.add_parser("reproduce-thresholds", parents=[common], help="偶然より良い正解率の閾値表")
    p.add_argument("--n", type=int, nargs="+", dest="sizes", help="テスト窓数（既定 60 45 200）")
    p.add_argument("--alpha", type=float)

    p = sub.add_parser("config", help="設定ファイルの操作")
    config_sub = p.add_subparsers(dest="config_command", required=True)
    init = config_sub.add_parser("init", parents=[common], help="既定値をすべて書いた設定ファイルを出力する")
    init.add_argument("--output", "-o", help="出力先（省略時は標準出力）")
    return parser


_RUN_FIELDS = (
    "out_dir", "seed", "jobs", "dataset_dir", "policy", "pipeline", "n_runs", "tau", "m_pairs", "test_frac",
    "alpha", "alpha_strict", "participant", "models_path", "host", "port", "speed_factor", "hop",
)
_SIM_FIELDS = ("n_participants", "trials_per_condition", "drift_per_trial")


def overrides_from_args(args: argparse.Namespace) -> dict[str, Any]:
    """コマンドラインで明示された項目だけを RunConfig の項目名で返す関数."""
    out = {k: getattr(args, k) for k in _RUN_FIELDS if getattr(args, k, None) is not None}
    if args.command == "simulate":
        sim = {k: getattr(args, k) for k in _SIM_FIELDS if getattr(args, k, None) is not None}
        if args.seed is not None:
            sim["seed"] = args.seed
        if args.null:
            sim.update(alpha_attenuation_pct=0.0, gaze_effect=False)
        if args.no_gaze:
            sim["with_gaze"] = False
        if args.disjoint_effects:
            sim["disjoint_effects"] = True
        if args.position4_removal:
            sim["position4_effect_removal"] = True
        if sim:
            out["simulation"] = sim
    return out


# ---------- 共通処理 ----------


def _require_dataset(cfg: RunConfig) -> Dataset:
    if not cfg.dataset_dir:
        raise ConfigInvalid("a dataset directory is required (--dataset or dataset_dir)", field="dataset_dir")
    return load_dataset(cfg.dataset_dir)


def _select_session(dataset: Dataset, participant: str | None) -> Session:
    if participant is None:
        return dataset.sessions[0]
    for s in dataset.sessions:
        if s.participant_id == participant:
            return s
    raise UnknownParticipant(f"participant {participant!r} not in dataset", participant=participant)


def _echo(line: str) -> None:
    print(line, flush=True)


# ---------- サブコマンド ----------


def cmd_simulate(cfg: RunConfig, run_dir: Path, args: argparse.Namespace) -> dict[str, Any]:
    """疑似データセットを書き出し、窓数の表を添える."""
    out = Path(args.dataset_out) if args.dataset_out else run_dir / "dataset"
    root = write_simulation(cfg.simulation, out, jobs=cfg.jobs)
    dataset = load_dataset(root)
    counts = pd.concat([window_counts_frame(extract_windows(s)) for s in dataset.sessions], ignore_index=True)
    write_table(counts, run_dir, "window_counts")
    _echo(f"simulated {len(dataset)} participants -> {root}")
    return {"dataset_dir": str(root), "n_participants": len(dataset)}


def run_evaluations(cfg: RunConfig, dataset: Dataset) -> dict[str, DatasetEvaluation]:
    """設定の分割方式 × パイプラインをすべて評価し、"<方式>/<パイプライン>" をキーに返す."""
    results: dict[str, DatasetEvaluation] = {}
    for policy in cfg.policies:
        for kind in cfg.pipelines:
            results[f"{policy.value}/{kind.value}"] = evaluate_dataset(
                dataset,
                spec=cfg.pipeline_spec(kind),
                preprocess=cfg.preprocess,
                policy=policy,
                n_runs=cfg.n_runs,
                seed=cfg.seed,
                test_frac=cfg.test_frac,
                alpha=cfg.alpha,
                jobs=cfg.jobs,
            )
    return results


def cmd_evaluate(cfg: RunConfig, run_dir: Path, _args: argparse.Namespace) -> dict[str, Any]:
    """評価結果（方式ごとの表、概要表、モダリティ比較）を書き出す."""
    dataset = _require_dataset(cfg)
    validation = validate_dataset(dataset)
    write_table(validation.to_frame(), run_dir, "validation")
    results = run_evaluations(cfg, dataset)
    for ev in results.values():
        write_evaluation(ev, run_dir)
        _echo(
            f"{ev.policy}/{ev.pipeline}: mean {ev.mean_accuracy:.4f} ± {ev.std_accuracy:.4f}, "
            f"{ev.n_significant}/{len(ev.reports)} participants above chance"
        )
    write_overview(results, run_dir)
    for policy in cfg.policies:
        keys = {k: f"{policy.value}/{k.value}" for k in PipelineKind}
        if all(v in results for v in keys.values()):
            comparison = compare_modalities(
                *(results[keys[k]].by_participant() for k in (PipelineKind.EEG, PipelineKind.GAZE, PipelineKind.FUSION))
            )
            write_comparison(comparison, run_dir, f"{policy.value}_modality_comparison")
    return {k: {"mean": ev.mean_accuracy, "std": ev.std_accuracy} for k, ev in results.items()}


def cmd_psd(cfg: RunConfig, run_dir: Path, _args: argparse.Namespace) -> dict[str, Any]:
    """PSD 群分析の特徴量表を書き出す."""
    dataset = _require_dataset(cfg)
    tables = Parallel(n_jobs=cfg.jobs)(
        delayed(psd_session_table)(s, cfg.preprocess, cfg.bands) for s in dataset.sessions
    )
    report = psd_group_analysis(pd.concat(tables, ignore_index=True), bands=cfg.bands, alpha=cfg.alpha_strict)
    write_feature_diff(report, run_dir)
    _echo(f"{len(report.selected_features)} of {len(report.rows)} features selected at p < {cfg.alpha_strict:g}")
    for name in report.selected_features:
        _echo(f"  {name}")
    return {"selected": report.selected_features}


def cmd_fit(cfg: RunConfig, run_dir: Path, _args: argparse.Namespace) -> dict[str, Any]:
    session = _select_session(_require_dataset(cfg), cfg.participant)
    bundle = fit_bundle(session, cfg.pipeline_spec(), cfg.preprocess)
    path = bundle.save(Path(cfg.models_path) if cfg.models_path else run_dir / "models.json")
    _echo(f"models for {session.participant_id} ({cfg.pipeline_kind.value}) -> {path}")
    return {"participant_id": session.participant_id, "models_path": str(path)}


def cmd_serve(cfg: RunConfig, _run_dir: Path, args: argparse.Namespace) -> dict[str, Any]:
    session = _select_session(_require_dataset(cfg), cfg.participant)
    _echo(f"serving {session.participant_id} on {cfg.address} (speed {cfg.speed_factor:g})")
    sent = serve_session(session, cfg.address, cfg.speed_factor, n_clients=args.clients)
    return {"participant_id": session.participant_id, "frames_sent": sent}


def _prediction_frame(preds: Sequence[StreamPrediction]) -> pd.DataFrame:
    return pd.DataFrame([p.as_dict() for p in preds])


def cmd_classify(cfg: RunConfig, run_dir: Path, _args: argparse.Namespace) -> dict[str, Any]:
    """ストリームの予測を書き出す. データセットが指定されていればオフライン計算と照合する."""
    if not cfg.models_path:
        raise ConfigInvalid("a model bundle is required (--models or models_path)", field="models_path")
    bundle = ModelBundle.load(cfg.models_path)

    def show(p: StreamPrediction) -> None:
        _echo(f"trial {p.trial_id} +{p.offset:.1f}s: {p.prediction.label.value} ({p.prediction.confidence:.3f})")

    preds = classify_stream(bundle, cfg.address, cfg.hop, on_prediction=show)
    write_table(_prediction_frame(preds), run_dir, "stream_predictions")
    summary: dict[str, Any] = {"n_predictions": len(preds)}
    if cfg.dataset_dir:
        session = _select_session(load_dataset(cfg.dataset_dir), cfg.participant)
        offline = {(p.trial_id, round(p.start, 6)): p for p in offline_window_predictions(session, bundle, cfg.hop)}
        matched = [(p, offline.get((p.trial_id, round(p.start, 6)))) for p in preds]
        pairs = [(a, b) for a, b in matched if b is not None]
        agree = sum(a.prediction.label is b.prediction.label for a, b in pairs)
        summary.update(n_compared=len(pairs), n_agree=agree, agreement=agree / len(pairs) if pairs else None)
        write_table(_prediction_frame(offline.values()), run_dir, "offline_predictions")
        _echo(f"offline agreement: {agree}/{len(pairs)}")
    return summary


def cmd_reproduce_thresholds(cfg: RunConfig, run_dir: Path, args: argparse.Namespace) -> dict[str, Any]:
    frame = thresholds_frame(args.sizes, alpha=cfg.alpha)
    write_table(frame, run_dir, "thresholds")
    for row in frame.itertuples():
        _echo(f"n={row.n:>4d}  threshold={row.threshold:.4f}")
    return {"rows": frame.to_dict(orient="records")}


COMMANDS: dict[str, Callable[[RunConfig, Path, argparse.Namespace], dict[str, Any]]] = {
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "psd": cmd_psd,
    "fit": cmd_fit,
    "serve": cmd_serve,
    "classify": cmd_classify,
    "reproduce-thresholds": cmd_reproduce_thresholds,
}


def cmd_config_init(cfg: RunConfig, output: str | None) -> None:
    if output:
        write_config(cfg, output)
        _echo(f"wrote {output}")
    else:
        sys.stdout.write(dumps_stable(cfg.to_dict()))


# ---------- エントリーポイント ----------


def _report_error(record: dict[str, Any], run_dir: Path | None) -> None:
    if run_dir is not None:
        try:
            write_json(run_dir / ERROR_JSON, record)
        except AttnPipeError:
            logger.exception("could not write %s", ERROR_JSON)
    sys.stderr.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")


def main(argv: Sequence[str] | None = None) -> int:
    """コマンドラインを解釈してサブコマンドを実行する関数.

    引数:
        argv (Sequence[str] | None): 引数（None なら sys.argv[1:]）。

    戻り値:
        int: 終了コード。0 = 成功、2 = attnpipe のエラー（error.json あり）、1 = 想定外の例外。

    使用例:
        >>> main(["reproduce-thresholds"])
        0
    """
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    run_dir: Path | None = None
    try:
        cfg = resolve_config(args.config, overrides_from_args(args))
        if args.command == "config":
            cmd_config_init(cfg, args.output)
            return EXIT_OK
        run_dir = prepare_run_dir(cfg.out_dir, args.command)
        write_config(cfg, run_dir / CONFIG_JSON)
        summary = COMMANDS[args.command](cfg, run_dir, args)
        write_json(run_dir / "summary.json", summary)
        _echo(f"run directory: {run_dir}")
        return EXIT_OK
    except AttnPipeError as exc:
        logger.error("%s: %s", exc.code, exc.message)
        _report_error(exc.to_record(), run_dir)
        return EXIT_ERROR
    except Exception as exc:
        logger.exception("unexpected error")
        _report_error({"error": "Internal", "message": str(exc), "details": {"type": type(exc).__name__}}, run_dir)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
