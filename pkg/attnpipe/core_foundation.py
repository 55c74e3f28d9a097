from __future__ import annotations

import json
import logging
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any

import numpy as np

from attnpipe.errors import IoFailure, MissingFile

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

logger = logging.getLogger(__name__)


def configure_logging(verbose: bool = False) -> None:
    """ルートロガーを設定する関数（main から一度だけ呼ぶ）."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT)


def _now_jst() -> datetime:
    """現在日時（日本標準時）を取得する関数.

    戻り値:
        datetime: タイムゾーン付きの現在日時（JST）。

    注意:
        実行ディレクトリ名にだけ使います。結果ファイルの中身には時刻を書き込みません。
    """
    return datetime.now(timezone(timedelta(hours=9)))


def run_stamp() -> str:
    """実行ディレクトリ名に使うタイムスタンプ（YYYYmmdd-HHMMSS）."""
    return _now_jst().strftime("%Y%m%d-%H%M%S")


def prepare_run_dir(out_root: str | Path, command: str) -> Path:
    """コマンド 1 回分の実行ディレクトリを作成する関数.

    引数:
        out_root (str | Path): 出力のルートディレクトリ。
        command (str): サブコマンド名（ディレクトリ名の接尾辞）。

    戻り値:
        Path: `<out_root>/<YYYYmmdd-HHMMSS>_<command>`。同名が既にあれば `-2`, `-3` … を付けます。

    例外:
        IoFailure: ディレクトリを作成できない場合。
    """
    base = Path(out_root) / f"{run_stamp()}_{command}"
    candidate = base
    suffix = 2
    try:
        while candidate.exists():
            candidate = base.with_name(f"{base.name}-{suffix}")
            suffix += 1
        candidate.mkdir(parents=True)
    except OSError as exc:
        raise IoFailure(f"cannot create run directory {candidate}: {exc}", path=str(candidate)) from exc
    logger.info("run directory: %s", candidate)
    return candidate


def to_jsonable(obj: Any) -> Any:
    """numpy 型やタプルを含むオブジェクトを JSON 化可能な形に変換する."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, (set, frozenset)):
        return sorted(to_jsonable(v) for v in obj)
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps_stable(obj: Any) -> str:
    """キー順を固定した JSON 文字列（末尾改行付き）. 同じ入力なら常に同じバイト列."""
    return json.dumps(to_jsonable(obj), indent=2, sort_keys=True, ensure_ascii=False, allow_nan=True) + "\n"


def write_json(path: str | Path, obj: Any) -> Path:
    """JSON を UTF-8 / LF で書き出す関数.

    例外:
        IoFailure: 書き込みに失敗した場合。
    """
    p = Path(path)
    try:
        with p.open("w", encoding="utf-8", newline="\n") as fh:
            fh.write(dumps_stable(obj))
    except OSError as exc:
        raise IoFailure(f"cannot write {p}: {exc}", path=str(p)) from exc
    return p


def read_json(path: str | Path) -> Any:
    """JSON を読み込む（UTF-8）.

    例外:
        MissingFile: ファイルが無い場合。
        IoFailure: 読み込みや JSON の解析に失敗した場合。
    """
    p = Path(path)
    if not p.is_file():
        raise MissingFile(f"{p} not found", path=str(p))
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read {p}: {exc}", path=str(p)) from exc
