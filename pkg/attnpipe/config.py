from __future__ import annotations

import logging
import os
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from attnpipe.classify import DEFAULT_RIDGE_SCALE, DEFAULT_TAU
from attnpipe.core_foundation import read_json, write_json
from attnpipe.errors import ConfigInvalid, InvalidBand, InvalidConfig
from attnpipe.evaluation import PipelineKind, PipelineSpec
from attnpipe.gaze_features import GazeParams
from attnpipe.montage import DEFAULT_LABELS
from attnpipe.signal import DEFAULT_BANDS, BandDefinition, PreprocessParams
from attnpipe.simulate import SimConfig, validate_sim_config
from attnpipe.splits import SplitPolicy
from attnpipe.stream import DEFAULT_HOP, DEFAULT_HOST, DEFAULT_PORT

logger = logging.getLogger(__name__)

SEED_ENV = "ATTNPIPE_SEED"
CONFIG_FORMAT = "attnpipe-config/1"

_POLICY_ALIASES = {
    "trial_oblivious": SplitPolicy.TRIAL_OBLIVIOUS,
    "oblivious": SplitPolicy.TRIAL_OBLIVIOUS,
    "window": SplitPolicy.TRIAL_OBLIVIOUS,
    "trial_sensitive": SplitPolicy.TRIAL_SENSITIVE,
    "sensitive": SplitPolicy.TRIAL_SENSITIVE,
    "trial": SplitPolicy.TRIAL_SENSITIVE,
    "chronological": SplitPolicy.CHRONOLOGICAL,
    "chrono": SplitPolicy.CHRONOLOGICAL,
    "bci": SplitPolicy.CHRONOLOGICAL,
    "loso": SplitPolicy.LOSO,
    "person_independent": SplitPolicy.LOSO,
    "leave_one_subject_out": SplitPolicy.LOSO,
}

_PIPELINE_ALIASES = {
    "eeg": PipelineKind.EEG,
    "fbcsp": PipelineKind.EEG,
    "gaze": PipelineKind.GAZE,
    "eye": PipelineKind.GAZE,
    "eye_tracking": PipelineKind.GAZE,
    "fusion": PipelineKind.FUSION,
    "late_fusion": PipelineKind.FUSION,
    "multimodal": PipelineKind.FUSION,
}


def _alias_key(value: str) -> str:
    return str(value).strip().lower().replace("-", "_").replace(" ", "_")


def _items(value: str, name: str) -> list[str]:
    items = [v.strip() for v in str(value).split(",") if v.strip()]
    if not items:
        raise ConfigInvalid(f"{name} must not be empty", field=name)
    return items


def normalize_policy(value: str | SplitPolicy) -> SplitPolicy:
    """分割方式の文字列を SplitPolicy に正規化する関数.

    引数:
        value (str | SplitPolicy): "trial_sensitive", "trial-sensitive", "oblivious", "bci", "person-independent" など。

    戻り値:
        SplitPolicy: 正規化した分割方式。

    例外:
        ConfigInvalid: 未知の文字列の場合（field="policy"）。

    使用例:
        >>> normalize_policy("BCI")
        <SplitPolicy.CHRONOLOGICAL: 'chronological'>
    """
    if isinstance(value, SplitPolicy):
        return value
    try:
        return _POLICY_ALIASES[_alias_key(value)]
    except KeyError:
        raise ConfigInvalid(
            f"unknown split policy {value!r}; expected one of {[p.value for p in SplitPolicy]}", field="policy"
        ) from None


def normalize_pipeline(value: str | PipelineKind) -> PipelineKind:
    """パイプライン名（eeg / gaze / fusion とその別名）を正規化する関数.

    例外:
        ConfigInvalid: 未知の文字列の場合（field="pipeline"）。
    """
    if isinstance(value, PipelineKind):
        return value
    try:
        return _PIPELINE_ALIASES[_alias_key(value)]
    except KeyError:
        raise ConfigInvalid(
            f"unknown pipeline {value!r}; expected one of {[k.value for k in PipelineKind]}", field="pipeline"
        ) from None


def clamp_tau(tau: float) -> float:
    """融合閾値を 0.5〜1.0 の範囲に制限する関数.

    注意:
        範囲外の値は警告を出して端に寄せます。数値でない値は ConfigInvalid です。
    """
    try:
        value = float(tau)
    except (TypeError, ValueError):
        raise ConfigInvalid(f"tau must be a number, got {tau!r}", field="tau") from None
    clamped = max(0.5, min(1.0, value))
    if clamped != value:
        logger.warning("tau %.3f clamped to %.3f", value, clamped)
    return clamped


@dataclass(frozen=True)
class RunConfig:
    """1 回の実行の完全な設定（既定値 < 設定ファイル < コマンドラインの順に上書き）."""

    # パス
    dataset_dir: str | None = None
    out_dir: str = "runs"
    models_path: str | None = None
    # 評価
    pipeline: str = PipelineKind.EEG.value
    policy: str = SplitPolicy.TRIAL_SENSITIVE.value
    bands: tuple[BandDefinition, ...] = DEFAULT_BANDS
    m_pairs: int = 3
    tau: float = DEFAULT_TAU
    ridge_scale: float = DEFAULT_RIDGE_SCALE
    n_runs: int = 10
    seed: int = 0
    test_frac: float = 0.3
    alpha: float = 0.05
    alpha_strict: float = 0.001
    # 前処理・視線
    preprocess: PreprocessParams = PreprocessParams()
    gaze: GazeParams = GazeParams()
    # ストリーム
    host: str = DEFAULT_HOST
    port: int = DEFAULT_PORT
    speed_factor: float = 1.0
    hop: float = DEFAULT_HOP
    participant: str | None = None
    # 実行
    jobs: int = 1
    simulation: SimConfig = field(default_factory=SimConfig)

    def __post_init__(self) -> None:
        object.__setattr__(self, "bands", tuple(self.bands))

    @property
    def policies(self) -> tuple[SplitPolicy, ...]:
        """policy をカンマ区切りで複数指定した場合も含めて正規化した分割方式."""
        return tuple(dict.fromkeys(normalize_policy(p) for p in _items(self.policy, "policy")))

    @property
    def pipelines(self) -> tuple[PipelineKind, ...]:
        return tuple(dict.fromkeys(normalize_pipeline(p) for p in _items(self.pipeline, "pipeline")))

    @property
    def pipeline_kind(self) -> PipelineKind:
        return self.pipelines[0]

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def pipeline_spec(self, kind: PipelineKind | str | None = None) -> PipelineSpec:
        return PipelineSpec(
            kind=self.pipeline_kind if kind is None else normalize_pipeline(kind),
            bands=self.bands,
            m_pairs=self.m_pairs,
            ridge_scale=self.ridge_scale,
            tau=self.tau,
            transition=self.preprocess.transition,
            gaze=self.gaze,
        )

    def to_dict(self) -> dict[str, Any]:
        """JSON に書き出せる完全な設定を返す（config init と実行ディレクトリの config.json）."""
        out: dict[str, Any] = {"format": CONFIG_FORMAT}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "bands":
                value = [b.as_dict() for b in value]
            elif f.name in ("preprocess", "gaze"):
                value = value.as_dict()
            elif f.name == "simulation":
                value = value.to_dict()
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], base: RunConfig | None = None) -> RunConfig:
        """設定ファイルの内容を base（既定は RunConfig()）に重ねて RunConfig を作る関数.

        例外:
            ConfigInvalid: 未知の項目や型の合わない項目がある場合（field に項目名）。
        """
        base = base if base is not None else cls()
        known = {f.name for f in fields(cls)}
        updates: dict[str, Any] = {}
        for key, value in doc.items():
            if key == "format":
                if value != CONFIG_FORMAT:
                    raise ConfigInvalid(f"unsupported config format {value!r}", field="format")
                continue
            if key not in known:
                raise ConfigInvalid(f"unknown config field {key!r}", field=key)
            updates[key] = _parse_field(key, value, base)
        return replace(base, **updates)


def _parse_field(key: str, value: Any, base: RunConfig) -> Any:
    try:
        if key == "bands":
            return tuple(BandDefinition(str(b["name"]), float(b["lo"]), float(b["hi"])) for b in value)
        if key == "preprocess":
            return replace(base.preprocess, **dict(value))
        if key == "gaze":
            return replace(base.gaze, **dict(value))
        if key == "simulation":
            merged = {**base.simulation.to_dict(), **dict(value)}
            return SimConfig.from_dict(merged)
    except InvalidBand as exc:
        raise ConfigInvalid(exc.message, field="bands") from exc
    except InvalidConfig as exc:
        raise ConfigInvalid(exc.message, field="simulation") from exc
    except (TypeError, KeyError, ValueError) as exc:
        raise ConfigInvalid(f"invalid value for {key}: {exc}", field=key) from exc
    return value


def load_config(path: str | Path | None) -> RunConfig:
    """設定ファイルを読み込む（None なら既定値）."""
    if path is None:
        return RunConfig()
    doc = read_json(path)
    if not isinstance(doc, dict):
        raise ConfigInvalid(f"{path}: config must be a JSON object", field="<root>")
    return RunConfig.from_dict(doc)


def resolve_config(
    path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """既定値 → 設定ファイル → 環境変数 ATTNPIPE_SEED → コマンドライン指定の順に重ねる関数.

    引数:
        path (str | Path | None): 設定ファイル。
        overrides (Mapping[str, Any] | None): コマンドラインで明示された項目（None の値は無視）。
        environ (Mapping[str, str] | None): 環境変数（テスト用。既定は os.environ）。

    戻り値:
        RunConfig: 検証済みの設定。

    例外:
        ConfigInvalid: 項目が不正な場合。
    """
    cfg = load_config(path)
    env = os.environ if environ is None else environ
    explicit = {k: v for k, v in (overrides or {}).items() if v is not None}
    if SEED_ENV in env and "seed" not in explicit:
        try:
            seed = int(env[SEED_ENV])
            cfg = replace(cfg, seed=seed, simulation=replace(cfg.simulation, seed=seed))
        except ValueError:
            raise ConfigInvalid(f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer", field="seed") from None
    if explicit:
        cfg = RunConfig.from_dict(explicit, base=cfg)
    cfg = replace(cfg, tau=clamp_tau(cfg.tau))
    validate_run_config(cfg)
    return cfg


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def validate_run_config(cfg: RunConfig) -> None:
    """各モジュールの前提条件を作業開始前にまとめて検査する関数.

    例外:
        ConfigInvalid: 最初に見つかった不正項目（field に項目名）。
    """
    for item in _items(cfg.policy, "policy"):
        normalize_policy(item)
    for item in _items(cfg.pipeline, "pipeline"):
        normalize_pipeline(item)
    pp, gz = cfg.preprocess, cfg.gaze
    half = len(DEFAULT_LABELS) // 2
    checks: list[tuple[str, Callable[[], bool], str]] = [
        ("m_pairs", lambda: _is_int(cfg.m_pairs) and 1 <= cfg.m_pairs <= half, f"must be an integer in [1, {half}]"),
        ("tau", lambda: 0.5 <= cfg.tau <= 1.0, "must be in [0.5, 1]"),
        ("ridge_scale", lambda: cfg.ridge_scale >= 0.0, "must be >= 0"),
        ("n_runs", lambda: _is_int(cfg.n_runs) and cfg.n_runs >= 1, "must be an integer >= 1"),
        ("seed", lambda: _is_int(cfg.seed) and cfg.seed >= 0, "must be a non-negative integer"),
        ("test_frac", lambda: 0.0 < cfg.test_frac < 1.0, "must be in (0, 1)"),
        ("alpha", lambda: 0.0 < cfg.alpha < 1.0, "must be in (0, 1)"),
        ("alpha_strict", lambda: 0.0 < cfg.alpha_strict < 1.0, "must be in (0, 1)"),
        ("bands", lambda: bool(cfg.bands) and len({b.name for b in cfg.bands}) == len(cfg.bands), "need unique names"),
        ("preprocess.l_freq", lambda: 0.0 < pp.l_freq < pp.h_freq, "must satisfy 0 < l_freq < h_freq"),
        ("preprocess.transition", lambda: pp.transition > 0.0, "must be positive"),
        ("preprocess.notch_width", lambda: pp.notch is None or pp.notch_width > 0.0, "must be positive"),
        ("gaze.dispersion_threshold", lambda: gz.dispersion_threshold > 0.0, "must be positive"),
        ("gaze.min_duration", lambda: gz.min_duration > 0.0, "must be positive"),
        ("gaze.confidence_threshold", lambda: 0.0 <= gz.confidence_threshold <= 1.0, "must be in [0, 1]"),
        ("gaze.window_seconds", lambda: gz.window_seconds > 0.0, "must be positive"),
        ("port", lambda: _is_int(cfg.port) and 0 <= cfg.port <= 65535, "must be an integer in [0, 65535]"),
        ("speed_factor", lambda: cfg.speed_factor >= 0.0, "must be >= 0"),
        ("hop", lambda: cfg.hop > 0.0, "must be positive"),
        ("jobs", lambda: _is_int(cfg.jobs) and cfg.jobs != 0, "must be a non-zero integer"),
    ]
    for name, check, why in checks:
        try:
            ok = bool(check())
        except TypeError:
            ok = False
        if not ok:
            raise ConfigInvalid(f"{name} {why}", field=name)
    try:
        validate_sim_config(cfg.simulation)
    except InvalidConfig as exc:
        raise ConfigInvalid(exc.message, field=f"simulation.{exc.details.get('field', '')}") from exc


def write_config(cfg: RunConfig, path: str | Path) -> Path:
    """解決済みの設定を JSON で書き出す（実行ディレクトリの config.json / config init）."""
    return write_json(path, cfg.to_dict())
