from __future__ import annotations

import heapq
import json
import logging
import time
from collections import deque
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import gevent
import gevent.event
import gevent.server
import numpy as np
from gevent import socket

from attnpipe.classify import LdaModel, Prediction, fuse, predict
from attnpipe.core_foundation import read_json, write_json
from attnpipe.data_model import GazeTrack, Session
from attnpipe.eeg_features import FbcspModel, fbcsp_features
from attnpipe.epoching import WINDOW_OFFSETS, WINDOW_SECONDS
from attnpipe.errors import BindFailure, ClientDisconnect, ConnectionLost, ModelMismatch
from attnpipe.evaluation import PipelineSpec, fit_models, prepare_session
from attnpipe.gaze_features import GazeParams, gaze_feature_vector
from attnpipe.montage import ElectrodeMontage
from attnpipe.signal import PreprocessParams, preprocess_margin, preprocess_recording, preprocess_segment

logger = logging.getLogger(__name__)

DEFAULT_HOST = "127.0.0.1"
DEFAULT_PORT = 17324
DEFAULT_HOP = 1.0
BUNDLE_FORMAT = "attnpipe-models/1"
# 1 回の送信にまとめる最大フレーム数
SEND_BATCH = 2000
_KIND_RANK = {"event": 0, "eeg": 1, "gaze": 2}


@dataclass(frozen=True)
class StreamFrame:
    """ワイヤ上の 1 フレーム（1 行の JSON: {kind, t, v}）."""

    kind: str
    t: float
    v: Any

    def to_line(self) -> bytes:
        return (json.dumps({"kind": self.kind, "t": self.t, "v": self.v}, separators=(",", ":")) + "\n").encode()

    @classmethod
    def from_line(cls, line: bytes | str) -> StreamFrame:
        try:
            doc = json.loads(line)
            kind, t, v = doc["kind"], float(doc["t"]), doc["v"]
        except (ValueError, KeyError, TypeError) as exc:
            raise ConnectionLost(f"malformed frame: {line[:80]!r}") from exc
        if kind not in _KIND_RANK:
            raise ConnectionLost(f"unknown frame kind {kind!r}")
        return cls(kind=kind, t=t, v=v)


def parse_address(address: str | tuple[str, int]) -> tuple[str, int]:
    """"host:port" または (host, port) を検証して返す.

    例外:
        BindFailure: 形式が不正、またはポートが範囲外の場合。
    """
    if isinstance(address, tuple):
        host, port = address
    else:
        host, sep, port = str(address).rpartition(":")
        if not sep:
            raise BindFailure(f"address {address!r} is not host:port", address=str(address))
    try:
        port = int(port)
    except (TypeError, ValueError) as exc:
        raise BindFailure(f"invalid port in {address!r}", address=str(address)) from exc
    if not host or not (0 <= port <= 65535):
        raise BindFailure(f"invalid address {address!r}", address=str(address))
    return str(host), port


# ---------- 送信側 ----------


def session_frames(session: Session, t_start: float | None = None, t_stop: float | None = None) -> Iterator[StreamFrame]:
    """セッションを全体の時刻順のフレーム列にする関数.

    引数:
        session (Session): 再生するセッション。
        t_start (float | None): この時刻以降だけを再生（抜粋再生用）。
        t_stop (float | None): この時刻より前だけを再生。

    戻り値:
        Iterator[StreamFrame]: 同時刻では event → eeg → gaze の順。イベントは Memory-Phase 開始時刻に 1 つ。
    """
    rec = session.recording
    lo_t = -np.inf if t_start is None else t_start
    hi_t = np.inf if t_stop is None else t_stop

    def eeg():
        times = rec.t0 + np.arange(rec.n_samples) / rec.fs
        idx = np.flatnonzero((times >= lo_t) & (times < hi_t))
        for i in idx:
            yield (float(times[i]), 1, int(i)), StreamFrame("eeg", float(times[i]), rec.samples[:, i].tolist())

    def gaze():
        g = session.gaze
        if g is None:
            return
        for i in np.flatnonzero((g.timestamps >= lo_t) & (g.timestamps < hi_t)):
            t = float(g.timestamps[i])
            yield (t, 2, int(i)), StreamFrame("gaze", t, [float(g.x[i]), float(g.y[i]), float(g.confidence[i])])

    def events():
        for i, ev in enumerate(sorted(session.events, key=lambda e: e.memory_onset)):
            if lo_t <= ev.memory_onset < hi_t:
                payload = {"trial_id": ev.trial_id, "condition": ev.condition.value, "phase": "memory"}
                yield (ev.memory_onset, 0, i), StreamFrame("event", ev.memory_onset, payload)

    for _, frame in heapq.merge(events(), eeg(), gaze(), key=lambda item: item[0]):
        yield frame


def count_frames(session: Session) -> int:
    """全フレーム数 = EEG サンプル数 + 視線サンプル数 + イベント数."""
    n_gaze = len(session.gaze) if session.gaze is not None else 0
    return session.recording.n_samples + n_gaze + len(session.events)


class SessionReplayServer(gevent.server.StreamServer):
    """接続してきたクライアントごとにセッションを先頭から再生するサーバー.

    speed_factor = 1 で実時間、0 で可能な限り速く送ります。クライアントごとに書き込みは 1 つだけで、
    フレームの順序は入れ替わりません。
    """

    def __init__(
        self,
        listener,
        session: Session,
        speed_factor: float = 1.0,
        t_start: float | None = None,
        t_stop: float | None = None,
        **kwargs,
    ) -> None:
        super().__init__(listener, **kwargs)
        self.session = session
        self.speed_factor = float(speed_factor)
        self.t_start = t_start
        self.t_stop = t_stop
        self.replays: list[int] = []
        self.replay_done = gevent.event.Event()

    def handle(self, sock, address) -> None:
        sent = 0
        try:
            sent = self._replay(sock)
            logger.info("replay to %s finished: %d frames", address, sent)
        except (BrokenPipeError, ConnectionResetError, OSError) as exc:
            err = ClientDisconnect(f"client {address} disconnected after {sent} frames: {exc}", sent=sent)
            logger.warning("%s", err.message)
        finally:
            try:
                sock.close()
            finally:
                self.replays.append(sent)
                self.replay_done.set()

    def _replay(self, sock) -> int:
        sent = 0
        batch: list[bytes] = []
        start_wall = None
        t_first = None
        for frame in session_frames(self.session, self.t_start, self.t_stop):
            if self.speed_factor > 0:
                if start_wall is None:
                    start_wall, t_first = time.monotonic(), frame.t
                due = start_wall + (frame.t - t_first) / self.speed_factor
                wait = due - time.monotonic()
                if wait > 0:
                    if batch:
                        sock.sendall(b"".join(batch))
                        sent += len(batch)
                        batch = []
                    gevent.sleep(wait)
            batch.append(frame.to_line())
            if len(batch) >= SEND_BATCH:
                sock.sendall(b"".join(batch))
                sent += len(batch)
                batch = []
        if batch:
            sock.sendall(b"".join(batch))
            sent += len(batch)
        return sent


def start_replay_server(
    session: Session,
    address: str | tuple[str, int] = (DEFAULT_HOST, DEFAULT_PORT),
    speed_factor: float = 1.0,
    **kwargs,
) -> SessionReplayServer:
    """再生サーバーを起動して返す（ポート 0 なら空きポート、server.server_port で確認）.

    例外:
        BindFailure: アドレスが不正、またはバインドできない場合。
    """
    host, port = parse_address(address)
    server = SessionReplayServer((host, port), session, speed_factor=speed_factor, **kwargs)
    try:
        server.start()
    except (OSError, socket.gaierror) as exc:
        raise BindFailure(f"cannot bind {host}:{port}: {exc}", address=f"{host}:{port}") from exc
    logger.info("replaying %s on %s:%d (speed %.2f)", session.participant_id, host, server.server_port, speed_factor)
    return server


def serve_session(
    session: Session,
    address: str | tuple[str, int] = (DEFAULT_HOST, DEFAULT_PORT),
    speed_factor: float = 1.0,
    n_clients: int = 1,
    **kwargs,
) -> list[int]:
    """セッションを n_clients 回再生し終えるまでブロックする関数.

    引数:
        session (Session): 再生するセッション。
        address (str | Tuple[str, int]): "host:port" または (host, port)。
        speed_factor (float): 実時間に対する倍率（0 は待ち時間なし）。
        n_clients (int): 再生するクライアント数。0 なら停止されるまで待ち続けます。

    戻り値:
        List[int]: クライアントごとの送信フレーム数。

    例外:
        BindFailure: アドレスが不正、またはバインドできない場合。
    """
    server = start_replay_server(session, address, speed_factor, **kwargs)
    try:
        if n_clients <= 0:
            server.serve_forever()
        while len(server.replays) < n_clients:
            server.replay_done.wait()
            server.replay_done.clear()
    finally:
        server.stop()
    return list(server.replays)


# ---------- モデル ----------


@dataclass(frozen=True)
class ModelBundle:
    """ストリーム分類に必要な一式（前処理・モンタージュ・FBCSP・LDA・融合閾値）."""

    preprocess: PreprocessParams
    montage: ElectrodeMontage
    bad_channels: frozenset[str]
    fs: float
    fbcsp: FbcspModel | None = None
    eeg_lda: LdaModel | None = None
    gaze_lda: LdaModel | None = None
    tau: float = 0.7
    gaze_params: GazeParams = field(default_factory=GazeParams)

    def __post_init__(self) -> None:
        if (self.fbcsp is None) != (self.eeg_lda is None):
            raise ModelMismatch("FBCSP and EEG LDA models must be given together")
        if self.fbcsp is None and self.gaze_lda is None:
            raise ModelMismatch("bundle contains no model")
        if self.fbcsp is not None and self.fbcsp.n_channels != len(self.montage):
            raise ModelMismatch(
                f"FBCSP model has {self.fbcsp.n_channels} channels, montage has {len(self.montage)}"
            )
        object.__setattr__(self, "bad_channels", frozenset(self.bad_channels))

    @property
    def n_channels(self) -> int:
        return len(self.montage)

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": BUNDLE_FORMAT,
            "preprocess": self.preprocess.as_dict(),
            "channels": list(self.montage.names),
            "positions": self.montage.positions.tolist(),
            "bad_channels": sorted(self.bad_channels),
            "fs": self.fs,
            "fbcsp": self.fbcsp.to_dict() if self.fbcsp is not None else None,
            "eeg_lda": self.eeg_lda.to_dict() if self.eeg_lda is not None else None,
            "gaze_lda": self.gaze_lda.to_dict() if self.gaze_lda is not None else None,
            "tau": self.tau,
            "gaze_params": self.gaze_params.as_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> ModelBundle:
        if doc.get("format") != BUNDLE_FORMAT:
            raise ModelMismatch(f"unsupported model bundle format {doc.get('format')!r}")
        return cls(
            preprocess=PreprocessParams(**doc["preprocess"]),
            montage=ElectrodeMontage(tuple(doc["channels"]), np.array(doc["positions"], dtype=float)),
            bad_channels=frozenset(doc["bad_channels"]),
            fs=float(doc["fs"]),
            fbcsp=FbcspModel.from_dict(doc["fbcsp"]) if doc.get("fbcsp") else None,
            eeg_lda=LdaModel.from_dict(doc["eeg_lda"]) if doc.get("eeg_lda") else None,
            gaze_lda=LdaModel.from_dict(doc["gaze_lda"]) if doc.get("gaze_lda") else None,
            tau=float(doc["tau"]),
            gaze_params=GazeParams(**doc["gaze_params"]),
        )

    def save(self, path: str | Path) -> Path:
        return write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> ModelBundle:
        return cls.from_dict(read_json(path))


def fit_bundle(
    session: Session, spec: PipelineSpec = PipelineSpec(), preprocess: PreprocessParams = PreprocessParams()
) -> ModelBundle:
    """セッションの全窓でモデルを学習し、ストリーム用の ModelBundle にまとめる関数.

    視線を使うパイプラインで視線が無いセッションは ModelMismatch になります。
    """
    if spec.needs_gaze and session.gaze is None:
        raise ModelMismatch(f"{session.participant_id} has no gaze recording for a {spec.kind.value} model")
    models = fit_models(prepare_session(session, spec, preprocess), spec)
    return ModelBundle(
        preprocess=preprocess,
        montage=session.montage,
        bad_channels=session.bad_channels,
        fs=session.recording.fs,
        fbcsp=models.fbcsp,
        eeg_lda=models.eeg_lda,
        gaze_lda=models.gaze_lda,
        tau=spec.tau,
        gaze_params=spec.gaze,
    )


# ---------- 窓の分類（オンライン／オフライン共通） ----------


@dataclass(frozen=True)
class StreamPrediction:
    trial_id: int
    start: float
    offset: float
    prediction: Prediction

    def as_dict(self) -> dict[str, Any]:
        p = self.prediction
        return {
            "trial_id": self.trial_id,
            "start": self.start,
            "offset": self.offset,
            "label": p.label.value,
            "confidence": p.confidence,
            "score": p.score,
            "decided_by": p.decided_by,
        }


def window_offsets(hop: float) -> list[float]:
    """Memory-Phase 開始からの窓開始オフセット（onset+3 s から hop 刻み、窓の終わりが onset+18 s 以内）."""
    if not hop > 0:
        raise ModelMismatch(f"hop must be positive, got {hop}")
    first, last_end = WINDOW_OFFSETS[0], WINDOW_OFFSETS[-1] + WINDOW_SECONDS
    n = int(np.floor(round((last_end - WINDOW_SECONDS - first) / hop, 9))) + 1
    return [first + k * hop for k in range(n)]


def classify_window(bundle: ModelBundle, eeg: np.ndarray | None, gaze: GazeTrack | None) -> Prediction:
    """前処理済みの 3 秒窓と視線を分類する."""
    eeg_pred = gaze_pred = None
    if bundle.fbcsp is not None:
        if eeg is None:
            raise ModelMismatch("EEG model loaded but no EEG data in window")
        eeg_pred = predict(bundle.eeg_lda, fbcsp_features(bundle.fbcsp, eeg))
    if bundle.gaze_lda is not None and gaze is not None:
        gaze_pred = predict(bundle.gaze_lda, gaze_feature_vector(gaze, bundle.gaze_params))
    if eeg_pred is not None and gaze_pred is not None:
        return fuse(eeg_pred, gaze_pred, bundle.tau)
    if eeg_pred is not None:
        return Prediction(eeg_pred.label, eeg_pred.confidence, eeg_pred.score, decided_by="eeg")
    if gaze_pred is not None:
        return Prediction(gaze_pred.label, gaze_pred.confidence, gaze_pred.score, decided_by="gaze")
    raise ModelMismatch("gaze model loaded but no gaze data in window")


def offline_window_predictions(session: Session, bundle: ModelBundle, hop: float = DEFAULT_HOP) -> list[StreamPrediction]:
    """ストリーム分類器と同じ窓を、記録全体を前処理してから切り出して分類する関数.

    前処理は preprocess_recording（評価と同じ経路）で行い、不良チャンネルは bundle のものを使います。

    戻り値:
        List[StreamPrediction]: 試行の開始順、窓の開始順。
    """
    rec = session.recording
    if bundle.fbcsp is not None:
        rec = preprocess_recording(rec, bundle.montage, bundle.bad_channels, bundle.preprocess)
    win = int(round(WINDOW_SECONDS * rec.fs))
    out = []
    for ev in sorted(session.events, key=lambda e: e.memory_onset):
        for off in window_offsets(hop):
            start = ev.memory_onset + off
            lo = int(round((start - rec.t0) * rec.fs))
            if lo < 0 or lo + win > rec.n_samples:
                continue
            eeg = rec.samples[:, lo : lo + win] if bundle.fbcsp is not None else None
            gaze = session.gaze.between(start, start + WINDOW_SECONDS) if session.gaze is not None else None
            out.append(StreamPrediction(ev.trial_id, start, off, classify_window(bundle, eeg, gaze)))
    return out


class _RingBuffer:
    """直近 capacity サンプルを保持するチャンネル × 時間のリングバッファ."""

    def __init__(self, n_channels: int, capacity: int) -> None:
        self.data = np.zeros((n_channels, capacity))
        self.capacity = capacity
        self.count = 0

    def append(self, sample: np.ndarray) -> None:
        self.data[:, self.count % self.capacity] = sample
        self.count += 1

    def get(self, start: int, stop: int) -> np.ndarray | None:
        if start < self.count - self.capacity or stop > self.count or start < 0:
            return None
        return self.data[:, np.arange(start, stop) % self.capacity]


@dataclass
class _PendingWindow:
    trial_id: int
    start: float
    offset: float


def classify_stream(
    bundle: ModelBundle,
    address: str | tuple[str, int] = (DEFAULT_HOST, DEFAULT_PORT),
    hop: float = DEFAULT_HOP,
    on_prediction: Callable[[StreamPrediction], None] | None = None,
    connect_timeout: float = 10.0,
) -> list[StreamPrediction]:
    """再生ストリームに接続し、試行ごとの窓を受信しながら分類する関数.

    引数:
        bundle (ModelBundle): 学習済みモデル一式。
        address (str | Tuple[str, int]): 再生サーバーのアドレス。
        hop (float): 窓の移動幅（秒）。窓は Memory-Phase 開始 + 3 s から始まり、開始 + 18 s で終わる範囲に並びます。
        on_prediction (Callable | None): 予測ごとに呼ぶコールバック。

    戻り値:
        List[StreamPrediction]: 出力順（= 窓の終了時刻順）の予測。

    例外:
        ConnectionLost: 接続できない、または受信中に切断された場合。
        ModelMismatch: EEG のチャンネル数がモデルと違う、またはモデルに必要なストリームが届かない場合。

    注意:
        EEG は窓の前後に preprocess_margin サンプルの余白を付けた区間をゼロ位相で前処理し、窓の部分だけを使います。
        このため記録全体を前処理してから切り出した窓と同じ値になり、判定は窓の終わりから余白ぶん
        （既定の 3–45 Hz 帯域通過 + 50 Hz ノッチで約 3.3 秒）遅れます。余白が揃う前に記録が終わった窓は EOF で処理します。
    """
    host, port = parse_address(address)
    offsets = window_offsets(hop)
    win = int(round(WINDOW_SECONDS * bundle.fs))
    margin = preprocess_margin(bundle.fs, bundle.preprocess) if bundle.fbcsp is not None else 0
    eeg_buf = _RingBuffer(bundle.n_channels, 2 * (win + margin))
    gaze_buf: deque[tuple[float, float, float, float]] = deque()
    pending: list[_PendingWindow] = []
    out: list[StreamPrediction] = []
    t_first: float | None = None
    n_gaze = 0

    def first_sample(w: _PendingWindow) -> int:
        return int(round((w.start - t_first) * bundle.fs)) if t_first is not None else -1

    def ready(w: _PendingWindow, now: float | None) -> bool:
        if now is None:
            return True
        if w.start + WINDOW_SECONDS > now:
            return False
        if bundle.fbcsp is None:
            return True
        lo = first_sample(w)
        return lo >= 0 and eeg_buf.count >= lo + win + margin

    def emit(w: _PendingWindow) -> None:
        clean = None
        if bundle.fbcsp is not None:
            lo = first_sample(w)
            a, b = max(0, lo - margin), min(eeg_buf.count, lo + win + margin)
            segment = eeg_buf.get(a, b) if lo >= 0 and lo + win <= b else None
            if segment is None:
                logger.warning("trial %d window at %.3f s not fully buffered, skipped", w.trial_id, w.start)
                return
            clean = preprocess_segment(
                segment, bundle.fs, bundle.montage, bundle.bad_channels, bundle.preprocess, lead=lo - a, length=win
            )
        gaze = None
        if bundle.gaze_lda is not None and (n_gaze > 0 or bundle.fbcsp is None):
            rows = [g for g in gaze_buf if w.start <= g[0] < w.start + WINDOW_SECONDS]
            if rows:
                arr = np.array(rows)
                gaze = GazeTrack(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])
            else:
                gaze = GazeTrack.empty()
        result = StreamPrediction(w.trial_id, w.start, w.offset, classify_window(bundle, clean, gaze))
        out.append(result)
        if on_prediction is not None:
            on_prediction(result)

    def flush(now: float | None) -> None:
        while pending and ready(pending[0], now):
            emit(pending.pop(0))
        # 新しい窓は受信時刻 + 3 s より前には始まらない
        horizon = min(pending[0].start, now) if pending and now is not None else now
        while horizon is not None and gaze_buf and gaze_buf[0][0] < horizon:
            gaze_buf.popleft()

    try:
        sock = socket.create_connection((host, port), timeout=connect_timeout)
    except OSError as exc:
        raise ConnectionLost(f"cannot connect to {host}:{port}: {exc}", address=f"{host}:{port}") from exc
    sock.settimeout(None)
    try:
        reader = sock.makefile("rb")
        for line in reader:
            frame = StreamFrame.from_line(line)
            flush(frame.t)
            if frame.kind == "eeg":
                if len(frame.v) != bundle.n_channels:
                    raise ModelMismatch(
                        f"EEG frame has {len(frame.v)} channels, model expects {bundle.n_channels}",
                        got=len(frame.v),
                        expected=bundle.n_channels,
                    )
                if t_first is None:
                    t_first = frame.t
                eeg_buf.append(np.asarray(frame.v, dtype=float))
            elif frame.kind == "gaze":
                n_gaze += 1
                if bundle.gaze_lda is not None:
                    gaze_buf.append((frame.t, *map(float, frame.v)))
            else:
                onset = float(frame.t)
                trial_id = int(frame.v["trial_id"])
                pending.extend(_PendingWindow(trial_id, onset + off, off) for off in offsets)
                pending.sort(key=lambda w: w.start)
    except (ConnectionResetError, BrokenPipeError) as exc:
        raise ConnectionLost(f"stream from {host}:{port} lost: {exc}") from exc
    finally:
        sock.close()

    if bundle.fbcsp is not None and t_first is None:
        raise ModelMismatch("stream carried no EEG frames but the bundle has an EEG model")
    if bundle.fbcsp is None and n_gaze == 0:
        raise ModelMismatch("stream carried no gaze frames but the bundle has only a gaze model")
    flush(None)
    logger.info("stream classified %d windows", len(out))
    return out
