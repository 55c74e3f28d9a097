from __future__ import annotations

import time

import gevent
import gevent.server
import numpy as np
import pytest
from gevent import socket

from attnpipe.data_model import Session
from attnpipe.errors import BindFailure, ConnectionLost, ModelMismatch
from attnpipe.evaluation import FittedModels, PipelineKind, PipelineSpec, apply_models, prepare_session
from attnpipe.simulate import SimConfig, simulate_dataset
from attnpipe.stream import (
    ModelBundle,
    StreamFrame,
    classify_stream,
    classify_window,
    count_frames,
    fit_bundle,
    offline_window_predictions,
    parse_address,
    serve_session,
    session_frames,
    start_replay_server,
    window_offsets,
)

LOCAL = ("127.0.0.1", 0)


@pytest.fixture(scope="module")
def fusion_bundle(tiny_session) -> ModelBundle:
    return fit_bundle(tiny_session, PipelineSpec(kind=PipelineKind.FUSION))


def _serve_lines(lines: list[bytes]) -> gevent.server.StreamServer:
    def handle(sock, _address):
        sock.sendall(b"".join(lines))
        sock.close()

    server = gevent.server.StreamServer(LOCAL, handle)
    server.start()
    return server


# ---------- フレームとアドレス ----------


def test_frame_round_trip():
    frame = StreamFrame("gaze", 1.25, [0.5, 0.25, 0.9])
    assert StreamFrame.from_line(frame.to_line()) == frame
    assert frame.to_line().endswith(b"\n")


@pytest.mark.parametrize("line", [b"not json\n", b'{"kind":"eeg","t":1.0}\n', b'{"kind":"audio","t":0,"v":1}\n'])
def test_malformed_frames(line):
    with pytest.raises(ConnectionLost):
        StreamFrame.from_line(line)


def test_parse_address():
    assert parse_address("127.0.0.1:9000") == ("127.0.0.1", 9000)
    assert parse_address(("localhost", 0)) == ("localhost", 0)
    for bad in ("localhost", "host:abc", "host:70000", ":80"):
        with pytest.raises(BindFailure):
            parse_address(bad)


def test_window_offsets():
    assert window_offsets(1.0) == [3.0 + k for k in range(13)]
    assert window_offsets(3.0) == [3.0, 6.0, 9.0, 12.0, 15.0]
    with pytest.raises(ModelMismatch):
        window_offsets(0.0)


# ---------- 送信側 ----------


def test_frames_are_time_ordered(hand_session):
    frames = list(session_frames(hand_session, t_start=4.9, t_stop=5.1))
    assert len(frames) == 100 + 24 + 1
    rank = {"event": 0, "eeg": 1, "gaze": 2}
    keys = [(f.t, rank[f.kind]) for f in frames]
    assert keys == sorted(keys)
    event = next(f for f in frames if f.kind == "event")
    assert event.t == 5.0
    assert event.v == {"trial_id": 1, "condition": "Real", "phase": "memory"}
    assert frames[frames.index(event) + 1].kind == "eeg"


def test_count_frames(hand_session):
    assert count_frames(hand_session) == 15000 + 3600 + 1


def test_fast_replay_sends_every_frame(hand_session):
    server = start_replay_server(hand_session, LOCAL, speed_factor=0.0)
    try:
        sock = socket.create_connection(("127.0.0.1", server.server_port), timeout=10)
        received = sum(1 for _ in sock.makefile("rb"))
        sock.close()
        server.replay_done.wait(timeout=10)
    finally:
        server.stop()
    assert received == count_frames(hand_session)
    assert server.replays == [received]


@pytest.mark.slow
def test_real_time_replay_keeps_pace(hand_session):
    server = start_replay_server(hand_session, LOCAL, speed_factor=1.0, t_start=10.0, t_stop=20.0)
    try:
        began = time.monotonic()
        sock = socket.create_connection(("127.0.0.1", server.server_port), timeout=10)
        received = sum(1 for _ in sock.makefile("rb"))
        elapsed = time.monotonic() - began
        sock.close()
    finally:
        server.stop()
    assert received == 10 * 500 + 10 * 120
    assert elapsed == pytest.approx(10.0, abs=0.5)


def _free_port() -> int:
    sock = socket.socket()
    sock.bind(LOCAL)
    port = sock.getsockname()[1]
    sock.close()
    return port


def test_serve_session_stops_after_n_clients(hand_session):
    port = _free_port()
    job = gevent.spawn(serve_session, hand_session, ("127.0.0.1", port), 0.0, n_clients=2)
    gevent.sleep(0.1)
    for _ in range(2):
        sock = socket.create_connection(("127.0.0.1", port), timeout=10)
        assert sum(1 for _ in sock.makefile("rb")) == count_frames(hand_session)
        sock.close()
    assert job.get(timeout=10) == [count_frames(hand_session)] * 2


def test_bind_failure_on_busy_port(hand_session):
    first = start_replay_server(hand_session, LOCAL, speed_factor=0.0)
    try:
        with pytest.raises(BindFailure):
            start_replay_server(hand_session, ("127.0.0.1", first.server_port), speed_factor=0.0)
    finally:
        first.stop()


# ---------- 受信・分類 ----------


@pytest.fixture(scope="module")
def held_out_pair() -> tuple[Session, Session]:
    """不良チャンネル無しの 2 名（1 人目で学習、2 人目を再生）."""
    dataset = simulate_dataset(SimConfig(n_participants=2, trials_per_condition=2, seed=5, max_bad_channels=0))
    return dataset.sessions[0], dataset.sessions[1]


def test_online_matches_offline_pipeline(held_out_pair):
    train, test = held_out_pair
    spec = PipelineSpec(kind=PipelineKind.FUSION)
    bundle = fit_bundle(train, spec)
    server = start_replay_server(test, LOCAL, speed_factor=0.0)
    seen = []
    try:
        online = classify_stream(bundle, ("127.0.0.1", server.server_port), hop=3.0, on_prediction=seen.append)
    finally:
        server.stop()
    assert seen == online

    records = prepare_session(test, spec, bundle.preprocess)
    models = FittedModels(bundle.fbcsp, bundle.eeg_lda, bundle.gaze_lda)
    predictions = apply_models(models, records, spec)
    expected = {(r.trial_id, r.position_index): p for r, p in zip(records, predictions, strict=True)}
    assert len(online) == len(expected) == 5 * len(test.events)
    for item in online:
        want = expected[(item.trial_id, int(round((item.offset - 3.0) / 3.0)))]
        assert item.prediction.label is want.label
        assert item.prediction.decided_by == want.decided_by
        assert item.prediction.score == pytest.approx(want.score, rel=1e-6, abs=1e-9)

    offline = offline_window_predictions(test, bundle, hop=3.0)
    assert {(o.trial_id, o.offset): o.prediction.label for o in offline} == {
        (o.trial_id, o.offset): o.prediction.label for o in online
    }


def test_gaze_only_stream_with_eeg_model(fusion_bundle):
    server = _serve_lines([StreamFrame("gaze", k / 120.0, [0.5, 0.5, 1.0]).to_line() for k in range(50)])
    try:
        with pytest.raises(ModelMismatch):
            classify_stream(fusion_bundle, ("127.0.0.1", server.server_port))
    finally:
        server.stop()


def test_channel_count_mismatch(fusion_bundle):
    server = _serve_lines([StreamFrame("eeg", 0.0, [0.0, 0.0, 0.0]).to_line()])
    try:
        with pytest.raises(ModelMismatch):
            classify_stream(fusion_bundle, ("127.0.0.1", server.server_port))
    finally:
        server.stop()


def test_connection_refused_after_stop(hand_session, fusion_bundle):
    server = start_replay_server(hand_session, LOCAL, speed_factor=0.0)
    port = server.server_port
    server.stop()
    with pytest.raises(ConnectionLost):
        classify_stream(fusion_bundle, ("127.0.0.1", port), connect_timeout=2.0)


# ---------- モデル一式 ----------


def test_bundle_save_and_load(fusion_bundle, tmp_path):
    path = fusion_bundle.save(tmp_path / "models.json")
    loaded = ModelBundle.load(path)
    assert loaded.to_dict() == fusion_bundle.to_dict()
    assert loaded.fbcsp.feature_names == fusion_bundle.fbcsp.feature_names


def test_bundle_needs_a_model(fusion_bundle):
    with pytest.raises(ModelMismatch):
        ModelBundle(
            preprocess=fusion_bundle.preprocess,
            montage=fusion_bundle.montage,
            bad_channels=frozenset(),
            fs=500.0,
        )
    with pytest.raises(ModelMismatch):
        ModelBundle.from_dict({**fusion_bundle.to_dict(), "format": "attnpipe-models/0"})


def test_eeg_model_needs_eeg_window(fusion_bundle):
    with pytest.raises(ModelMismatch):
        classify_window(fusion_bundle, None, None)
    raw = np.random.default_rng(0).standard_normal((16, 1500))
    assert classify_window(fusion_bundle, raw, None).decided_by == "eeg"
