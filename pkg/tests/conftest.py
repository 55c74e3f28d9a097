from __future__ import annotations

import numpy as np
import pytest

from attnpipe.data_model import Condition, GazeTrack, Recording, Session, TrialEvent
from attnpipe.evaluation import WindowRecord
from attnpipe.montage import default_montage
from attnpipe.simulate import SimConfig, simulate_dataset, simulate_session


@pytest.fixture(scope="session")
def small_sim_config() -> SimConfig:
    """2 名 × 条件ごと 4 試行の小さな設定."""
    return SimConfig(n_participants=2, trials_per_condition=4, seed=0)


@pytest.fixture(scope="session")
def small_dataset(small_sim_config):
    return simulate_dataset(small_sim_config)


@pytest.fixture(scope="session")
def small_session(small_dataset) -> Session:
    return small_dataset.sessions[0]


@pytest.fixture(scope="session")
def tiny_session() -> Session:
    """条件ごと 2 試行だけの疑似セッション（ストリームのテスト用）."""
    return simulate_session(SimConfig(n_participants=1, trials_per_condition=2, seed=3), 0)


@pytest.fixture
def montage():
    return default_montage()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def hand_session(rng) -> Session:
    """16 チャンネル・30 秒・1 試行の手作りセッション（視線 120 Hz 付き）."""
    fs = 500.0
    samples = rng.standard_normal((16, int(30 * fs)))
    ts = np.arange(int(30 * 120)) / 120.0
    gaze = GazeTrack(
        timestamps=ts,
        x=np.full(ts.size, 0.5),
        y=np.full(ts.size, 0.5),
        confidence=np.ones(ts.size),
    )
    return Session(
        participant_id="H01",
        recording=Recording(samples=samples, fs=fs),
        events=(TrialEvent(trial_id=1, condition=Condition.REAL, memory_onset=5.0),),
        gaze=gaze,
    )


@pytest.fixture
def window_factory():
    """分割テスト用の WindowRecord を作る関数を返す.

    試行 k（1 始まり）は onset = 30·k 秒、奇数は Real・偶数は Virtual、各試行 5 窓。
    """

    def make(trials_per_class: int = 20, participant_id: str = "P01") -> list[WindowRecord]:
        out = []
        for k in range(1, 2 * trials_per_class + 1):
            cond = Condition.REAL if k % 2 == 1 else Condition.VIRTUAL
            for pos in range(5):
                out.append(
                    WindowRecord(
                        participant_id=participant_id,
                        trial_id=k,
                        condition=cond,
                        position_index=pos,
                        onset=30.0 * k,
                    )
                )
        return out

    return make
