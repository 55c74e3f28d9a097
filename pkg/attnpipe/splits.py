from __future__ import annotations

import math
from collections import defaultdict
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum
from typing import Protocol

import numpy as np

from attnpipe.data_model import Condition
from attnpipe.errors import InvariantViolation, TooFewTrials, TooFewWindows, UnknownParticipant


class SplitPolicy(str, Enum):
    TRIAL_OBLIVIOUS = "trial_oblivious"
    TRIAL_SENSITIVE = "trial_sensitive"
    CHRONOLOGICAL = "chronological"
    LOSO = "loso"


class WindowLike(Protocol):
    """分割に必要な窓の属性（EpochWindow と evaluation.WindowRecord が満たす）."""

    participant_id: str
    trial_id: int
    condition: Condition
    onset: float

    @property
    def window_id(self) -> str: ...


@dataclass(frozen=True)
class Split:
    """学習／テストの窓 ID 集合."""

    train_ids: frozenset[str]
    test_ids: frozenset[str]
    policy: SplitPolicy
    seed: int | None = None
    held_out: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "train_ids", frozenset(self.train_ids))
        object.__setattr__(self, "test_ids", frozenset(self.test_ids))
        if self.train_ids & self.test_ids:
            raise InvariantViolation("train and test ids overlap", rule="split.disjoint")

    @property
    def n_test(self) -> int:
        return len(self.test_ids)


def round_half_up(x: float) -> int:
    """四捨五入（0.5 は切り上げ）. 浮動小数の誤差は小数 9 桁で丸めてから扱います."""
    return int(math.floor(round(x, 9) + 0.5))


def _by_class(windows: Sequence[WindowLike]) -> dict[Condition, list[WindowLike]]:
    out: dict[Condition, list[WindowLike]] = {Condition.REAL: [], Condition.VIRTUAL: []}
    for w in windows:
        out[Condition.parse(w.condition)].append(w)
    return out


def _trials_by_class(windows: Sequence[WindowLike]) -> dict[Condition, dict[tuple[str, int], list[WindowLike]]]:
    out: dict[Condition, dict[tuple[str, int], list[WindowLike]]] = {
        Condition.REAL: defaultdict(list),
        Condition.VIRTUAL: defaultdict(list),
    }
    for w in windows:
        out[Condition.parse(w.condition)][(w.participant_id, int(w.trial_id))].append(w)
    return out


def _ids(windows) -> frozenset[str]:
    return frozenset(w.window_id for w in windows)


def split_trial_oblivious(windows: Sequence[WindowLike], test_frac: float = 0.3, seed: int = 0) -> Split:
    """試行を無視して、クラスごとに窓を層化無作為抽出する関数.

    引数:
        windows (Sequence[WindowLike]): 分割対象。
        test_frac (float): テストの割合。クラスごとに round_half_up(test_frac × クラス窓数) 個。
        seed (int): 乱数シード（同じシードなら同じ分割）。

    戻り値:
        Split: 同じ試行の窓が学習とテストの両方に入り得ます。

    例外:
        TooFewWindows: どちらかのクラスで学習かテストが空になる場合。
    """
    rng = np.random.default_rng(seed)
    test: list[str] = []
    train: list[str] = []
    for cond, members in _by_class(windows).items():
        ids = sorted(w.window_id for w in members)
        n_test = round_half_up(test_frac * len(ids))
        if n_test < 1 or n_test >= len(ids):
            raise TooFewWindows(
                f"{len(ids)} {cond.value} windows cannot be split with test_frac={test_frac}",
                condition=cond.value,
                n=len(ids),
            )
        pick = set(rng.choice(len(ids), size=n_test, replace=False).tolist())
        test.extend(ids[i] for i in range(len(ids)) if i in pick)
        train.extend(ids[i] for i in range(len(ids)) if i not in pick)
    return Split(frozenset(train), frozenset(test), SplitPolicy.TRIAL_OBLIVIOUS, seed=seed)


def split_trial_sensitive(windows: Sequence[WindowLike], test_frac: float = 0.3, seed: int = 0) -> Split:
    """試行単位でクラスごとに層化抽出する関数（同じ試行の 5 窓は必ず同じ側）.

    例外:
        TooFewTrials: どちらかのクラスの試行が 2 未満の場合。
    """
    rng = np.random.default_rng(seed)
    train: list[WindowLike] = []
    test: list[WindowLike] = []
    for cond, trials in _trials_by_class(windows).items():
        keys = sorted(trials)
        if len(keys) < 2:
            raise TooFewTrials(f"{len(keys)} {cond.value} trials, need at least 2", condition=cond.value)
        n_test = min(max(round_half_up(test_frac * len(keys)), 1), len(keys) - 1)
        pick = set(rng.choice(len(keys), size=n_test, replace=False).tolist())
        for i, key in enumerate(keys):
            (test if i in pick else train).extend(trials[key])
    return Split(_ids(train), _ids(test), SplitPolicy.TRIAL_SENSITIVE, seed=seed)


def split_chronological(windows: Sequence[WindowLike], test_frac: float = 0.3, seed: int | None = None) -> Split:
    """クラスごとに開始時刻順で先頭 ⌈(1 − test_frac)·n⌉ 試行を学習、残りをテストにする関数.

    seed は他の分割関数と呼び出し形を揃えるためだけに受け取り、使いません。

    例外:
        TooFewTrials: テストに回る試行が無い場合。
    """
    train: list[WindowLike] = []
    test: list[WindowLike] = []
    for cond, trials in _trials_by_class(windows).items():
        keys = sorted(trials, key=lambda k: (min(w.onset for w in trials[k]), k))
        n_train = math.ceil(round((1.0 - test_frac) * len(keys), 9))
        if len(keys) < 2 or n_train >= len(keys) or n_train < 1:
            raise TooFewTrials(
                f"{len(keys)} {cond.value} trials leave no chronological test trial", condition=cond.value
            )
        for i, key in enumerate(keys):
            (train if i < n_train else test).extend(trials[key])
    return Split(_ids(train), _ids(test), SplitPolicy.CHRONOLOGICAL)


def split_loso(windows: Sequence[WindowLike], held_out_participant: str) -> Split:
    """1 名をテスト、残り全員を学習にする（leave-one-subject-out）.

    例外:
        UnknownParticipant: held_out_participant が窓に含まれない場合。
        TooFewWindows: 参加者が 2 名未満の場合。
    """
    participants = {w.participant_id for w in windows}
    if held_out_participant not in participants:
        raise UnknownParticipant(f"unknown participant {held_out_participant!r}", participant=held_out_participant)
    if len(participants) < 2:
        raise TooFewWindows("leave-one-subject-out needs at least 2 participants", n=len(participants))
    test = [w for w in windows if w.participant_id == held_out_participant]
    train = [w for w in windows if w.participant_id != held_out_participant]
    return Split(_ids(train), _ids(test), SplitPolicy.LOSO, held_out=held_out_participant)


SPLIT_FUNCTIONS = {
    SplitPolicy.TRIAL_OBLIVIOUS: split_trial_oblivious,
    SplitPolicy.TRIAL_SENSITIVE: split_trial_sensitive,
    SplitPolicy.CHRONOLOGICAL: split_chronological,
}
