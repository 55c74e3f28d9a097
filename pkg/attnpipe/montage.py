from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from attnpipe.errors import InvariantViolation
from utils.sphere import great_circle_distances, latlon_for, latlon_to_xyz

# 記録で使われた 16 電極（この順序で固定）
DEFAULT_LABELS: list[str] = [
    "Cz",
    "Fp2",
    "F3",
    "Fz",
    "F4",
    "FT7",
    "C3",
    "Fp1",
    "C4",
    "FT8",
    "P3",
    "Pz",
    "P4",
    "PO7",
    "PO8",
    "Oz",
]


@dataclass(frozen=True)
class ElectrodeMontage:
    """電極ラベルと単位球上の位置."""

    names: tuple[str, ...]
    positions: np.ndarray

    def __post_init__(self) -> None:
        pos = np.asarray(self.positions, dtype=float)
        if pos.shape != (len(self.names), 3):
            raise InvariantViolation(
                f"positions shape {pos.shape} does not match {len(self.names)} channels", rule="montage.shape"
            )
        if len(set(self.names)) != len(self.names):
            raise InvariantViolation("channel labels must be unique", rule="montage.unique_labels")
        norms = np.linalg.norm(pos, axis=1)
        if not np.all(np.abs(norms - 1.0) <= 1e-9):
            raise InvariantViolation("electrode positions must lie on the unit sphere", rule="montage.unit_norm")
        pos = pos.copy()
        pos.flags.writeable = False
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return len(self.names)

    def index(self, label: str) -> int:
        """ラベルの行番号を返す."""
        return self.names.index(label)

    def distances_from(self, label: str) -> np.ndarray:
        """指定電極から全電極への大円距離（ラジアン）."""
        return great_circle_distances(self.positions, self.index(label))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ElectrodeMontage):
            return NotImplemented
        return self.names == other.names and np.allclose(self.positions, other.positions, rtol=0, atol=1e-12)


def montage_from_labels(labels: Sequence[str]) -> ElectrodeMontage:
    """ラベル列から ElectrodeMontage を作る関数.

    引数:
        labels (Sequence[str]): チャンネルラベル（順序を保持）。

    戻り値:
        ElectrodeMontage: 位置は utils.sphere のテーブルから引いた単位ベクトル。

    例外:
        InvariantViolation: 位置が未知のラベルを含む場合、またはラベルが重複する場合。
    """
    positions = []
    for label in labels:
        try:
            lat, lon = latlon_for(label)
        except KeyError as exc:
            raise InvariantViolation(f"no electrode position known for {label!r}", rule="montage.known_label") from exc
        positions.append(latlon_to_xyz(lat, lon))
    return ElectrodeMontage(names=tuple(labels), positions=np.array(positions))


def default_montage() -> ElectrodeMontage:
    """記録時の 16 電極モンタージュを返す."""
    return montage_from_labels(DEFAULT_LABELS)
