from __future__ import annotations

import numpy as np
from pyproj import Geod

"""電極の球面座標ユーティリティ（単位球、緯度・経度は度）。"""

# 経度 0 = 鼻根方向、正 = 左半球、緯度 90 = 頭頂（Cz）。理想化した 10-20 配置。
ELECTRODE_LATLON: dict[str, tuple[float, float]] = {
    "Cz": (90.0, 0.0),
    "Fp2": (0.0, -18.0),
    "F3": (50.0, 40.0),
    "Fz": (45.0, 0.0),
    "F4": (50.0, -40.0),
    "FT7": (0.0, 72.0),
    "C3": (45.0, 90.0),
    "Fp1": (0.0, 18.0),
    "C4": (45.0, -90.0),
    "FT8": (0.0, -72.0),
    "P3": (50.0, 140.0),
    "Pz": (45.0, 180.0),
    "P4": (50.0, -140.0),
    "PO7": (0.0, 144.0),
    "PO8": (0.0, -144.0),
    "Oz": (0.0, 180.0),
    # 追加モンタージュ用
    "Fpz": (0.0, 0.0),
    "F7": (0.0, 54.0),
    "F8": (0.0, -54.0),
    "T7": (0.0, 90.0),
    "T8": (0.0, -90.0),
    "P7": (0.0, 126.0),
    "P8": (0.0, -126.0),
    "O1": (0.0, 162.0),
    "O2": (0.0, -162.0),
    "POz": (22.5, 180.0),
    "CPz": (67.5, 180.0),
    "FCz": (67.5, 0.0),
}

_UNIT_SPHERE = Geod(a=1.0, b=1.0)


def latlon_for(label: str) -> tuple[float, float]:
    """電極ラベルの（緯度, 経度）を返す関数.

    引数:
        label (str): 電極ラベル。大文字小文字は区別しません（"FP1" と "Fp1" は同じ）。

    戻り値:
        Tuple[float, float]: (緯度, 経度)（度）。

    例外:
        KeyError: テーブルに存在しないラベルの場合。
    """
    if label in ELECTRODE_LATLON:
        return ELECTRODE_LATLON[label]
    folded = {k.casefold(): v for k, v in ELECTRODE_LATLON.items()}
    return folded[label.casefold()]


def latlon_to_xyz(lat: float, lon: float) -> np.ndarray:
    """緯度経度（度）を単位球上の 3 次元座標に変換する."""
    la, lo = np.deg2rad(lat), np.deg2rad(lon)
    return np.array([np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)])


def xyz_to_latlon(xyz: np.ndarray) -> tuple[float, float]:
    """単位球上の座標を（緯度, 経度）に戻す."""
    x, y, z = (float(v) for v in xyz)
    lat = float(np.rad2deg(np.arcsin(np.clip(z, -1.0, 1.0))))
    lon = float(np.rad2deg(np.arctan2(y, x)))
    return lat, lon


def great_circle_distances(positions: np.ndarray, index: int) -> np.ndarray:
    """`positions[index]` から各電極までの大円距離（ラジアン）を返す関数.

    引数:
        positions (np.ndarray): (n_channels, 3) の単位ベクトル。
        index (int): 基準となる電極の行番号。

    戻り値:
        np.ndarray: (n_channels,) の大円距離。基準電極自身は 0。

    注意:
        pyproj の Geod を半径 1 の球として使うため、距離は単位球上の弧長そのものです。
    """
    latlon = np.array([xyz_to_latlon(p) for p in positions])
    n = len(latlon)
    lat0 = np.full(n, latlon[index, 0])
    lon0 = np.full(n, latlon[index, 1])
    _, _, dist = _UNIT_SPHERE.inv(lon0, lat0, latlon[:, 1], latlon[:, 0])
    dist = np.asarray(dist, dtype=float)
    dist[index] = 0.0
    return dist
