from __future__ import annotations

import logging
import math
from collections.abc import Collection
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import signal as sps
from scipy.integrate import trapezoid

from attnpipe.data_model import Recording
from attnpipe.errors import BandOutOfRange, InvalidBand, InvariantViolation, TooFewGoodChannels, TooShort
from attnpipe.montage import ElectrodeMontage

logger = logging.getLogger(__name__)

DEFAULT_TRANSITION = 2.0
INTERP_NEIGHBOURS = 4
INTERP_POWER = 2.0


@dataclass(frozen=True)
class BandDefinition:
    """周波数帯域（Hz）."""

    name: str
    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not (0 < self.lo < self.hi):
            raise InvalidBand(f"band {self.name}: need 0 < lo < hi, got {self.lo}..{self.hi}", band=self.name)

    def check_fs(self, fs: float) -> None:
        if self.hi > fs / 2:
            raise InvalidBand(f"band {self.name}: hi={self.hi} exceeds Nyquist {fs / 2}", band=self.name)

    def as_dict(self) -> dict[str, float | str]:
        return {"name": self.name, "lo": self.lo, "hi": self.hi}


DEFAULT_BANDS: tuple[BandDefinition, ...] = (
    BandDefinition("Theta", 4.0, 8.0),
    BandDefinition("Alpha", 8.0, 14.0),
    BandDefinition("Beta", 14.0, 30.0),
    BandDefinition("Gamma", 30.0, 45.0),
)


@dataclass(frozen=True)
class FilterKernel:
    """線形位相 FIR フィルタ（タップ数は奇数、係数は中心対称）."""

    coefficients: np.ndarray
    fs: float
    kind: str
    lo: float
    hi: float

    def __post_init__(self) -> None:
        h = np.asarray(self.coefficients, dtype=float)
        if h.ndim != 1 or h.size % 2 == 0:
            raise InvariantViolation("FIR kernel needs an odd number of taps", rule="kernel.odd_taps")
        if np.max(np.abs(h - h[::-1])) > 1e-12:
            raise InvariantViolation("FIR kernel must be symmetric", rule="kernel.symmetric")
        h = h.copy()
        h.flags.writeable = False
        object.__setattr__(self, "coefficients", h)

    @property
    def n_taps(self) -> int:
        return int(self.coefficients.size)


@dataclass(frozen=True)
class PsdEstimate:
    """片側パワースペクトル密度（µV²/Hz）. `power` の最終軸が周波数."""

    freqs: np.ndarray
    power: np.ndarray

    @property
    def df(self) -> float:
        return float(self.freqs[1] - self.freqs[0]) if self.freqs.size > 1 else 0.0


@dataclass(frozen=True)
class PreprocessParams:
    """オフライン／ストリーム共通の前処理パラメータ."""

    l_freq: float = 3.0
    h_freq: float = 45.0
    notch: float | None = 50.0
    notch_width: float = 2.0
    transition: float = DEFAULT_TRANSITION

    def as_dict(self) -> dict[str, float | None]:
        return {
            "l_freq": self.l_freq,
            "h_freq": self.h_freq,
            "notch": self.notch,
            "notch_width": self.notch_width,
            "transition": self.transition,
        }


# ---------- フィルタ設計 ----------


def n_taps_for(fs: float, transition: float) -> int:
    """Hamming 窓の経験則 3.3·fs/transition 以上の最小の奇数."""
    n = math.ceil(round(3.3 * fs / transition, 9))
    return n if n % 2 == 1 else n + 1


def design_fir(kind: str, lo: float, hi: float, fs: float, transition: float = DEFAULT_TRANSITION) -> FilterKernel:
    """Hamming 窓付き sinc による FIR フィルタを設計する関数.

    引数:
        kind (str): "bandpass" または "bandstop"。
        lo (float): 下側カットオフ（Hz）。
        hi (float): 上側カットオフ（Hz）。
        fs (float): サンプリング周波数（Hz）。
        transition (float): 遷移帯域幅（Hz）。タップ数は 3.3·fs/transition 以上の最小の奇数。

    戻り値:
        FilterKernel: 中心対称（線形位相）の係数。

    例外:
        InvalidBand: 0 < lo < hi < fs/2 を満たさない、transition <= 0、kind が不明な場合。

    使用例:
        >>> design_fir("bandpass", 3.0, 45.0, 500.0).n_taps
        825
    """
    if kind not in ("bandpass", "bandstop"):
        raise InvalidBand(f"unknown filter kind {kind!r}", kind=kind)
    if not (0 < lo < hi < fs / 2):
        raise InvalidBand(f"need 0 < lo < hi < fs/2, got lo={lo}, hi={hi}, fs={fs}", lo=lo, hi=hi, fs=fs)
    if not transition > 0:
        raise InvalidBand(f"transition must be positive, got {transition}", transition=transition)
    return _design_cached(kind, float(lo), float(hi), float(fs), float(transition))


@lru_cache(maxsize=64)
def _design_cached(kind: str, lo: float, hi: float, fs: float, transition: float) -> FilterKernel:
    numtaps = n_taps_for(fs, transition)
    h = sps.firwin(numtaps, [lo, hi], window="hamming", pass_zero=(kind == "bandstop"), fs=fs)
    h = 0.5 * (h + h[::-1])
    logger.debug("designed %s %.1f-%.1f Hz, %d taps", kind, lo, hi, numtaps)
    return FilterKernel(coefficients=h, fs=fs, kind=kind, lo=lo, hi=hi)


def frequency_response(kernel: FilterKernel, freqs: np.ndarray | float) -> np.ndarray:
    """|H(f)| を返す（H(f) = Σ h_k e^{-i2πfk/fs}）."""
    f = np.atleast_1d(np.asarray(freqs, dtype=float))
    _, resp = sps.freqz(kernel.coefficients, worN=f, fs=kernel.fs)
    return np.abs(resp)


# ---------- フィルタ適用 ----------


def _zero_phase(data: np.ndarray, h: np.ndarray) -> np.ndarray:
    # 反射パディング → 中心合わせ畳み込みを 2 回（前向き＋後ろ向き相当）
    pad = h.size
    padded = np.pad(data, [(0, 0)] * (data.ndim - 1) + [(pad, pad)], mode="reflect")
    kernel = h.reshape((1,) * (data.ndim - 1) + (-1,))
    once = sps.oaconvolve(padded, kernel, mode="same", axes=-1)
    twice = sps.oaconvolve(once, kernel, mode="same", axes=-1)
    return twice[..., pad:-pad]


def filter_array(kernel: FilterKernel, data: np.ndarray, min_length_factor: int = 1) -> np.ndarray:
    """ndarray（最終軸が時間）にゼロ位相フィルタを掛ける関数.

    引数:
        kernel (FilterKernel): 適用するフィルタ。
        data (np.ndarray): (..., n_samples)。
        min_length_factor (int): n_samples > factor·タップ数 を要求。連続記録は 3、3 秒窓は 1。

    戻り値:
        np.ndarray: 入力と同じ形状。振幅応答は |H|²、位相は 0。

    例外:
        TooShort: 信号長が足りない場合。
    """
    x = np.asarray(data, dtype=float)
    n = x.shape[-1]
    if n <= min_length_factor * kernel.n_taps:
        raise TooShort(
            f"{n} samples is too short for a {kernel.n_taps}-tap filter (need > {min_length_factor}x taps)",
            n_samples=n,
            n_taps=kernel.n_taps,
        )
    return _zero_phase(x, kernel.coefficients)


def filter_zero_phase(kernel: FilterKernel, rec: Recording) -> Recording:
    """記録全体にゼロ位相 FIR フィルタを掛ける（長さ > 3×タップ数が必要）."""
    return rec.with_samples(filter_array(kernel, rec.samples, min_length_factor=3))


def rereference_average(rec: Recording | np.ndarray) -> Recording | np.ndarray:
    """各時刻でチャンネル平均を引く（平均参照）. 冪等."""
    data = rec.samples if isinstance(rec, Recording) else np.asarray(rec, dtype=float)
    if data.shape[0] < 2:
        raise InvariantViolation("average reference needs at least 2 channels", rule="reref.channels")
    out = data - data.mean(axis=0, keepdims=True)
    return rec.with_samples(out) if isinstance(rec, Recording) else out


def interpolation_weights(montage: ElectrodeMontage, bad: Collection[str]) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """不良チャンネルごとの（近傍インデックス, 重み）を返す関数.

    引数:
        montage (ElectrodeMontage): 電極配置。
        bad (Collection[str]): 不良チャンネルのラベル。

    戻り値:
        Dict[int, Tuple[np.ndarray, np.ndarray]]: 行番号 → (最近傍 4 つの良チャンネル行, 正規化済み重み)。

    例外:
        InvariantViolation: モンタージュに無いラベルを含む場合。
        TooFewGoodChannels: 良チャンネルが 4 未満の場合。

    注意:
        重みは大円距離の逆 2 乗（球面スプラインではなく IDW）。距離 0 の近傍があればその値をそのまま使います。
    """
    unknown = set(bad) - set(montage.names)
    if unknown:
        raise InvariantViolation(f"bad channels not in montage: {sorted(unknown)}", rule="session.bad_channels")
    bad_idx = sorted(montage.index(b) for b in bad)
    good_idx = np.array([i for i in range(len(montage)) if i not in set(bad_idx)])
    if good_idx.size < INTERP_NEIGHBOURS:
        raise TooFewGoodChannels(
            f"{good_idx.size} good channels left, need {INTERP_NEIGHBOURS}", good=int(good_idx.size)
        )
    out = {}
    for b in bad_idx:
        dist = montage.distances_from(montage.names[b])[good_idx]
        order = np.argsort(dist, kind="stable")[:INTERP_NEIGHBOURS]
        near, d = good_idx[order], dist[order]
        if np.any(d <= 1e-12):
            w = (d <= 1e-12).astype(float)
        else:
            w = 1.0 / d**INTERP_POWER
        out[b] = (near, w / w.sum())
    return out


def interpolate_channels(
    rec: Recording | np.ndarray, bad: Collection[str], montage: ElectrodeMontage
) -> Recording | np.ndarray:
    """不良チャンネルを近傍 4 電極の逆距離加重平均で置き換える関数.

    良チャンネルの行はビット単位で変更しません。bad が空なら入力と同じ値を返します。
    """
    data = rec.samples if isinstance(rec, Recording) else np.asarray(rec, dtype=float)
    if not bad:
        return rec
    out = np.array(data, copy=True)
    for b, (near, w) in interpolation_weights(montage, bad).items():
        out[b] = w @ data[near]
    return rec.with_samples(out) if isinstance(rec, Recording) else out


# ---------- 前処理チェーン ----------


def _chain_kernels(fs: float, params: PreprocessParams) -> list[FilterKernel]:
    kernels = [design_fir("bandpass", params.l_freq, params.h_freq, fs, params.transition)]
    if params.notch is not None:
        lo, hi = params.notch - params.notch_width / 2, params.notch + params.notch_width / 2
        if hi < fs / 2:
            kernels.append(design_fir("bandstop", lo, hi, fs, params.transition))
        else:
            logger.warning("notch %.1f Hz above Nyquist for fs=%.1f, skipped", params.notch, fs)
    return kernels


def preprocess_array(
    data: np.ndarray,
    fs: float,
    montage: ElectrodeMontage,
    bad: Collection[str],
    params: PreprocessParams = PreprocessParams(),
    min_length_factor: int = 3,
) -> np.ndarray:
    """帯域通過 → ノッチ → 不良チャンネル補間 → 平均参照 を順に適用する."""
    x = np.asarray(data, dtype=float)
    for kernel in _chain_kernels(fs, params):
        x = filter_array(kernel, x, min_length_factor=min_length_factor)
    x = interpolate_channels(x, bad, montage)
    return rereference_average(x)


def preprocess_recording(
    rec: Recording, montage: ElectrodeMontage, bad: Collection[str], params: PreprocessParams = PreprocessParams()
) -> Recording:
    """記録全体の前処理（オフライン経路）."""
    return rec.with_samples(preprocess_array(rec.samples, rec.fs, montage, bad, params, min_length_factor=3))


def preprocess_margin(fs: float, params: PreprocessParams = PreprocessParams()) -> int:
    """前処理チェーン全体の片側の影響範囲（サンプル数）.

    ゼロ位相適用は係数を 2 回畳み込むので、1 つのフィルタは前後に タップ数 − 1 サンプルずつ届きます。
    チェーンでは各フィルタの値を足し合わせます。
    """
    return sum(k.n_taps - 1 for k in _chain_kernels(fs, params))


def preprocess_segment(
    segment: np.ndarray,
    fs: float,
    montage: ElectrodeMontage,
    bad: Collection[str],
    params: PreprocessParams = PreprocessParams(),
    lead: int = 0,
    length: int | None = None,
) -> np.ndarray:
    """記録の一部区間を前処理し、その中の [lead, lead + length) 列を返す関数（ストリーム経路）.

    引数:
        segment (np.ndarray): (channels, samples) の連続区間。
        fs (float): サンプリング周波数。
        montage (ElectrodeMontage): 補間に使う電極配置。
        bad (Collection[str]): 不良チャンネル。
        params (PreprocessParams): 前処理パラメータ。
        lead (int): 取り出す列の先頭（区間内の位置）。
        length (int | None): 取り出す列数。None なら区間の終わりまで。

    戻り値:
        np.ndarray: (channels, length)。

    注意:
        取り出す列の前後に preprocess_margin サンプル以上の余白があれば、記録全体を preprocess_recording
        した結果の同じ列と丸め誤差の範囲で一致します。区間の端が記録の端そのものであれば余白は要りません
        （どちらも同じ反射パディングになるため）。
    """
    x = preprocess_array(segment, fs, montage, bad, params, min_length_factor=1)
    stop = x.shape[-1] if length is None else lead + length
    return x[:, lead:stop]


# ---------- スペクトル ----------


def welch_psd(
    samples: np.ndarray, fs: float, seg_len: int | None = None, overlap_frac: float = 0.5
) -> PsdEstimate:
    """Welch 法による片側 PSD を返す関数.

    引数:
        samples (np.ndarray): (..., n_samples)。1 チャンネルでも複数チャンネルでも可。
        fs (float): サンプリング周波数（Hz）。
        seg_len (int | None): セグメント長（サンプル）。既定は 1 秒分。
        overlap_frac (float): セグメントの重なり率 [0, 1)。

    戻り値:
        PsdEstimate: Σ power·Δf が（平均 0 の定常入力で）分散にほぼ等しくなる密度。

    例外:
        TooShort: 系列長 < seg_len の場合。
        InvalidBand: overlap_frac が範囲外の場合。
    """
    x = np.asarray(samples, dtype=float)
    nperseg = int(seg_len if seg_len is not None else round(fs))
    if x.shape[-1] < nperseg:
        raise TooShort(f"{x.shape[-1]} samples shorter than segment length {nperseg}", n_samples=x.shape[-1])
    if not (0 <= overlap_frac < 1):
        raise InvalidBand(f"overlap_frac must be in [0, 1), got {overlap_frac}", overlap_frac=overlap_frac)
    freqs, power = sps.welch(
        x,
        fs=fs,
        window="hamming",
        nperseg=nperseg,
        noverlap=int(round(overlap_frac * nperseg)),
        detrend="constant",
        scaling="density",
        axis=-1,
    )
    return PsdEstimate(freqs=freqs, power=np.maximum(power, 0.0))


def band_power(psd: PsdEstimate, band: BandDefinition) -> float | np.ndarray:
    """帯域 [lo, hi] で PSD を台形積分した値（µV²）."""
    f = psd.freqs
    if band.lo < f[0] or band.hi > f[-1]:
        raise BandOutOfRange(
            f"band {band.name} {band.lo}-{band.hi} Hz outside PSD range {f[0]}-{f[-1]} Hz", band=band.name
        )
    inner = f[(f > band.lo) & (f < band.hi)]
    grid = np.concatenate([[band.lo], inner, [band.hi]])
    power = np.asarray(psd.power, dtype=float)
    flat = power.reshape(-1, f.size)
    values = np.array([trapezoid(np.interp(grid, f, row), grid) for row in flat])
    values = np.maximum(values, 0.0).reshape(power.shape[:-1])
    return float(values) if values.ndim == 0 else values
