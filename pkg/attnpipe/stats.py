from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from attnpipe.errors import DegenerateVariance, InvalidAlpha, InvariantViolation

# 報告値の再現用（p=0.5, α=0.05）
REPORTED_TEST_SIZES: tuple[int, ...] = (60, 45, 200)


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: float
    p: float

    def as_dict(self) -> dict[str, float]:
        return {"t": self.t, "df": self.df, "p": self.p}


def significance_threshold(n: int, p: float = 0.5, alpha: float = 0.05) -> float:
    """偶然レベルより良いとみなす正解率の下限 p + √(p(1−p)/(n+4))·z_{1−α/2}.

    引数:
        n (int): テスト窓数。
        p (float): 偶然レベルの正解率。
        alpha (float): 有意水準 (0, 1)。

    戻り値:
        float: n=60 で 0.6225、n=45 で 0.64、n=200 で 0.5686。
        n=200 の報告値 0.568（56.8 %）は 0.5686 を小数 3 桁で切り捨てた表記です（四捨五入なら 0.569）。

    例外:
        InvalidAlpha: alpha が (0, 1) に無い場合。
    """
    if not (0.0 < alpha < 1.0):
        raise InvalidAlpha(f"alpha must be in (0, 1), got {alpha}", alpha=alpha)
    if n < 1:
        raise InvariantViolation(f"test count must be >= 1, got {n}", rule="threshold.n")
    z = float(stats.norm.ppf(1.0 - alpha / 2.0))
    return p + float(np.sqrt(p * (1.0 - p) / (n + 4))) * z


def thresholds_table(sizes=REPORTED_TEST_SIZES, p: float = 0.5, alpha: float = 0.05) -> list[dict[str, float]]:
    return [{"n": int(n), "p": p, "alpha": alpha, "threshold": significance_threshold(n, p, alpha)} for n in sizes]


def _sample(a, name: str) -> np.ndarray:
    x = np.asarray(a, dtype=float).ravel()
    if x.size < 2:
        raise InvariantViolation(f"{name} needs at least 2 values", rule="stats.length")
    return x


def _paired(a, b) -> tuple[np.ndarray, np.ndarray]:
    x, y = _sample(a, "a"), _sample(b, "b")
    if x.size != y.size:
        raise InvariantViolation("paired samples must have equal length", rule="stats.paired_length")
    return x, y


def _result(res) -> TTestResult:
    return TTestResult(t=float(res.statistic), df=float(res.df), p=float(res.pvalue))


def welch_ttest(a, b) -> TTestResult:
    """Welch の 2 標本 t 検定（両側、scipy.stats.ttest_ind）. 自由度は Welch–Satterthwaite."""
    x, y = _sample(a, "a"), _sample(b, "b")
    if not x.var(ddof=1) / x.size + y.var(ddof=1) / y.size > 0:
        raise DegenerateVariance("both samples have zero variance")
    return _result(stats.ttest_ind(x, y, equal_var=False))


def paired_ttest(a, b) -> TTestResult:
    """対応のある t 検定（scipy.stats.ttest_rel）. 差の分散が 0 なら（a == b を含む）DegenerateVariance."""
    x, y = _paired(a, b)
    if not (x - y).std(ddof=1) > 0:
        raise DegenerateVariance("differences have zero variance")
    return _result(stats.ttest_rel(x, y))


def pearson_r(a, b) -> float:
    """ピアソンの相関係数（scipy.stats.pearsonr）."""
    x, y = _paired(a, b)
    if not (x.std() > 0 and y.std() > 0):
        raise DegenerateVariance("pearson_r on a constant sample")
    return float(stats.pearsonr(x, y).statistic)
