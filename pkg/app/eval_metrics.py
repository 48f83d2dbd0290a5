"""评估指标模块：准确率、负对数似然与校准指标 (ECE / MCE / Brier)."""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from errors import InvalidArgumentError

RELIABILITY_HEADER = ("lo", "hi", "count", "mean_confidence", "accuracy")


@dataclass(frozen=True)
class CalibrationBin:
    """置信度区间 (lo, hi] 内的统计；空区间的均值与准确率为 None."""

    lo: float
    hi: float
    count: int
    mean_confidence: Optional[float]
    accuracy: Optional[float]


@dataclass(frozen=True)
class CalibrationReport:
    bins: Tuple[CalibrationBin, ...]
    ece: float
    mce: float
    brier: float

    @property
    def sample_count(self) -> int:
        return sum(b.count for b in self.bins)


def _check(probs, y) -> Tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if probs.ndim != 2 or probs.shape[0] != y.size:
        raise InvalidArgumentError(f"概率矩阵形状 {probs.shape} 与标签数 {y.size} 不匹配")
    if y.size and (y.min() < 0 or y.max() >= probs.shape[1]):
        raise InvalidArgumentError("标签超出类别范围")
    return probs, y


def accuracy(probs, y) -> float:
    """argmax 预测的准确率；并列时取最小类别下标."""
    probs, y = _check(probs, y)
    if not y.size:
        raise InvalidArgumentError("样本为空")
    return float(np.mean(np.argmax(probs, axis=1) == y))


def mean_nll(probs, y, floor: float = 1e-12) -> float:
    """平均负对数预测概率."""
    probs, y = _check(probs, y)
    if not y.size:
        raise InvalidArgumentError("样本为空")
    picked = probs[np.arange(y.size), y]
    return float(-np.mean(np.log(np.maximum(picked, floor))))


def calibration(probs, y, n_bins: int = 10) -> CalibrationReport:
    """等宽分箱的校准报告，样本落入第 ceil(conf * n_bins) 个区间."""
    if n_bins < 1:
        raise InvalidArgumentError(f"n_bins 必须 >= 1，实际为 {n_bins}")
    probs, y = _check(probs, y)
    n = y.size
    if not n:
        raise InvalidArgumentError("样本为空")

    confidence = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == y).astype(np.float64)
    bin_index = np.clip(np.ceil(confidence * n_bins).astype(np.int64) - 1, 0, n_bins - 1)

    bins: List[CalibrationBin] = []
    ece = 0.0
    mce = 0.0
    for k in range(n_bins):
        members = bin_index == k
        count = int(members.sum())
        lo, hi = k / n_bins, (k + 1) / n_bins
        if not count:
            bins.append(CalibrationBin(lo, hi, 0, None, None))
            continue
        mean_conf = float(confidence[members].mean())
        acc = float(correct[members].mean())
        gap = abs(acc - mean_conf)
        ece += count / n * gap
        mce = max(mce, gap)
        bins.append(CalibrationBin(lo, hi, count, mean_conf, acc))

    onehot = np.zeros_like(probs)
    onehot[np.arange(n), y] = 1.0
    brier = float(np.mean(np.sum((probs - onehot) ** 2, axis=1)))
    return CalibrationReport(bins=tuple(bins), ece=ece, mce=mce, brier=brier)


def _cell(value: Optional[float]) -> str:
    return "" if value is None else format(value, ".9g")


def reliability_table(report: CalibrationReport) -> List[Tuple[str, ...]]:
    """每个分箱一行: lo, hi, count, mean_confidence, accuracy."""
    return [
        (_cell(b.lo), _cell(b.hi), str(b.count), _cell(b.mean_confidence), _cell(b.accuracy))
        for b in report.bins
    ]
