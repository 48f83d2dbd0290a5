"""泛化界诊断模块.

可计算的界项 (r_n, eps_n)、最优先验方差 sigma*^2、使平均 KL 最小的
最优先验聚合规则，以及回归似然下的 Hellinger 距离估计。所有对数均为自然对数。
"""

import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence

import numpy as np

from errors import DomainError, InvalidArgumentError
from gaussian_core import (
    GaussianParamSet,
    anchored_mean,
    from_sigma_like,
    kl_diag_gaussian,
)


@dataclass(frozen=True)
class BoundInputs:
    """界项的输入：网络结构、因子数、样本数与常数."""

    L: int
    K: int
    e0: int
    T1: int
    T2: int
    n: int
    N: int
    B: float = 1.0
    alpha: float = 1.0
    delta: float = 1.1
    sigma_eps: float = 1.0

    def __post_init__(self):
        if self.L < 0 or self.K < 1 or self.e0 < 1 or self.N < 1 or self.n < 0:
            raise InvalidArgumentError(f"结构参数非法: {self}")
        if self.T1 < 0 or self.T2 < 0 or self.T1 + self.T2 < 1:
            raise InvalidArgumentError(f"因子数非法: T1={self.T1}, T2={self.T2}")
        if self.B <= 0 or self.alpha <= 0 or self.sigma_eps <= 0:
            raise InvalidArgumentError("B、alpha、sigma_eps 必须为正")
        if self.delta <= 1:
            raise InvalidArgumentError(f"delta 必须大于 1，实际为 {self.delta}")

    @property
    def T(self) -> int:
        return self.T1 + self.T2


def _width_term(inp: BoundInputs) -> float:
    return math.log(inp.e0 * math.sqrt(inp.n / inp.T))


def r_n(inp: BoundInputs) -> float:
    """变分近似的估计误差项."""
    if inp.n == 0:
        raise InvalidArgumentError("n 必须为正")
    return (inp.L + 1) * inp.T / inp.n * math.log(inp.N) + inp.T / inp.n * _width_term(inp)


def eps_n(inp: BoundInputs) -> float:
    """统计估计量的误差项，log^delta(n) 取 (log n)^delta."""
    if inp.n < 2:
        raise InvalidArgumentError(f"eps_n 需要 n >= 2，实际为 {inp.n}")
    radicand = inp.T * ((inp.L + 1) * math.log(inp.K) + _width_term(inp))
    if radicand < 0:
        raise DomainError(f"eps_n 根号内为负: {radicand:.6g}")
    return inp.alpha / math.sqrt(inp.n) * math.log(inp.n) ** inp.delta * math.sqrt(radicand)


def sigma_star_sq(inp: BoundInputs) -> float:
    """最优后验的公共方差."""
    bk = inp.B * inp.K
    if bk <= 1:
        raise DomainError(f"需要 B*K > 1，实际为 {bk}")
    if inp.n == 0:
        raise InvalidArgumentError("n 必须为正")
    bracket = (
        (inp.e0 + bk / (bk - 1)) ** 2
        + 1.0 / ((2 * bk) ** 2 - 1)
        + 2.0 / (2 * bk - 1) ** 2
    )
    return (
        inp.T
        / (8.0 * inp.n)
        / math.log(3 * inp.e0 * inp.K)
        * (2 * bk) ** (-2 * (inp.L + 1))
        / bracket
    )


def _check_posteriors(posteriors: Sequence[GaussianParamSet]) -> None:
    if not posteriors:
        raise InvalidArgumentError("后验列表为空")
    size = posteriors[0].size
    if any(p.size != size for p in posteriors):
        raise InvalidArgumentError("后验长度不一致")


def optimal_prior(posteriors: Sequence[GaussianParamSet]) -> GaussianParamSet:
    """使平均 KL[q_i || pi] 最小的先验.

    mu* = 各客户端均值的平均；sigma*^2 = mean(sigma_i^2 + mu_i^2) - mu*^2，
    这里写成 mean(sigma_i^2) + mean((mu_i - mu*)^2)。
    """
    _check_posteriors(posteriors)
    mus = np.stack([p.mu for p in posteriors])
    variances = np.stack([p.sigma**2 for p in posteriors])
    mu_star = anchored_mean(mus)
    var_star = anchored_mean(variances) + np.mean((mus - mu_star) ** 2, axis=0)
    first = posteriors[0]
    sigma_star = np.where(var_star == first.sigma**2, first.sigma, np.sqrt(var_star))
    return from_sigma_like(mu_star, sigma_star, first)


def avg_kl_to_prior(posteriors: Sequence[GaussianParamSet], prior: GaussianParamSet) -> float:
    _check_posteriors(posteriors)
    return float(np.mean([kl_diag_gaussian(p, prior) for p in posteriors]))


def hellinger_sq_estimate(f_pred, f_true, sigma_eps: float) -> float:
    """同方差高斯回归似然下的平方 Hellinger 距离，逐项求均值."""
    if sigma_eps <= 0:
        raise InvalidArgumentError(f"sigma_eps 必须为正，实际为 {sigma_eps}")
    f_pred = np.asarray(f_pred, dtype=np.float64).reshape(-1)
    f_true = np.asarray(f_true, dtype=np.float64).reshape(-1)
    if f_pred.shape != f_true.shape or not f_pred.size:
        raise InvalidArgumentError(f"长度不一致或为空: {f_pred.size} != {f_true.size}")
    return float(np.mean(1.0 - np.exp(-((f_pred - f_true) ** 2) / (8.0 * sigma_eps**2))))


def optimal_posterior(centres, inp: BoundInputs) -> GaussianParamSet:
    """以给定点估计为均值、方差为 sigma*^2 的后验."""
    centres = np.asarray(centres, dtype=np.float64).reshape(-1)
    sigma = math.sqrt(sigma_star_sq(inp))
    return GaussianParamSet.from_mu_sigma(centres, np.full(centres.size, sigma))


def bound_inputs_for(
    layer_sizes: Sequence[int],
    t1: int,
    t2: int,
    n: int,
    N: int,
    B: float = 1.0,
    alpha: float = 1.0,
    delta: float = 1.1,
    sigma_eps: float = 1.0,
) -> BoundInputs:
    """由网络层宽构造 BoundInputs；K 取最大隐藏层宽，无隐藏层时为 1."""
    hidden = list(layer_sizes[1:-1])
    return BoundInputs(
        L=len(hidden),
        K=max(hidden) if hidden else 1,
        e0=int(layer_sizes[0]),
        T1=t1,
        T2=t2,
        n=n,
        N=N,
        B=B,
        alpha=alpha,
        delta=delta,
        sigma_eps=sigma_eps,
    )


def _guarded(fn, inp: BoundInputs) -> Optional[float]:
    try:
        return fn(inp)
    except (DomainError, InvalidArgumentError):
        return None


def theory_report(
    inp: BoundInputs, personal_posteriors: Sequence[GaussianParamSet] = ()
) -> Dict[str, Any]:
    """写入运行清单的诊断块；在给定输入下无定义的项记为 None."""
    report: Dict[str, Any] = {
        "inputs": {
            "L": inp.L,
            "K": inp.K,
            "e0": inp.e0,
            "T1": inp.T1,
            "T2": inp.T2,
            "n": inp.n,
            "N": inp.N,
            "B": inp.B,
            "alpha": inp.alpha,
            "delta": inp.delta,
            "sigma_eps": inp.sigma_eps,
        },
        "r_n": _guarded(r_n, inp),
        "eps_n": _guarded(eps_n, inp),
        "sigma_star_sq": _guarded(sigma_star_sq, inp),
        "avg_kl_to_optimal_prior": None,
    }
    if personal_posteriors and personal_posteriors[0].size:
        prior = optimal_prior(personal_posteriors)
        report["avg_kl_to_optimal_prior"] = avg_kl_to_prior(personal_posteriors, prior)
    return report
