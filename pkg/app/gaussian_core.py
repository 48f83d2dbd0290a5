"""平均场高斯变分参数模块.

每个标量参数服从独立高斯分布 N(mu, sigma^2)，sigma 以 rho 存储，
sigma = softplus(rho)，并在 1e-8 处截断以保证严格为正。
截断下界同时充当 sigma -> 0+ 的 Dirac 极限。
"""

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.special import expit

from errors import InvalidArgumentError

SIGMA_FLOOR = 1e-8
# softplus(-50) 远小于 SIGMA_FLOOR，sigma 恰为下界且对 rho 的导数为 0
DIRAC_RHO = -50.0


def _as_vector(values, name: str) -> np.ndarray:
    array = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(array)):
        raise InvalidArgumentError(f"{name} 含有非有限值")
    return array


def std_from_rho(rho) -> np.ndarray:
    """sigma = softplus(rho)，下界 1e-8."""
    rho = _as_vector(rho, "rho")
    return np.maximum(np.logaddexp(0.0, rho), SIGMA_FLOOR)


def std_grad_from_rho(rho) -> np.ndarray:
    """d sigma / d rho；截断区域导数为 0."""
    rho = _as_vector(rho, "rho")
    active = np.logaddexp(0.0, rho) >= SIGMA_FLOOR
    return np.where(active, expit(rho), 0.0)


def rho_from_std(sigma) -> np.ndarray:
    """softplus 的反函数；sigma 不超过下界时返回 DIRAC_RHO."""
    sigma = _as_vector(sigma, "sigma")
    if np.any(sigma <= 0.0):
        raise InvalidArgumentError("sigma 必须为正")
    at_floor = sigma <= SIGMA_FLOOR
    safe = np.where(at_floor, 1.0, sigma)
    # softplus^-1(s) = s + log(1 - exp(-s))
    rho = safe + np.log(-np.expm1(-safe))
    return np.where(at_floor, DIRAC_RHO, rho)


@dataclass(frozen=True, eq=False)
class GaussianParamSet:
    """一组独立高斯变分参数 (mu, rho)."""

    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        mu = _as_vector(self.mu, "mu")
        rho = _as_vector(self.rho, "rho")
        if mu.shape != rho.shape:
            raise InvalidArgumentError(f"mu 与 rho 长度不一致: {mu.size} != {rho.size}")
        mu.setflags(write=False)
        rho.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "rho", rho)

    @classmethod
    def from_mu_sigma(cls, mu, sigma) -> "GaussianParamSet":
        return cls(mu=mu, rho=rho_from_std(sigma))

    @classmethod
    def constant(cls, size: int, mu: float, sigma: float) -> "GaussianParamSet":
        """所有坐标相同的参数集，例如初始先验 N(0, 0.1^2)."""
        rho = rho_from_std(np.full(1, sigma))[0]
        return cls(mu=np.full(size, float(mu)), rho=np.full(size, rho))

    @classmethod
    def dirac(cls, mu) -> "GaussianParamSet":
        """以 mu 为中心的 Dirac 极限（sigma 取下界）."""
        mu = _as_vector(mu, "mu")
        return cls(mu=mu, rho=np.full(mu.size, DIRAC_RHO))

    @property
    def sigma(self) -> np.ndarray:
        return std_from_rho(self.rho)

    @property
    def size(self) -> int:
        return int(self.mu.size)

    def __len__(self) -> int:
        return self.size

    def concat(self, other: "GaussianParamSet") -> "GaussianParamSet":
        return GaussianParamSet(
            mu=np.concatenate([self.mu, other.mu]),
            rho=np.concatenate([self.rho, other.rho]),
        )

    def split(self, first: int) -> Tuple["GaussianParamSet", "GaussianParamSet"]:
        if not 0 <= first <= self.size:
            raise InvalidArgumentError(f"切分位置越界: {first}")
        return (
            GaussianParamSet(self.mu[:first], self.rho[:first]),
            GaussianParamSet(self.mu[first:], self.rho[first:]),
        )

    def packed(self) -> np.ndarray:
        """[mu, rho] 拼接成单个向量，供优化器使用."""
        return np.concatenate([self.mu, self.rho])

    @classmethod
    def unpack(cls, vector: np.ndarray) -> "GaussianParamSet":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size % 2:
            raise InvalidArgumentError("打包向量长度必须为偶数")
        half = vector.size // 2
        return cls(mu=vector[:half], rho=vector[half:])

    def identical(self, other: "GaussianParamSet") -> bool:
        """逐位相等."""
        return self.to_bytes() == other.to_bytes()

    def to_bytes(self) -> bytes:
        return self.mu.tobytes() + self.rho.tobytes()


@dataclass(frozen=True, eq=False)
class NoiseDraw:
    """标准正态噪声 eps."""

    eps: np.ndarray

    def __post_init__(self):
        eps = _as_vector(self.eps, "eps")
        eps.setflags(write=False)
        object.__setattr__(self, "eps", eps)

    @classmethod
    def standard(cls, size: int, rng: np.random.Generator) -> "NoiseDraw":
        return cls(rng.standard_normal(size))


def _check_same_length(first: GaussianParamSet, second: GaussianParamSet) -> None:
    if first.size != second.size:
        raise InvalidArgumentError(f"参数集长度不一致: {first.size} != {second.size}")


def sample(params: GaussianParamSet, noise: NoiseDraw) -> np.ndarray:
    """重参数化采样 mu + sigma * eps."""
    if noise.eps.size != params.size:
        raise InvalidArgumentError(f"噪声长度不一致: {noise.eps.size} != {params.size}")
    return params.mu + params.sigma * noise.eps


def kl_diag_gaussian(q: GaussianParamSet, p: GaussianParamSet) -> float:
    """KL[q || p]，对角高斯闭式解（逐坐标求和）."""
    _check_same_length(q, p)
    sigma_q, sigma_p = q.sigma, p.sigma
    terms = (
        np.log(sigma_p / sigma_q)
        + (sigma_q**2 + (q.mu - p.mu) ** 2) / (2.0 * sigma_p**2)
        - 0.5
    )
    return float(np.sum(terms))


def kl_grad(q: GaussianParamSet, p: GaussianParamSet) -> Tuple[np.ndarray, np.ndarray]:
    """KL[q || p] 对 q 的 (mu, rho) 的解析梯度."""
    _check_same_length(q, p)
    sigma_q, sigma_p = q.sigma, p.sigma
    dmu = (q.mu - p.mu) / sigma_p**2
    # q == p 时恰为 0
    dsigma = (sigma_q**2 - sigma_p**2) / (sigma_q * sigma_p**2)
    return dmu, dsigma * std_grad_from_rho(q.rho)


def kl_grad_prior(q: GaussianParamSet, p: GaussianParamSet) -> Tuple[np.ndarray, np.ndarray]:
    """KL[q || p] 对 p 的 (mu, rho) 的解析梯度."""
    _check_same_length(q, p)
    sigma_q, sigma_p = q.sigma, p.sigma
    dmu = (p.mu - q.mu) / sigma_p**2
    dsigma = (sigma_p**2 - sigma_q**2 - (q.mu - p.mu) ** 2) / sigma_p**3
    return dmu, dsigma * std_grad_from_rho(p.rho)


def anchored_mean(rows) -> np.ndarray:
    """按列求均值，写成 首行 + 偏差均值，相同的行求均值后逐位不变."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise InvalidArgumentError("anchored_mean 需要非空的二维数组")
    anchor = rows[0]
    return anchor + np.mean(rows - anchor, axis=0)


def from_sigma_like(mu, sigma, anchor: GaussianParamSet) -> GaussianParamSet:
    """由 (mu, sigma) 构造参数集；sigma 与 anchor 逐位相等的坐标沿用 anchor.rho."""
    sigma = _as_vector(sigma, "sigma")
    if sigma.size != anchor.size:
        raise InvalidArgumentError(f"sigma 长度 {sigma.size} != {anchor.size}")
    rho = np.where(sigma == anchor.sigma, anchor.rho, rho_from_std(sigma))
    return GaussianParamSet(mu=mu, rho=rho)


def concat_all(parts: Sequence[GaussianParamSet]) -> GaussianParamSet:
    return GaussianParamSet(
        mu=np.concatenate([part.mu for part in parts]),
        rho=np.concatenate([part.rho for part in parts]),
    )
