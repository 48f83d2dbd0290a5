"""贝叶斯多层感知机模块.

权重与偏置都是高斯变分变量，按层划分为共享因子 (theta, 参数 zeta)
和个性化因子 (phi_i, 参数 eta_i)。

规范参数顺序：按层排列，每层先权重后偏置，权重按行优先展开，
形状为 (fan_in, fan_out)。噪声按此顺序整体抽取后再分到两组因子。
"""

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from config import Mode
from errors import InvalidArgumentError
from gaussian_core import (
    GaussianParamSet,
    NoiseDraw,
    kl_diag_gaussian,
    kl_grad,
    sample,
    std_grad_from_rho,
)

SHARED = "shared"
PERSONALIZED = "personalized"

MU_INIT_STD = 0.1
SIGMA_INIT = 0.05


@dataclass(frozen=True)
class LayerSlice:
    """一层在规范参数向量中的位置."""

    fan_in: int
    fan_out: int
    weight_start: int
    bias_start: int
    tag: str

    @property
    def end(self) -> int:
        return self.bias_start + self.fan_out


@dataclass(frozen=True, eq=False)
class FactorLayout:
    """参数到共享/个性化因子的划分."""

    layer_sizes: Tuple[int, ...]
    assignment: Tuple[str, ...]
    layers: Tuple[LayerSlice, ...] = field(init=False, repr=False)
    personal_index: np.ndarray = field(init=False, repr=False)
    shared_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        sizes = tuple(int(size) for size in self.layer_sizes)
        assignment = tuple(self.assignment)
        if len(sizes) < 2:
            raise InvalidArgumentError("layer_sizes 至少需要输入维度和输出维度")
        if any(size < 1 for size in sizes):
            raise InvalidArgumentError(f"层宽必须为正: {sizes}")
        if len(assignment) != len(sizes) - 1:
            raise InvalidArgumentError("assignment 长度必须等于层数")
        if any(tag not in (SHARED, PERSONALIZED) for tag in assignment):
            raise InvalidArgumentError(f"未知的因子标签: {assignment}")
        if SHARED not in assignment:
            raise InvalidArgumentError("至少需要一层共享因子")

        layers = []
        offset = 0
        personal, shared = [], []
        for fan_in, fan_out, tag in zip(sizes[:-1], sizes[1:], assignment):
            layer = LayerSlice(fan_in, fan_out, offset, offset + fan_in * fan_out, tag)
            (personal if tag == PERSONALIZED else shared).append(np.arange(offset, layer.end))
            layers.append(layer)
            offset = layer.end

        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "assignment", assignment)
        object.__setattr__(self, "layers", tuple(layers))
        object.__setattr__(self, "personal_index", _join_index(personal))
        object.__setattr__(self, "shared_index", _join_index(shared))

    @classmethod
    def for_mode(cls, layer_sizes: Sequence[int], mode: Mode) -> "FactorLayout":
        """按训练模式给出默认划分.

        bpfed/fedper/fedrep: 最后一层个性化；lgfedavg: 相反；fedavg: 全部共享。
        """
        count = len(layer_sizes) - 1
        if count < 1:
            raise InvalidArgumentError("layer_sizes 至少需要输入维度和输出维度")
        if mode == Mode.FEDAVG:
            assignment = (SHARED,) * count
        elif mode == Mode.LGFEDAVG:
            if count < 2:
                raise InvalidArgumentError("lgfedavg 需要至少一个隐藏层")
            assignment = (PERSONALIZED,) * (count - 1) + (SHARED,)
        else:
            if count < 2:
                raise InvalidArgumentError(f"{mode.value} 需要至少一个隐藏层")
            assignment = (SHARED,) * (count - 1) + (PERSONALIZED,)
        return cls(tuple(layer_sizes), assignment)

    @property
    def t1(self) -> int:
        return int(self.personal_index.size)

    @property
    def t2(self) -> int:
        return int(self.shared_index.size)

    @property
    def total(self) -> int:
        return self.layers[-1].end

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def class_count(self) -> int:
        return self.layer_sizes[-1]

    def assemble(self, personal: np.ndarray, shared: np.ndarray) -> np.ndarray:
        """由两组因子拼出规范顺序的完整向量."""
        if personal.shape[-1] != self.t1 or shared.shape[-1] != self.t2:
            raise InvalidArgumentError("因子长度与布局不一致")
        full = np.empty(personal.shape[:-1] + (self.total,), dtype=np.float64)
        full[..., self.personal_index] = personal
        full[..., self.shared_index] = shared
        return full

    def split(self, full: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if full.shape[-1] != self.total:
            raise InvalidArgumentError("完整参数向量长度与布局不一致")
        return full[..., self.personal_index], full[..., self.shared_index]


def _join_index(parts: List[np.ndarray]) -> np.ndarray:
    if not parts:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate(parts).astype(np.int64)


@dataclass(frozen=True, eq=False)
class PriorSnapshot:
    """连续先验 pi(phi_i^{t-1}, theta^t)."""

    personalized_prior: GaussianParamSet
    shared_prior: GaussianParamSet

    def joint(self) -> GaussianParamSet:
        return self.personalized_prior.concat(self.shared_prior)

    def to_bytes(self) -> bytes:
        return self.personalized_prior.to_bytes() + self.shared_prior.to_bytes()


@dataclass(frozen=True, eq=False)
class BayesMLP:
    """变分参数 (eta_i, zeta) 与其布局."""

    layout: FactorLayout
    shared: GaussianParamSet
    personalized: GaussianParamSet

    def __post_init__(self):
        if self.shared.size != self.layout.t2:
            raise InvalidArgumentError(f"共享参数长度 {self.shared.size} != t2 {self.layout.t2}")
        if self.personalized.size != self.layout.t1:
            raise InvalidArgumentError(
                f"个性化参数长度 {self.personalized.size} != t1 {self.layout.t1}"
            )

    def joint(self) -> GaussianParamSet:
        """按 (个性化, 共享) 顺序拼接，与 PriorSnapshot.joint 对齐."""
        return self.personalized.concat(self.shared)

    def with_params(
        self,
        shared: Optional[GaussianParamSet] = None,
        personalized: Optional[GaussianParamSet] = None,
    ) -> "BayesMLP":
        return replace(
            self,
            shared=self.shared if shared is None else shared,
            personalized=self.personalized if personalized is None else personalized,
        )

    def full_mu(self) -> np.ndarray:
        return self.layout.assemble(self.personalized.mu, self.shared.mu)

    def full_sigma(self) -> np.ndarray:
        return self.layout.assemble(self.personalized.sigma, self.shared.sigma)

    def full_rho(self) -> np.ndarray:
        return self.layout.assemble(self.personalized.rho, self.shared.rho)

    def full(self) -> GaussianParamSet:
        """规范顺序的完整参数集."""
        return GaussianParamSet(mu=self.full_mu(), rho=self.full_rho())


@dataclass
class ModelGradient:
    """目标函数对两组因子 (mu, rho) 的梯度."""

    value: float
    personal_mu: np.ndarray
    personal_rho: np.ndarray
    shared_mu: np.ndarray
    shared_rho: np.ndarray

    def personal_packed(self) -> np.ndarray:
        return np.concatenate([self.personal_mu, self.personal_rho])

    def shared_packed(self) -> np.ndarray:
        return np.concatenate([self.shared_mu, self.shared_rho])

    def max_abs(self) -> float:
        parts = [self.personal_mu, self.personal_rho, self.shared_mu, self.shared_rho]
        sizes = [part for part in parts if part.size]
        if not sizes:
            return 0.0
        return float(max(np.max(np.abs(part)) for part in sizes))

    def is_finite(self) -> bool:
        parts = [self.personal_mu, self.personal_rho, self.shared_mu, self.shared_rho]
        return bool(np.isfinite(self.value) and all(np.all(np.isfinite(p)) for p in parts))


def build(layout: FactorLayout, init_seed: int) -> BayesMLP:
    """初始化模型：mu ~ N(0, 0.1^2)，sigma = 0.05."""
    rng = np.random.default_rng(init_seed)
    mu = rng.normal(0.0, MU_INIT_STD, size=layout.total)
    personal_mu, shared_mu = layout.split(mu)
    return BayesMLP(
        layout=layout,
        shared=GaussianParamSet.from_mu_sigma(shared_mu, np.full(layout.t2, SIGMA_INIT)),
        personalized=GaussianParamSet.from_mu_sigma(personal_mu, np.full(layout.t1, SIGMA_INIT)),
    )


def draw_noise(layout: FactorLayout, count: int, rng: np.random.Generator) -> np.ndarray:
    """抽取 count 份规范顺序的标准正态噪声，形状 (count, total)."""
    return rng.standard_normal((count, layout.total))


def _check_input(layout: FactorLayout, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layout.input_dim:
        raise InvalidArgumentError(f"输入形状 {x.shape} 与输入维度 {layout.input_dim} 不匹配")
    return x


def _forward_cached(layout: FactorLayout, weights: np.ndarray, x: np.ndarray):
    inputs, pre_activations = [], []
    h = x
    last = len(layout.layers) - 1
    for index, layer in enumerate(layout.layers):
        w = weights[layer.weight_start:layer.bias_start].reshape(layer.fan_in, layer.fan_out)
        b = weights[layer.bias_start:layer.end]
        inputs.append(h)
        z = h @ w + b
        pre_activations.append(z)
        h = z if index == last else np.maximum(z, 0.0)
    return h, inputs, pre_activations


def _backward(
    layout: FactorLayout,
    weights: np.ndarray,
    inputs: List[np.ndarray],
    pre_activations: List[np.ndarray],
    dlogits: np.ndarray,
) -> np.ndarray:
    grad = np.zeros(layout.total)
    delta = dlogits
    for index in range(len(layout.layers) - 1, -1, -1):
        layer = layout.layers[index]
        grad[layer.weight_start:layer.bias_start] = (inputs[index].T @ delta).reshape(-1)
        grad[layer.bias_start:layer.end] = delta.sum(axis=0)
        if index:
            w = weights[layer.weight_start:layer.bias_start].reshape(layer.fan_in, layer.fan_out)
            delta = (delta @ w.T) * (pre_activations[index - 1] > 0.0)
    return grad


def forward(model: BayesMLP, weights: np.ndarray, x: np.ndarray) -> np.ndarray:
    """给定一组具体权重（规范顺序）计算 logits；隐藏层 ReLU，输出层恒等."""
    layout = model.layout
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (layout.total,):
        raise InvalidArgumentError(f"权重长度 {weights.shape} 与布局 {layout.total} 不匹配")
    logits, _, _ = _forward_cached(layout, weights, _check_input(layout, x))
    return logits


def nll_and_grad(
    layout: FactorLayout, weights: np.ndarray, x: np.ndarray, y: np.ndarray, scale: float
) -> Tuple[float, np.ndarray]:
    """scale * 批内负对数似然之和，以及对规范权重的梯度."""
    logits, inputs, pre_activations = _forward_cached(layout, weights, x)
    rows = np.arange(y.size)
    value = -float(np.sum(log_softmax(logits, axis=1)[rows, y]))
    dlogits = softmax(logits, axis=1)
    dlogits[rows, y] -= 1.0
    grad = _backward(layout, weights, inputs, pre_activations, scale * dlogits)
    return scale * value, grad


def _sample_weights(full: GaussianParamSet, eps: np.ndarray) -> np.ndarray:
    return sample(full, NoiseDraw(eps))


def _resolve_noise(model: BayesMLP, M: int, rng, noise: Optional[np.ndarray]) -> np.ndarray:
    if noise is None:
        if rng is None:
            raise InvalidArgumentError("需要提供 rng 或固定噪声")
        return draw_noise(model.layout, M, rng)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (M, model.layout.total):
        raise InvalidArgumentError(f"噪声形状 {noise.shape} 应为 {(M, model.layout.total)}")
    return noise


def _check_batch(model: BayesMLP, batch) -> Tuple[np.ndarray, np.ndarray]:
    x, y = batch
    x = _check_input(model.layout, x)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.size != x.shape[0]:
        raise InvalidArgumentError(f"标签数 {y.size} 与样本数 {x.shape[0]} 不一致")
    if y.size and (y.min() < 0 or y.max() >= model.layout.class_count):
        raise InvalidArgumentError("标签超出类别范围")
    return x, y


def mc_nll(model: BayesMLP, batch, M: int, rng=None, noise: Optional[np.ndarray] = None) -> float:
    """蒙特卡洛负对数似然，对 M 个样本和批内样本取平均."""
    if M < 1:
        raise InvalidArgumentError(f"M 必须 >= 1，实际为 {M}")
    x, y = _check_batch(model, batch)
    if not y.size:
        raise InvalidArgumentError("批为空")
    draws = _resolve_noise(model, M, rng, noise)
    rows = np.arange(y.size)
    full = model.full()
    total = 0.0
    for eps in draws:
        logits, _, _ = _forward_cached(model.layout, _sample_weights(full, eps), x)
        total -= float(np.sum(log_softmax(logits, axis=1)[rows, y]))
    return total / (M * y.size)


def objective_qbar(model: BayesMLP, prior: PriorSnapshot) -> float:
    """全局对照目标：只有 KL 项，不读取数据."""
    joint_prior = prior.joint()
    if joint_prior.size != model.layout.total:
        raise InvalidArgumentError("先验长度与模型不一致")
    return kl_diag_gaussian(model.joint(), joint_prior)


def _check_sizes(batch_size: int, n: int, b: int) -> None:
    if b != batch_size:
        raise InvalidArgumentError(f"b={b} 与批大小 {batch_size} 不一致")
    if b < 1 or n < b:
        raise InvalidArgumentError(f"需要 n >= b >= 1，实际 n={n}, b={b}")


def objective_q(
    model: BayesMLP,
    prior: PriorSnapshot,
    batch,
    n: int,
    b: int,
    M: int,
    rng=None,
    noise: Optional[np.ndarray] = None,
    kl_weight: float = 1.0,
) -> float:
    """局部目标：(n/b) * 批内 MC 负对数似然之和 + KL."""
    if M < 1:
        raise InvalidArgumentError(f"M 必须 >= 1，实际为 {M}")
    x, y = _check_batch(model, batch)
    _check_sizes(y.size, n, b)
    return n * mc_nll(model, (x, y), M, rng=rng, noise=noise) + kl_weight * objective_qbar(
        model, prior
    )


def grad_objective(
    model: BayesMLP,
    prior: PriorSnapshot,
    batch,
    n: int,
    b: int,
    M: int,
    rng=None,
    noise: Optional[np.ndarray] = None,
    kl_weight: float = 1.0,
) -> ModelGradient:
    """局部目标的重参数化梯度；似然项用同一组噪声，KL 项用解析梯度."""
    if M < 1:
        raise InvalidArgumentError(f"M 必须 >= 1，实际为 {M}")
    x, y = _check_batch(model, batch)
    _check_sizes(y.size, n, b)
    layout = model.layout
    draws = _resolve_noise(model, M, rng, noise)

    full = model.full()
    dsigma_drho = layout.assemble(
        std_grad_from_rho(model.personalized.rho), std_grad_from_rho(model.shared.rho)
    )
    scale = n / (b * M)
    value = 0.0
    dmu = np.zeros(layout.total)
    deps = np.zeros(layout.total)
    for eps in draws:
        nll, grad_w = nll_and_grad(layout, _sample_weights(full, eps), x, y, scale)
        value += nll
        dmu += grad_w
        deps += grad_w * eps
    drho = deps * dsigma_drho

    personal_mu, shared_mu = layout.split(dmu)
    personal_rho, shared_rho = layout.split(drho)
    if kl_weight:
        joint_prior = prior.joint()
        value += kl_weight * kl_diag_gaussian(model.joint(), joint_prior)
        kl_mu, kl_rho = kl_grad(model.joint(), joint_prior)
        t1 = layout.t1
        personal_mu = personal_mu + kl_weight * kl_mu[:t1]
        personal_rho = personal_rho + kl_weight * kl_rho[:t1]
        shared_mu = shared_mu + kl_weight * kl_mu[t1:]
        shared_rho = shared_rho + kl_weight * kl_rho[t1:]
    return ModelGradient(value, personal_mu, personal_rho, shared_mu, shared_rho)


def point_objective_grad(
    layout: FactorLayout, personal: np.ndarray, shared: np.ndarray, batch, n: int, b: int
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Dirac 极限下的确定性目标 (n/b) * 批内负对数似然之和及其梯度."""
    x, y = batch
    _check_sizes(len(y), n, b)
    value, grad = nll_and_grad(layout, layout.assemble(personal, shared), x, y, n / b)
    personal_grad, shared_grad = layout.split(grad)
    return value, personal_grad, shared_grad


def predict(model: BayesMLP, x: np.ndarray, M_test: int, rng=None, noise=None) -> np.ndarray:
    """贝叶斯模型平均：M_test 次采样的 softmax 均值."""
    if M_test < 1:
        raise InvalidArgumentError(f"M_test 必须 >= 1，实际为 {M_test}")
    x = _check_input(model.layout, x)
    draws = _resolve_noise(model, M_test, rng, noise)
    probs = np.zeros((x.shape[0], model.layout.class_count))
    full = model.full()
    for eps in draws:
        logits, _, _ = _forward_cached(model.layout, _sample_weights(full, eps), x)
        probs += softmax(logits, axis=1)
    return probs / M_test
