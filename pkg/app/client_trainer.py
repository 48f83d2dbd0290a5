"""客户端本地训练模块.

每个被采样的客户端在一轮内执行 R 个 epoch 的小批量 Adam 更新：
主参数集 (eta, zeta) 优化带 KL 的目标，影子参数集 (eta_bar, zeta_bar)
只由 KL 梯度驱动，其共享部分作为上传包。
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from bayes_mlp import (
    BayesMLP,
    FactorLayout,
    PriorSnapshot,
    draw_noise,
    grad_objective,
    point_objective_grad,
)
from config import DIRAC_MODES, Mode, RunConfig, UploadRule
from errors import EmptyDataError, InvalidArgumentError, TrainingDivergedError
from gaussian_core import GaussianParamSet, kl_grad, kl_grad_prior
from rng import rng_stream

logger = logging.getLogger(__name__)

PERSONAL = "personal"
SHARED = "shared"

TraceFn = Callable[[int, np.ndarray, np.ndarray], None]


class TrainConfig(BaseModel):
    """本地训练超参数."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    R: int = Field(10, ge=0, description="本地训练 epoch 数")
    b: int = Field(50, ge=1, description="小批量大小")
    M: int = Field(1, ge=1, description="蒙特卡洛采样数")
    lr: float = Field(1e-3, gt=0, description="学习率")
    mode: Mode = Field(Mode.BPFED, description="训练模式")
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    kl_weight: float = Field(1.0, ge=0, description="目标函数中 KL 项的系数")
    upload_rule: UploadRule = Field(UploadRule.FOLLOW_POSTERIOR, description="影子参数集的更新规则")
    grad_limit: float = Field(1e6, gt=0, description="梯度发散阈值")

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> "TrainConfig":
        return cls(
            R=cfg.local_epochs,
            b=cfg.batch,
            M=cfg.mc_samples,
            lr=cfg.lr,
            mode=cfg.mode,
            kl_weight=cfg.kl_weight,
            upload_rule=cfg.upload_rule,
        )


@dataclass
class AdamState:
    """Adam 一阶/二阶矩与步数."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size))


@dataclass
class ClientState:
    """单个客户端在一轮内的状态，由一个 worker 独占."""

    client_id: int
    layout: FactorLayout
    eta: GaussianParamSet
    shard: object
    run_seed: int = 0
    round: int = 0
    opt_state: Dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        if self.eta.size != self.layout.t1:
            raise InvalidArgumentError(
                f"客户端 {self.client_id} 的个性化参数长度 {self.eta.size} != t1 {self.layout.t1}"
            )

    def rng_stream(self, purpose: str) -> np.random.Generator:
        """由 (run_seed, purpose, client_id, round) 派生的随机数流."""
        return rng_stream(self.run_seed, purpose, self.client_id, self.round)


@dataclass(frozen=True, eq=False)
class UploadPacket:
    """上传到服务器的内容，只含共享因子."""

    client_id: int
    zeta_bar: GaussianParamSet

    def __post_init__(self):
        if not (np.all(np.isfinite(self.zeta_bar.mu)) and np.all(np.isfinite(self.zeta_bar.rho))):
            raise InvalidArgumentError(f"客户端 {self.client_id} 的上传包含非有限值")


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    opt_state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[np.ndarray, AdamState]:
    """带偏差修正的 Adam 单步，返回新参数与新状态."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != opt_state.m.shape:
        raise InvalidArgumentError(
            f"Adam 形状不匹配: params {params.shape}, grads {grads.shape}, state {opt_state.m.shape}"
        )
    t = opt_state.t + 1
    m = beta1 * opt_state.m + (1.0 - beta1) * grads
    v = beta2 * opt_state.v + (1.0 - beta2) * grads**2
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    updated = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return updated, AdamState(m=m, v=v, t=t)


def _phases(mode: Mode) -> List[Tuple[str, ...]]:
    """fedrep 先只训个性化部分再只训共享部分，其余模式同时更新."""
    if mode == Mode.FEDREP:
        return [(PERSONAL,), (SHARED,)]
    return [(PERSONAL, SHARED)]


def _minibatches(rng: np.random.Generator, n: int, b: int) -> Iterator[np.ndarray]:
    """一个 epoch 内的小批量索引；不足一批的尾部丢弃."""
    order = rng.permutation(n)
    for start in range(0, n - b + 1, b):
        yield order[start:start + b]


def _train_size(state: ClientState) -> int:
    n = int(state.shard.train.size)
    if n == 0:
        raise EmptyDataError(f"客户端 {state.client_id} 的训练集为空")
    return n


def _guard(state: ClientState, step: int, grads: Sequence[np.ndarray], value: float, limit: float):
    if not np.isfinite(value):
        raise TrainingDivergedError(state.client_id, state.round, step, "目标函数非有限")
    for grad in grads:
        if grad.size == 0:
            continue
        if not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(state.client_id, state.round, step, "梯度非有限")
        peak = float(np.max(np.abs(grad)))
        if peak > limit:
            raise TrainingDivergedError(
                state.client_id, state.round, step, f"梯度绝对值 {peak:.3g} 超过 {limit:.3g}"
            )


def _check_lengths(layout: FactorLayout, personal_size: int, shared_size: int) -> None:
    if personal_size != layout.t1 or shared_size != layout.t2:
        raise InvalidArgumentError(
            f"参数长度 ({personal_size}, {shared_size}) 与布局 ({layout.t1}, {layout.t2}) 不一致"
        )


def _shadow_grad(
    main: BayesMLP, shadow: BayesMLP, prior: PriorSnapshot, rule: UploadRule
) -> Tuple[np.ndarray, np.ndarray]:
    """影子参数集的 KL 梯度，返回 (个性化打包梯度, 共享打包梯度)."""
    if rule == UploadRule.ANCHOR_PRIOR:
        dmu, drho = kl_grad(shadow.joint(), prior.joint())
    else:
        dmu, drho = kl_grad_prior(main.joint(), shadow.joint())
    t1 = main.layout.t1
    return (
        np.concatenate([dmu[:t1], drho[:t1]]),
        np.concatenate([dmu[t1:], drho[t1:]]),
    )


def _adam_group(
    state: ClientState, key: str, params: GaussianParamSet, grad: np.ndarray, cfg: TrainConfig
) -> GaussianParamSet:
    if key not in state.opt_state:
        state.opt_state[key] = AdamState.zeros(2 * params.size)
    packed, state.opt_state[key] = adam_step(
        params.packed(), grad, state.opt_state[key], cfg.lr, cfg.beta1, cfg.beta2, cfg.eps
    )
    return GaussianParamSet.unpack(packed)


def train_variational(
    state: ClientState,
    eta_init: GaussianParamSet,
    zeta_init: GaussianParamSet,
    prior: PriorSnapshot,
    cfg: TrainConfig,
    phases: Optional[List[Tuple[str, ...]]] = None,
    with_shadow: bool = True,
    trace: Optional[TraceFn] = None,
) -> Tuple[BayesMLP, BayesMLP]:
    """变分训练循环；phases 中未列出的参数组保持冻结.

    返回 (主参数集, 影子参数集)。影子参数集不读取数据。
    """
    layout = state.layout
    _check_lengths(layout, eta_init.size, zeta_init.size)
    main = BayesMLP(layout, shared=zeta_init, personalized=eta_init)
    shadow = main
    if cfg.R == 0:
        return main, shadow

    n = _train_size(state)
    b = min(cfg.b, n)
    batch_rng = state.rng_stream("batches")
    noise_rng = state.rng_stream("noise")
    state.opt_state = {}
    step = 0
    for groups in phases or _phases(cfg.mode):
        for _ in range(cfg.R):
            for index in _minibatches(batch_rng, n, b):
                batch = state.shard.train.take(index)
                noise = draw_noise(layout, cfg.M, noise_rng)
                grad = grad_objective(
                    main, prior, batch, n, b, cfg.M, noise=noise, kl_weight=cfg.kl_weight
                )
                _guard(
                    state,
                    step,
                    [grad.personal_mu, grad.personal_rho, grad.shared_mu, grad.shared_rho],
                    grad.value,
                    cfg.grad_limit,
                )
                if with_shadow:
                    shadow_personal, shadow_shared = _shadow_grad(main, shadow, prior, cfg.upload_rule)
                    _guard(state, step, [shadow_personal, shadow_shared], 0.0, cfg.grad_limit)
                    shadow = shadow.with_params(
                        personalized=_adam_group(
                            state, "shadow_personal", shadow.personalized, shadow_personal, cfg
                        ),
                        shared=_adam_group(state, "shadow_shared", shadow.shared, shadow_shared, cfg),
                    )

                personalized, shared = main.personalized, main.shared
                if PERSONAL in groups:
                    personalized = _adam_group(
                        state, PERSONAL, personalized, grad.personal_packed(), cfg
                    )
                if SHARED in groups:
                    shared = _adam_group(state, SHARED, shared, grad.shared_packed(), cfg)
                main = main.with_params(shared=shared, personalized=personalized)
                if trace is not None:
                    trace(step, main.personalized.mu, main.shared.mu)
                step += 1
    logger.debug(f"客户端 {state.client_id} 第 {state.round} 轮完成 {step} 步变分更新")
    return main, shadow


def client_update(
    state: ClientState,
    eta_prev: GaussianParamSet,
    zeta_global: GaussianParamSet,
    cfg: TrainConfig,
    trace: Optional[TraceFn] = None,
) -> Tuple[GaussianParamSet, UploadPacket]:
    """一轮本地更新，返回 (新的个性化参数, 上传包).

    先验 pi = (eta_prev, zeta_global) 在整轮内保持不变。
    """
    prior = PriorSnapshot(personalized_prior=eta_prev, shared_prior=zeta_global)
    main, shadow = train_variational(state, eta_prev, zeta_global, prior, cfg, trace=trace)
    return main.personalized, UploadPacket(client_id=state.client_id, zeta_bar=shadow.shared)


def train_point(
    state: ClientState,
    personal: np.ndarray,
    shared: np.ndarray,
    cfg: TrainConfig,
    phases: Optional[List[Tuple[str, ...]]] = None,
    trace: Optional[TraceFn] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """确定性点参数训练循环，不采样也没有 KL 项."""
    layout = state.layout
    personal = np.array(personal, dtype=np.float64)
    shared = np.array(shared, dtype=np.float64)
    _check_lengths(layout, personal.size, shared.size)
    if cfg.R == 0:
        return personal, shared

    n = _train_size(state)
    b = min(cfg.b, n)
    batch_rng = state.rng_stream("batches")
    state.opt_state = {}
    step = 0
    for groups in phases or _phases(cfg.mode):
        for _ in range(cfg.R):
            for index in _minibatches(batch_rng, n, b):
                batch = state.shard.train.take(index)
                value, personal_grad, shared_grad = point_objective_grad(
                    layout, personal, shared, batch, n, b
                )
                _guard(state, step, [personal_grad, shared_grad], value, cfg.grad_limit)
                if PERSONAL in groups:
                    personal = _adam_point(state, PERSONAL, personal, personal_grad, cfg)
                if SHARED in groups:
                    shared = _adam_point(state, SHARED, shared, shared_grad, cfg)
                if trace is not None:
                    trace(step, personal, shared)
                step += 1
    logger.debug(f"客户端 {state.client_id} 第 {state.round} 轮完成 {step} 步点参数更新")
    return personal, shared


def _adam_point(
    state: ClientState, key: str, params: np.ndarray, grad: np.ndarray, cfg: TrainConfig
) -> np.ndarray:
    if key not in state.opt_state:
        state.opt_state[key] = AdamState.zeros(params.size)
    params, state.opt_state[key] = adam_step(
        params, grad, state.opt_state[key], cfg.lr, cfg.beta1, cfg.beta2, cfg.eps
    )
    return params


def client_update_dirac(
    state: ClientState,
    w_prev_personal: np.ndarray,
    w_global_shared: np.ndarray,
    cfg: TrainConfig,
    trace: Optional[TraceFn] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Dirac 极限下的基线更新（fedavg/fedper/fedrep/lgfedavg）."""
    if cfg.mode not in DIRAC_MODES:
        raise InvalidArgumentError(f"client_update_dirac 不支持模式 {cfg.mode.value}")
    return train_point(state, w_prev_personal, w_global_shared, cfg, trace=trace)
