"""联邦服务器模块.

服务器循环：按轮随机采样客户端、并行分发本地更新、按客户端编号顺序
聚合共享因子、维护连续先验，并负责周期评估与新客户端个性化。
"""

import asyncio
import logging
from dataclasses import dataclass, field
from typing import Awaitable, Callable, Dict, List, Optional, Sequence

import numpy as np

from bayes_mlp import BayesMLP, FactorLayout, PriorSnapshot, build, predict
from client_trainer import (
    PERSONAL,
    ClientState,
    TrainConfig,
    UploadPacket,
    client_update,
    client_update_dirac,
    train_point,
    train_variational,
)
from config import Mode, RunConfig
from data_pipeline import ClientShard, build_client_shards
from errors import EmptyDataError, InvalidArgumentError, RoundAbortedError
from eval_metrics import CalibrationReport, accuracy, calibration, mean_nll
from gaussian_core import GaussianParamSet, anchored_mean, from_sigma_like, kl_diag_gaussian
from rng import derive_seed, rng_stream

logger = logging.getLogger(__name__)

__all__ = [
    "ClientReport",
    "EvalRecord",
    "ExperimentResult",
    "NovelResult",
    "PriorSnapshot",
    "RoundSummary",
    "ServerState",
    "aggregate_shared",
    "evaluate",
    "init_server",
    "personalize_novel_client",
    "run_experiment",
    "run_round",
]


@dataclass
class ClientReport:
    """客户端一轮结束后的结果：上传包、标量诊断和待提交的新 eta.

    eta 只在整轮成功后写回客户端，不参与聚合。
    """

    packet: UploadPacket
    kl_to_prior: float
    steps: int = 0
    eta: Optional[GaussianParamSet] = field(default=None, repr=False)

    @property
    def client_id(self) -> int:
        return self.packet.client_id

    @property
    def upload_size(self) -> int:
        return self.packet.zeta_bar.size


@dataclass
class EvalRecord:
    """一次评估的汇总指标."""

    round: int
    mean_acc: float
    std_acc: float
    mean_nll: float
    report: CalibrationReport
    client_acc: Dict[int, float] = field(default_factory=dict)

    @property
    def ece(self) -> float:
        return self.report.ece

    @property
    def mce(self) -> float:
        return self.report.mce

    @property
    def brier(self) -> float:
        return self.report.brier


@dataclass
class RoundSummary:
    round: int
    sampled: List[int]
    reports: List[ClientReport]
    evaluation: Optional[EvalRecord] = None


@dataclass
class ServerState:
    """服务器状态：全局共享因子、轮数、客户端登记表与历史记录."""

    layout: FactorLayout
    zeta: GaussianParamSet
    clients: List[ClientState]
    round: int = 0
    history: List[EvalRecord] = field(default_factory=list)
    last_round: Optional[RoundSummary] = None

    def __post_init__(self):
        if self.zeta.size != self.layout.t2:
            raise InvalidArgumentError(f"zeta 长度 {self.zeta.size} != t2 {self.layout.t2}")

    def model_for(self, client: ClientState) -> BayesMLP:
        return BayesMLP(self.layout, shared=self.zeta, personalized=client.eta)


@dataclass
class NovelResult:
    client_id: int
    eta: GaussianParamSet
    baseline_accuracy: float
    accuracy: float


@dataclass
class ExperimentResult:
    state: ServerState
    history: List[EvalRecord]
    best_accuracy: float
    best_round: int
    novel: Optional[NovelResult] = None

    @property
    def final(self) -> EvalRecord:
        return self.history[-1]


RoundCallback = Callable[[RoundSummary], Awaitable[None]]


def initial_prior(layout: FactorLayout, sigma: float) -> PriorSnapshot:
    """t = 0 时的先验：两部分都是 N(0, sigma^2)."""
    return PriorSnapshot(
        personalized_prior=GaussianParamSet.constant(layout.t1, 0.0, sigma),
        shared_prior=GaussianParamSet.constant(layout.t2, 0.0, sigma),
    )


def init_server(cfg: RunConfig, shards: Sequence[ClientShard]) -> ServerState:
    """初始化全部客户端与全局共享因子.

    bpfed 从初始先验出发；Dirac 模式从 build() 的均值出发，sigma 取下界。
    """
    if not shards:
        raise InvalidArgumentError("没有客户端数据")
    if len(shards) != cfg.clients:
        raise InvalidArgumentError(f"客户端数据数 {len(shards)} != clients {cfg.clients}")
    first = shards[0].train
    layout = FactorLayout.for_mode(cfg.layer_sizes(first.dims, first.class_count), cfg.mode)
    if cfg.mode == Mode.BPFED:
        prior = initial_prior(layout, cfg.prior_sigma)
        zeta, eta = prior.shared_prior, prior.personalized_prior
    else:
        model = build(layout, derive_seed(cfg.seed, "init"))
        zeta = GaussianParamSet.dirac(model.shared.mu)
        eta = GaussianParamSet.dirac(model.personalized.mu)

    clients = [
        ClientState(client_id=shard.client_id, layout=layout, eta=eta, shard=shard, run_seed=cfg.seed)
        for shard in sorted(shards, key=lambda s: s.client_id)
    ]
    if [c.client_id for c in clients] != list(range(len(clients))):
        raise InvalidArgumentError("客户端编号必须是 0..N-1")
    logger.info(f"初始化 {len(clients)} 个客户端，t1={layout.t1}，t2={layout.t2}，模式 {cfg.mode.value}")
    return ServerState(layout=layout, zeta=zeta, clients=clients)


def _local_round(client: ClientState, zeta: GaussianParamSet, cfg: TrainConfig) -> ClientReport:
    """在 worker 线程中运行；新 eta 留在报告里，由 run_round 在整轮成功后提交."""
    eta_prev = client.eta
    steps: List[int] = []

    def count(step, _personal, _shared):
        steps.append(step)

    if cfg.mode == Mode.BPFED:
        eta_new, packet = client_update(client, eta_prev, zeta, cfg, trace=count)
    else:
        personal, shared = client_update_dirac(client, eta_prev.mu, zeta.mu, cfg, trace=count)
        eta_new = GaussianParamSet.dirac(personal)
        packet = UploadPacket(client_id=client.client_id, zeta_bar=GaussianParamSet.dirac(shared))
    kl = kl_diag_gaussian(eta_new, eta_prev) if cfg.mode == Mode.BPFED else 0.0
    return ClientReport(packet=packet, kl_to_prior=kl, steps=len(steps), eta=eta_new)


def aggregate_shared(packets: Sequence[UploadPacket]) -> GaussianParamSet:
    """按客户端编号升序，在 (mu, sigma) 空间逐坐标求均值."""
    if not packets:
        raise InvalidArgumentError("没有可聚合的上传包")
    ordered = sorted(packets, key=lambda p: p.client_id)
    size = ordered[0].zeta_bar.size
    if any(p.zeta_bar.size != size for p in ordered):
        raise InvalidArgumentError("上传包长度不一致")
    mu = anchored_mean(np.stack([p.zeta_bar.mu for p in ordered]))
    sigma = anchored_mean(np.stack([p.zeta_bar.sigma for p in ordered]))
    return from_sigma_like(mu, sigma, ordered[0].zeta_bar)


def sample_clients(cfg: RunConfig, round_index: int, total: int) -> List[int]:
    if cfg.participants > total:
        raise InvalidArgumentError(f"participants ({cfg.participants}) 大于客户端数 ({total})")
    rng = rng_stream(cfg.seed, "server", round_index)
    return sorted(int(c) for c in rng.choice(total, size=cfg.participants, replace=False))


async def run_round(
    state: ServerState, cfg: RunConfig, train_cfg: Optional[TrainConfig] = None
) -> ServerState:
    """执行一轮通信：采样、并行本地更新、聚合；本轮摘要记在 state.last_round."""
    train_cfg = train_cfg or TrainConfig.from_run_config(cfg)
    t = state.round
    sampled = sample_clients(cfg, t, len(state.clients))
    logger.info(f"第 {t + 1} 轮开始，采样客户端 {sampled}")

    semaphore = asyncio.Semaphore(cfg.max_parallel_clients)
    loop = asyncio.get_running_loop()
    zeta = state.zeta

    async def dispatch(client_id: int) -> ClientReport:
        async with semaphore:
            client = state.clients[client_id]
            client.round = t
            return await loop.run_in_executor(None, _local_round, client, zeta, train_cfg)

    results = await asyncio.gather(*(dispatch(c) for c in sampled), return_exceptions=True)
    for client_id, result in zip(sampled, results):
        if isinstance(result, BaseException):
            logger.error(f"第 {t + 1} 轮客户端 {client_id} 失败: {result}")
            raise RoundAbortedError(t, client_id, result)
    for client_id, report in zip(sampled, results):
        state.clients[client_id].eta = report.eta

    state.zeta = aggregate_shared([report.packet for report in results])
    state.round = t + 1
    state.last_round = RoundSummary(round=state.round, sampled=sampled, reports=list(results))
    logger.info(f"第 {state.round} 轮完成，聚合 {len(results)} 个上传包")
    return state


def _predict_client(
    layout: FactorLayout,
    zeta: GaussianParamSet,
    eta: GaussianParamSet,
    x: np.ndarray,
    cfg: RunConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    samples = cfg.mc_test if cfg.mode == Mode.BPFED else 1
    return predict(BayesMLP(layout, shared=zeta, personalized=eta), x, samples, rng=rng)


def evaluate(state: ServerState, cfg: RunConfig) -> EvalRecord:
    """在所有客户端的本地测试集上评估；校准指标在全部样本上汇总."""
    client_acc: Dict[int, float] = {}
    nlls, all_probs, all_labels = [], [], []
    for client in state.clients:
        test = client.shard.test
        if not test.size:
            raise EmptyDataError(f"客户端 {client.client_id} 的测试集为空")
        rng = rng_stream(cfg.seed, "eval", state.round, client.client_id)
        probs = _predict_client(state.layout, state.zeta, client.eta, test.x, cfg, rng)
        client_acc[client.client_id] = accuracy(probs, test.y)
        nlls.append(mean_nll(probs, test.y))
        all_probs.append(probs)
        all_labels.append(test.y)

    accs = np.array(list(client_acc.values()))
    record = EvalRecord(
        round=state.round,
        mean_acc=float(accs.mean()),
        std_acc=float(accs.std()),
        mean_nll=float(np.mean(nlls)),
        report=calibration(np.concatenate(all_probs), np.concatenate(all_labels), cfg.bins),
        client_acc=client_acc,
    )
    logger.info(
        f"第 {record.round} 轮评估: 准确率 {record.mean_acc:.4f} ± {record.std_acc:.4f}，"
        f"ECE {record.ece:.4f}"
    )
    return record


def _novel_start(layout: FactorLayout, cfg: RunConfig) -> GaussianParamSet:
    if cfg.mode == Mode.BPFED:
        return initial_prior(layout, cfg.prior_sigma).personalized_prior
    head = build(layout, derive_seed(cfg.seed, "novel-head"))
    return GaussianParamSet.dirac(head.personalized.mu)


def personalize_novel_client(
    zeta_frozen: GaussianParamSet,
    novel_shard: ClientShard,
    cfg: RunConfig,
    layout: FactorLayout,
    train_cfg: Optional[TrainConfig] = None,
) -> NovelResult:
    """冻结共享因子，只训练新客户端的个性化因子，返回前后的测试准确率."""
    if not novel_shard.train.size or not novel_shard.test.size:
        raise EmptyDataError(f"新客户端 {novel_shard.client_id} 的数据为空")
    train_cfg = train_cfg or TrainConfig.from_run_config(cfg)
    eta_start = _novel_start(layout, cfg)
    client = ClientState(
        client_id=novel_shard.client_id,
        layout=layout,
        eta=eta_start,
        shard=novel_shard,
        run_seed=cfg.seed,
        round=cfg.rounds,
    )

    def score(eta: GaussianParamSet) -> float:
        rng = rng_stream(cfg.seed, "novel-eval", novel_shard.client_id)
        probs = _predict_client(layout, zeta_frozen, eta, novel_shard.test.x, cfg, rng)
        return accuracy(probs, novel_shard.test.y)

    baseline = score(eta_start)
    phases = [(PERSONAL,)]
    if cfg.mode == Mode.BPFED:
        prior = PriorSnapshot(personalized_prior=eta_start, shared_prior=zeta_frozen)
        main, _ = train_variational(
            client, eta_start, zeta_frozen, prior, train_cfg, phases=phases, with_shadow=False
        )
        eta = main.personalized
    else:
        personal, _ = train_point(client, eta_start.mu, zeta_frozen.mu, train_cfg, phases=phases)
        eta = GaussianParamSet.dirac(personal)

    result = NovelResult(
        client_id=novel_shard.client_id, eta=eta, baseline_accuracy=baseline, accuracy=score(eta)
    )
    logger.info(f"新客户端 {result.client_id}: 冻结头 {baseline:.4f} → 个性化 {result.accuracy:.4f}")
    return result


async def run_experiment(
    cfg: RunConfig,
    shards: Optional[Sequence[ClientShard]] = None,
    novel_shard: Optional[ClientShard] = None,
    on_round: Optional[RoundCallback] = None,
) -> ExperimentResult:
    """完整实验：T 轮通信，每 eval_interval 轮及最后一轮评估."""
    if shards is None:
        shards, novel_shard = build_client_shards(cfg)
    state = init_server(cfg, shards)
    train_cfg = TrainConfig.from_run_config(cfg)

    for _ in range(cfg.rounds):
        state = await run_round(state, cfg, train_cfg)
        summary = state.last_round
        if state.round % cfg.eval_interval == 0 or state.round == cfg.rounds:
            summary.evaluation = evaluate(state, cfg)
            state.history.append(summary.evaluation)
        if on_round is not None:
            await on_round(summary)

    best = max(state.history, key=lambda r: r.mean_acc)
    result = ExperimentResult(
        state=state, history=state.history, best_accuracy=best.mean_acc, best_round=best.round
    )
    if cfg.novel_client:
        if novel_shard is None:
            raise InvalidArgumentError("启用了 novel_client 但没有新客户端数据")
        result.novel = personalize_novel_client(state.zeta, novel_shard, cfg, state.layout, train_cfg)
    return result
