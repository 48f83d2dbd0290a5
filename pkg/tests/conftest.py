"""测试共用夹具."""

import numpy as np
import pytest

from bayes_mlp import FactorLayout
from client_trainer import ClientState
from config import RunConfig
from data_pipeline import partition_label_skew, split_small_large, synth_classification
from gaussian_core import GaussianParamSet


class CountingDataset:
    """记录 take 调用次数的数据集包装."""

    def __init__(self, inner):
        self.inner = inner
        self.reads = 0

    @property
    def size(self):
        return self.inner.size

    def take(self, index):
        self.reads += 1
        return self.inner.take(index)


class CountingShard:
    def __init__(self, shard):
        self.client_id = shard.client_id
        self.train = CountingDataset(shard.train)
        self.test = shard.test
        self.label_set = shard.label_set


def make_config(**overrides) -> RunConfig:
    """小规模合成实验配置，不读取环境变量中的覆盖."""
    values = dict(
        clients=4,
        participants=4,
        rounds=3,
        local_epochs=1,
        batch=25,
        hidden=8,
        synth_dims=6,
        synth_classes=4,
        synth_pool=600,
        labels_per_client=2,
        eval_interval=1,
        mc_test=2,
        max_parallel_clients=2,
    )
    values.update(overrides)
    return RunConfig(_env_file=None, **values)


@pytest.fixture
def tiny_layout():
    """2-2-2 网络，最后一层个性化."""
    return FactorLayout((2, 2, 2), ("shared", "personalized"))


@pytest.fixture
def synth_shards():
    """4 个客户端，每个 2 个类别，每类 25 训练 / 475 测试."""
    pool = synth_classification(600, 6, 4, seed=3)
    shards = partition_label_skew(pool, pool, 4, 2, seed=3, train_per_class=25, test_per_class=475)
    return split_small_large(shards, "small", "synth")


@pytest.fixture
def tiny_client(synth_shards):
    """6-5-4 网络上的单个客户端."""
    layout = FactorLayout.for_mode([6, 5, 4], "bpfed")
    rng = np.random.default_rng(0)
    eta = GaussianParamSet.from_mu_sigma(rng.normal(0, 0.1, layout.t1), np.full(layout.t1, 0.05))
    return ClientState(client_id=0, layout=layout, eta=eta, shard=synth_shards[0], run_seed=7, round=2)


@pytest.fixture
def counting_shard(synth_shards):
    return CountingShard(synth_shards[0])
