"""client_trainer 测试."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import client_trainer
from bayes_mlp import FactorLayout, PriorSnapshot, build
from client_trainer import (
    PERSONAL,
    AdamState,
    ClientState,
    TrainConfig,
    adam_step,
    client_update,
    client_update_dirac,
    train_point,
    train_variational,
)
from config import Mode, UploadRule
from data_pipeline import ClientShard, Dataset
from errors import EmptyDataError, InvalidArgumentError, TrainingDivergedError
from gaussian_core import GaussianParamSet

from conftest import make_config


def fresh(client: ClientState, **changes) -> ClientState:
    values = dict(
        client_id=client.client_id,
        layout=client.layout,
        eta=client.eta,
        shard=client.shard,
        run_seed=client.run_seed,
        round=client.round,
    )
    values.update(changes)
    return ClientState(**values)


def zeta_for(layout, sigma=0.1):
    return GaussianParamSet.constant(layout.t2, 0.0, sigma)


class Recorder:
    def __init__(self):
        self.steps = []

    def __call__(self, step, personal, shared):
        self.steps.append((step, np.array(personal), np.array(shared)))


class TestAdam:
    def test_zero_grad_keeps_params(self):
        params = np.array([1.0, -2.0, 3.0])
        updated, state = adam_step(params, np.zeros(3), AdamState.zeros(3), lr=0.1)
        assert_array_equal(updated, params)
        assert state.t == 1

    def test_first_step_is_sign(self):
        params = np.zeros(4)
        grads = np.array([0.5, -2.0, 2e-2, -7.0])
        lr = 1e-3
        updated, _ = adam_step(params, grads, AdamState.zeros(4), lr=lr)
        assert np.all(np.abs(updated + lr * np.sign(grads)) <= 1e-6 * lr)

    def test_two_steps_by_hand(self):
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        g1, g2 = np.array([1.0, -0.5]), np.array([0.2, 0.4])
        params, state = adam_step(np.zeros(2), g1, AdamState.zeros(2), lr)
        params, state = adam_step(params, g2, state, lr)

        m1, v1 = (1 - b1) * g1, (1 - b2) * g1**2
        p1 = -lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
        m2, v2 = b1 * m1 + (1 - b1) * g2, b2 * v1 + (1 - b2) * g2**2
        p2 = p1 - lr * (m2 / (1 - b1**2)) / (np.sqrt(v2 / (1 - b2**2)) + eps)
        assert_allclose(params, p2, rtol=1e-12)
        assert state.t == 2

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            adam_step(np.zeros(3), np.zeros(2), AdamState.zeros(3), lr=0.1)


class TestTrainConfig:
    def test_from_run_config(self):
        cfg = make_config(local_epochs=3, batch=10, mc_samples=2, lr=0.01, mode="fedrep")
        train_cfg = TrainConfig.from_run_config(cfg)
        assert (train_cfg.R, train_cfg.b, train_cfg.M, train_cfg.lr) == (3, 10, 2, 0.01)
        assert train_cfg.mode == Mode.FEDREP

    def test_rejects_unknown_field(self):
        with pytest.raises(ValueError):
            TrainConfig(steps=3)


class TestClientUpdate:
    def test_zero_epochs_returns_inputs(self, tiny_client):
        zeta = zeta_for(tiny_client.layout)
        eta, packet = client_update(tiny_client, tiny_client.eta, zeta, TrainConfig(R=0))
        assert eta.identical(tiny_client.eta)
        assert packet.zeta_bar.identical(zeta)
        assert packet.client_id == tiny_client.client_id

    def test_deterministic(self, tiny_client):
        zeta = zeta_for(tiny_client.layout)
        cfg = TrainConfig(R=2, b=25, M=2, lr=0.01)
        first = client_update(fresh(tiny_client), tiny_client.eta, zeta, cfg)
        second = client_update(fresh(tiny_client), tiny_client.eta, zeta, cfg)
        assert first[0].identical(second[0])
        assert first[1].zeta_bar.identical(second[1].zeta_bar)

    def test_round_changes_stream(self, tiny_client):
        zeta = zeta_for(tiny_client.layout)
        cfg = TrainConfig(R=1, b=25, lr=0.01)
        first, _ = client_update(fresh(tiny_client, round=0), tiny_client.eta, zeta, cfg)
        second, _ = client_update(fresh(tiny_client, round=1), tiny_client.eta, zeta, cfg)
        assert not first.identical(second)

    def test_inputs_untouched(self, tiny_client):
        zeta = zeta_for(tiny_client.layout)
        eta_bytes, zeta_bytes = tiny_client.eta.to_bytes(), zeta.to_bytes()
        eta, packet = client_update(tiny_client, tiny_client.eta, zeta, TrainConfig(R=1, b=25))
        assert tiny_client.eta.to_bytes() == eta_bytes
        assert zeta.to_bytes() == zeta_bytes
        assert not eta.identical(tiny_client.eta)
        assert packet.zeta_bar.size == tiny_client.layout.t2

    def test_steps_per_epoch(self, tiny_client):
        # 2 个类别 x 25 = 50 个训练样本，b=20 时每个 epoch 2 步，尾部丢弃
        recorder = Recorder()
        client_update(
            tiny_client, tiny_client.eta, zeta_for(tiny_client.layout), TrainConfig(R=3, b=20), trace=recorder
        )
        assert [s for s, _, _ in recorder.steps] == list(range(6))

    def test_batch_larger_than_shard(self, tiny_client):
        recorder = Recorder()
        client_update(
            tiny_client, tiny_client.eta, zeta_for(tiny_client.layout), TrainConfig(R=2, b=500), trace=recorder
        )
        assert len(recorder.steps) == 2

    def test_shadow_reads_no_data(self, tiny_client, counting_shard):
        client = fresh(tiny_client, shard=counting_shard)
        recorder = Recorder()
        client_update(client, client.eta, zeta_for(client.layout), TrainConfig(R=2, b=25), trace=recorder)
        assert counting_shard.train.reads == len(recorder.steps) == 4

    def test_anchor_prior_upload_stays_at_prior(self, tiny_client):
        zeta = zeta_for(tiny_client.layout)
        cfg = TrainConfig(R=2, b=25, lr=0.01, upload_rule=UploadRule.ANCHOR_PRIOR)
        _, packet = client_update(tiny_client, tiny_client.eta, zeta, cfg)
        assert packet.zeta_bar.identical(zeta)

    def test_follow_posterior_upload_moves(self, tiny_client):
        zeta = zeta_for(tiny_client.layout)
        cfg = TrainConfig(R=2, b=25, lr=0.01, upload_rule=UploadRule.FOLLOW_POSTERIOR)
        _, packet = client_update(tiny_client, tiny_client.eta, zeta, cfg)
        assert not packet.zeta_bar.identical(zeta)
        assert np.all(np.isfinite(packet.zeta_bar.mu))

    def test_first_shadow_step_is_noop(self, tiny_client):
        zeta = zeta_for(tiny_client.layout)
        prior = PriorSnapshot(personalized_prior=tiny_client.eta, shared_prior=zeta)
        cfg = TrainConfig(R=1, b=50, lr=0.01)
        _, shadow = train_variational(tiny_client, tiny_client.eta, zeta, prior, cfg)
        # 单步：影子参数集在先验处梯度为 0
        assert shadow.shared.identical(zeta)
        assert shadow.personalized.identical(tiny_client.eta)

    def test_empty_shard(self, tiny_client):
        empty = Dataset(np.zeros((0, 6)), np.zeros(0, dtype=np.int64), 4)
        shard = ClientShard(client_id=0, train=empty, test=empty, label_set={0, 1})
        client = fresh(tiny_client, shard=shard)
        with pytest.raises(EmptyDataError):
            client_update(client, client.eta, zeta_for(client.layout), TrainConfig(R=1))

    def test_divergence_names_round(self, tiny_client):
        cfg = TrainConfig(R=1, b=25, grad_limit=1e-12)
        with pytest.raises(TrainingDivergedError) as info:
            client_update(tiny_client, tiny_client.eta, zeta_for(tiny_client.layout), cfg)
        assert info.value.round_index == tiny_client.round
        assert info.value.client_id == tiny_client.client_id

    def test_length_mismatch(self, tiny_client):
        with pytest.raises(InvalidArgumentError):
            client_update(tiny_client, tiny_client.eta, zeta_for(tiny_client.layout).split(3)[1], TrainConfig())


class TestDiracModes:
    @staticmethod
    def setup(synth_shards, mode):
        layout = FactorLayout.for_mode([6, 5, 4], mode)
        model = build(layout, 3)
        client = ClientState(
            client_id=1,
            layout=layout,
            eta=GaussianParamSet.dirac(model.personalized.mu),
            shard=synth_shards[1],
            run_seed=5,
            round=4,
        )
        return client, model

    @pytest.mark.parametrize("mode", [Mode.FEDAVG, Mode.FEDPER, Mode.FEDREP, Mode.LGFEDAVG])
    def test_variational_machinery_reproduces_point_path(self, synth_shards, monkeypatch, mode):
        # 噪声置零后两条路径逐步一致到 1e-10；真实噪声在 sigma 下界处的影响
        # 只能保证到 1e-6，见 test_sampled_floor_noise_is_negligible
        monkeypatch.setattr(
            client_trainer, "draw_noise", lambda layout, count, rng: np.zeros((count, layout.total))
        )
        client, model = self.setup(synth_shards, mode)
        cfg = TrainConfig(R=10, b=10, M=1, lr=0.01, mode=mode, kl_weight=0.0)
        eta = GaussianParamSet.dirac(model.personalized.mu)
        zeta = GaussianParamSet.dirac(model.shared.mu)
        prior = PriorSnapshot(personalized_prior=eta, shared_prior=zeta)

        variational, point = Recorder(), Recorder()
        main, _ = train_variational(
            fresh(client), eta, zeta, prior, cfg, with_shadow=False, trace=variational
        )
        personal, shared = client_update_dirac(fresh(client), eta.mu, zeta.mu, cfg, trace=point)

        assert len(variational.steps) == len(point.steps) >= 50
        for (_, vp, vs), (_, pp, ps) in zip(variational.steps, point.steps):
            assert_allclose(vp, pp, rtol=0, atol=1e-10)
            assert_allclose(vs, ps, rtol=0, atol=1e-10)
        assert_array_equal(main.personalized.rho, eta.rho)
        assert_array_equal(main.shared.rho, zeta.rho)

    def test_sampled_floor_noise_is_negligible(self, synth_shards):
        client, model = self.setup(synth_shards, Mode.FEDPER)
        cfg = TrainConfig(R=1, b=10, M=1, lr=1e-3, mode=Mode.FEDPER, kl_weight=0.0)
        eta = GaussianParamSet.dirac(model.personalized.mu)
        zeta = GaussianParamSet.dirac(model.shared.mu)
        prior = PriorSnapshot(personalized_prior=eta, shared_prior=zeta)
        main, _ = train_variational(fresh(client), eta, zeta, prior, cfg, with_shadow=False)
        personal, shared = client_update_dirac(fresh(client), eta.mu, zeta.mu, cfg)
        assert_allclose(main.personalized.mu, personal, rtol=0, atol=1e-6)
        assert_allclose(main.shared.mu, shared, rtol=0, atol=1e-6)

    def test_fedavg_without_personal_factor(self, synth_shards):
        client, model = self.setup(synth_shards, Mode.FEDAVG)
        assert client.layout.t1 == 0
        cfg = TrainConfig(R=1, b=25, lr=0.01, mode=Mode.FEDAVG)
        personal, shared = client_update_dirac(client, model.personalized.mu, model.shared.mu, cfg)
        assert personal.size == 0
        assert not np.array_equal(shared, model.shared.mu)

    def test_fedrep_freezes_shared_in_first_phase(self, synth_shards):
        client, model = self.setup(synth_shards, Mode.FEDREP)
        recorder = Recorder()
        cfg = TrainConfig(R=1, b=25, lr=0.01, mode=Mode.FEDREP)
        client_update_dirac(client, model.personalized.mu, model.shared.mu, cfg, trace=recorder)
        # 50 个样本、b=25：每个阶段 2 步
        assert len(recorder.steps) == 4
        for _, _, shared in recorder.steps[:2]:
            assert_array_equal(shared, model.shared.mu)
        head = recorder.steps[1][1]
        for _, personal, _ in recorder.steps[2:]:
            assert_array_equal(personal, head)
        assert not np.array_equal(recorder.steps[-1][2], model.shared.mu)

    def test_custom_phases(self, synth_shards):
        client, model = self.setup(synth_shards, Mode.FEDPER)
        cfg = TrainConfig(R=1, b=25, lr=0.01, mode=Mode.FEDPER)
        personal, shared = train_point(
            client, model.personalized.mu, model.shared.mu, cfg, phases=[(PERSONAL,)]
        )
        assert_array_equal(shared, model.shared.mu)
        assert not np.array_equal(personal, model.personalized.mu)

    def test_rejects_bpfed(self, synth_shards):
        client, model = self.setup(synth_shards, Mode.FEDPER)
        with pytest.raises(InvalidArgumentError):
            client_update_dirac(client, model.personalized.mu, model.shared.mu, TrainConfig(mode=Mode.BPFED))
