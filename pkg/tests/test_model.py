"""Variant reductions, parameter plumbing, and model checkpoint glue."""
import numpy as np
import pytest

from fewrec import model as md
from fewrec.backbone import BackboneConfig
from fewrec.episodes import Episode
from fewrec.tensor import Tensor


def bypass_model(seed=0, d=12, r=4, dtype="float64"):
    cfg = md.ModelConfig(feature_dim=d,
                         backbone=BackboneConfig(kind="bypass", channels=d,
                                                 feature_rows=r),
                         dtype=dtype)
    return md.init_model(np.random.default_rng(seed), cfg)


def random_episode(seed=0, c=3, k=2, m=2, r=4, d=12):
    rng = np.random.default_rng(seed)
    return Episode(
        support_x=rng.normal(size=(c * k, r, d)),
        support_y=np.repeat(np.arange(1, c + 1), k),
        query_x=rng.normal(size=(c * m, r, d)),
        query_y=np.repeat(np.arange(1, c + 1), m),
        class_ids=[f"c{i}" for i in range(c)])


class TestVariantReductions:
    def test_lambda2_zero_equals_q_to_s_variant(self):
        params = bypass_model(seed=1)
        episode = random_episode(seed=2)
        params.metric.lambda2.data[...] = 0.0
        full = md.episode_forward(params, episode, "full")
        q2s = md.episode_forward(params, episode, "q_to_s_only")
        np.testing.assert_array_equal(full.fused.data, q2s.fused.data)

    def test_lambda1_zero_equals_s_to_q_variant(self):
        params = bypass_model(seed=3)
        episode = random_episode(seed=4)
        params.metric.lambda1.data[...] = 0.0
        full = md.episode_forward(params, episode, "full")
        s2q = md.episode_forward(params, episode, "s_to_q_only")
        np.testing.assert_array_equal(full.fused.data, s2q.fused.data)

    def test_protonet_matches_nearest_prototype_oracle(self):
        params = bypass_model(seed=5)
        episode = random_episode(seed=6, c=4, k=3, m=2)
        table = md.episode_forward(params, episode, "protonet_baseline")
        from fewrec.metric import predict
        preds = predict(table)
        # independent oracle: argmin distance to the mean support embedding
        c, k = 4, 3
        flat_s = episode.support_x.reshape(c, k, -1)
        protos = flat_s.sum(axis=1) / k
        flat_q = episode.query_x.reshape(len(episode.query_x), -1)
        d = ((flat_q[:, None, :] - protos[None]) ** 2).sum(-1)
        np.testing.assert_array_equal(preds, d.argmin(axis=1) + 1)

    def test_fsrm_only_is_prototype_on_reconstructed_rows(self):
        params = bypass_model(seed=7)
        episode = random_episode(seed=8)
        table = md.episode_forward(params, episode, "fsrm_only")
        assert table.fused.shape == (6, 3)
        proto = md.episode_forward(params, episode, "protonet_baseline")
        assert not np.array_equal(table.fused.data, proto.fused.data)

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError):
            md.episode_forward(bypass_model(), random_episode(), "bogus")


class TestTrainableFiltering:
    def test_full_trains_everything(self):
        params = bypass_model()
        assert len(params.trainable("full")) == len(list(params.named()))

    @pytest.mark.parametrize("variant,frozen", [
        ("q_to_s_only", {"metric.lambda2"}),
        ("s_to_q_only", {"metric.lambda1"}),
        ("fsrm_only", {"metric.lambda1", "metric.lambda2"}),
        ("protonet_baseline", {"metric.lambda1", "metric.lambda2"}),
    ])
    def test_frozen_names(self, variant, frozen):
        params = bypass_model()
        names = {n for n, _ in params.trainable(variant)}
        assert frozen.isdisjoint(names)
        assert "metric.log_tau" in names

    def test_apply_variant_pins_values(self):
        params = bypass_model()
        md.apply_variant(params, "s_to_q_only")
        assert params.metric.lambda1.item() == 0.0
        assert params.metric.lambda2.item() == 0.5


class TestModelCheckpoint:
    def test_save_load_round_trip(self, tmp_path):
        params = bypass_model(seed=9)
        path = tmp_path / "m.ckpt"
        md.save_model(path, params)
        other = bypass_model(seed=10)
        md.load_model(path, other)
        for (na, ta), (nb, tb) in zip(params.named(), other.named()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_expected_record_names(self, tmp_path):
        from fewrec import checkpoint as ck
        params = bypass_model()
        path = tmp_path / "m.ckpt"
        md.save_model(path, params)
        names = set(ck.load(path))
        assert {"metric.lambda1", "metric.lambda2", "metric.log_tau",
                "fsrm.w_q", "fmrm.w_v"} <= names

    def test_missing_record_rejected(self, tmp_path):
        from fewrec import checkpoint as ck
        params = bypass_model()
        ck.save(tmp_path / "bad.ckpt", {"fsrm.w_q": params.fsrm.w_q.data})
        with pytest.raises(ck.CheckpointError):
            md.load_model(tmp_path / "bad.ckpt", bypass_model())

    def test_conv_buffers_round_trip(self, tmp_path):
        from fewrec import backbone as bb
        from fewrec.tensor import Tensor
        cfg = md.ModelConfig(feature_dim=4,
                             backbone=BackboneConfig(kind="conv4", channels=4,
                                                     blocks=2, image_size=8),
                             dtype="float64")
        params = md.init_model(np.random.default_rng(11), cfg)
        x = Tensor(np.random.default_rng(12).uniform(size=(3, 3, 8, 8)))
        bb.embed(x, params.backbone, training=True)  # move the buffers
        md.save_model(tmp_path / "c.ckpt", params)
        other = md.init_model(np.random.default_rng(13), cfg)
        md.load_model(tmp_path / "c.ckpt", other)
        np.testing.assert_array_equal(other.backbone.blocks[0].bn_mean,
                                      params.backbone.blocks[0].bn_mean)


class TestEpisodeForward:
    def test_table_shape_and_simplex(self):
        params = bypass_model(seed=14)
        episode = random_episode(seed=15, c=4, k=2, m=3)
        table = md.episode_forward(params, episode, "full")
        assert table.fused.shape == (12, 4)
        np.testing.assert_allclose(table.normalized.data.sum(axis=1), 1.0,
                                   atol=1e-6)

    def test_deterministic(self):
        params = bypass_model(seed=16)
        episode = random_episode(seed=17)
        a = md.episode_forward(params, episode, "full").fused.data
        b = md.episode_forward(params, episode, "full").fused.data
        np.testing.assert_array_equal(a, b)
