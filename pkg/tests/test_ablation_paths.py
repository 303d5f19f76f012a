"""Ablation switches and secondary pipeline paths."""

import numpy as np
import pytest

from agnet import tensor as T
from agnet.network import classify, forward, init_params
from agnet.regions import BoundingBox, RegionSet, RegionSource
from agnet.training import TrainConfig, evaluate, train
from tests.test_training import rand_item, tiny_dataset


def region_set():
    primary = [BoundingBox(2, 2, 14, 14), BoundingBox(16, 18, 30, 30)]
    return RegionSet(kappa=2, primary=primary,
                     secondary=[primary[0].union(primary[1])],
                     whole_image=BoundingBox(0, 0, 32, 32),
                     source=RegionSource.KEYPOINTS)


class TestRegionModes:
    def test_box_lists(self):
        rs = region_set()
        assert len(rs.boxes("both")) == 4
        assert len(rs.boxes("primary")) == 3
        assert len(rs.boxes("secondary")) == 2
        assert rs.boxes("whole") == [rs.whole_image]
        for mode in ("both", "primary", "secondary", "whole"):
            assert rs.boxes(mode)[-1] is rs.whole_image

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            region_set().boxes("everything")


class TestFusionModes:
    def test_gap_mode_matches_direct_formula(self):
        rng = np.random.default_rng(0)
        params = init_params(num_classes=3, channels=8, seed=1)
        fhat = rng.normal(size=(4, 4, 8))
        got = classify(T.Tensor(fhat), params.fusion_cls, "gap").data
        gap = fhat.mean(axis=(0, 1))
        logits = gap @ params.fusion_cls.w_cls.data + params.fusion_cls.b_cls.data
        want = np.exp(logits - logits.max())
        want /= want.sum()
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_self_attention_switch_changes_nothing_at_init(self):
        # delta starts at zero, so the layer is the identity either way.
        rng = np.random.default_rng(1)
        params = init_params(num_classes=2, channels=8, stages=2, seed=2)
        img = rng.uniform(size=(32, 32, 3))
        boxes = region_set().boxes()
        with_attn = forward(img, boxes, params, use_self_attention=True).data
        without = forward(img, boxes, params, use_self_attention=False).data
        np.testing.assert_array_equal(with_attn, without)


class TestFeatureMapRegionSource:
    def test_training_smoke(self):
        cfg = TrainConfig(epochs=1, batch_size=2, lr=1e-3, kappa=2, image_size=32,
                          channels=8, backbone_stages=2, seed=3,
                          region_source="feature_map")
        params = init_params(2, channels=8, stages=2, seed=3)
        _, rows = train(tiny_dataset(seed=5), params, cfg)
        assert np.isfinite(rows[0]["train_loss"])
        report = evaluate(tiny_dataset(seed=5), params, cfg)
        assert 0.0 <= report.top1 <= 1.0


class TestEvaluateWorkers:
    def test_thread_pool_matches_serial(self):
        cfg = TrainConfig(kappa=2, image_size=32, channels=8, backbone_stages=2, seed=4)
        params = init_params(2, channels=8, stages=2, seed=4)
        data = tiny_dataset(seed=9, n_per_class=3)
        serial = evaluate(data, params, cfg, workers=1)
        pooled = evaluate(data, params, cfg, workers=4)
        assert serial.top1 == pooled.top1
        assert serial.mean_ap == pooled.mean_ap
        np.testing.assert_array_equal(serial.confusion, pooled.confusion)


class TestChanceLevelBand:
    def test_untrained_models_sit_near_chance(self):
        rng = np.random.default_rng(11)
        data = [rand_item(rng, label=i % 2, name=f"i{i}") for i in range(24)]
        cfg = TrainConfig(kappa=2, image_size=32, channels=8, backbone_stages=2, seed=0)
        accs = []
        for seed in range(10):
            params = init_params(2, channels=8, stages=2, seed=seed)
            accs.append(evaluate(data, params, cfg).top1)
        assert 0.3 <= float(np.mean(accs)) <= 0.7
        assert all(0.1 <= a <= 0.9 for a in accs)
