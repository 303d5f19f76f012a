"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s``. The two training-based
criteria (desk-scale learning, component ablation) dominate the runtime;
everything else finishes in seconds.
"""

import dataclasses
import time

import numpy as np
import pytest

from agnet import tensor as T
from agnet.checkpoint import load_checkpoint, save_checkpoint
from agnet.clustering import GmmConfig, fit_gmm
from agnet.dataset import generate_synthetic, load_split
from agnet.gradcheck import check_gradients
from agnet.keypoints import DetectorConfig, GrayImage, detect_keypoints
from agnet.network import (
    aggregate_regions,
    classify,
    forward,
    init_params,
    inter_attention,
    self_attention,
)
from agnet.optim import SgdState
from agnet.regions import build_region_set
from agnet.training import (
    TrainConfig,
    compute_metrics,
    cross_entropy,
    evaluate,
    train,
)
from tests.test_keypoints import blob_image
from tests.test_network import (
    aggregate_oracle,
    classify_oracle,
    inter_attention_oracle,
    randomize_heads,
    self_attention_oracle,
)
from tests.test_training import metrics_oracle


def report(criterion: str, passed: bool, detail: str = ""):
    status = "PASS" if passed else "FAIL"
    print(f"[{status}] {criterion}" + (f" — {detail}" if detail else ""))
    assert passed, f"{criterion}: {detail}"


# Desk-scale experiment configuration shared by criteria 6 and 7.
DESK_CFG = TrainConfig(epochs=30, batch_size=8, lr=1e-3, kappa=4, image_size=64,
                       channels=32, backbone_stages=4)


@pytest.fixture(scope="module")
def desk_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk") / "synthetic"
    manifest = generate_synthetic(root, classes=2, per_class=64, size=64, seed=20250809)
    return load_split(manifest, "train"), load_split(manifest, "test")


def tiny_image_and_boxes():
    """32x32 fixture with kappa=2 regions (R+1 = 4 boxes, whole image last)."""
    img = np.clip(blob_image(32, 10.0, 11.0, sigma=2.5).pixels
                  + blob_image(32, 22.0, 20.0, sigma=2.5).pixels, 0.0, 1.0)
    rgb = np.repeat(img[..., None], 3, axis=2)
    rs = build_region_set(rgb, DetectorConfig(), GmmConfig(k=2, seed=0), kappa=2)
    boxes = rs.boxes()
    assert len(boxes) == 4
    return rgb, boxes


class TestCriterion1GradientCorrectness:
    def test_end_to_end_gradient(self):
        started = time.perf_counter()
        rng = np.random.default_rng(1)
        params = init_params(num_classes=2, channels=8, stages=2, seed=11)
        params.self_attn.delta.data = np.asarray(0.2)
        randomize_heads(params, rng)
        img, boxes = tiny_image_and_boxes()

        def loss():
            return cross_entropy(forward(img, boxes, params), 1)

        err = check_gradients(loss, params.as_dict(), epsilon=1e-4)
        elapsed = time.perf_counter() - started
        report("criterion 1: end-to-end gradient vs central differences",
               err < 1e-4 and elapsed < 60.0,
               f"max rel err {err:.2e}, {elapsed:.1f}s")


class TestCriterion2IdentityAtInit:
    def test_delta_zero_identity_bitwise(self):
        rng = np.random.default_rng(2)
        failures = 0
        for trial in range(100):
            if trial % 10 == 0:
                params = init_params(num_classes=2, channels=8, seed=trial)
                assert float(params.self_attn.delta.data) == 0.0
            h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
            x = rng.normal(size=(h, w, 8))
            out = self_attention(T.Tensor(x), params.self_attn)
            if out.data.tobytes() != x.tobytes():
                failures += 1
        report("criterion 2: self-attention is the bitwise identity at delta=0",
               failures == 0, f"{failures}/100 inputs differed")


class TestCriterion3RegionCountLaw:
    def test_counts_for_kappa_1_to_16(self):
        bad = []
        for kappa in range(1, 17):
            flat = np.full((64, 64, 3), 0.5)
            rs = build_region_set(flat, DetectorConfig(), GmmConfig(k=kappa), kappa)
            if rs.total_srs != kappa + kappa * (kappa - 1) // 2:
                bad.append(kappa)
            if len(rs.boxes()) != rs.total_srs + 1:
                bad.append(kappa)
        report("criterion 3: |SRs| == kappa + kappa(kappa-1)/2 for kappa in [1,16]",
               not bad, f"violations at kappa={bad}" if bad else "4->10, 8->36 included")


class TestCriterion4EmMonotonicity:
    def test_200_random_point_sets(self):
        rng = np.random.default_rng(4)
        violations = []
        for trial in range(200):
            n = int(rng.integers(20, 201))
            k = int(rng.integers(1, 9))
            pts = rng.uniform(0, 224, size=(n, 2))
            lls = []

            def hook(ll, model):
                lls.append(ll)
                for cov in model.covariances:
                    eigs = np.linalg.eigvalsh(cov)
                    slack = 1e-12 * max(1.0, float(np.abs(cov).max()))
                    if (eigs <= 0).any() or (eigs < 1e-6 - slack).any():
                        violations.append((trial, "non-SPD covariance"))

            fit_gmm(pts, GmmConfig(k=k, seed=trial), iteration_hook=hook)
            drops = [b - a for a, b in zip(lls, lls[1:]) if b < a - 1e-8]
            if drops:
                violations.append((trial, f"log-likelihood drop {min(drops):.2e}"))
        report("criterion 4: EM log-likelihood non-decreasing and covariances SPD "
               "(200 random sets)", not violations, str(violations[:3]))


class TestCriterion5OracleEquivalence:
    def test_50_instances_each(self):
        rng = np.random.default_rng(5)
        worst = {"self_attention": 0.0, "inter_attention": 0.0,
                 "aggregate_regions": 0.0, "classify": 0.0}
        for trial in range(50):
            c = int(rng.choice([8, 16]))
            params = init_params(num_classes=int(rng.integers(2, 6)), channels=c,
                                 seed=1000 + trial)
            params.self_attn.delta.data = np.asarray(rng.normal())
            randomize_heads(params, rng)

            x = rng.normal(size=(int(rng.integers(2, 4)), int(rng.integers(2, 4)), c))
            got = self_attention(T.Tensor(x), params.self_attn).data
            worst["self_attention"] = max(
                worst["self_attention"],
                float(np.abs(got - self_attention_oracle(x, params.self_attn)).max()))

            r = int(rng.integers(2, 6))
            feats = [rng.normal(size=(3, 3, c)) for _ in range(r)]
            m, att = inter_attention([T.Tensor(f) for f in feats], params.inter)
            want_m, want_att = inter_attention_oracle(feats, params.inter)
            worst["inter_attention"] = max(
                worst["inter_attention"],
                float(np.abs(m.data - want_m).max()),
                float(np.abs(att.data - want_att).max()))

            alphas = rng.normal(size=(r, 3, 3, c))
            got_f = aggregate_regions(T.Tensor(alphas), params.inter).data
            want_f, _ = aggregate_oracle(alphas, params.inter)
            worst["aggregate_regions"] = max(
                worst["aggregate_regions"], float(np.abs(got_f - want_f).max()))

            fhat = rng.normal(size=(5, 5, c))
            got_p = classify(T.Tensor(fhat), params.fusion_cls).data
            worst["classify"] = max(
                worst["classify"],
                float(np.abs(got_p - classify_oracle(fhat, params.fusion_cls)).max()))
        bad = {k: v for k, v in worst.items() if v >= 1e-10}
        report("criterion 5: attention/aggregation/classify match brute-force "
               "oracles to 1e-10 (50 instances)", not bad,
               "; ".join(f"{k} {v:.1e}" for k, v in worst.items()))


class TestCriterion6DeskScaleLearning:
    def test_learning_across_10_seeds(self, desk_dataset):
        train_items, test_items = desk_dataset
        assert len(train_items) == 128 and len(test_items) == 32
        started = time.perf_counter()
        solved = 0
        outcomes = []
        for seed in range(10):
            cfg = dataclasses.replace(DESK_CFG, seed=seed)
            params = init_params(2, channels=cfg.channels, stages=cfg.backbone_stages,
                                 seed=seed)
            hit = {}

            def stop_when_solved(epoch, row):
                if row["train_top1"] >= 0.95:
                    tr = evaluate(train_items, params, cfg).top1
                    te = evaluate(test_items, params, cfg).top1
                    if tr >= 0.95 and te >= 0.80:
                        hit.update(epoch=epoch, train=tr, test=te)
                        return False
                return True

            train(train_items, params, cfg, epoch_callback=stop_when_solved)
            if hit:
                solved += 1
                outcomes.append(f"seed {seed}: ep{hit['epoch']} "
                                f"{hit['train']:.2f}/{hit['test']:.2f}")
            else:
                tr = evaluate(train_items, params, cfg).top1
                te = evaluate(test_items, params, cfg).top1
                outcomes.append(f"seed {seed}: unsolved {tr:.2f}/{te:.2f}")
        elapsed = time.perf_counter() - started
        for line in outcomes:
            print("   ", line)
        report("criterion 6: >=95% train and >=80% test within 30 epochs for "
               ">=8/10 seeds, <15 min",
               solved >= 8 and elapsed < 900.0,
               f"{solved}/10 seeds, {elapsed:.0f}s")


class TestCriterion7AblationDirection:
    def test_component_ordering(self, desk_dataset):
        train_items, test_items = desk_dataset
        budget = DESK_CFG  # same fixed 30-epoch budget for every variant
        means = {}
        for name, variant in [("full", {}),
                              ("no_inter", {"use_inter_attention": False}),
                              ("whole_only", {"region_mode": "whole"})]:
            accs = []
            for seed in range(5):
                cfg = dataclasses.replace(budget, seed=seed, **variant)
                params = init_params(2, channels=cfg.channels,
                                     stages=cfg.backbone_stages, seed=seed)
                train(train_items, params, cfg)
                accs.append(evaluate(test_items, params, cfg).top1)
            means[name] = float(np.mean(accs))
            print(f"    {name}: mean test top-1 {means[name]:.3f} "
                  f"({[round(a, 2) for a in accs]})")
        ordered = means["full"] >= means["no_inter"] >= means["whole_only"]
        margin = means["full"] - means["whole_only"] >= 0.05
        report("criterion 7: full >= no-inter-attention >= whole-image-only, "
               "full beats whole-only by >=5 points",
               ordered and margin,
               f"full {means['full']:.3f}, no-inter {means['no_inter']:.3f}, "
               f"whole {means['whole_only']:.3f}")


class TestCriterion8MetricCorrectness:
    def test_metric_oracle_and_uniform_ce(self):
        rng = np.random.default_rng(8)
        worst = 0.0
        exact_fail = 0
        for _ in range(20):
            probs = rng.uniform(size=(12, 3))
            probs /= probs.sum(axis=1, keepdims=True)
            labels = rng.integers(0, 3, size=12)
            rep = compute_metrics(probs, labels)
            top1, top5, mean_ap, aps = metrics_oracle(probs, labels)
            if rep.top1 != top1 or rep.top5 != top5:
                exact_fail += 1
            worst = max(worst, abs(rep.mean_ap - mean_ap))
            for got, want in zip(rep.per_class_ap, aps):
                if want is not None:
                    worst = max(worst, abs(got - want))
        ce = cross_entropy(T.Tensor(np.full(10, 0.1)), 7).item()
        ce_ok = abs(ce - float(np.log(10))) <= 1e-9
        report("criterion 8: top-1/top-5/mAP match the brute-force oracle; "
               "uniform CE == ln 10",
               exact_fail == 0 and worst < 1e-12 and ce_ok,
               f"max AP deviation {worst:.1e}, CE {ce:.9f}")


class TestCriterion9DeterminismPersistence:
    CFG = TrainConfig(epochs=4, batch_size=4, lr=1e-3, kappa=2, image_size=64,
                      channels=8, backbone_stages=2, seed=77, float32=True)

    @staticmethod
    def _items(desk_dataset):
        train_items, _ = desk_dataset
        return train_items[:8] + train_items[64:72]

    def _fresh(self):
        return init_params(2, channels=8, stages=2, seed=77, dtype=np.float32)

    def _state(self):
        return SgdState(learning_rate=self.CFG.lr, momentum=self.CFG.momentum,
                        decay_factor=self.CFG.decay_factor,
                        decay_period_epochs=self.CFG.decay_every)

    def test_reproducibility_and_resume(self, desk_dataset, tmp_path):
        items = self._items(desk_dataset)

        def snapshot(params):
            return {n: t.data.tobytes() for n, t in params.named_parameters()}

        # (a) bitwise reproducibility of two identical runs
        runs = []
        for _ in range(2):
            params = self._fresh()
            train(items, params, self.CFG, state=self._state())
            runs.append(snapshot(params))
        reproducible = runs[0] == runs[1]

        # (b) checkpoint round-trip: load(save) bitwise, save(load(save)) bytes
        params = self._fresh()
        state = self._state()
        train(items, params, self.CFG, state=state)
        meta = {"num_classes": 2, "channels": 8, "backbone_stages": 2, "kappa": 2,
                "image_size": 64, "seed": 77, "epoch": 4}
        p1 = tmp_path / "a.agnet"
        p2 = tmp_path / "b.agnet"
        save_checkpoint(p1, params, meta, state=state)
        loaded, loaded_state, loaded_meta = load_checkpoint(p1)
        roundtrip = snapshot(loaded) == snapshot(params)
        save_checkpoint(p2, loaded, loaded_meta, state=loaded_state)
        bytes_equal = p1.read_bytes() == p2.read_bytes()

        # (c) straight run of 4 epochs == 2 epochs + checkpointed resume of 2
        straight = self._fresh()
        train(items, straight, self.CFG, state=self._state())

        half_cfg = dataclasses.replace(self.CFG, epochs=2)
        part = self._fresh()
        part_state = self._state()
        train(items, part, half_cfg, state=part_state)
        ck = tmp_path / "half.agnet"
        save_checkpoint(ck, part, {**meta, "epoch": 2}, state=part_state)
        resumed, resumed_state, _ = load_checkpoint(ck)
        resumed_state.learning_rate = self.CFG.lr
        train(items, resumed, self.CFG, state=resumed_state, start_epoch=3)
        resume_equal = snapshot(resumed) == snapshot(straight)

        report("criterion 9: bitwise reproducibility, lossless checkpoints, "
               "resume == straight run",
               reproducible and roundtrip and bytes_equal and resume_equal,
               f"reproducible={reproducible} roundtrip={roundtrip} "
               f"bytes={bytes_equal} resume={resume_equal}")


class TestCriterion10DetectorSanity:
    def test_constant_blob_and_translation(self):
        flat = GrayImage(np.full((64, 64), 0.5))
        constant_ok = detect_keypoints(flat) == []

        blob = blob_image(64, 32.0, 32.0, sigma=2.5)
        kps = detect_keypoints(blob)
        blob_ok = bool(kps) and min(
            np.hypot(p.x - 32, p.y - 32) for p in kps) <= 2.0

        base = blob_image(96, 40.0, 44.0, sigma=2.0, background=0.1)
        dx, dy = 5, 3
        shifted = np.full((96, 96), 0.1)
        shifted[dy:, dx:] = base.pixels[:-dy, :-dx]
        cfg = DetectorConfig(octaves=2)
        kps_a = [p for p in detect_keypoints(base, cfg)
                 if 10 <= p.x <= 86 and 10 <= p.y <= 86]
        kps_b = detect_keypoints(GrayImage(shifted), cfg)
        trans_ok = bool(kps_a) and all(
            min(np.hypot(q.x - p.x - dx, q.y - p.y - dy) for q in kps_b) <= 1.0
            for p in kps_a)

        report("criterion 10: detector sanity (constant/blob/translation)",
               constant_ok and blob_ok and trans_ok,
               f"constant={constant_ok} blob={blob_ok} translation={trans_ok}")
