import copy
import csv
import math
from collections import OrderedDict

import numpy as np
import pytest
import torch

from tapnet.architectures import build
from tapnet.data import SynthSpec, generate_synthetic
from tapnet.errors import BatchSizeError, ConfigError, LabelingError, TrainingError
from tapnet.losses import mmd_squared
from tapnet.signals import SIGNAL_LENGTH, Dataset, label_fraction_mask, stratified_folds
from tapnet.training import (
    METRIC_FIELDS,
    OptimizerState,
    TrainConfig,
    batch_indices,
    cosine_lr,
    cross_validate,
    sgd_momentum_step,
    train_classifier,
    train_no_transfer,
    train_transfer,
    write_metrics_csv,
)


def toy_two_class(n=40, seed=0):
    """Class 0 is a positive tone, class 1 the same tone inverted."""
    rng = np.random.default_rng(seed)
    tone = np.sin(2 * np.pi * 3000 / 48000 * np.arange(SIGNAL_LENGTH)) * np.exp(-np.arange(SIGNAL_LENGTH) / 300)
    labels = np.arange(n) % 2
    samples = np.where(labels[:, None] == 0, tone, -tone) + 0.05 * rng.standard_normal((n, SIGNAL_LENGTH))
    return Dataset(samples.astype(np.float32), labels, np.zeros(n), ("toy",))


def small_synth(n=140, seed=0, mult=1.0, domain="src"):
    counts = {c: n // 7 for c in range(7)}
    return generate_synthetic(SynthSpec.default(frequency_multiplier=mult, domain=domain), counts, seed)


def weights_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


class TestOptimizer:
    def params(self):
        return OrderedDict(w=torch.tensor([1.0, -2.0], dtype=torch.float64))

    def test_zero_gradient(self):
        p = self.params()
        st = OptimizerState.zeros_like(p)
        sgd_momentum_step(p, {"w": torch.zeros(2, dtype=torch.float64)}, st, lr=0.1)
        assert p["w"].tolist() == [1.0, -2.0]

    @pytest.mark.parametrize("k", [1, 2, 5, 20])
    def test_geometric_velocity(self, k):
        p = self.params()
        st = OptimizerState.zeros_like(p, momentum=0.9)
        g = torch.tensor([0.5, -1.5], dtype=torch.float64)
        for _ in range(k):
            sgd_momentum_step(p, {"w": g}, st, lr=0.0)
        expected = g * sum(0.9**j for j in range(k))
        assert torch.allclose(st.velocity["w"], expected, rtol=0, atol=1e-14)

    def test_vanilla_when_momentum_zero(self):
        p = self.params()
        st = OptimizerState.zeros_like(p, momentum=0.0)
        g = torch.tensor([0.5, 0.25], dtype=torch.float64)
        sgd_momentum_step(p, {"w": g}, st, lr=0.1)
        sgd_momentum_step(p, {"w": g}, st, lr=0.1)
        assert torch.allclose(p["w"], torch.tensor([1.0 - 0.1, -2.0 - 0.05], dtype=torch.float64))

    def test_non_finite_gradient(self):
        p = self.params()
        with pytest.raises(TrainingError):
            sgd_momentum_step(p, {"w": torch.tensor([1.0, math.nan], dtype=torch.float64)}, OptimizerState.zeros_like(p), 0.1)


class TestCosine:
    def test_endpoints_exact(self):
        assert cosine_lr(0, 1000, 0.01) == 0.01
        assert cosine_lr(1000, 1000, 0.01) == 0.0

    def test_midpoint(self):
        assert cosine_lr(500, 1000, 0.01) == pytest.approx(0.005, abs=1e-15)

    def test_non_increasing(self):
        lrs = [cosine_lr(t, 777) for t in range(778)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.iterations, cfg.batch_size, cfg.lr0, cfg.momentum, cfg.sigma, cfg.beta, cfg.lam) == (
            50000, 32, 0.01, 0.9, 1.0, 1.0, 1e-4
        )
        assert TrainConfig.for_transfer().batch_size == 64

    def test_round_trip(self):
        cfg = TrainConfig(iterations=7, seed=3, architecture="plain")
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            TrainConfig(iterations=0)
        with pytest.raises(ConfigError):
            TrainConfig(beta=-1)
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"iterations": 3, "learning_rate": 0.1})


def test_batch_stream_is_keyed_by_iteration():
    a = batch_indices(5, 1, 17, 100, 8)
    assert np.array_equal(a, batch_indices(5, 1, 17, 100, 8))
    assert not np.array_equal(a, batch_indices(5, 2, 17, 100, 8))
    assert a.min() >= 0 and a.max() < 100


class TestClassifier:
    def test_descent(self, tiny_spec):
        ds = toy_two_class()
        cfg = TrainConfig(iterations=10, batch_size=8, architecture=tiny_spec, seed=1)
        x = torch.tensor(ds.samples).unsqueeze(1)
        y = torch.from_numpy(ds.labels.astype(np.int64))

        def loss(model):
            with torch.no_grad():
                logits = copy.deepcopy(model).train()(x)[:, :, 0]
                return torch.nn.functional.cross_entropy(logits, y).item()

        before = loss(build(tiny_spec, seed=1))
        after = loss(train_classifier(ds, cfg).model)
        assert after < before

    def test_bit_identical_runs(self, tiny_spec, tmp_path):
        ds = small_synth(70)
        cfg = TrainConfig(iterations=15, batch_size=8, architecture=tiny_spec, seed=4)
        train_classifier(ds, cfg, checkpoint_path=tmp_path / "a.tapw")
        train_classifier(ds, cfg, checkpoint_path=tmp_path / "b.tapw")
        assert (tmp_path / "a.tapw").read_bytes() == (tmp_path / "b.tapw").read_bytes()

    def test_log_invariants(self, tiny_spec):
        ds = small_synth(70)
        res = train_classifier(ds, TrainConfig(iterations=20, batch_size=8, architecture=tiny_spec))
        assert [r["t"] for r in res.log] == list(range(20))
        assert res.log[0]["lr"] == 0.01
        assert all(b["lr"] <= a["lr"] for a, b in zip(res.log, res.log[1:]))
        for r in res.log:
            assert abs(r["total"] - (r["l_c"] + 1e-4 * r["l_1"])) < 1e-9
            assert r["l_da"] == r["l_pll"] == r["alpha"] == 0.0

    def test_empty(self, tiny_spec):
        with pytest.raises(ConfigError):
            train_classifier(small_synth(70).subset([]), TrainConfig(iterations=2, architecture=tiny_spec))

    def test_unlabeled(self, tiny_spec):
        ds = label_fraction_mask(small_synth(70), 0.5, 0)
        with pytest.raises(LabelingError):
            train_classifier(ds, TrainConfig(iterations=2, architecture=tiny_spec))

    def test_metrics_csv(self, tiny_spec, tmp_path):
        res = train_classifier(small_synth(70), TrainConfig(iterations=3, batch_size=4, architecture=tiny_spec))
        write_metrics_csv(tmp_path / "m.csv", res.log)
        rows = list(csv.DictReader(open(tmp_path / "m.csv")))
        assert tuple(rows[0]) == METRIC_FIELDS and len(rows) == 3
        assert float(rows[1]["total"]) == res.log[1]["total"]


class TestTransfer:
    def test_degenerate_matches_classifier(self, tiny_spec):
        src, tgt = small_synth(70, 0), small_synth(70, 1, 0.8, "tgt")
        tgt = label_fraction_mask(tgt, 0.0, 0)
        cfg = TrainConfig(iterations=12, batch_size=8, architecture=tiny_spec, seed=2)
        degenerate = TrainConfig(**{**cfg.to_dict(), "architecture": tiny_spec, "beta": 0.0, "alpha_mode": "off"})
        a = train_classifier(src, cfg)
        b = train_transfer(src, tgt, degenerate)
        assert weights_equal(a.model, b.model)
        assert [r["l_c"] for r in a.log] == [r["l_c"] for r in b.log]

    def test_alpha_and_identity_in_log(self, tiny_spec):
        src, tgt = small_synth(70, 0), label_fraction_mask(small_synth(70, 1, 0.8, "tgt"), 0.0, 0)
        res = train_transfer(src, tgt, TrainConfig(iterations=40, batch_size=4, architecture=tiny_spec))
        for r in res.log:
            if r["t"] <= 4:
                assert r["alpha"] == 0.0
            if r["t"] > 8:
                assert r["alpha"] == 1.0
            assert abs(r["total"] - (r["l_c"] + r["l_da"] + r["alpha"] * r["l_pll"] + 1e-4 * r["l_1"])) < 1e-9
        assert all(r["l_da"] > 0 for r in res.log)

    def test_labeled_target_joins_classification(self, tiny_spec):
        src = small_synth(70, 0)
        tgt = label_fraction_mask(small_synth(70, 1, 0.8, "tgt"), 1.0, 0)
        cfg = TrainConfig(iterations=3, batch_size=4, architecture=tiny_spec, beta=0.0, alpha_mode="off")
        a = train_transfer(src, tgt, cfg)
        b = train_classifier(src, cfg)
        assert not weights_equal(a.model, b.model)

    def test_batch_too_small(self, tiny_spec):
        with pytest.raises(BatchSizeError):
            train_transfer(small_synth(70), small_synth(70, 1), TrainConfig(iterations=2, batch_size=1, architecture=tiny_spec))

    def test_same_distribution_mmd_is_small(self, tiny_spec):
        src, tgt = small_synth(140, 0), small_synth(140, 1)
        res = train_transfer(src, label_fraction_mask(tgt, 0.0, 0), TrainConfig(iterations=100, batch_size=16, architecture=tiny_spec))
        same = np.mean([r["l_da"] for r in res.log])
        # oracle: MMD between class-disjoint batches through the same network
        model = copy.deepcopy(res.model).train()
        a = torch.tensor(src.samples[src.labels == 0][:16]).unsqueeze(1)
        b = torch.tensor(src.samples[src.labels == 6][:16]).unsqueeze(1)
        with torch.no_grad():
            _, feats = model.forward_features(torch.cat([a, b]), "gap")
        assert same < mmd_squared(feats[:16], feats[16:]).item()

    def test_no_transfer_baseline_uses_visible_labels(self, tiny_spec):
        src = small_synth(70, 0)
        tgt = label_fraction_mask(small_synth(70, 1, 0.8, "tgt"), 0.2, 0)
        res = train_no_transfer(src, tgt, TrainConfig(iterations=2, batch_size=4, architecture=tiny_spec))
        assert res.iteration == 2


class TestResume:
    def test_resume_matches_uninterrupted(self, tiny_spec, tmp_path):
        src, tgt = small_synth(70, 0), label_fraction_mask(small_synth(70, 1, 0.8, "tgt"), 0.1, 0)
        cfg = TrainConfig(iterations=20, batch_size=4, architecture=tiny_spec, seed=9)
        full = train_transfer(src, tgt, cfg, checkpoint_path=tmp_path / "full.tapw")
        train_transfer(src, tgt, cfg, stop_at=7, checkpoint_path=tmp_path / "part.tapw")
        resumed = train_transfer(src, tgt, cfg, resume=tmp_path / "part.tapw", checkpoint_path=tmp_path / "res.tapw")
        assert weights_equal(full.model, resumed.model)
        assert [r["t"] for r in resumed.log] == list(range(7, 20))
        assert (tmp_path / "full.tapw").read_bytes() == (tmp_path / "res.tapw").read_bytes()


class TestCrossValidate:
    def test_three_models_on_disjoint_thirds(self, tiny_spec):
        ds = stratified_folds(small_synth(63), 3, seed=0)
        seen = []
        bundle = cross_validate(ds, TrainConfig(iterations=2, batch_size=4, architecture=tiny_spec), 3, on_fold=lambda f, r, b: seen.append((f, b.total)))
        assert [f for f, _ in seen] == [0, 1, 2]
        assert sum(n for _, n in seen) == len(ds) == bundle.total
        assert len(bundle.fold_accuracies) == 3

    def test_needs_folds(self, tiny_spec):
        with pytest.raises(ConfigError):
            cross_validate(small_synth(63), TrainConfig(iterations=2, architecture=tiny_spec))

    def test_transfer_protocol_scores_ground_truth(self, tiny_spec):
        src = small_synth(63, 0)
        tgt = stratified_folds(small_synth(63, 1, 0.8, "tgt"), 3, seed=0)
        bundle = cross_validate(tgt, TrainConfig(iterations=2, batch_size=4, architecture=tiny_spec, label_fraction=0.0), 3, source=src)
        assert bundle.total == len(tgt)
