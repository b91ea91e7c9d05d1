"""Training loops: determinism, resume, fine-tuning, prediction, config."""

import dataclasses

import numpy as np
import pytest

from polsarcl.contrastive import superpixel_info_nce_per_anchor
from polsarcl.decomposition import assemble_cube
from polsarcl.networks import build_online_network, build_target_network
from polsarcl.nn import checkpoint_bytes
from polsarcl.sar import WishartClassSpec, block_layout, synthesize_wishart
from polsarcl.superpixel import pauli_features, slic
from polsarcl.training import (
    TrainConfig,
    apply_config_values,
    config_to_text,
    cross_entropy,
    finetune,
    parse_config_text,
    predict_map,
    pretrain,
)
from polsarcl.autodiff import Tensor


def scene(size=48, cell=12, looks=8, seed=0):
    specs = [
        WishartClassSpec(1, np.diag([1.0, 0.3, 0.05]), looks=looks),
        WishartClassSpec(2, np.diag([0.05, 0.3, 1.0]), looks=looks),
        WishartClassSpec(3, np.array([[0.4, 0.3, 0.0], [0.3, 0.4, 0.0],
                                      [0.0, 0.0, 0.2]], dtype=complex), looks=looks),
    ]
    layout = block_layout(size, size, 3, cell=cell, seed=seed)
    img = synthesize_wishart(specs, layout, seed=seed + 100)
    cube = assemble_cube(img)
    cube.set_active_groups([0, 1, 2])
    spmap = slic(pauli_features(img), 16, compactness=2.0, iters=5)
    return img, cube, spmap


FAST = dict(epochs=2, batch_size=16, finetune_epochs=8, finetune_batch_size=32,
            unlabeled_fraction=0.2, label_fraction=0.05)


class TestConfigFile:
    def test_roundtrip(self):
        cfg = TrainConfig(tau=0.05, beam=(2, 2, 1), theta=4, seed=9)
        text = config_to_text(cfg)
        values = parse_config_text(text)
        back = apply_config_values(TrainConfig(), values)
        assert back.tau == 0.05
        assert back.beam == (2, 2, 1)
        assert back.theta == 4
        assert back.seed == 9

    def test_unknown_key_named_in_error(self):
        with pytest.raises(ValueError, match="bogus_key"):
            parse_config_text("bogus_key = 3\n")

    def test_comments_and_blanks_ignored(self):
        values = parse_config_text("# comment\n\ntau = 0.2  # inline\n")
        assert values == {"tau": 0.2}

    def test_bad_value_rejected(self):
        with pytest.raises(ValueError, match="epochs"):
            parse_config_text("epochs = soon\n")

    def test_validation_of_fields(self):
        with pytest.raises(ValueError):
            TrainConfig(tau=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(sampling_mode="nope")
        with pytest.raises(ValueError):
            TrainConfig(label_fraction=0.0)


class TestPretrain:
    def test_unfiltered_cube_rejected_by_default(self):
        img, cube, spmap = scene()
        cube.set_active_groups(range(6))
        with pytest.raises(ValueError, match="unfiltered"):
            pretrain(img, cube, spmap, TrainConfig(**FAST))

    def test_checkpoints_bit_identical_across_runs(self):
        img, cube, spmap = scene()
        cfg = TrainConfig(seed=5, **FAST)
        a = pretrain(img, cube, spmap, cfg)
        b = pretrain(img, cube, spmap, cfg)
        assert checkpoint_bytes(a.checkpoint) == checkpoint_bytes(b.checkpoint)

    def test_resume_matches_straight_run(self):
        img, cube, spmap = scene()
        cfg4 = TrainConfig(seed=3, **{**FAST, "epochs": 4})
        straight = pretrain(img, cube, spmap, cfg4)
        cfg2 = TrainConfig(seed=3, **{**FAST, "epochs": 2})
        half = pretrain(img, cube, spmap, cfg2)
        resumed = pretrain(img, cube, spmap, cfg4, resume=half.checkpoint)
        assert checkpoint_bytes(resumed.checkpoint) == checkpoint_bytes(straight.checkpoint)

    def test_loss_scale_at_initialization(self):
        img, cube, spmap = scene()
        cfg = TrainConfig(seed=1, tau=1.0, **{**FAST, "epochs": 1})
        result = pretrain(img, cube, spmap, cfg)
        b = min(cfg.batch_size, spmap.n_superpixels)
        uniform = np.log(b) / (b - 1)
        assert 0.5 * uniform <= result.epoch_losses[0] <= 2.0 * uniform

    def test_epoch_loss_decreases_over_training(self):
        img, cube, spmap = scene(size=64, cell=16)
        cfg = TrainConfig(seed=2, epochs=10, batch_size=32,
                          unlabeled_fraction=0.2, label_fraction=0.05)
        result = pretrain(img, cube, spmap, cfg)
        losses = result.epoch_losses
        drops = sum(1 for a, b in zip(losses, losses[1:]) if b < a)
        assert drops >= 8

    def test_heterogeneous_branches_share_no_parameters(self):
        img, cube, spmap = scene()
        result = pretrain(img, cube, spmap, TrainConfig(seed=0, **FAST))
        online_ids = {id(p) for p in result.online.parameters()}
        target_ids = {id(p) for p in result.target.parameters()}
        assert not online_ids & target_ids

    def test_siamese_mode_shares_everything(self):
        img, cube, spmap = scene()
        cfg = TrainConfig(seed=0, architecture="siamese", **FAST)
        result = pretrain(img, cube, spmap, cfg)
        assert result.online is result.target
        assert all(not k.startswith("target/") for k in result.checkpoint.params)

    def test_vanilla_and_oracle_modes_run(self):
        img, cube, spmap = scene()
        for mode in ("vanilla", "label-oracle"):
            cfg = TrainConfig(seed=0, sampling_mode=mode, **FAST)
            result = pretrain(img, cube, spmap, cfg)
            assert len(result.epoch_losses) == cfg.epochs


class TestGroupedLossReduction:
    def test_matches_classic_on_network_outputs(self):
        img, cube, spmap = scene()
        rng = np.random.default_rng(0)
        online = build_online_network(rng, patch_size=9)
        target = build_target_network(rng, input_len=int(cube.active.sum()))
        online.eval()
        target.eval()
        from polsarcl.sar import PatchExtractor

        pe = PatchExtractor(img, 9)
        idx = rng.choice(img.height * img.width, 8, replace=False)
        rows, cols = np.unravel_index(idx, (img.height, img.width))
        q = online(Tensor(pe.batch(rows, cols)))
        k = target(Tensor(cube.active_vectors().astype(np.float32)[idx][:, None, :]))
        per = superpixel_info_nce_per_anchor(q, k, np.arange(8), tau=0.07)
        assert per.shape == (8,)
        assert np.all(per.data > 0)


class TestFinetune:
    def test_full_labels_reach_high_train_accuracy(self):
        img, cube, spmap = scene()
        cfg = TrainConfig(seed=0, **{**FAST, "label_fraction": 1.0,
                                     "finetune_epochs": 25})
        result = finetune(None, img, img.labels, cfg)
        pred = predict_map(result.model, img)
        train_mask = result.train_labels > 0
        acc = (pred[train_mask] == img.labels[train_mask]).mean()
        assert acc >= 0.95

    def test_missing_class_rejected(self):
        img, cube, spmap = scene()
        labels = img.labels.copy()
        labels[labels == 2] = 0
        labels[labels == 3] = 0
        with pytest.raises(ValueError, match="2 labeled classes"):
            finetune(None, img, labels, TrainConfig(**FAST))

    def test_frozen_encoder_trains_head_only(self):
        img, cube, spmap = scene()
        cfg = TrainConfig(seed=0, frozen_encoder=True, **FAST)
        pre = pretrain(img, cube, spmap, TrainConfig(seed=0, **FAST))
        before = {k: v.copy() for k, v in pre.checkpoint.params.items()
                  if k.startswith("online/encoder")}
        result = finetune(pre.checkpoint, img, img.labels, cfg)
        after = result.model.encoder.state_arrays("online/encoder.")
        for key, arr in before.items():
            if "running" in key:
                continue
            np.testing.assert_array_equal(after[key], arr)
        n_head = sum(p.size for p in result.model.head.parameters())
        assert n_head == 3 * (result.model.m + 1)

    def test_checkpoint_roundtrip_preserves_predictions(self, tmp_path):
        from polsarcl.nn import load_checkpoint, save_checkpoint
        from polsarcl.training import classifier_from_checkpoint

        img, cube, spmap = scene()
        cfg = TrainConfig(seed=4, **FAST)
        result = finetune(None, img, img.labels, cfg)
        pred_before = predict_map(result.model, img)
        path = str(tmp_path / "clf.pckp")
        save_checkpoint(path, result.checkpoint())
        model, train_labels = classifier_from_checkpoint(load_checkpoint(path))
        np.testing.assert_array_equal(train_labels, result.train_labels)
        pred_after = predict_map(model, img)
        np.testing.assert_array_equal(pred_before, pred_after)


class TestPredictMap:
    def test_dimensions_and_classes(self):
        img, cube, spmap = scene()
        cfg = TrainConfig(seed=0, **FAST)
        result = finetune(None, img, img.labels, cfg)
        pred = predict_map(result.model, img)
        assert pred.shape == (img.height, img.width)
        assert set(np.unique(pred)) <= {1, 2, 3}

    def test_deterministic(self):
        img, cube, spmap = scene()
        cfg = TrainConfig(seed=0, **FAST)
        result = finetune(None, img, img.labels, cfg)
        a = predict_map(result.model, img)
        b = predict_map(result.model, img)
        np.testing.assert_array_equal(a, b)


class TestCrossEntropy:
    def test_matches_direct_formula(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((6, 4))
        y = rng.integers(0, 4, size=6)
        loss = cross_entropy(Tensor(logits), y).item()
        z = logits - logits.max(axis=1, keepdims=True)
        ref = float(np.mean(np.log(np.exp(z).sum(axis=1)) - z[np.arange(6), y]))
        assert loss == pytest.approx(ref, abs=1e-12)

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(1)
        logits = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
        y = np.array([0, 1, 2, 1, 0])
        cross_entropy(logits, y).backward()
        p = np.exp(logits.data)
        p /= p.sum(axis=1, keepdims=True)
        onehot = np.zeros((5, 3))
        onehot[np.arange(5), y] = 1
        np.testing.assert_allclose(logits.grad, (p - onehot) / 5, atol=1e-12)
