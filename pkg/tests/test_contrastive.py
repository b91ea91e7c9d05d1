"""Contrastive losses and batch sampling."""

import numpy as np
import pytest

from polsarcl.autodiff import Tensor, l2_normalize
from polsarcl.contrastive import (
    BatchSampler,
    SamplingStrategy,
    info_nce,
    sample_batch,
    superpixel_info_nce,
    superpixel_info_nce_per_anchor,
)
from polsarcl.superpixel import SuperpixelMap


def unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def grid_map(h=8, w=8, cells=4):
    labels = np.zeros((h, w), dtype=np.int32)
    step_r, step_c = h // 2, w // 2
    labels[step_r:, :] += 2
    labels[:, step_c:] += 1
    counts = np.bincount(labels.ravel(), minlength=cells)
    centers = np.zeros((cells, 2))
    return SuperpixelMap(labels=labels, centers=centers, counts=counts)


class TestInfoNCE:
    def test_perfect_pair_no_negatives(self):
        q = np.array([1.0, 0.0])
        loss = info_nce(q, q, np.empty((0, 2)), tau=1.0)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_two_orthogonal_negatives(self):
        q = np.array([1.0, 0.0, 0.0])
        negs = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        loss = info_nce(q, q, negs, tau=1.0)
        expected = -np.log(np.e / (np.e + 2.0))
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    def test_non_unit_inputs_rejected(self):
        with pytest.raises(ValueError, match="unit"):
            info_nce(np.array([2.0, 0.0]), np.array([1.0, 0.0]), np.empty((0, 2)), 1.0)

    def test_non_positive_temperature_rejected(self):
        q = np.array([1.0, 0.0])
        with pytest.raises(ValueError, match="tau"):
            info_nce(q, q, np.empty((0, 2)), tau=0.0)

    def test_loss_decreases_as_positive_aligns(self):
        rng = np.random.default_rng(0)
        negs = unit_rows(rng, 6, 4)
        q = np.zeros(4)
        q[0] = 1.0
        losses = []
        for angle in (0.9, 0.5, 0.1):
            k = np.array([np.cos(angle), np.sin(angle), 0.0, 0.0])
            losses.append(info_nce(q, k, negs, tau=0.07).item())
        assert losses[0] > losses[1] > losses[2]


class TestGroupedLoss:
    def test_single_superpixel_batch_is_zero(self):
        rng = np.random.default_rng(1)
        q = unit_rows(rng, 6, 8)
        k = unit_rows(rng, 6, 8)
        ids = np.zeros(6, dtype=int)
        loss = superpixel_info_nce(q, k, ids, tau=0.5)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_two_member_example(self):
        q = np.array([[1.0, 0.0], [0.0, 1.0]])
        k = np.array([[1.0, 0.0], [0.0, 1.0]])
        per = superpixel_info_nce_per_anchor(q, k, np.array([0, 1]), tau=1.0)
        expected = -np.log(np.e / (np.e + 1.0))
        np.testing.assert_allclose(per.data, [expected, expected], atol=1e-12)

    def test_reduces_to_classic_loss_with_distinct_ids(self):
        rng = np.random.default_rng(2)
        b, d = 64, 16
        q = unit_rows(rng, b, d)
        k = unit_rows(rng, b, d)
        ids = np.arange(b)
        per = superpixel_info_nce_per_anchor(q, k, ids, tau=0.07).data
        for i in range(b):
            negs = np.delete(k, i, axis=0)
            classic = info_nce(q[i], k[i], negs, tau=0.07).item()
            assert per[i] * (b - 1) == pytest.approx(classic, abs=1e-10)

    def test_invariant_to_negative_permutation(self):
        rng = np.random.default_rng(3)
        b = 10
        q = unit_rows(rng, b, 6)
        k = unit_rows(rng, b, 6)
        ids = np.array([0, 0, 1, 1, 2, 2, 3, 3, 4, 4])
        base = superpixel_info_nce(q, k, ids, tau=0.2).item()
        perm = np.array([0, *rng.permutation(np.arange(1, b))])
        per0 = superpixel_info_nce_per_anchor(q, k, ids, tau=0.2).data[0]
        permuted = superpixel_info_nce_per_anchor(
            q[perm], k[perm], ids[perm], tau=0.2
        ).data
        anchor0_pos = np.flatnonzero(perm == 0)[0]
        assert permuted[anchor0_pos] == pytest.approx(per0, abs=1e-12)
        assert superpixel_info_nce(q[perm], k[perm], ids[perm], tau=0.2).item() == \
            pytest.approx(base, abs=1e-12)

    def test_loss_monotone_in_positive_logit(self):
        rng = np.random.default_rng(4)
        k = unit_rows(rng, 5, 4)
        ids = np.arange(5)
        losses = []
        for mix in (0.2, 0.6, 0.95):
            q = k * mix + unit_rows(rng, 5, 4) * 0.01
            q[0] = np.cos(1.2 - mix) * k[0] + np.sin(1.2 - mix) * np.array([0, 0, 0, 1.0])
            q = q / np.linalg.norm(q, axis=1, keepdims=True)
            losses.append(
                superpixel_info_nce_per_anchor(q, k, ids, tau=0.5).data[0]
            )
        assert losses[0] > losses[1] > losses[2]

    def test_gradient_flows_to_both_views(self):
        rng = np.random.default_rng(5)
        q = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        k = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        loss = superpixel_info_nce(
            l2_normalize(q, axis=-1), l2_normalize(k, axis=-1),
            np.array([0, 0, 1, 2]), tau=0.3,
        )
        loss.backward()
        assert q.grad is not None and np.any(q.grad != 0)
        assert k.grad is not None and np.any(k.grad != 0)

    def test_batch_of_one_rejected(self):
        with pytest.raises(ValueError):
            superpixel_info_nce(np.ones((1, 1)), np.ones((1, 1)), np.array([0]), 1.0)


class TestSampling:
    def test_superpixel_mode_ids_distinct(self):
        spmap = grid_map()
        rng = np.random.default_rng(6)
        batch = sample_batch(spmap, SamplingStrategy("superpixel"), 4, rng)
        assert len(set(batch.ids.tolist())) == 4

    def test_every_superpixel_represented_at_capacity(self):
        spmap = grid_map()
        rng = np.random.default_rng(7)
        batch = sample_batch(spmap, SamplingStrategy("superpixel"), 4, rng)
        assert sorted(batch.ids.tolist()) == [0, 1, 2, 3]
        for r, c, sid in zip(batch.rows, batch.cols, batch.ids):
            assert spmap.labels[r, c] == sid

    def test_capacity_exceeded_raises(self):
        spmap = grid_map()
        rng = np.random.default_rng(8)
        with pytest.raises(ValueError, match="exceeds"):
            sample_batch(spmap, SamplingStrategy("superpixel"), 5, rng)

    def test_fixed_seed_reproducible(self):
        spmap = grid_map(16, 16)
        a = sample_batch(spmap, SamplingStrategy("superpixel"), 4,
                         np.random.default_rng(9))
        b = sample_batch(spmap, SamplingStrategy("superpixel"), 4,
                         np.random.default_rng(9))
        np.testing.assert_array_equal(a.rows, b.rows)
        np.testing.assert_array_equal(a.cols, b.cols)
        np.testing.assert_array_equal(a.ids, b.ids)

    def test_vanilla_mode_unique_instances(self):
        spmap = grid_map(16, 16)
        batch = sample_batch(spmap, SamplingStrategy("vanilla"), 32,
                             np.random.default_rng(10))
        assert len(set(batch.ids.tolist())) == 32

    def test_label_oracle_groups_by_class(self):
        spmap = grid_map(8, 8)
        labels = np.zeros((8, 8), dtype=np.int32)
        labels[:4] = 1
        labels[4:] = 2
        batch = sample_batch(spmap, SamplingStrategy("label-oracle"), 16,
                             np.random.default_rng(11), labels=labels)
        for r, _c, cid in zip(batch.rows, batch.cols, batch.ids):
            assert cid == (1 if r < 4 else 2)

    def test_pool_restricts_candidates(self):
        spmap = grid_map(8, 8)
        pool = np.zeros(64, dtype=bool)
        pool[:8] = True  # first row only: superpixels 0 and 1
        sampler = BatchSampler(spmap, "superpixel", pool=pool)
        assert sampler.capacity == 2
        batch = sampler.sample(2, np.random.default_rng(12))
        assert np.all(batch.rows == 0)
