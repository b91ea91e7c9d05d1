"""Layers, shape checks, optimizer schedule and checkpoint round-trips."""

import numpy as np
import pytest

from polsarcl.autodiff import Tensor
from polsarcl.nn import (
    SGD,
    BatchNorm,
    Checkpoint,
    Conv2d,
    LayerSpec,
    Linear,
    build_network,
    checkpoint_bytes,
    cosine_lr,
    load_checkpoint,
    save_checkpoint,
)


class TestBatchNorm:
    def test_standardized_batch_passes_through(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((512, 4)).astype(np.float64)
        x = (x - x.mean(0)) / x.std(0)
        bn = BatchNorm(4, dtype=np.float64)
        out = bn(Tensor(x))
        np.testing.assert_allclose(out.data, x, atol=1e-4)

    def test_constant_channel_maps_to_beta(self):
        bn = BatchNorm(3, dtype=np.float64)
        bn.beta.data = np.array([1.0, 2.0, 3.0])
        x = Tensor(np.full((8, 3), 5.0))
        out = bn(x)
        np.testing.assert_allclose(out.data, np.tile([1.0, 2.0, 3.0], (8, 1)), atol=1e-12)

    def test_output_moments(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((256, 6, 5, 5)) * 3.0 + 1.0)
        bn = BatchNorm(6, dtype=np.float64)
        out = bn(x).data
        mean = out.mean(axis=(0, 2, 3))
        var = out.var(axis=(0, 2, 3))
        assert np.abs(mean).max() < 1e-6
        assert np.all((var > 1 - 1e-3) & (var < 1 + 1e-3))

    def test_batch_of_one_rejected_in_training(self):
        bn = BatchNorm(2, dtype=np.float64)
        with pytest.raises(ValueError):
            bn(Tensor(np.ones((1, 2))))

    def test_eval_uses_running_stats(self):
        rng = np.random.default_rng(2)
        bn = BatchNorm(3, dtype=np.float64)
        for _ in range(200):
            bn(Tensor(rng.standard_normal((64, 3)) * 2.0 + 4.0))
        bn.eval()
        x = np.zeros((1, 3))
        out = bn(Tensor(x)).data
        expected = (0.0 - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
        np.testing.assert_allclose(out[0], expected, rtol=1e-6)

    def test_gradcheck_through_batchnorm(self):
        # weight the output so the loss is not invariant to the inputs
        # (a plain sum of squares of standardized values is constant)
        rng = np.random.default_rng(3)
        weights = rng.standard_normal((6, 2))
        x = Tensor(rng.standard_normal((6, 2)), requires_grad=True)

        def f():
            bn2 = BatchNorm(2, dtype=np.float64)
            return ((bn2(Tensor(x.data)) * Tensor(weights)).exp()).sum().item()

        bn = BatchNorm(2, dtype=np.float64)
        ((bn(x) * Tensor(weights)).exp()).sum().backward()
        for idx in range(x.size):
            old = x.data.flat[idx]
            x.data.flat[idx] = old + 1e-6
            up = f()
            x.data.flat[idx] = old - 1e-6
            dn = f()
            x.data.flat[idx] = old
            assert x.grad.flat[idx] == pytest.approx((up - dn) / 2e-6, rel=1e-4, abs=1e-9)


class TestShapeInference:
    def test_patch_pipeline_shapes(self):
        rng = np.random.default_rng(4)
        specs = [
            LayerSpec("conv2d", dict(in_channels=9, out_channels=32, kernel_size=3, padding=2)),
            LayerSpec("batchnorm", dict(num_channels=32)),
            LayerSpec("maxpool", {}),
            LayerSpec("conv2d", dict(in_channels=32, out_channels=64, kernel_size=3, padding=1)),
            LayerSpec("batchnorm", dict(num_channels=64)),
            LayerSpec("maxpool", {}),
            LayerSpec("linear", dict(in_features=64 * 4 * 4, out_features=128)),
        ]
        net = build_network(specs, (9, 15, 15), rng, dtype=np.float64)
        assert net.output_shape == (128,)
        out = net(Tensor(np.zeros((2, 9, 15, 15))))
        assert out.shape == (2, 128)

    def test_incompatible_linear_rejected(self):
        rng = np.random.default_rng(5)
        specs = [
            LayerSpec("conv2d", dict(in_channels=3, out_channels=4, kernel_size=3, padding=0)),
            LayerSpec("linear", dict(in_features=999, out_features=2)),
        ]
        with pytest.raises(ValueError):
            build_network(specs, (3, 8, 8), rng)

    def test_channel_mismatch_rejected(self):
        rng = np.random.default_rng(6)
        specs = [
            LayerSpec("conv2d", dict(in_channels=5, out_channels=4, kernel_size=3, padding=0)),
        ]
        with pytest.raises(ValueError):
            build_network(specs, (3, 8, 8), rng)


class TestSGD:
    def test_momentum_and_decay_update(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=1e-4)
        p.grad = np.array([2.0])
        opt.step()
        v = 2.0 + 1e-4 * 1.0
        np.testing.assert_allclose(p.data, [1.0 - 0.1 * v])
        p.grad = np.array([1.0])
        opt.step()
        v2 = 0.9 * v + 1.0 + 1e-4 * (1.0 - 0.1 * v)
        np.testing.assert_allclose(p.data, [1.0 - 0.1 * v - 0.1 * v2])

    def test_cosine_schedule_endpoints(self):
        assert cosine_lr(0, 30, 0.01) == pytest.approx(0.01)
        assert cosine_lr(30, 30, 0.01) == pytest.approx(0.0, abs=1e-18)
        assert cosine_lr(15, 30, 0.01) == pytest.approx(0.005)


class TestDeterminism:
    def test_same_seed_same_forward_bytes(self):
        x = np.random.default_rng(7).standard_normal((3, 2, 8, 8)).astype(np.float32)
        outs = []
        for _ in range(2):
            rng = np.random.default_rng(11)
            conv = Conv2d(2, 4, 3, 1, rng)
            outs.append(conv(Tensor(x)).data.tobytes())
        assert outs[0] == outs[1]


class TestCheckpointFormat:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(8)
        params = {
            "a/weight": rng.standard_normal((3, 4)).astype(np.float32),
            "a/bias": rng.standard_normal(4).astype(np.float32),
        }
        momenta = {"a/weight": rng.standard_normal((3, 4)).astype(np.float32)}
        state = np.random.default_rng(9).bit_generator.state
        ckpt = Checkpoint(params=params, momenta=momenta, rng_state=state, epoch=7)
        path = str(tmp_path / "model.pckp")
        save_checkpoint(path, ckpt)
        back = load_checkpoint(path)
        assert back.epoch == 7
        assert back.rng_state == state
        for key, arr in params.items():
            np.testing.assert_array_equal(back.params[key], arr)
        np.testing.assert_array_equal(back.momenta["a/weight"], momenta["a/weight"])

    def test_restored_rng_continues_identically(self, tmp_path):
        gen = np.random.default_rng(10)
        gen.random(100)
        ckpt = Checkpoint(params={}, momenta={}, rng_state=gen.bit_generator.state, epoch=0)
        path = str(tmp_path / "rng.pckp")
        save_checkpoint(path, ckpt)
        expected = gen.random(5)
        gen2 = np.random.default_rng(0)
        gen2.bit_generator.state = load_checkpoint(path).rng_state
        np.testing.assert_array_equal(gen2.random(5), expected)

    def test_serialization_is_deterministic(self):
        params = {"w": np.ones((2, 2), dtype=np.float32)}
        a = checkpoint_bytes(Checkpoint(params, {}, None, 1))
        b = checkpoint_bytes(Checkpoint(params, {}, None, 1))
        assert a == b

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.pckp"
        path.write_bytes(b"JUNK" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(str(path))
