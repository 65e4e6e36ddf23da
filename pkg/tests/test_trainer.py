import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from ppasim import bnn, trainer as t, world as w


def tiny_data(n=6, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.integers(0, 256, (n, 64, 64), dtype=np.uint8),
            rng.integers(0, 8, n), rng.integers(0, 8, n))


def eval_forward(latent: t.LatentModel, frames):
    """Inference-mode forward in torch: BN with running statistics, then sign."""
    x = torch.from_numpy(t.input_bits(frames, latent.input_threshold))[:, None].double()
    k = torch.from_numpy(t.binarize(latent.conv))[:, None]
    z = F.conv2d(x, k, padding=1)
    h = F.batch_norm(z, torch.from_numpy(latent.running_mean), torch.from_numpy(latent.running_var),
                     torch.from_numpy(latent.gamma), torch.from_numpy(latent.beta), training=False, eps=t.BN_EPS)
    act = (h >= 0).double()
    feats = F.max_pool2d(act, 4).flatten(1) * 2 - 1
    sx = feats @ torch.from_numpy(t.binarize(latent.fc_x)).T
    sy = feats @ torch.from_numpy(t.binarize(latent.fc_y)).T
    return act.numpy().astype(np.uint8), sx.numpy().astype(int), sy.numpy().astype(int)


def conv_sums(latent: t.LatentModel, frames):
    """Integer conv sums with sign-binarized kernels, by direct loops over the 3x3 taps."""
    x = t.input_bits(frames, latent.input_threshold)
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    k = t.binarize(latent.conv)
    out = np.zeros((len(frames), len(k), 64, 64))
    for ky in range(3):
        for kx in range(3):
            out += k[None, :, ky, kx, None, None] * padded[:, None, ky:ky + 64, kx:kx + 64]
    return out


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        {"epochs": 0}, {"batch_size": 0}, {"learning_rate": -0.1}, {"momentum": 1.0},
        {"input_threshold": float("nan")}, {"threshold_margin": -0.1}, {"margin_weight": float("inf")},
        {"schedule": "step"},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(t.ConfigError):
            t.TrainConfig("x.loc", **kwargs)

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            t.train(t.TrainConfig(tmp_path / "absent.loc"))

    def test_empty_dataset(self):
        frames, lx, ly = tiny_data()
        with pytest.raises(t.ConfigError):
            t.train_arrays(t.TrainConfig("x"), (frames[:0], lx[:0], ly[:0]))


class TestFolding:
    @given(st.floats(-9, 9), st.floats(0.01, 30), st.floats(-3, 3).filter(lambda g: abs(g) > 1e-3),
           st.floats(-3, 3))
    def test_fold_matches_batch_norm_sign_on_every_integer_sum(self, mean, var, gamma, beta):
        thr, flip = t.fold_threshold(mean, var, gamma, beta)
        assert thr * t.THRESHOLD_GRID == round(thr * t.THRESHOLD_GRID)
        assert thr != round(thr)
        assert np.float32(thr) == thr
        std = math.sqrt(var + t.BN_EPS)
        for v in range(-9, 10):
            h = gamma * (v - mean) / std + beta
            if abs(h) < 1e-9:
                continue  # exactly on the boundary, float rounding decides
            assert (h >= 0) == ((-v if flip else v) >= thr)

    @pytest.mark.parametrize("raw, expected", [(-7.0, -7 - 1 / 64), (-7.001, -7 - 1 / 64), (-6.999, -7 + 1 / 64),
                                               (3.3, 3.296875), (2.5, 2.5), (20.0, 19.984375),
                                               (500.0, 128.5), (-500.0, -128.5)])
    def test_fold_keeps_trained_position(self, raw, expected):
        # mean = raw with beta = 0 puts the BN zero crossing exactly at raw
        assert t.fold_threshold(raw, 1.0, 1.0, 0.0) == (expected, False)

    def test_zero_gamma(self):
        assert t.fold_threshold(0.0, 1.0, 0.0, 0.5) == (-t.THRESHOLD_LIMIT, False)
        assert t.fold_threshold(0.0, 1.0, 0.0, -0.5) == (t.THRESHOLD_LIMIT, False)

    def test_non_finite(self):
        with pytest.raises(t.ExportError):
            t.fold_threshold(float("nan"), 1.0, 1.0, 0.0)

    def test_export_matches_unfolded_network(self):
        latent = t.LatentModel.init(3)
        rng = np.random.default_rng(3)
        latent.gamma = rng.uniform(-2, 2, 8)
        latent.beta = rng.uniform(-1, 1, 8)
        latent.running_mean = rng.uniform(-4, 4, 8)
        latent.running_var = rng.uniform(0.5, 20, 8)
        model = t.export(latent)
        frames = tiny_data(10, seed=3)[0]
        act, sx, sy = eval_forward(latent, frames)
        for i, frame in enumerate(frames):
            r = bnn.infer_reference(model, frame)
            np.testing.assert_array_equal(r.conv_planes, act[i])
            assert list(r.prediction.scores_x) == sx[i].tolist()
            assert list(r.prediction.scores_y) == sy[i].tolist()

    def test_export_writes_model_file(self, tmp_path):
        model = t.export(t.LatentModel.init(0), tmp_path / "m.bnn")
        assert bnn.load_model(tmp_path / "m.bnn") == model


class TestNet:
    def test_calibration_sets_population_moments(self):
        frames = tiny_data(10)[0]
        latent = t.LatentModel.init(0)
        net = t._Net(latent)
        net.calibrate_(frames, chunk=3)
        sums = conv_sums(latent, frames)
        np.testing.assert_allclose(net.running_mean.numpy(), sums.mean(axis=(0, 2, 3)), rtol=1e-5)
        np.testing.assert_allclose(net.running_var.numpy(), sums.var(axis=(0, 2, 3)), rtol=1e-4)

    def test_margin_shortfall_uses_pooled_block_max(self):
        frames = tiny_data(4)[0]
        latent = t.LatentModel.init(1)
        latent.gamma = np.array([-1.5, -1.0, -0.4, 0.3, 0.7, 1.0, 1.4, 2.0])
        latent.beta = np.linspace(-0.8, 0.6, 8)
        latent.running_mean = np.linspace(-3, 3, 8)
        thr = t.implied_thresholds(latent)
        net = t._Net(latent)
        net.calibrate_(frames)
        *_, shortfall = net.forward(frames, margin=2.5)
        side = np.where(latent.gamma >= 0, 1.0, -1.0)[None, :, None, None]
        d = (conv_sums(latent, frames) - thr[None, :, None, None]) * side
        block_max = d.reshape(len(frames), 8, 16, 4, 16, 4).max(axis=(3, 5))
        assert shortfall.item() == pytest.approx(np.maximum(2.5 - np.abs(block_max), 0).mean(), rel=1e-4)

    def test_recalibration_keeps_thresholds(self):
        latent = t.LatentModel.init(2)
        latent.gamma = np.array([-1.5, -1.0, -0.4, 0.3, 0.7, 1.0, 1.4, 2.0])
        latent.beta = np.linspace(-0.8, 0.6, 8)
        net = t._Net(latent)
        net.calibrate_(tiny_data(3)[0])
        after = net.to_latent()
        assert not np.allclose(after.running_mean, latent.running_mean)
        np.testing.assert_allclose(t.implied_thresholds(after), t.implied_thresholds(latent), atol=1e-5)

    def test_training_forward_matches_exported_model(self):
        frames = tiny_data(3)[0]
        latent = t.LatentModel.init(4)
        latent.gamma = np.array([-1.5, -1.0, -0.4, 0.3, 0.7, 1.0, 1.4, 2.0])
        latent.beta = np.linspace(-0.8, 0.6, 8)
        net = t._Net(latent)
        net.calibrate_(frames)
        sx, sy, _ = net.forward(frames)
        model = t.export(net.to_latent())
        for i, frame in enumerate(frames):
            p = bnn.infer_reference(model, frame).prediction
            np.testing.assert_allclose(sx[i].detach().numpy() * math.sqrt(model.features), p.scores_x, atol=1e-3)
            np.testing.assert_allclose(sy[i].detach().numpy() * math.sqrt(model.features), p.scores_y, atol=1e-3)

    def test_zero_margin_has_no_shortfall(self):
        frames = tiny_data(2)[0]
        net = t._Net(t.LatentModel.init(0))
        net.calibrate_(frames)
        assert net.forward(frames, margin=0.0)[2].item() == 0.0


class TestSte:
    def test_forward_is_sign_with_zero_positive(self):
        x = torch.tensor([-2.0, -0.1, 0.0, 0.3, 5.0])
        np.testing.assert_array_equal(t.sign_ste(x).numpy(), [-1, -1, 1, 1, 1])

    def test_gradient_passes_inside_unit_interval(self):
        x = torch.tensor([-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0], requires_grad=True)
        t.sign_ste(x).sum().backward()
        np.testing.assert_array_equal(x.grad.numpy(), [0, 1, 1, 1, 1, 1, 0])


class TestTraining:
    def test_zero_learning_rate_keeps_weights(self):
        data = tiny_data(20)
        init = t.LatentModel.init(0)
        result = t.train_arrays(t.TrainConfig("x", epochs=2, batch_size=5, learning_rate=0.0), data)
        for name in ("conv", "fc_x", "fc_y", "gamma"):
            np.testing.assert_allclose(getattr(result.latent, name), getattr(init, name), rtol=0, atol=1e-7)
        np.testing.assert_allclose(t.implied_thresholds(result.latent), t.implied_thresholds(init), atol=1e-5)

    def test_memorises_single_example(self):
        frames, lx, ly = w.generate_frames(1, np.random.default_rng(5), w.CameraJitter(), w.default_texture(0))
        data = (frames, lx.astype(np.int64), ly.astype(np.int64))
        result = t.train_arrays(t.TrainConfig("x", epochs=40, batch_size=1, learning_rate=0.05,
                                              schedule="constant"), data, data)
        assert result.history[-1].acc_x == 1.0 and result.history[-1].acc_y == 1.0

    def test_deterministic(self):
        data = tiny_data(30)
        cfg = t.TrainConfig("x", epochs=2, batch_size=7, learning_rate=0.1)
        a = t.train_arrays(cfg, data, data)
        b = t.train_arrays(cfg, data, data)
        assert bnn.model_to_bytes(a.model) == bnn.model_to_bytes(b.model)
        assert a.history == b.history

    def test_reported_accuracy_is_exported_model_accuracy(self):
        data = tiny_data(40)
        result = t.train_arrays(t.TrainConfig("x", epochs=2, batch_size=10, learning_rate=0.1), data, data)
        px, py = bnn.predict_labels(result.model, data[0])
        assert result.history[-1].acc_x == np.mean(px == data[1])
        assert result.history[-1].acc_y == np.mean(py == data[2])
        assert result.history[-1].acc_joint == np.mean((px == data[1]) & (py == data[2]))

    def test_reported_loss_is_sum_of_head_losses(self):
        result = t.train_arrays(t.TrainConfig("x", epochs=2, batch_size=7), tiny_data(20))
        for m in result.history:
            assert abs(m.loss - (m.loss_x + m.loss_y)) < 1e-6
            assert m.margin_loss >= 0

    def test_latents_stay_clipped(self):
        result = t.train_arrays(t.TrainConfig("x", epochs=3, batch_size=5, learning_rate=5.0), tiny_data(20))
        for name in ("conv", "fc_x", "fc_y"):
            assert np.abs(getattr(result.latent, name)).max() <= 1.0

    def test_train_from_files_and_metrics(self, tmp_path):
        w.write_dataset(tmp_path / "tr.loc", *tiny_data(12))
        w.write_dataset(tmp_path / "te.loc", *tiny_data(6, seed=1))
        result = t.train(t.TrainConfig(tmp_path / "tr.loc", epochs=2, batch_size=4, test_path=tmp_path / "te.loc"))
        t.write_metrics(result.history, tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss,acc_x,acc_y,acc_joint"
        assert len(lines) == 3 and lines[2].startswith("2,")
