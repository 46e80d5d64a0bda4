import csv
import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stackedfan.augment import AugmentConfig
from stackedfan.dataio import Sample, load_checkpoint
from stackedfan.heatmap import LandmarkSet
from stackedfan.nn import FanConfig, HourglassConfig, StemConfig, fan_forward, init_params
from stackedfan.synth import synth_generate
from stackedfan.tensor import Parameter, Tensor
from stackedfan.training import (
    FAN_SCHEDULE,
    SGD,
    NonFiniteError,
    RMSprop,
    TrainConfig,
    depth_l2,
    depth_train_defaults,
    fan_loss,
    heatmap_mse,
    lr_at,
    optimiser_step,
    train,
    train_depth,
    validate_schedule,
    write_loss_csv,
)
from stackedfan.nn import DepthNetConfig, ModelParams

from conftest import MINI_FAN


def single_param(value, grad):
    p = Parameter(np.array([value]), "w")
    p.grad = np.array([grad], dtype=p.dtype)
    return ModelParams([p])


class TestHeatmapMse:
    def test_zero_when_equal(self):
        x = np.random.default_rng(0).random((2, 3, 4, 4))
        assert heatmap_mse(Tensor(x), x).item() == 0.0

    def test_single_hot_cell(self):
        target = np.zeros((1, 2, 2))
        target[0, 0, 0] = 1
        assert heatmap_mse(Tensor(np.zeros((1, 2, 2))), target).item() == 0.25

    def test_masking_halves_population(self):
        target = np.zeros((2, 2, 2))
        target[0, 0, 0] = 1
        pred = Tensor(np.zeros((2, 2, 2)))
        assert heatmap_mse(pred, target, [True, True]).item() == pytest.approx(1 / 8)
        assert heatmap_mse(pred, target, [True, False]).item() == pytest.approx(1 / 4)

    def test_masking_off_uses_all_channels(self):
        target = np.ones((2, 2, 2))
        assert heatmap_mse(Tensor(np.zeros((2, 2, 2))), target, [True, False], masking=False).item() == 1.0

    def test_all_invisible_is_zero_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            loss = heatmap_mse(Tensor(np.ones((1, 2, 2))), np.zeros((1, 2, 2)), [False])
        assert loss.item() == 0.0
        assert "no visible" in caplog.text

    @given(st.integers(0, 1000))
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        assert heatmap_mse(Tensor(rng.normal(size=(1, 3, 4, 4))), rng.normal(size=(1, 3, 4, 4))).item() >= 0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            heatmap_mse(Tensor(np.zeros((1, 2, 2))), np.zeros((1, 2, 3)))


class TestFanLoss:
    def test_single_stack_equals_mse(self):
        rng = np.random.default_rng(1)
        p, t = rng.random((2, 3, 4, 4)), rng.random((2, 3, 4, 4))
        assert fan_loss([Tensor(p)], t).item() == heatmap_mse(Tensor(p), t).item()

    def test_sum_of_stacks(self):
        rng = np.random.default_rng(2)
        t = rng.random((2, 3, 4, 4))
        preds = [Tensor(rng.random((2, 3, 4, 4)), dtype=np.float64) for _ in range(4)]
        total = fan_loss(preds, t).item()
        expected = sum(np.mean((p.data - t) ** 2) for p in preds)
        assert abs(total - expected) / expected < 1e-6

    def test_identical_stacks_scale(self):
        rng = np.random.default_rng(3)
        p, t = Tensor(rng.random((1, 2, 4, 4)), dtype=np.float64), rng.random((1, 2, 4, 4))
        assert fan_loss([p] * 4, t).item() == pytest.approx(4 * heatmap_mse(p, t).item(), rel=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fan_loss([], np.zeros((1, 1, 2, 2)))

    def test_gradient_reaches_first_stack_both_ways(self):
        cfg = FanConfig(2, 3, (4, 4), HourglassConfig(1, 8, "hpm"), StemConfig(4, 8))
        p = init_params(cfg, 0)
        x = Tensor(np.random.default_rng(4).random((2, 3, 16, 16)))
        target = np.random.default_rng(5).random((2, 3, 4, 4))
        name = "stack.0.head.out.weight"
        outs = fan_forward(x, p, cfg, train=True)
        # own head only
        heatmap_mse(outs[0], target).backward()
        assert np.abs(p[name].grad).sum() > 0
        # later head only: the gradient must arrive through the fusion path
        p.zero_grad()
        outs = fan_forward(x, p, cfg, train=True)
        heatmap_mse(outs[1], target).backward()
        assert np.abs(p[name].grad).sum() > 0


class TestDepthL2:
    def test_zero(self):
        assert depth_l2(Tensor(np.ones((2, 3))), np.ones((2, 3))).item() == 0.0

    def test_hand_value(self):
        assert depth_l2(Tensor(np.zeros((1, 2))), np.array([[3.0, 4.0]])).item() == 12.5

    def test_masked_excluded(self):
        assert depth_l2(Tensor(np.zeros((1, 2))), np.array([[3.0, 100.0]]), [[True, False]]).item() == 9.0


class TestSchedule:
    def test_fan_schedule(self):
        assert lr_at(0) == 1e-4 and lr_at(14) == 1e-4
        assert lr_at(15) == 1e-5 and lr_at(29) == 1e-5
        assert lr_at(30) == 1e-6 and lr_at(39) == 1e-6
        assert FAN_SCHEDULE == ((0, 1e-4), (15, 1e-5), (30, 1e-6))

    @pytest.mark.parametrize(
        "bad", [[], [[1, 1e-3]], [[0, 1e-3], [0, 1e-4]], [[0, 1e-4], [5, 1e-3]], [[0, 0.0]]]
    )
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            validate_schedule(bad)

    def test_depth_defaults(self):
        d = depth_train_defaults()
        assert (lr_at(0, d.lr_schedule), d.epochs, d.loss) == (1e-3, 50, "l2")

    def test_epochs_zero_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)


class TestOptimisers:
    def test_sgd_hand(self):
        p = single_param(1.0, 2.0)
        SGD(p).step(0.1)
        assert p["w"].data[0] == pytest.approx(0.8)

    def test_sgd_zero_grad(self):
        p = single_param(1.0, 0.0)
        SGD(p).step(0.1)
        assert p["w"].data[0] == 1.0

    def test_rmsprop_first_step(self):
        p = single_param(1.0, 2.0)
        RMSprop(p, alpha=0.99, eps=1e-8).step(0.01)
        # v = 0.01 * 4, step = lr * g / sqrt(v) = 0.01 * 2 / 0.2
        assert p["w"].data[0] == pytest.approx(1.0 - 0.1, rel=1e-6)

    def test_tiny_lr_leaves_params(self):
        p = single_param(1.0, 3.0)
        RMSprop(p).step(1e-30)
        assert p["w"].data[0] == 1.0

    def test_nan_gradient_rejected_with_batch(self):
        p = single_param(1.0, np.nan)
        with pytest.raises(NonFiniteError) as info:
            optimiser_step(SGD(p), 0.1, batch=7)
        assert info.value.batch == 7
        assert p["w"].data[0] == 1.0

    def test_non_positive_lr(self):
        with pytest.raises(ValueError):
            optimiser_step(SGD(single_param(1.0, 1.0)), 0.0)

    def test_state_buffers_untouched(self, mini_params):
        for p in mini_params:
            p.grad = np.ones_like(p.data) if p.trainable else None
        before = mini_params["stem.bn.running_mean"].data.copy()
        RMSprop(mini_params).step(0.1)
        np.testing.assert_array_equal(mini_params["stem.bn.running_mean"].data, before)


# -- training loop ---------------------------------------------------------------------

FIVE = [0, 3, 4, 6, 9]
SMALL_FAN = FanConfig(1, 5, (16, 16), HourglassConfig(2, 16, "hpm"), StemConfig(8, 16, 5, 2, False))


def five_point_corpus():
    out = []
    for s in synth_generate(8, (32, 32), 0.8, seed=1):
        lm = s.landmarks
        out.append(Sample(s.image_path, LandmarkSet(lm.points[FIVE], lm.visibility[FIVE], ""), image=s.image))
    return out


@pytest.fixture(scope="module")
def overfit_run():
    tc = TrainConfig(lr_schedule=[[0, 5e-4]], epochs=300, batch_size=8, max_steps=300)
    return train(SMALL_FAN, five_point_corpus(), tc, AugmentConfig.identity(), seed=0)


class TestTrain:
    def test_overfit_loss_ratio(self, overfit_run):
        losses = [loss for _, _, loss in overfit_run.log]
        assert len(losses) == 300
        assert losses[-1] <= 0.01 * losses[0]

    def test_smoothed_loss_monotone(self, overfit_run):
        losses = np.array([loss for _, _, loss in overfit_run.log])
        windows = losses.reshape(-1, 20).mean(axis=1)
        assert np.all(np.diff(windows) <= 0)

    def test_deterministic(self):
        tc = TrainConfig(lr_schedule=[[0, 1e-3]], epochs=3, batch_size=3)
        aug = AugmentConfig(flip_swap_map={"": [(0, 1)]}, rotate_deg=10, occlusion_prob=0.5)
        runs = [train(MINI_FAN, self._mini_corpus(), tc, aug, seed=5) for _ in range(2)]
        assert runs[0].log == runs[1].log
        for a, b in zip(runs[0].params, runs[1].params):
            assert a.data.tobytes() == b.data.tobytes()

    def test_seed_changes_run(self):
        tc = TrainConfig(lr_schedule=[[0, 1e-3]], epochs=1, batch_size=3)
        aug = AugmentConfig(flip_swap_map={"": [(0, 1)]})
        a = train(MINI_FAN, self._mini_corpus(), tc, aug, seed=1)
        b = train(MINI_FAN, self._mini_corpus(), tc, aug, seed=2)
        assert a.log != b.log

    def test_epoch_log_and_checkpoints(self, tmp_path):
        tc = TrainConfig(lr_schedule=[[0, 1e-3]], epochs=2, batch_size=2, checkpoint_every=1)
        result = train(MINI_FAN, self._mini_corpus(), tc, AugmentConfig.identity(), checkpoint_dir=tmp_path)
        assert len(result.epoch_losses) == 2
        assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_0001.gsckpt", "epoch_0002.gsckpt"]
        _, meta = load_checkpoint(tmp_path / "epoch_0002.gsckpt", MINI_FAN)
        assert meta.epoch == 2

    def test_loss_csv(self, tmp_path):
        write_loss_csv([(0, 0, 0.5), (0, 1, 0.25)], tmp_path / "loss.csv")
        with open(tmp_path / "loss.csv") as fh:
            assert list(csv.reader(fh)) == [["epoch", "step", "loss"], ["0", "0", "0.5"], ["0", "1", "0.25"]]

    def test_divergence_reports_batch(self):
        tc = TrainConfig(lr_schedule=[[0, 1e-3]], epochs=1, batch_size=2)
        corpus = self._mini_corpus()
        corpus[0].image[0, 0, 0] = np.nan
        with pytest.raises(NonFiniteError, match="batch"):
            train(MINI_FAN, corpus, tc, AugmentConfig.identity())

    def test_scheme_size_mismatch(self):
        tc = TrainConfig(epochs=1)
        with pytest.raises(ValueError, match="landmarks"):
            train(SMALL_FAN, self._mini_corpus(), tc, AugmentConfig.identity())

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            train(MINI_FAN, [], TrainConfig(epochs=1), AugmentConfig.identity())

    def test_depth_training_reduces_loss(self):
        corpus = synth_generate(4, (32, 32), 0.5, seed=2)
        cfg = DepthNetConfig(12, ((8, 1), (16, 1)))
        tc = TrainConfig(lr_schedule=[[0, 1e-3]], epochs=15, batch_size=4, loss="l2")
        result = train_depth(cfg, corpus, tc, AugmentConfig.identity(), (16, 16))
        assert result.epoch_losses[-1] < result.epoch_losses[0]

    @staticmethod
    def _mini_corpus():
        rng = np.random.default_rng(0)
        out = []
        for k in range(4):
            pts = rng.uniform(3, 12, (2, 2))
            out.append(Sample(f"m{k}.ppm", LandmarkSet(pts, [True, True], ""), image=rng.random((16, 16, 3)).astype(np.float32)))
        return out
