import numpy as np
import pytest

from stackedfan.heatmap import decode
from stackedfan.inference import predict_heatmaps, predict_landmarks
from stackedfan.nn import DepthNetConfig, fan_forward, init_params
from stackedfan.tensor import ShapeError, Tensor

from conftest import MINI_FAN


@pytest.fixture
def images():
    rng = np.random.default_rng(0)
    return [rng.random((16, 16, 3)).astype(np.float32) for _ in range(5)]


def test_batching_matches_single_pass(mini_params, images):
    whole = predict_heatmaps(mini_params, MINI_FAN, images, batch_size=5)
    chunked = predict_heatmaps(mini_params, MINI_FAN, images, batch_size=2)
    # eval mode has no cross-sample coupling; only BLAS blocking differs
    np.testing.assert_allclose(whole, chunked, rtol=1e-5, atol=1e-6)


def test_landmarks_match_manual_decode(mini_params, images):
    preds = predict_landmarks(mini_params, MINI_FAN, images, scheme="s")
    batch = Tensor(np.stack([im.transpose(2, 0, 1) for im in images]))
    heat = fan_forward(batch, mini_params, MINI_FAN)[-1].data
    for p, h in zip(preds, heat):
        ref = decode(h, (16, 16))
        np.testing.assert_array_equal(p.points, ref.points)
        assert p.scheme == "s"


def test_depth_column(mini_params, images):
    cfg = DepthNetConfig(2, ((4, 1),))
    preds = predict_landmarks(mini_params, MINI_FAN, images, depth=(init_params(cfg, 0), cfg))
    assert all(p.points.shape == (2, 3) for p in preds)


def test_depth_landmark_count_mismatch(mini_params, images):
    cfg = DepthNetConfig(3, ((4, 1),))
    with pytest.raises(ShapeError):
        predict_landmarks(mini_params, MINI_FAN, images, depth=(init_params(cfg, 0), cfg))


def test_image_size_mismatch(mini_params):
    with pytest.raises(ShapeError, match="model input"):
        predict_landmarks(mini_params, MINI_FAN, [np.zeros((20, 20, 3), np.float32)])


def test_inference_does_not_touch_running_stats(mini_params, images):
    before = mini_params["stem.bn.running_mean"].data.copy()
    predict_landmarks(mini_params, MINI_FAN, images)
    np.testing.assert_array_equal(mini_params["stem.bn.running_mean"].data, before)
