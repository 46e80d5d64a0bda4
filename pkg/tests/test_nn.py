import numpy as np
import pytest

from stackedfan import ops
from stackedfan.gradcheck import check_gradients
from stackedfan.nn import (
    BlockConfig,
    ConfigError,
    DepthNetConfig,
    FanConfig,
    HourglassConfig,
    StemConfig,
    block_forward,
    declare,
    declare_block,
    depthnet_forward,
    fan_forward,
    hourglass_forward,
    init_params,
)
from stackedfan.tensor import ShapeError, Tensor, add_same, no_grad, tensor_sum

from conftest import MINI_FAN, MINI_FAN_PARAM_COUNT


def block_params(config, seed=0, zero=False):
    from stackedfan.nn import ModelParams
    from stackedfan.tensor import Parameter

    rng = np.random.default_rng(seed)
    params = []
    for name, shape, kind in declare_block("b", config):
        if kind == "conv":
            data = np.zeros(shape) if zero else rng.uniform(-0.3, 0.3, shape)
        elif kind in ("ones", "state_ones"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params.append(Parameter(data, name, trainable=not kind.startswith("state")))
    return ModelParams(params)


def symbolic_bottleneck_count(c, c_out):
    half = c_out // 2
    count = 2 * c + (c * half + half) + 2 * half + (half * half * 9 + half) + 2 * half + (half * c_out + c_out)
    if c != c_out:
        count += c * c_out + c_out
    return count


class TestBottleneck:
    def test_shape_preserved(self):
        cfg = BlockConfig("bottleneck", 256, 256)
        p = block_params(cfg)
        with no_grad():
            out = block_forward(Tensor(np.ones((1, 256, 64, 64))), p, cfg, "b")
        assert out.shape == (1, 256, 64, 64)

    def test_zero_params_identity(self):
        cfg = BlockConfig("bottleneck", 16, 16)
        x = np.random.default_rng(0).standard_normal((2, 16, 4, 4)).astype(np.float32)
        out = block_forward(Tensor(x), block_params(cfg, zero=True), cfg, "b", train=True)
        assert np.array_equal(out.data, x)

    @pytest.mark.parametrize("cin,cout", [(256, 256), (64, 128)])
    def test_parameter_count(self, cin, cout):
        decl = declare_block("b", BlockConfig("bottleneck", cin, cout))
        enumerated = sum(int(np.prod(s)) for _, s, kind in decl if not kind.startswith("state"))
        assert enumerated == symbolic_bottleneck_count(cin, cout)

    def test_channel_mismatch(self):
        cfg = BlockConfig("bottleneck", 8, 8)
        with pytest.raises(ShapeError):
            block_forward(Tensor(np.ones((1, 4, 4, 4))), block_params(cfg), cfg, "b")


class TestHpmBlock:
    def test_shape_and_path_widths(self):
        cfg = BlockConfig("hpm", 256, 256)
        p = block_params(cfg)
        assert p["b.conv1.weight"].shape == (128, 256, 3, 3)
        assert p["b.conv2.weight"].shape == (64, 128, 3, 3)
        assert p["b.conv3.weight"].shape == (64, 64, 3, 3)
        with no_grad():
            out = block_forward(Tensor(np.ones((1, 256, 32, 32))), p, cfg, "b")
        assert out.shape == (1, 256, 32, 32)

    def test_out_channels_divisible_by_four(self):
        with pytest.raises(ConfigError):
            BlockConfig("hpm", 8, 10)

    def test_zero_params_identity(self):
        cfg = BlockConfig("hpm", 8, 8)
        x = np.random.default_rng(1).standard_normal((1, 8, 4, 4)).astype(np.float32)
        assert np.array_equal(block_forward(Tensor(x), block_params(cfg, zero=True), cfg, "b", True).data, x)

    def test_concat_order(self):
        cfg = BlockConfig("hpm", 8, 8)
        p = block_params(cfg, zero=True)
        p["b.conv1.bias"].data[:] = 1.0
        p["b.conv2.bias"].data[:] = 2.0
        p["b.conv3.bias"].data[:] = 3.0
        x = np.zeros((1, 8, 4, 4), dtype=np.float32)
        out = block_forward(Tensor(x), p, cfg, "b").data[0, :, 0, 0]
        assert out.tolist() == [1, 1, 1, 1, 2, 2, 3, 3]

    def test_projection_skip(self):
        cfg = BlockConfig("hpm", 4, 8)
        p = block_params(cfg)
        assert p["b.skip.weight"].shape == (8, 4, 1, 1)
        with no_grad():
            assert block_forward(Tensor(np.ones((1, 4, 4, 4))), p, cfg, "b").shape == (1, 8, 4, 4)


class TestHourglass:
    def test_depth4_resolution_chain(self):
        cfg = HourglassConfig(depth=4, width=256, block="hpm")
        seen = []

        def spy(t, name):
            seen.append(t.shape[-1])
            return t

        with no_grad():
            out = hourglass_forward(Tensor(np.ones((1, 256, 64, 64))), None, cfg, "hg", block=spy)
        assert out.shape == (1, 256, 64, 64)
        assert min(seen) == 4
        assert sorted(set(seen)) == [4, 8, 16, 32, 64]

    def test_depth4_real_blocks_shape(self):
        cfg = HourglassConfig(depth=4, width=16, block="hpm")
        fan = FanConfig(n_stacks=1, m_landmarks=2, heatmap_hw=(64, 64), hourglass=cfg, stem=StemConfig(8, 16))
        p = init_params(fan, 0)
        with no_grad():
            out = hourglass_forward(Tensor(np.ones((1, 16, 64, 64))), p, cfg, "stack.0.hg")
        assert out.shape == (1, 16, 64, 64)

    def test_depth1_shape(self):
        cfg = HourglassConfig(depth=1, width=8, block="bottleneck")
        fan = FanConfig(n_stacks=1, m_landmarks=2, heatmap_hw=(8, 8), hourglass=cfg, stem=StemConfig(4, 8))
        p = init_params(fan, 0)
        x = np.random.default_rng(0).standard_normal((1, 8, 8, 8))
        assert hourglass_forward(Tensor(x), p, cfg, "stack.0.hg").shape == (1, 8, 8, 8)

    def test_identity_blocks_structure(self):
        x = Tensor(np.random.default_rng(2).standard_normal((1, 2, 8, 8)))
        out = hourglass_forward(x, None, HourglassConfig(1, 4, "hpm"), block=lambda t, name: t)
        expected = ops.upsample_nearest(ops.maxpool2d(x, 2, 2), 2).data + x.data
        np.testing.assert_array_equal(out.data, expected)

    def test_indivisible_extent(self):
        with pytest.raises(ShapeError):
            hourglass_forward(Tensor(np.ones((1, 4, 12, 12))), None, HourglassConfig(3, 4, "hpm"), block=lambda t, n: t)


class TestFan:
    def test_emits_n_stacks(self, mini_params):
        x = Tensor(np.random.default_rng(3).random((2, 3, 16, 16)))
        outs = fan_forward(x, mini_params, MINI_FAN)
        assert len(outs) == 1 and outs[0].shape == (2, 2, 4, 4)

    def test_stacked_shapes(self):
        cfg = FanConfig(3, 5, (8, 8), HourglassConfig(2, 8, "hpm"), StemConfig(4, 8))
        outs = fan_forward(Tensor(np.random.default_rng(4).random((1, 3, 32, 32))), init_params(cfg, 0), cfg)
        assert [o.shape for o in outs] == [(1, 5, 8, 8)] * 3

    def test_single_stack_has_no_remap(self, mini_params):
        assert not [n for n in mini_params.names() if "remap" in n]

    def test_wrong_input_size_names_required(self, mini_params):
        with pytest.raises(ShapeError, match=r"\(N,3,16,16\)"):
            fan_forward(Tensor(np.ones((1, 3, 20, 20))), mini_params, MINI_FAN)

    def test_remap_heat_ablation_decouples_stacks(self):
        cfg = FanConfig(2, 3, (4, 4), HourglassConfig(1, 8, "hpm"), StemConfig(4, 8))
        p = init_params(cfg, 5)
        x = Tensor(np.random.default_rng(5).random((2, 3, 16, 16)))
        p["stack.0.remap_heat.weight"].data[:] = 0
        p["stack.0.remap_heat.bias"].data[:] = 0
        before = [o.data.copy() for o in fan_forward(x, p, cfg)]
        p["stack.0.head.out.weight"].data[:] += 0.5
        after = [o.data for o in fan_forward(x, p, cfg)]
        assert not np.allclose(before[0], after[0])
        np.testing.assert_array_equal(before[1], after[1])

    def test_remap_heat_couples_when_active(self):
        cfg = FanConfig(2, 3, (4, 4), HourglassConfig(1, 8, "hpm"), StemConfig(4, 8))
        p = init_params(cfg, 5)
        x = Tensor(np.random.default_rng(5).random((2, 3, 16, 16)))
        before = fan_forward(x, p, cfg)[1].data.copy()
        p["stack.0.head.out.weight"].data[:] += 0.5
        assert not np.allclose(before, fan_forward(x, p, cfg)[1].data)

    def test_full_gradient_check(self, mini_params64):
        rng = np.random.default_rng(6)
        x = Tensor(rng.random((2, 3, 16, 16)), dtype=np.float64)
        probe = rng.standard_normal((2, 2, 4, 4))
        loss = lambda: tensor_sum(fan_forward(x, mini_params64, MINI_FAN, train=True)[0] * Tensor(probe, dtype=np.float64))
        targets = [mini_params64[n] for n in ("stem.conv.weight", "stack.0.hg.1.bottom.conv2.weight", "stack.0.head.out.weight")]
        assert check_gradients(loss, targets, eps=1e-6, floor=1e-5) < 1e-3


class TestDepthNet:
    def test_depth_input_channels(self):
        cfg = DepthNetConfig(68)
        assert cfg.input_channels == 71 and cfg.output_dim == 68
        p = init_params(cfg, 0)
        assert p["depth.stem.conv.weight"].shape[1] == 71
        with no_grad():
            out = depthnet_forward(Tensor(np.ones((2, 3, 32, 32))), Tensor(np.zeros((2, 68, 32, 32))), p, cfg)
        assert out.shape == (2, 68)

    def test_single_landmark(self):
        cfg = DepthNetConfig(1, ((8, 1), (8, 1)))
        out = depthnet_forward(Tensor(np.ones((3, 3, 8, 8))), Tensor(np.zeros((3, 1, 8, 8))), init_params(cfg, 0), cfg)
        assert out.shape == (3, 1)

    def test_landmark_mismatch(self):
        cfg = DepthNetConfig(2, ((8, 1),))
        with pytest.raises(ShapeError):
            depthnet_forward(Tensor(np.ones((1, 3, 8, 8))), Tensor(np.zeros((1, 3, 8, 8))), init_params(cfg, 0), cfg)

    def test_gradient_check_l2(self):
        from stackedfan.training import depth_l2

        cfg = DepthNetConfig(2, ((4, 1), (8, 1)))
        p = init_params(cfg, 1, dtype=np.float64)
        rng = np.random.default_rng(7)
        img = Tensor(rng.random((2, 3, 8, 8)), dtype=np.float64)
        heat = Tensor(rng.random((2, 2, 8, 8)), requires_grad=True, dtype=np.float64)
        z = rng.standard_normal((2, 2))
        loss = lambda: depth_l2(depthnet_forward(img, heat, p, cfg, train=True), z)
        targets = [heat, p["depth.stem.conv.weight"], p["depth.tower.1.block.0.conv2.weight"], p["depth.head.weight"]]
        assert check_gradients(loss, targets, eps=1e-6) < 1e-4


class TestInit:
    def test_same_seed_bit_identical(self):
        a, b = init_params(MINI_FAN, 3), init_params(MINI_FAN, 3)
        assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a, b))

    def test_different_seeds_differ(self):
        a, b = init_params(MINI_FAN, 3), init_params(MINI_FAN, 4)
        assert any(x.data.tobytes() != y.data.tobytes() for x, y in zip(a, b))

    def test_count_matches_declaration(self, mini_params):
        symbolic = sum(int(np.prod(s)) for _, s, kind in declare(MINI_FAN) if not kind.startswith("state"))
        assert mini_params.count() == symbolic == MINI_FAN_PARAM_COUNT

    def test_names_sorted_and_unique(self, mini_params):
        names = mini_params.names()
        assert names == sorted(names) and len(set(names)) == len(names)

    def test_bn_and_bias_init(self, mini_params):
        assert np.all(mini_params["stem.bn.weight"].data == 1)
        assert np.all(mini_params["stem.bn.bias"].data == 0)
        assert np.all(mini_params["stem.conv.bias"].data == 0)
        w = mini_params["stem.conv.weight"].data
        assert np.abs(w).max() <= 1 / np.sqrt(3 * 7 * 7)
