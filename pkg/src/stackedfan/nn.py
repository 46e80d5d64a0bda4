"""Residual blocks, hourglass, stacked FAN and the depth-lifting network.

Models are plain functions over a :class:`ModelParams` store. Each
architecture has a ``declare_*`` function listing the parameters it needs
(name, shape, init kind) and a ``*_forward`` function reading them back by
name, so :func:`init_params` never has to run a forward pass.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import ops
from .tensor import DEFAULT_DTYPE, Parameter, ShapeError, Tensor, add_same, concat_channels, relu

BLOCK_KINDS = ("bottleneck", "hpm")


class ConfigError(ValueError):
    """Raised for structurally invalid architecture configurations."""


# -- configuration ------------------------------------------------------------------


@dataclass(frozen=True)
class BlockConfig:
    kind: str
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {self.kind!r}; expected one of {BLOCK_KINDS}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(f"block channels must be >= 1, got {self.in_channels}->{self.out_channels}")
        if self.kind == "hpm" and self.out_channels % 4:
            raise ConfigError(f"hpm block needs out_channels divisible by 4, got {self.out_channels}")
        if self.kind == "bottleneck" and self.out_channels % 2:
            raise ConfigError(f"bottleneck block needs even out_channels, got {self.out_channels}")


@dataclass(frozen=True)
class HourglassConfig:
    depth: int = 4
    width: int = 256
    block: str = "hpm"

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"hourglass depth must be >= 1, got {self.depth}")
        BlockConfig(self.block, self.width, self.width)


@dataclass(frozen=True)
class StemConfig:
    """Image -> working-resolution features: conv, BN, ReLU, block, [maxpool], block."""

    conv_channels: int = 64
    mid_channels: int = 128
    kernel: int = 7
    stride: int = 2
    pool: bool = True

    @property
    def downsample(self) -> int:
        return self.stride * (2 if self.pool else 1)


@dataclass(frozen=True)
class FanConfig:
    n_stacks: int = 4
    m_landmarks: int = 68
    heatmap_hw: tuple[int, int] = (64, 64)
    hourglass: HourglassConfig = field(default_factory=HourglassConfig)
    stem: StemConfig = field(default_factory=StemConfig)

    def __post_init__(self):
        object.__setattr__(self, "heatmap_hw", tuple(int(v) for v in self.heatmap_hw))
        if self.n_stacks < 1:
            raise ConfigError(f"n_stacks must be >= 1, got {self.n_stacks}")
        if self.m_landmarks < 1:
            raise ConfigError(f"m_landmarks must be >= 1, got {self.m_landmarks}")
        step = 2**self.hourglass.depth
        if any(v < step or v % step for v in self.heatmap_hw):
            raise ConfigError(
                f"heatmap_hw {self.heatmap_hw} must be divisible by 2**depth = {step}"
            )
        BlockConfig(self.hourglass.block, self.stem.conv_channels, self.stem.mid_channels)

    @property
    def input_hw(self) -> tuple[int, int]:
        f = self.stem.downsample
        return (self.heatmap_hw[0] * f, self.heatmap_hw[1] * f)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["heatmap_hw"] = list(self.heatmap_hw)
        return {"kind": "fan", **d}

    @classmethod
    def from_dict(cls, d: dict) -> "FanConfig":
        d = {k: v for k, v in d.items() if k != "kind"}
        hg = HourglassConfig(**d.pop("hourglass", {}))
        stem = StemConfig(**d.pop("stem", {}))
        return cls(hourglass=hg, stem=stem, **d)


@dataclass(frozen=True)
class DepthNetConfig:
    n_landmarks: int = 68
    tower: tuple[tuple[int, int], ...] = ((32, 2), (64, 2), (128, 2), (256, 2))

    def __post_init__(self):
        object.__setattr__(self, "tower", tuple((int(w), int(b)) for w, b in self.tower))
        if self.n_landmarks < 1:
            raise ConfigError(f"n_landmarks must be >= 1, got {self.n_landmarks}")
        if not self.tower:
            raise ConfigError("depth tower needs at least one stage")
        for width, blocks in self.tower:
            BlockConfig("bottleneck", width, width)
            if blocks < 0:
                raise ConfigError(f"negative block count in stage {width}")

    @property
    def input_channels(self) -> int:
        return 3 + self.n_landmarks

    @property
    def output_dim(self) -> int:
        return self.n_landmarks

    def to_dict(self) -> dict:
        return {"kind": "depth", "n_landmarks": self.n_landmarks, "tower": [list(s) for s in self.tower]}

    @classmethod
    def from_dict(cls, d: dict) -> "DepthNetConfig":
        return cls(n_landmarks=d["n_landmarks"], tower=tuple(tuple(s) for s in d.get("tower", cls.tower)))


def config_from_dict(d: dict) -> FanConfig | DepthNetConfig:
    if d.get("kind", "fan") == "depth":
        return DepthNetConfig.from_dict(d)
    return FanConfig.from_dict(d)


# -- parameter store -----------------------------------------------------------------


class ModelParams:
    """Named parameters kept in sorted-name order (the checkpoint layout)."""

    def __init__(self, params: list[Parameter]):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self._params = {p.name: p for p in sorted(params, key=lambda p: p.name)}

    def __getitem__(self, name: str) -> Parameter:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"missing parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def trainable(self) -> list[Parameter]:
        return [p for p in self._params.values() if p.trainable]

    def count(self, trainable_only: bool = True) -> int:
        return sum(p.size for p in self._params.values() if p.trainable or not trainable_only)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def bn(self, prefix: str) -> tuple[Parameter, Parameter, ops.RunningMoments]:
        return (
            self[prefix + ".weight"],
            self[prefix + ".bias"],
            ops.RunningMoments(self[prefix + ".running_mean"], self[prefix + ".running_var"]),
        )

    def copy(self) -> "ModelParams":
        return ModelParams([Parameter(p.data.copy(), p.name, p.trainable, dtype=p.dtype) for p in self])


# (name, shape, init kind); kinds: conv, bias, ones, zeros, linear
ParamDecl = tuple[str, tuple[int, ...], str]


def _decl_conv(prefix: str, cin: int, cout: int, k: int) -> list[ParamDecl]:
    return [(prefix + ".weight", (cout, cin, k, k), "conv"), (prefix + ".bias", (cout,), "zeros")]


def _decl_bn(prefix: str, c: int) -> list[ParamDecl]:
    return [
        (prefix + ".weight", (c,), "ones"),
        (prefix + ".bias", (c,), "zeros"),
        (prefix + ".running_mean", (c,), "state_zeros"),
        (prefix + ".running_var", (c,), "state_ones"),
    ]


def declare_block(prefix: str, config: BlockConfig) -> list[ParamDecl]:
    cin, cout = config.in_channels, config.out_channels
    if config.kind == "bottleneck":
        half = cout // 2
        decl = (
            _decl_bn(prefix + ".bn1", cin)
            + _decl_conv(prefix + ".conv1", cin, half, 1)
            + _decl_bn(prefix + ".bn2", half)
            + _decl_conv(prefix + ".conv2", half, half, 3)
            + _decl_bn(prefix + ".bn3", half)
            + _decl_conv(prefix + ".conv3", half, cout, 1)
        )
    else:
        half, quarter = cout // 2, cout // 4
        decl = (
            _decl_bn(prefix + ".bn1", cin)
            + _decl_conv(prefix + ".conv1", cin, half, 3)
            + _decl_bn(prefix + ".bn2", half)
            + _decl_conv(prefix + ".conv2", half, quarter, 3)
            + _decl_bn(prefix + ".bn3", quarter)
            + _decl_conv(prefix + ".conv3", quarter, quarter, 3)
        )
    if cin != cout:
        decl += _decl_conv(prefix + ".skip", cin, cout, 1)
    return decl


def declare_hourglass(prefix: str, config: HourglassConfig) -> list[ParamDecl]:
    block = BlockConfig(config.block, config.width, config.width)
    decl: list[ParamDecl] = []
    for level in range(1, config.depth + 1):
        p = f"{prefix}.{level}"
        decl += declare_block(p + ".branch", block)
        decl += declare_block(p + ".down", block)
        decl += declare_block(p + ".up", block)
    decl += declare_block(f"{prefix}.{config.depth}.bottom", block)
    return decl


def declare_fan(config: FanConfig) -> list[ParamDecl]:
    kind = config.hourglass.block
    width, m = config.hourglass.width, config.m_landmarks
    st = config.stem
    decl = _decl_conv("stem.conv", 3, st.conv_channels, st.kernel) + _decl_bn("stem.bn", st.conv_channels)
    decl += declare_block("stem.block1", BlockConfig(kind, st.conv_channels, st.mid_channels))
    decl += declare_block("stem.block2", BlockConfig(kind, st.mid_channels, width))
    for s in range(config.n_stacks):
        p = f"stack.{s}"
        decl += declare_hourglass(p + ".hg", config.hourglass)
        decl += _decl_conv(p + ".head.conv", width, width, 1)
        decl += _decl_bn(p + ".head.bn", width)
        decl += _decl_conv(p + ".head.out", width, m, 1)
        if s < config.n_stacks - 1:
            decl += _decl_conv(p + ".remap_feat", width, width, 1)
            decl += _decl_conv(p + ".remap_heat", m, width, 1)
    return decl


def declare_depthnet(config: DepthNetConfig) -> list[ParamDecl]:
    w0 = config.tower[0][0]
    decl = _decl_conv("depth.stem.conv", config.input_channels, w0, 3) + _decl_bn("depth.stem.bn", w0)
    prev = w0
    for k, (width, blocks) in enumerate(config.tower):
        decl += _decl_conv(f"depth.tower.{k}.down", prev, width, 3)
        for b in range(blocks):
            decl += declare_block(f"depth.tower.{k}.block.{b}", BlockConfig("bottleneck", width, width))
        prev = width
    decl += _decl_bn("depth.final.bn", prev)
    decl += [("depth.head.weight", (config.n_landmarks, prev), "linear"), ("depth.head.bias", (config.n_landmarks,), "zeros")]
    return decl


def declare(config: FanConfig | DepthNetConfig) -> list[ParamDecl]:
    if isinstance(config, DepthNetConfig):
        return declare_depthnet(config)
    return declare_fan(config)


def init_params(config: FanConfig | DepthNetConfig, seed: int = 0, dtype=DEFAULT_DTYPE) -> ModelParams:
    """Deterministic initialisation: fan-in scaled uniform weights, BN gamma 1 / beta 0, zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for name, shape, kind in sorted(declare(config)):
        if kind in ("conv", "linear"):
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif kind in ("ones", "state_ones"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params.append(Parameter(data, name, trainable=not kind.startswith("state"), dtype=dtype))
    return ModelParams(params)


# -- forward passes ----------------------------------------------------------------


def _conv(x: Tensor, params: ModelParams, prefix: str, stride: int = 1, padding: int | None = None) -> Tensor:
    w = params[prefix + ".weight"]
    k = w.shape[-1]
    pad = k // 2 if padding is None else padding
    return ops.conv2d(x, w, params[prefix + ".bias"], stride=stride, padding=pad)


def _bn_relu(x: Tensor, params: ModelParams, prefix: str, train: bool) -> Tensor:
    gamma, beta, state = params.bn(prefix)
    return relu(ops.batchnorm2d(x, gamma, beta, state, train=train))


def _skip(x: Tensor, params: ModelParams, prefix: str, config: BlockConfig) -> Tensor:
    if config.in_channels == config.out_channels:
        return x
    return _conv(x, params, prefix + ".skip")


def bottleneck_forward(x: Tensor, params: ModelParams, config: BlockConfig, prefix: str, train: bool = False) -> Tensor:
    if x.shape[1] != config.in_channels:
        raise ShapeError(f"{prefix}: expected {config.in_channels} input channels, got {x.shape}")
    y = _conv(_bn_relu(x, params, prefix + ".bn1", train), params, prefix + ".conv1")
    y = _conv(_bn_relu(y, params, prefix + ".bn2", train), params, prefix + ".conv2")
    y = _conv(_bn_relu(y, params, prefix + ".bn3", train), params, prefix + ".conv3")
    return add_same(_skip(x, params, prefix, config), y)


def hpm_block_forward(x: Tensor, params: ModelParams, config: BlockConfig, prefix: str, train: bool = False) -> Tensor:
    if x.shape[1] != config.in_channels:
        raise ShapeError(f"{prefix}: expected {config.in_channels} input channels, got {x.shape}")
    p1 = _conv(_bn_relu(x, params, prefix + ".bn1", train), params, prefix + ".conv1")
    p2 = _conv(_bn_relu(p1, params, prefix + ".bn2", train), params, prefix + ".conv2")
    p3 = _conv(_bn_relu(p2, params, prefix + ".bn3", train), params, prefix + ".conv3")
    return add_same(_skip(x, params, prefix, config), concat_channels([p1, p2, p3]))


def block_forward(x: Tensor, params: ModelParams, config: BlockConfig, prefix: str, train: bool = False) -> Tensor:
    fn = bottleneck_forward if config.kind == "bottleneck" else hpm_block_forward
    return fn(x, params, config, prefix, train)


BlockFn = Callable[[Tensor, str], Tensor]


def hourglass_forward(
    x: Tensor,
    params: ModelParams,
    config: HourglassConfig,
    prefix: str = "hg",
    train: bool = False,
    block: BlockFn | None = None,
) -> Tensor:
    """Recursive hourglass. ``block`` replaces every residual block (test hook)."""
    step = 2**config.depth
    if x.ndim != 4 or x.shape[2] % step or x.shape[3] % step:
        raise ShapeError(f"hourglass: spatial extent of {x.shape} not divisible by 2**{config.depth}")
    if block is None:
        cfg = BlockConfig(config.block, config.width, config.width)

        def block(t: Tensor, name: str) -> Tensor:
            return block_forward(t, params, cfg, name, train)

    def level(t: Tensor, d: int) -> Tensor:
        p = f"{prefix}.{d}"
        branch = block(t, p + ".branch")
        low = block(ops.maxpool2d(t, 2, 2), p + ".down")
        low = level(low, d + 1) if d < config.depth else block(low, p + ".bottom")
        low = block(low, p + ".up")
        return add_same(ops.upsample_nearest(low, 2), branch)

    return level(x, 1)


def check_input(image: Tensor, config: FanConfig) -> None:
    want = config.input_hw
    if image.ndim != 4 or image.shape[1] != 3 or tuple(image.shape[2:]) != want:
        raise ShapeError(f"FAN expects input (N,3,{want[0]},{want[1]}), got {image.shape}")


def fan_stem(image: Tensor, params: ModelParams, config: FanConfig, train: bool = False) -> Tensor:
    st = config.stem
    kind, width = config.hourglass.block, config.hourglass.width
    x = _conv(image, params, "stem.conv", stride=st.stride)
    x = _bn_relu(x, params, "stem.bn", train)
    x = block_forward(x, params, BlockConfig(kind, st.conv_channels, st.mid_channels), "stem.block1", train)
    if st.pool:
        x = ops.maxpool2d(x, 2, 2)
    return block_forward(x, params, BlockConfig(kind, st.mid_channels, width), "stem.block2", train)


def fan_forward(image: Tensor, params: ModelParams, config: FanConfig, train: bool = False) -> list[Tensor]:
    """Return the n_stacks heatmap tensors (N, m, H, W), first stack first."""
    check_input(image, config)
    dtype = params["stem.conv.weight"].dtype
    if image.dtype != dtype:
        image = Tensor(image, dtype=dtype)
    x = fan_stem(image, params, config, train)
    outputs = []
    for s in range(config.n_stacks):
        p = f"stack.{s}"
        feat = hourglass_forward(x, params, config.hourglass, p + ".hg", train)
        hidden = _bn_relu(_conv(feat, params, p + ".head.conv"), params, p + ".head.bn", train)
        heat = _conv(hidden, params, p + ".head.out")
        outputs.append(heat)
        if s < config.n_stacks - 1:
            x = add_same(add_same(x, _conv(feat, params, p + ".remap_feat")), _conv(heat, params, p + ".remap_heat"))
    return outputs


def resample_heatmaps(heatmaps: Tensor, image_hw: tuple[int, int]) -> Tensor:
    """Nearest-neighbour upsample heatmaps to the image resolution."""
    h, w = heatmaps.shape[2:]
    fy, fx = image_hw[0] // h, image_hw[1] // w
    if fy != fx or fy * h != image_hw[0] or fx * w != image_hw[1]:
        raise ShapeError(f"cannot resample heatmaps {heatmaps.shape} to image {image_hw} by an integer factor")
    return ops.upsample_nearest(heatmaps, fy)


def depthnet_forward(
    image: Tensor, heatmaps: Tensor, params: ModelParams, config: DepthNetConfig, train: bool = False
) -> Tensor:
    """Per-landmark depth (N, Nl) from the image and image-resolution heatmaps."""
    if heatmaps.ndim != 4 or heatmaps.shape[1] != config.n_landmarks:
        raise ShapeError(f"depth net configured for {config.n_landmarks} landmarks, got heatmaps {heatmaps.shape}")
    if image.ndim != 4 or image.shape[1] != 3 or image.shape[2:] != heatmaps.shape[2:] or image.shape[0] != heatmaps.shape[0]:
        raise ShapeError(f"image {image.shape} and heatmaps {heatmaps.shape} must share N,H,W with 3 image channels")
    dtype = params["depth.stem.conv.weight"].dtype
    if image.dtype != dtype:
        image = Tensor(image, dtype=dtype)
    if heatmaps.dtype != dtype:
        heatmaps = Tensor(heatmaps, dtype=dtype)
    x = concat_channels([image, heatmaps])
    x = _bn_relu(_conv(x, params, "depth.stem.conv"), params, "depth.stem.bn", train)
    for k, (width, blocks) in enumerate(config.tower):
        x = _conv(x, params, f"depth.tower.{k}.down", stride=2)
        for b in range(blocks):
            x = bottleneck_forward(x, params, BlockConfig("bottleneck", width, width), f"depth.tower.{k}.block.{b}", train)
    x = _bn_relu(x, params, "depth.final.bn", train)
    return ops.linear(ops.global_avg_pool(x), params["depth.head.weight"], params["depth.head.bias"])
