"""Heatmap and depth losses, optimisers, learning-rate schedules and the epoch loop."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import AugmentConfig, AugSample, augment, require_swap_map
from .dataio import Sample, save_checkpoint
from .heatmap import GaussianSpec, encode
from .nn import DepthNetConfig, FanConfig, ModelParams, depthnet_forward, fan_forward, init_params, resample_heatmaps
from .tensor import Parameter, Tensor, mul, no_grad, square, tensor_sum

logger = logging.getLogger(__name__)

FAN_SCHEDULE = ((0, 1e-4), (15, 1e-5), (30, 1e-6))


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/inf."""

    def __init__(self, message: str, batch: int | None = None):
        super().__init__(message if batch is None else f"{message} (batch {batch})")
        self.batch = batch


# -- losses ------------------------------------------------------------------------------


def _const(value, like: Tensor) -> Tensor:
    return Tensor(value, dtype=like.dtype)


def _visibility_weights(visibility, shape, masking: bool) -> np.ndarray | None:
    if visibility is None or not masking:
        return None
    return np.asarray(visibility, dtype=bool).reshape(shape)


def heatmap_mse(pred: Tensor, target, visibility=None, masking: bool = True) -> Tensor:
    """Mean squared error over every cell of every visible channel.

    ``visibility`` is (N, m) or (m,) for a single (m, H, W) stack. If masking is
    on and nothing is visible, the loss is 0 (a warning is logged).
    """
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"heatmap_mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred - _const(target, pred)
    cells = int(np.prod(pred.shape[-2:]))
    vis = _visibility_weights(visibility, pred.shape[:-2], masking)
    if vis is None:
        return mul(tensor_sum(square(diff)), _const(1.0 / pred.size, pred))
    n_vis = int(vis.sum())
    if n_vis == 0:
        logger.warning("heatmap_mse: no visible landmarks, loss defined as 0")
        return mul(tensor_sum(pred), _const(0.0, pred))
    mask = _const(vis[..., None, None], pred)
    masked = mul(diff, mask)
    return mul(tensor_sum(square(masked)), _const(1.0 / (n_vis * cells), pred))


def fan_loss(per_stack: Sequence[Tensor], target, visibility=None, masking: bool = True) -> Tensor:
    """Unweighted sum of per-stack heatmap MSEs (intermediate supervision)."""
    if not per_stack:
        raise ValueError("fan_loss: no stack outputs")
    total = heatmap_mse(per_stack[0], target, visibility, masking)
    for pred in per_stack[1:]:
        total = total + heatmap_mse(pred, target, visibility, masking)
    return total


def depth_l2(pred: Tensor, target, visibility=None, masking: bool = True) -> Tensor:
    """Mean squared depth error over visible landmarks."""
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"depth_l2: prediction {pred.shape} vs target {target.shape}")
    diff = pred - _const(target, pred)
    vis = _visibility_weights(visibility, pred.shape, masking)
    if vis is None:
        return mul(tensor_sum(square(diff)), _const(1.0 / pred.size, pred))
    n_vis = int(vis.sum())
    if n_vis == 0:
        logger.warning("depth_l2: no visible landmarks, loss defined as 0")
        return mul(tensor_sum(pred), _const(0.0, pred))
    masked = mul(diff, _const(vis, pred))
    return mul(tensor_sum(square(masked)), _const(1.0 / n_vis, pred))


# -- schedule and optimisers ---------------------------------------------------------------


def validate_schedule(schedule) -> list[tuple[int, float]]:
    steps = [(int(e), float(lr)) for e, lr in schedule]
    if not steps:
        raise ValueError("empty learning-rate schedule")
    if steps[0][0] != 0:
        raise ValueError("learning-rate schedule must start at epoch 0")
    for (e0, lr0), (e1, lr1) in zip(steps, steps[1:]):
        if e1 <= e0:
            raise ValueError("schedule epochs must be strictly increasing")
        if lr1 > lr0:
            raise ValueError("schedule learning rates must be non-increasing")
    if any(lr <= 0 for _, lr in steps):
        raise ValueError("learning rates must be positive")
    return steps


def lr_at(epoch: int, schedule=FAN_SCHEDULE) -> float:
    """Right-continuous step function: the rate of the last step starting at or before ``epoch``."""
    lr = None
    for start, rate in validate_schedule(schedule):
        if epoch >= start:
            lr = rate
    return lr


def _check_finite(params: Sequence[Parameter], batch: int | None) -> None:
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in {p.name}", batch)


class SGD:
    def __init__(self, params: ModelParams):
        self.params = params

    def step(self, lr: float, batch: int | None = None) -> None:
        trainable = self.params.trainable()
        _check_finite(trainable, batch)
        for p in trainable:
            if p.grad is not None:
                p.data -= (lr * p.grad).astype(p.dtype)


class RMSprop:
    """v <- a*v + (1-a)*g^2;  w <- w - lr * g / (sqrt(v) + eps)."""

    def __init__(self, params: ModelParams, alpha: float = 0.99, eps: float = 1e-8):
        self.params = params
        self.alpha = alpha
        self.eps = eps
        self.state: dict[str, np.ndarray] = {}

    def step(self, lr: float, batch: int | None = None) -> None:
        trainable = self.params.trainable()
        _check_finite(trainable, batch)
        for p in trainable:
            if p.grad is None:
                continue
            v = self.state.get(p.name)
            if v is None:
                v = np.zeros_like(p.data)
            v = self.alpha * v + (1 - self.alpha) * p.grad * p.grad
            self.state[p.name] = v
            p.data -= (lr * p.grad / (np.sqrt(v) + self.eps)).astype(p.dtype)


def make_optimiser(name: str, params: ModelParams, **kwargs):
    name = name.lower()
    if name == "sgd":
        return SGD(params)
    if name == "rmsprop":
        return RMSprop(params, **kwargs)
    raise ValueError(f"unknown optimiser {name!r}")


def optimiser_step(optimiser, lr: float, batch: int | None = None) -> None:
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    optimiser.step(lr, batch)


# -- configuration -----------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr_schedule: list = field(default_factory=lambda: [list(s) for s in FAN_SCHEDULE])
    epochs: int = 40
    batch_size: int = 10
    optimiser: str = "rmsprop"
    optimiser_args: dict = field(default_factory=lambda: {"alpha": 0.99, "eps": 1e-8})
    loss_visibility_masking: bool = True
    max_steps: int | None = None
    checkpoint_every: int = 0
    log_every: int = 1
    loss: str = "mse"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        validate_schedule(self.lr_schedule)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def depth_train_defaults() -> TrainConfig:
    return TrainConfig(lr_schedule=[[0, 1e-3]], epochs=50, batch_size=10, loss="l2")


# -- loop ------------------------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    log: list[tuple[int, int, float]]
    epoch_losses: list[float]


def _to_aug(sample: Sample) -> AugSample:
    return AugSample(sample.load_image(), sample.landmarks)


def image_batch(images: Sequence[np.ndarray], dtype=np.float32) -> Tensor:
    return Tensor(np.stack([np.transpose(im, (2, 0, 1)) for im in images]), dtype=dtype)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def write_loss_csv(log, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "loss"])
        for epoch, step, loss in log:
            writer.writerow([epoch, step, repr(float(loss))])


def _run(
    model_config,
    params: ModelParams,
    samples: Sequence[Sample],
    train_config: TrainConfig,
    aug_config: AugmentConfig,
    seed: int,
    batch_loss,
    checkpoint_dir: str | os.PathLike | None,
    scheme: str,
) -> TrainResult:
    if not samples:
        raise ValueError("training set is empty")
    require_swap_map(aug_config, scheme, samples[0].landmarks.m)
    optimiser = make_optimiser(train_config.optimiser, params, **(train_config.optimiser_args or {}))
    log: list[tuple[int, int, float]] = []
    epoch_losses: list[float] = []
    step = 0
    for epoch in range(train_config.epochs):
        lr = lr_at(epoch, train_config.lr_schedule)
        rng = np.random.default_rng([seed, epoch])
        losses = []
        for idx in _batches(len(samples), train_config.batch_size, rng):
            batch = [
                augment(_to_aug(samples[i]), aug_config, seed=seed, draw=epoch * len(samples) + int(i)) for i in idx
            ]
            params.zero_grad()
            loss = batch_loss(batch)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}", step)
            loss.backward()
            optimiser_step(optimiser, lr, step)
            losses.append(value)
            if step % train_config.log_every == 0:
                log.append((epoch, step, value))
            step += 1
            if train_config.max_steps is not None and step >= train_config.max_steps:
                break
        epoch_losses.append(float(np.mean(losses)))
        logger.info("epoch %d lr %.2g loss %.6f", epoch, lr, epoch_losses[-1])
        if checkpoint_dir is not None and train_config.checkpoint_every and (epoch + 1) % train_config.checkpoint_every == 0:
            save_checkpoint(params, model_config, Path(checkpoint_dir) / f"epoch_{epoch + 1:04d}.gsckpt", scheme, epoch + 1)
        if train_config.max_steps is not None and step >= train_config.max_steps:
            break
    params.zero_grad()
    return TrainResult(params, log, epoch_losses)


def train(
    config: FanConfig,
    samples: Sequence[Sample],
    train_config: TrainConfig,
    aug_config: AugmentConfig,
    seed: int = 0,
    params: ModelParams | None = None,
    gaussian: GaussianSpec = GaussianSpec(),
    checkpoint_dir: str | os.PathLike | None = None,
) -> TrainResult:
    """Train the stacked FAN with intermediate supervision; deterministic given ``seed``."""
    for s in samples:
        if s.landmarks.m != config.m_landmarks:
            raise ValueError(f"sample {s.image_path} has {s.landmarks.m} landmarks, model expects {config.m_landmarks}")
    if params is None:
        params = init_params(config, seed)
    dtype = params["stem.conv.weight"].dtype

    def batch_loss(batch: list[AugSample]) -> Tensor:
        images = image_batch([b.image for b in batch], dtype)
        hw = batch[0].image.shape[:2]
        targets = np.stack([encode(b.landmarks, hw, config.heatmap_hw, gaussian) for b in batch])
        vis = np.stack([b.landmarks.visibility for b in batch])
        preds = fan_forward(images, params, config, train=True)
        return fan_loss(preds, targets, vis, train_config.loss_visibility_masking)

    scheme = samples[0].landmarks.scheme if samples else ""
    return _run(config, params, samples, train_config, aug_config, seed, batch_loss, checkpoint_dir, scheme)


def train_depth(
    config: DepthNetConfig,
    samples: Sequence[Sample],
    train_config: TrainConfig,
    aug_config: AugmentConfig,
    heatmap_hw: tuple[int, int],
    seed: int = 0,
    params: ModelParams | None = None,
    gaussian: GaussianSpec = GaussianSpec(),
    checkpoint_dir: str | os.PathLike | None = None,
) -> TrainResult:
    """Train the depth net on ground-truth heatmaps and per-landmark z targets."""
    for s in samples:
        if not s.landmarks.has_depth:
            raise ValueError(f"sample {s.image_path} has no depth annotations")
        if s.landmarks.m != config.n_landmarks:
            raise ValueError(f"sample {s.image_path} has {s.landmarks.m} landmarks, depth net expects {config.n_landmarks}")
    if params is None:
        params = init_params(config, seed)
    dtype = params["depth.stem.conv.weight"].dtype

    def batch_loss(batch: list[AugSample]) -> Tensor:
        images = image_batch([b.image for b in batch], dtype)
        hw = batch[0].image.shape[:2]
        heat = Tensor(np.stack([encode(b.landmarks, hw, heatmap_hw, gaussian) for b in batch]), dtype=dtype)
        with no_grad():
            heat = resample_heatmaps(heat, hw)
        z = np.stack([b.landmarks.points[:, 2] for b in batch])
        vis = np.stack([b.landmarks.visibility for b in batch])
        pred = depthnet_forward(images, heat, params, config, train=True)
        return depth_l2(pred, z, vis, train_config.loss_visibility_masking)

    scheme = samples[0].landmarks.scheme if samples else ""
    return _run(config, params, samples, train_config, aug_config, seed, batch_loss, checkpoint_dir, scheme)
