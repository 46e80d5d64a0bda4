"""Batched inference: heatmaps to landmarks, optionally with per-landmark depth."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .heatmap import CONFIDENCE_FLOOR, LandmarkSet, decode
from .nn import DepthNetConfig, FanConfig, ModelParams, depthnet_forward, fan_forward, resample_heatmaps
from .tensor import ShapeError, Tensor, no_grad
from .training import image_batch


def predict_heatmaps(
    params: ModelParams, config: FanConfig, images: Sequence[np.ndarray], batch_size: int = 8
) -> np.ndarray:
    """Last-stack heatmaps (N, m, H, W) in eval mode."""
    dtype = params["stem.conv.weight"].dtype
    chunks = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            batch = image_batch(images[start : start + batch_size], dtype)
            chunks.append(fan_forward(batch, params, config, train=False)[-1].data)
    if not chunks:
        return np.zeros((0, config.m_landmarks) + config.heatmap_hw, dtype=dtype)
    return np.concatenate(chunks)


def predict_depth(
    params: ModelParams,
    config: DepthNetConfig,
    images: Sequence[np.ndarray],
    heatmaps: np.ndarray,
    batch_size: int = 8,
) -> np.ndarray:
    """Per-landmark depth (N, Nl) from images and low-resolution heatmaps."""
    dtype = params["depth.stem.conv.weight"].dtype
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            imgs = image_batch(images[start : start + batch_size], dtype)
            heat = resample_heatmaps(Tensor(heatmaps[start : start + batch_size], dtype=dtype), imgs.shape[2:])
            out.append(depthnet_forward(imgs, heat, params, config, train=False).data)
    return np.concatenate(out) if out else np.zeros((0, config.n_landmarks), dtype=dtype)


def predict_landmarks(
    params: ModelParams,
    config: FanConfig,
    images: Sequence[np.ndarray],
    scheme: str = "",
    depth: tuple[ModelParams, DepthNetConfig] | None = None,
    floor: float = CONFIDENCE_FLOOR,
    batch_size: int = 8,
) -> list[LandmarkSet]:
    """Decode one landmark set per image; with ``depth`` each point gains a z column."""
    for im in images:
        if im.shape[:2] != config.input_hw:
            raise ShapeError(f"image {im.shape[:2]} does not match model input {config.input_hw}")
    heat = predict_heatmaps(params, config, images, batch_size)
    sets = [decode(h, config.input_hw, floor, scheme) for h in heat]
    if depth is not None:
        depth_params, depth_config = depth
        if depth_config.n_landmarks != config.m_landmarks:
            raise ShapeError(
                f"depth net predicts {depth_config.n_landmarks} landmarks, FAN emits {config.m_landmarks}"
            )
        z = predict_depth(depth_params, depth_config, images, heat, batch_size)
        sets = [
            LandmarkSet(np.column_stack([s.xy, zi.astype(np.float64)]), s.visibility, s.scheme)
            for s, zi in zip(sets, z)
        ]
    return sets
