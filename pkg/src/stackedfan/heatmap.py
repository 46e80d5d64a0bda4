"""Gaussian heatmap encoding/decoding of landmark sets.

Coordinates follow one convention throughout the package: ``x`` is the column,
``y`` the row, and ``(0, 0)`` is the centre of the top-left pixel (or heatmap
cell). Image and heatmap coordinates differ by a per-axis scale only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

CONFIDENCE_FLOOR = 0.05


@dataclass
class LandmarkSet:
    """m landmarks as (x, y) or (x, y, z) rows in image pixels."""

    points: np.ndarray
    visibility: np.ndarray
    scheme: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] not in (2, 3):
            raise ValueError(f"landmark points must be (m, 2) or (m, 3), got {self.points.shape}")
        self.visibility = np.asarray(self.visibility, dtype=bool).reshape(-1)
        if self.visibility.shape[0] != self.points.shape[0]:
            raise ValueError(
                f"{self.points.shape[0]} points but {self.visibility.shape[0]} visibility flags"
            )

    @property
    def m(self) -> int:
        return self.points.shape[0]

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, :2]

    @property
    def has_depth(self) -> bool:
        return self.points.shape[1] == 3

    def copy(self) -> "LandmarkSet":
        return LandmarkSet(self.points.copy(), self.visibility.copy(), self.scheme)


@dataclass(frozen=True)
class GaussianSpec:
    sigma: float = 1.0
    truncation_radius: float | None = None
    peak: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.truncation_radius is not None and self.truncation_radius < self.sigma:
            raise ValueError("truncation_radius must be >= sigma")

    @property
    def radius(self) -> float:
        return 3.0 * self.sigma if self.truncation_radius is None else self.truncation_radius


def _scale(src_hw, dst_hw) -> np.ndarray:
    if min(src_hw) <= 0 or min(dst_hw) <= 0:
        raise ValueError(f"extents must be positive, got {src_hw} and {dst_hw}")
    # (x, y) order: width ratio first
    return np.array([dst_hw[1] / src_hw[1], dst_hw[0] / src_hw[0]], dtype=np.float64)


def image_to_heatmap_coords(p, image_hw, heatmap_hw) -> np.ndarray:
    return np.asarray(p, dtype=np.float64) * _scale(image_hw, heatmap_hw)


def heatmap_to_image_coords(p, heatmap_hw, image_hw) -> np.ndarray:
    return np.asarray(p, dtype=np.float64) * _scale(heatmap_hw, image_hw)


def out_of_bounds(landmarks: LandmarkSet, image_hw, heatmap_hw) -> np.ndarray:
    """Visible landmarks whose heatmap position falls outside the heatmap."""
    hp = image_to_heatmap_coords(landmarks.xy, image_hw, heatmap_hw)
    h, w = heatmap_hw
    inside = (hp[:, 0] >= -0.5) & (hp[:, 0] <= w - 0.5) & (hp[:, 1] >= -0.5) & (hp[:, 1] <= h - 0.5)
    return landmarks.visibility & ~inside


def encode(landmarks: LandmarkSet, image_hw, heatmap_hw, spec: GaussianSpec = GaussianSpec()) -> np.ndarray:
    """Render an (m, H, W) stack of truncated Gaussians at the landmark positions.

    Invisible landmarks and landmarks mapped outside the heatmap get all-zero
    channels (the latter are logged; see :func:`out_of_bounds`).
    """
    h, w = heatmap_hw
    hp = image_to_heatmap_coords(landmarks.xy, image_hw, heatmap_hw)
    outside = out_of_bounds(landmarks, image_hw, heatmap_hw)
    if outside.any():
        logger.warning("landmarks %s fall outside the %dx%d heatmap", np.flatnonzero(outside).tolist(), h, w)
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    out = np.zeros((landmarks.m, h, w), dtype=np.float32)
    r2max = spec.radius**2
    for i, (x, y) in enumerate(hp):
        if not landmarks.visibility[i] or outside[i]:
            continue
        d2 = (cols - x) ** 2 + (rows - y) ** 2
        g = spec.peak * np.exp(-d2 / (2.0 * spec.sigma**2))
        g[d2 > r2max] = 0.0
        out[i] = g
    return out


def decode(heatmaps: np.ndarray, image_hw, floor: float = CONFIDENCE_FLOOR, scheme: str = "") -> LandmarkSet:
    """Argmax plus quarter-cell shift toward the larger neighbour, mapped to image pixels."""
    heatmaps = np.asarray(heatmaps)
    m, h, w = heatmaps.shape
    flat = heatmaps.reshape(m, -1)
    idx = flat.argmax(axis=1)
    rows, cols = np.divmod(idx, w)
    peak = flat[np.arange(m), idx]
    pts = np.stack([cols, rows], axis=1).astype(np.float64)
    for i in range(m):
        r, c = rows[i], cols[i]
        hm = heatmaps[i]
        if 0 < c < w - 1:
            pts[i, 0] += 0.25 * np.sign(hm[r, c + 1] - hm[r, c - 1])
        if 0 < r < h - 1:
            pts[i, 1] += 0.25 * np.sign(hm[r + 1, c] - hm[r - 1, c])
    return LandmarkSet(heatmap_to_image_coords(pts, (h, w), image_hw), peak > floor, scheme)


def decode_batch(heatmaps: np.ndarray, image_hw, floor: float = CONFIDENCE_FLOOR, scheme: str = "") -> list[LandmarkSet]:
    return [decode(hm, image_hw, floor, scheme) for hm in heatmaps]
