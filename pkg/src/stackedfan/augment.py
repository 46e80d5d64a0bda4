"""Training-time augmentation applied jointly to an image and its landmarks.

Images are float (H, W, 3) arrays in [0, 1]. Every operation returns a new
:class:`AugSample`; inputs are never modified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .heatmap import LandmarkSet


@dataclass
class AugSample:
    image: np.ndarray
    landmarks: LandmarkSet


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    # scheme id -> swap pairs; filled from scheme files when empty
    flip_swap_map: dict = field(default_factory=dict)
    rotate_deg: float = 30.0
    scale: tuple[float, float] = (0.75, 1.25)
    jitter: tuple[float, float] = (0.8, 1.2)
    occlusion_prob: float = 0.3
    occlusion_max_area: float = 0.3
    occlusion_value: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_prob", "occlusion_prob", "occlusion_max_area"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.scale[0] <= 0 or self.scale[1] < self.scale[0]:
            raise ValueError(f"scale range must be positive and ordered, got {self.scale}")
        if self.jitter[0] < 0 or self.jitter[1] < self.jitter[0]:
            raise ValueError(f"jitter range must be non-negative and ordered, got {self.jitter}")
        swap = {k: [(int(a), int(b)) for a, b in v] for k, v in self.flip_swap_map.items()}
        object.__setattr__(self, "flip_swap_map", swap)
        for pairs in self.flip_swap_map.values():
            swap_permutation(pairs, None)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(flip_prob=0.0, rotate_deg=0.0, scale=(1.0, 1.0), jitter=(1.0, 1.0), occlusion_prob=0.0)

    def to_dict(self) -> dict:
        return {
            "flip_prob": self.flip_prob,
            "flip_swap_map": {k: [list(p) for p in v] for k, v in self.flip_swap_map.items()},
            "rotate_deg": self.rotate_deg,
            "scale": list(self.scale),
            "jitter": list(self.jitter),
            "occlusion_prob": self.occlusion_prob,
            "occlusion_max_area": self.occlusion_max_area,
            "occlusion_value": self.occlusion_value,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        d = dict(d)
        for key in ("scale", "jitter"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def swap_permutation(pairs, m: int | None) -> np.ndarray:
    """Permutation array for a swap map; raises unless it is an involution."""
    pairs = [tuple(p) for p in pairs]
    size = m if m is not None else (max((max(p) for p in pairs), default=-1) + 1)
    perm = np.arange(size)
    touched = set()
    for a, b in pairs:
        if a in touched or b in touched or not (0 <= a < size and 0 <= b < size):
            raise ValueError(f"swap map is not an involution: pair ({a}, {b})")
        touched.update((a, b))
        perm[a], perm[b] = b, a
    return perm


def _swap_pairs(config: AugmentConfig, scheme: str):
    if scheme in config.flip_swap_map:
        return config.flip_swap_map[scheme]
    from .dataio import DataError, load_scheme

    try:
        return load_scheme(scheme).swap
    except DataError:
        raise ValueError(f"no flip swap map for scheme {scheme!r}") from None


def require_swap_map(config: AugmentConfig, scheme: str, m: int) -> None:
    """Fail before training starts when flipping is enabled but the scheme has no swap map."""
    if config.flip_prob > 0:
        swap_permutation(_swap_pairs(config, scheme), m)


def flip(sample: AugSample, pairs) -> AugSample:
    """Deterministic horizontal mirror with left/right landmark relabelling."""
    lm = sample.landmarks
    perm = swap_permutation(pairs, lm.m)
    width = sample.image.shape[1]
    pts = lm.points.copy()
    pts[:, 0] = width - 1 - pts[:, 0]
    return AugSample(
        np.ascontiguousarray(sample.image[:, ::-1]),
        LandmarkSet(pts[perm], lm.visibility[perm], lm.scheme),
    )


def random_flip(sample: AugSample, config: AugmentConfig, rng: np.random.Generator) -> AugSample:
    if rng.random() < config.flip_prob:
        return flip(sample, _swap_pairs(config, sample.landmarks.scheme))
    return sample


def landmark_centre(lm: LandmarkSet) -> np.ndarray:
    pts = lm.xy[lm.visibility] if lm.visibility.any() else lm.xy
    return (pts.min(axis=0) + pts.max(axis=0)) / 2


def similarity(sample: AugSample, angle_deg: float, scale: float, centre=None) -> AugSample:
    """Rotate by ``angle_deg`` (x toward y) and scale about ``centre`` (default: landmark box centre).

    Pixels are bilinearly resampled with zero fill; landmarks leaving the frame
    become invisible. Depth, when present, is scaled with the plane.
    """
    lm = sample.landmarks
    c = landmark_centre(lm) if centre is None else np.asarray(centre, dtype=np.float64)
    t = math.radians(angle_deg)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]]) * scale
    pts = lm.points.copy()
    pts[:, :2] = (lm.xy - c) @ rot.T + c
    if lm.has_depth:
        pts[:, 2] *= scale

    h, w = sample.image.shape[:2]
    inv = np.linalg.inv(rot)
    # ndimage works in (row, col); output (r, c) samples input at inv @ (x - c) + c
    inv_rc = inv[::-1, ::-1]
    c_rc = c[::-1]
    offset = c_rc - inv_rc @ c_rc
    channels = [
        ndimage.affine_transform(sample.image[:, :, k], inv_rc, offset=offset, order=1, mode="constant", cval=0.0)
        for k in range(sample.image.shape[2])
    ]
    image = np.stack(channels, axis=2).astype(sample.image.dtype)
    inside = (pts[:, 0] >= 0) & (pts[:, 0] <= w - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= h - 1)
    return AugSample(image, LandmarkSet(pts, lm.visibility & inside, lm.scheme))


def random_rotate_scale(sample: AugSample, config: AugmentConfig, rng: np.random.Generator) -> AugSample:
    angle = rng.uniform(-config.rotate_deg, config.rotate_deg)
    scale = rng.uniform(*config.scale)
    if angle == 0.0 and scale == 1.0:
        return sample
    return similarity(sample, angle, scale)


def color_jitter(sample: AugSample, config: AugmentConfig, rng: np.random.Generator) -> AugSample:
    factors = rng.uniform(config.jitter[0], config.jitter[1], size=sample.image.shape[2])
    image = np.clip(sample.image * factors.astype(sample.image.dtype), 0.0, 1.0)
    return AugSample(image, sample.landmarks)


def random_occlusion(sample: AugSample, config: AugmentConfig, rng: np.random.Generator) -> AugSample:
    """Paint one rectangle of at most ``occlusion_max_area`` x landmark-box area."""
    if rng.random() >= config.occlusion_prob or config.occlusion_max_area <= 0:
        return sample
    lm = sample.landmarks
    pts = lm.xy[lm.visibility] if lm.visibility.any() else lm.xy
    bw, bh = np.maximum(pts.max(axis=0) - pts.min(axis=0), 1.0)
    area = rng.uniform(0.0, config.occlusion_max_area) * bw * bh
    aspect = rng.uniform(0.5, 2.0)
    rw = int(min(math.sqrt(area * aspect), sample.image.shape[1]))
    rh = int(min(area / max(rw, 1), sample.image.shape[0]))
    if rw < 1 or rh < 1:
        return sample
    h, w = sample.image.shape[:2]
    x0 = int(rng.integers(0, w - rw + 1))
    y0 = int(rng.integers(0, h - rh + 1))
    image = sample.image.copy()
    image[y0 : y0 + rh, x0 : x0 + rw] = config.occlusion_value
    return AugSample(image, lm)


def augment(sample: AugSample, config: AugmentConfig, seed: int | None = None, draw: int = 0) -> AugSample:
    """Full menu in fixed order; the stream is keyed by (seed, draw index)."""
    rng = np.random.default_rng([config.seed if seed is None else seed, draw])
    sample = random_flip(sample, config, rng)
    sample = random_rotate_scale(sample, config, rng)
    sample = color_jitter(sample, config, rng)
    return random_occlusion(sample, config, rng)
