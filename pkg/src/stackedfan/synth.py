"""Procedural face-like images with exact landmark annotations.

Each face is an ellipse head with two almond eyes, a nose line, and a filled
six-point mouth. ``asymmetry`` in [0, 1] droops the image-right eye and mouth
corner downward and outward, mimicking unilateral facial palsy. Landmark
positions come from :func:`face_landmarks` in closed form; rendering draws
the features through those same points.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib.path import Path as PolyPath

from .dataio import Sample, load_scheme, save_manifest, write_ppm
from .heatmap import LandmarkSet

SCHEME_ID = "synth12"
SUPERSAMPLE = 4

# droop at asymmetry 1, as fractions of the head half-extents
MOUTH_DROOP = 0.15
MOUTH_OUTWARD = 0.05
EYE_DROOP = 0.08
EYE_OUTWARD = 0.04

EYE_ROW = -0.2
EYE_SPACING = 0.4
EYE_HALF_WIDTH = 0.2
EYE_HALF_HEIGHT = 0.09
NOSE_ROW = 0.2
MOUTH_ROW = 0.5
MOUTH_HALF_WIDTH = 0.35
LIP_HEIGHT = 0.09
DEPTH_RATIO = 0.8
NOSE_DEPTH = 0.25


@dataclass(frozen=True)
class FaceParams:
    cx: float
    cy: float
    rx: float
    ry: float
    skin: tuple[float, float, float]
    background: tuple[float, float, float]
    feature: tuple[float, float, float]
    lips: tuple[float, float, float]


def random_face(rng: np.random.Generator, image_hw: tuple[int, int]) -> FaceParams:
    h, w = image_hw
    rx = rng.uniform(0.27, 0.33) * w
    ry = rx * rng.uniform(1.15, 1.3) * h / w
    return FaceParams(
        cx=w / 2 - 0.5 + rng.uniform(-0.05, 0.05) * w,
        cy=0.47 * h - 0.5 + rng.uniform(-0.03, 0.03) * h,
        rx=rx,
        ry=ry,
        skin=tuple(rng.uniform([0.6, 0.45, 0.35], [0.95, 0.8, 0.7])),
        background=tuple(rng.uniform(0.0, 0.3, size=3)),
        feature=tuple(rng.uniform(0.0, 0.15, size=3)),
        lips=tuple(rng.uniform([0.55, 0.05, 0.1], [0.85, 0.2, 0.25])),
    )


def face_landmarks(face: FaceParams, asymmetry: float = 0.0) -> np.ndarray:
    """(12, 3) array of x, y, z for the synth12 scheme."""
    cx, cy, rx, ry, a = face.cx, face.cy, face.rx, face.ry, float(asymmetry)
    ey = cy + EYE_ROW * ry
    el, er = cx - EYE_SPACING * rx, cx + EYE_SPACING * rx
    ew = EYE_HALF_WIDTH * rx
    my = cy + MOUTH_ROW * ry
    mw = MOUTH_HALF_WIDTH * rx
    lh = LIP_HEIGHT * ry
    eye_dx, eye_dy = EYE_OUTWARD * rx * a, EYE_DROOP * ry * a
    xy = np.array(
        [
            [el - ew, ey],
            [el + ew, ey],
            [er - ew + eye_dx, ey + eye_dy],
            [er + ew + eye_dx, ey + eye_dy],
            [cx, cy + NOSE_ROW * ry],
            [cx, cy + ry],
            [cx - mw, my],
            [cx - 0.35 * mw, my - lh],
            [cx + 0.35 * mw, my - lh],
            [cx + mw + MOUTH_OUTWARD * rx * a, my + MOUTH_DROOP * ry * a],
            [cx + 0.35 * mw, my + lh],
            [cx - 0.35 * mw, my + lh],
        ]
    )
    u = (xy[:, 0] - cx) / rx
    v = (xy[:, 1] - cy) / ry
    z = DEPTH_RATIO * rx * np.sqrt(np.clip(1.0 - u**2 - v**2, 0.0, None))
    z[4] += NOSE_DEPTH * rx
    return np.column_stack([xy, z])


def _segment_mask(px, py, p0, p1, half_width):
    d = np.subtract(p1, p0)
    t = np.clip(((px - p0[0]) * d[0] + (py - p0[1]) * d[1]) / max(float(d @ d), 1e-12), 0.0, 1.0)
    return (px - p0[0] - t * d[0]) ** 2 + (py - p0[1] - t * d[1]) ** 2 <= half_width**2


def _polygon_mask(px, py, pts):
    inside = PolyPath(pts).contains_points(np.column_stack([px.ravel(), py.ravel()]))
    return inside.reshape(px.shape)


def render_face(face: FaceParams, landmarks: np.ndarray, image_hw: tuple[int, int]) -> np.ndarray:
    """Rasterise with supersampling into a float32 (H, W, 3) image in [0, 1]."""
    h, w = image_hw
    s = SUPERSAMPLE
    # supersample centres expressed in output pixel coordinates
    ys = (np.arange(h * s) + 0.5) / s - 0.5
    xs = (np.arange(w * s) + 0.5) / s - 0.5
    px, py = np.meshgrid(xs, ys)
    canvas = np.empty((h * s, w * s, 3), dtype=np.float64)
    canvas[:] = face.background

    head = ((px - face.cx) / face.rx) ** 2 + ((py - face.cy) / face.ry) ** 2 <= 1.0
    canvas[head] = face.skin

    lm = landmarks[:, :2]
    for outer, inner in ((0, 1), (3, 2)):
        centre = (lm[outer] + lm[inner]) / 2
        half = np.linalg.norm(lm[outer] - lm[inner]) / 2
        axis = (lm[inner] - lm[outer]) / (2 * half)
        du, dv = px - centre[0], py - centre[1]
        along = du * axis[0] + dv * axis[1]
        across = -du * axis[1] + dv * axis[0]
        eye = (along / half) ** 2 + (across / (EYE_HALF_HEIGHT * face.ry)) ** 2 <= 1.0
        canvas[eye] = face.feature

    nose_top = np.array([face.cx, face.cy + EYE_ROW * face.ry])
    shade = np.asarray(face.skin) * 0.55
    canvas[_segment_mask(px, py, nose_top, lm[4], 0.04 * face.rx)] = shade
    nostril = np.array([0.12 * face.rx, 0.0])
    canvas[_segment_mask(px, py, lm[4] - nostril, lm[4] + nostril, 0.04 * face.rx)] = shade

    canvas[_polygon_mask(px, py, lm[6:12])] = face.lips
    canvas[_segment_mask(px, py, lm[6], lm[9], 0.025 * face.rx)] = face.feature

    image = canvas.reshape(h, s, w, s, 3).mean(axis=(1, 3))
    return image.astype(np.float32)


def synth_generate(
    count: int,
    image_hw: tuple[int, int] = (64, 64),
    asymmetry: float = 0.0,
    seed: int = 0,
    out_dir: str | Path | None = None,
) -> list[Sample]:
    """Generate ``count`` faces; with ``out_dir`` also write P6 images and ``manifest.jsonl``."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if not 0.0 <= asymmetry <= 1.0:
        raise ValueError(f"asymmetry must lie in [0, 1], got {asymmetry}")
    scheme = load_scheme(SCHEME_ID)
    rng = np.random.default_rng(seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    samples = []
    for i in range(count):
        face = random_face(rng, image_hw)
        points = face_landmarks(face, asymmetry)
        image = render_face(face, points, image_hw)
        lm = LandmarkSet(points, np.ones(scheme.m, dtype=bool), scheme.id)
        bbox = [face.cx - face.rx, face.cy - face.ry, face.cx + face.rx, face.cy + face.ry]
        path = (out / f"face_{i:04d}.ppm") if out is not None else Path(f"face_{i:04d}.ppm")
        sample = Sample(path, lm, bbox, image=image)
        if out is not None:
            write_ppm(path, image)
            # store exactly what a reader will get back from the 8-bit file
            sample.image = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).astype(np.float32) / 255.0
        samples.append(sample)
    if out is not None:
        save_manifest(samples, out / "manifest.jsonl")
    return samples
