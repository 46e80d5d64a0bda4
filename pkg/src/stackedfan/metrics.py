"""Face-size normalised landmark error, CED curves, AUC and per-landmark error."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .heatmap import LandmarkSet

DEFAULT_THRESHOLDS = np.round(np.arange(0, 101) * 0.001, 6)
DEFAULT_CUTOFF = 0.10


class UndefinedMetric(ValueError):
    """The metric has no value for this sample (too few visible landmarks)."""


@dataclass
class SchemeMap:
    name_a: str
    name_b: str
    pairs: list[tuple[int, int]]

    def __post_init__(self):
        self.pairs = [(int(a), int(b)) for a, b in self.pairs]
        left = [a for a, _ in self.pairs]
        right = [b for _, b in self.pairs]
        if len(set(left)) != len(left) or len(set(right)) != len(right):
            raise ValueError(f"scheme map {self.name_a}->{self.name_b} repeats an index")
        if min(left + right, default=0) < 0:
            raise ValueError("scheme map indices must be non-negative")

    @classmethod
    def identity(cls, scheme: str, m: int) -> "SchemeMap":
        return cls(scheme, scheme, [(i, i) for i in range(m)])

    @classmethod
    def from_schemes(cls, a: str, b: str) -> "SchemeMap":
        """Look up a correspondence table in either scheme file."""
        from .dataio import DataError, load_scheme

        sa, sb = load_scheme(a), load_scheme(b)
        if a == b:
            return cls.identity(a, sa.m)
        if b in sa.correspondences:
            return cls(a, b, sa.correspondences[b])
        if a in sb.correspondences:
            return cls(a, b, [(i, j) for j, i in sb.correspondences[a]])
        raise DataError(f"no landmark correspondence between schemes {a} and {b}")


def face_size(gt: LandmarkSet) -> float:
    """sqrt(width * height) of the bounding box of visible ground-truth landmarks."""
    pts = gt.xy[gt.visibility]
    if len(pts) < 2:
        raise UndefinedMetric(f"face size needs >= 2 visible landmarks, got {len(pts)}")
    w, h = pts.max(axis=0) - pts.min(axis=0)
    size = math.sqrt(w * h)
    if size <= 0:
        raise UndefinedMetric("degenerate landmark bounding box")
    return size


def _effective(gt: LandmarkSet, subset) -> np.ndarray:
    idx = np.arange(gt.m) if subset is None else np.asarray(subset, dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= gt.m):
        raise IndexError(f"subset indices out of range for m={gt.m}")
    return idx[gt.visibility[idx]]


def nme(pred: LandmarkSet, gt: LandmarkSet, subset: Sequence[int] | None = None) -> float:
    """Mean Euclidean error over visible (subset) landmarks divided by the face size."""
    if pred.m != gt.m or (pred.scheme and gt.scheme and pred.scheme != gt.scheme):
        raise ValueError(f"scheme mismatch: {pred.scheme}/{pred.m} vs {gt.scheme}/{gt.m}")
    idx = _effective(gt, subset)
    if idx.size == 0:
        raise UndefinedMetric("no visible landmarks in the evaluated subset")
    size = face_size(gt)
    d = np.linalg.norm(pred.xy[idx] - gt.xy[idx], axis=1)
    return float(d.mean() / size)


def ced(nmes: Sequence[float], thresholds=DEFAULT_THRESHOLDS) -> list[tuple[float, float]]:
    """Fraction of samples with NME <= t for each threshold t."""
    errors = np.asarray(nmes, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("ced: no errors given")
    t = np.asarray(thresholds, dtype=np.float64)
    if t.size == 0 or np.any(np.diff(t) <= 0):
        raise ValueError("ced: thresholds must be non-empty and strictly increasing")
    sorted_errors = np.sort(errors)
    fractions = np.searchsorted(sorted_errors, t, side="right") / errors.size
    return [(float(a), float(b)) for a, b in zip(t, fractions)]


def auc(curve: Sequence[tuple[float, float]], cutoff: float = DEFAULT_CUTOFF) -> float:
    """Trapezoidal area under the curve on [t0, cutoff], divided by cutoff.

    The curve is linearly interpolated at ``cutoff`` when it is not a grid point,
    and extended flat when the grid ends before it.
    """
    if cutoff <= 0:
        raise ValueError("auc: cutoff must be positive")
    xs = np.array([p[0] for p in curve], dtype=np.float64)
    ys = np.array([p[1] for p in curve], dtype=np.float64)
    keep = xs <= cutoff
    x, y = xs[keep], ys[keep]
    if x.size == 0:
        return 0.0
    if x[-1] < cutoff:
        end = float(np.interp(cutoff, xs, ys)) if xs[-1] >= cutoff else float(ys[-1])
        x = np.append(x, cutoff)
        y = np.append(y, end)
    area = float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))
    return area / cutoff


def per_landmark_nme(
    preds: Sequence[LandmarkSet], gts: Sequence[LandmarkSet], subset: Sequence[int] | None = None
) -> tuple[dict[int, float], list[str]]:
    """Per-landmark mean of distance / face size over samples where it is visible.

    Returns the map and notes about omitted landmarks or samples.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truths")
    notes: list[str] = []
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    ids = None
    for k, (p, g) in enumerate(zip(preds, gts)):
        if ids is None:
            ids = list(range(g.m)) if subset is None else [int(i) for i in subset]
        try:
            size = face_size(g)
        except UndefinedMetric as exc:
            notes.append(f"sample {k} excluded: {exc}")
            continue
        for i in ids:
            if g.visibility[i]:
                d = float(np.linalg.norm(p.xy[i] - g.xy[i]))
                sums[i] = sums.get(i, 0.0) + d / size
                counts[i] = counts.get(i, 0) + 1
    result = {}
    for i in ids or []:
        if counts.get(i):
            result[i] = sums[i] / counts[i]
        else:
            notes.append(f"landmark {i} omitted: invisible in every sample")
    return result, notes


def common_subset(mapping: SchemeMap, a: LandmarkSet, b: LandmarkSet) -> tuple[LandmarkSet, LandmarkSet]:
    """Project two landmark sets onto their shared landmarks, AND-ing visibility."""
    if (a.scheme and a.scheme != mapping.name_a) or (b.scheme and b.scheme != mapping.name_b):
        raise ValueError(f"schemes {a.scheme}/{b.scheme} do not match map {mapping.name_a}/{mapping.name_b}")
    ia = np.array([p[0] for p in mapping.pairs], dtype=int)
    ib = np.array([p[1] for p in mapping.pairs], dtype=int)
    if ia.size and (ia.max() >= a.m or ib.max() >= b.m):
        raise IndexError("scheme map index out of range")
    vis = a.visibility[ia] & b.visibility[ib]
    return (
        LandmarkSet(a.points[ia], vis.copy(), a.scheme),
        LandmarkSet(b.points[ib], vis.copy(), b.scheme),
    )


# -- reports -------------------------------------------------------------------------------


@dataclass
class EvalReport:
    per_sample_nme: list[float | None]
    ced: list[tuple[float, float]]
    auc: float
    per_landmark_nme: dict[int, float]
    cutoff: float = DEFAULT_CUTOFF
    notes: list[str] = field(default_factory=list)
    landmark_names: list[str] | None = None

    @property
    def mean_nme(self) -> float:
        vals = [v for v in self.per_sample_nme if v is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        return {
            "per_sample_nme": self.per_sample_nme,
            "mean_nme": self.mean_nme,
            "ced": [list(p) for p in self.ced],
            "auc": self.auc,
            "cutoff": self.cutoff,
            "per_landmark_nme": {str(k): v for k, v in self.per_landmark_nme.items()},
            "notes": self.notes,
        }

    def write(self, out_dir: str | os.PathLike) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        with open(out / "ced.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fraction"])
            for t, f in self.ced:
                w.writerow([repr(t), repr(f)])
        with open(out / "per_landmark.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["landmark", "nme"])
            for k, v in self.per_landmark_nme.items():
                w.writerow([k, repr(v)])
        return out


def evaluate(
    preds: Sequence[LandmarkSet],
    gts: Sequence[LandmarkSet],
    subset: Sequence[int] | None = None,
    thresholds=DEFAULT_THRESHOLDS,
    cutoff: float = DEFAULT_CUTOFF,
) -> EvalReport:
    """Corpus evaluation; samples with undefined NME are recorded as ``None`` and noted."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truths")
    per_sample: list[float | None] = []
    notes: list[str] = []
    for k, (p, g) in enumerate(zip(preds, gts)):
        try:
            per_sample.append(nme(p, g, subset))
        except UndefinedMetric as exc:
            per_sample.append(None)
            notes.append(f"sample {k} excluded: {exc}")
    defined = [v for v in per_sample if v is not None]
    if not defined:
        raise UndefinedMetric("no sample has a defined NME")
    curve = ced(defined, thresholds)
    per_lm, lm_notes = per_landmark_nme(preds, gts, subset)
    return EvalReport(per_sample, curve, auc(curve, cutoff), per_lm, cutoff, notes + lm_notes)
