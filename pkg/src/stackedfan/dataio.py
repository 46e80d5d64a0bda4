"""Schemes, line-delimited manifests, P6 images and binary checkpoints."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .heatmap import LandmarkSet
from .nn import DepthNetConfig, FanConfig, ModelParams, config_from_dict
from .tensor import Parameter

CHECKPOINT_MAGIC = b"GSCKPT1"


class DataError(ValueError):
    """Malformed or inconsistent input data (manifests, schemes, checkpoints, images)."""


# -- schemes ------------------------------------------------------------------------


@dataclass
class Scheme:
    id: str
    m: int
    names: list[str]
    swap: list[tuple[int, int]] = field(default_factory=list)
    correspondences: dict[str, list[tuple[int, int]]] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.names) != self.m:
            raise DataError(f"scheme {self.id}: {len(self.names)} names for m={self.m}")
        if len(set(self.names)) != len(self.names):
            raise DataError(f"scheme {self.id}: landmark names are not unique")
        self.swap = [tuple(p) for p in self.swap]
        perm = self.permutation()
        if not np.array_equal(perm[perm], np.arange(self.m)):
            raise DataError(f"scheme {self.id}: swap map is not an involution")
        self.correspondences = {k: [tuple(p) for p in v] for k, v in self.correspondences.items()}

    def permutation(self) -> np.ndarray:
        """Index permutation applied to landmarks under a horizontal flip."""
        perm = np.arange(self.m)
        seen = set()
        for a, b in self.swap:
            if not (0 <= a < self.m and 0 <= b < self.m) or a in seen or b in seen:
                raise DataError(f"scheme {self.id}: invalid or repeated swap pair ({a}, {b})")
            seen.update((a, b))
            perm[a], perm[b] = b, a
        return perm

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "m": self.m,
            "names": list(self.names),
            "swap": [list(p) for p in self.swap],
            "correspondences": {k: [list(p) for p in v] for k, v in self.correspondences.items()},
        }


_SCHEME_CACHE: dict[str, Scheme] = {}


def builtin_schemes() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("stackedfan.data").iterdir() if p.name.endswith(".json"))


def load_scheme(ref: str | os.PathLike) -> Scheme:
    """Load a scheme by built-in id (``synth12``, ``ibug68``) or JSON file path."""
    key = str(ref)
    if key in _SCHEME_CACHE:
        return _SCHEME_CACHE[key]
    if key in builtin_schemes():
        text = resources.files("stackedfan.data").joinpath(key + ".json").read_text()
    else:
        path = Path(key)
        if not path.is_file():
            raise DataError(f"unknown scheme {key!r}; built-ins are {builtin_schemes()}")
        text = path.read_text()
    try:
        scheme = Scheme(**json.loads(text))
    except (TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed scheme file {key}: {exc}") from None
    _SCHEME_CACHE[key] = scheme
    _SCHEME_CACHE[scheme.id] = scheme
    return scheme


def save_scheme(scheme: Scheme, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(scheme.to_dict(), indent=1) + "\n")


# -- images --------------------------------------------------------------------------


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array, or float in [0, 1], as binary P6."""
    if image.dtype != np.uint8:
        image = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"P6 images must be (H, W, 3), got {image.shape}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary P6 image into a float32 (H, W, 3) array in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated P6 header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise DataError(f"{path}: not a binary P6 image")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit P6 images are supported")
    pos += 1
    payload = raw[pos : pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise DataError(f"{path}: expected {w * h * 3} pixel bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).astype(np.float32) / 255.0


# -- manifests --------------------------------------------------------------------------


@dataclass
class Sample:
    image_path: Path
    landmarks: LandmarkSet
    bbox: list[float] | None = None
    image: np.ndarray | None = None

    def load_image(self) -> np.ndarray:
        if self.image is None:
            self.image = read_ppm(self.image_path)
        return self.image


def sample_record(sample: Sample, base: Path | None = None) -> dict:
    path = Path(sample.image_path)
    if base is not None:
        try:
            path = Path(os.path.relpath(path, base))
        except ValueError:
            pass
    lm = sample.landmarks
    rec = {
        "image": path.as_posix(),
        "landmarks": [[round(float(v), 6) for v in row] for row in lm.points],
        "visibility": [bool(v) for v in lm.visibility],
        "scheme": lm.scheme,
    }
    if sample.bbox is not None:
        rec["bbox"] = [float(v) for v in sample.bbox]
    return rec


def save_manifest(samples: list[Sample], path: str | os.PathLike) -> None:
    path = Path(path)
    base = path.parent.resolve()
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(sample_record(s, base)) + "\n")


def load_manifest(path: str | os.PathLike, check_images: bool = True) -> list[Sample]:
    """Parse a line-delimited JSON manifest, validating every record against its scheme.

    All record problems are collected and raised together as one :class:`DataError`.
    """
    path = Path(path)
    base = path.parent
    samples: list[Sample] = []
    problems: list[str] = []
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            rec = json.loads(line)
            image = base / rec["image"]
            scheme = load_scheme(rec["scheme"])
            points = rec["landmarks"]
            vis = rec.get("visibility", [True] * len(points))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            problems.append(f"{where}: malformed record ({exc})")
            continue
        except DataError as exc:
            problems.append(f"{where}: {exc}")
            continue
        if len(points) != scheme.m or len(vis) != scheme.m:
            problems.append(
                f"{where}: record {rec['image']!r} has {len(points)} points and {len(vis)} visibility flags, "
                f"scheme {scheme.id} needs {scheme.m}"
            )
            continue
        if check_images and not image.is_file():
            problems.append(f"{where}: image {image} does not exist")
            continue
        try:
            lm = LandmarkSet(np.asarray(points, dtype=np.float64), vis, scheme.id)
        except ValueError as exc:
            problems.append(f"{where}: {exc}")
            continue
        samples.append(Sample(image, lm, rec.get("bbox")))
    if problems:
        raise DataError("\n".join(problems))
    return samples


# -- checkpoints -------------------------------------------------------------------------


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(
    params: ModelParams,
    config: FanConfig | DepthNetConfig,
    path: str | os.PathLike,
    scheme: str = "",
    epoch: int = 0,
) -> None:
    """Layout: magic, u32 LE header length, JSON header, f32 LE payload in name order."""
    header = {
        "config": config.to_dict(),
        "scheme": scheme,
        "epoch": int(epoch),
        "params": [[p.name, list(p.shape), p.trainable] for p in params],
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for p in params)
    _atomic_write(Path(path), CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + body)


@dataclass
class CheckpointMeta:
    config: FanConfig | DepthNetConfig
    scheme: str
    epoch: int


def load_checkpoint(
    path: str | os.PathLike, expected_config: FanConfig | DepthNetConfig | None = None
) -> tuple[ModelParams, CheckpointMeta]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    if len(raw) < pos + 4:
        raise DataError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    try:
        header = json.loads(raw[pos : pos + hlen])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: corrupt header ({exc})") from None
    pos += hlen
    config = config_from_dict(header["config"])
    if expected_config is not None and config != expected_config:
        raise DataError(f"{path}: architecture mismatch, checkpoint has {config}, expected {expected_config}")
    entries = header["params"]
    expected = 4 * sum(int(np.prod(shape)) for _, shape, _ in entries)
    actual = len(raw) - pos
    if actual != expected:
        raise DataError(f"{path}: payload is {actual} bytes, expected {expected}")
    params = []
    for name, shape, trainable in entries:
        n = int(np.prod(shape))
        data = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        params.append(Parameter(data, name, trainable=trainable))
        pos += 4 * n
    return ModelParams(params), CheckpointMeta(config, header.get("scheme", ""), header.get("epoch", 0))
