"""Scan files, the synthetic ray-cast world, sequence windowing and RCTF files."""

from __future__ import annotations

import json
import logging
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from rangeseq.rangeimg import PointCloud, SensorModel, build_range_image, pixel_directions

log = logging.getLogger(__name__)

GROUND, WALL, BOX, NO_RETURN = 0, 1, 2, 3
CLASS_NAMES = ("ground", "wall", "box", "no_return")


class DataError(Exception):
    """Raised for malformed or missing input data."""


# --------------------------------------------------------------------------
# KITTI velodyne layout: little-endian float32 (x, y, z, intensity) records.


def read_kitti_scan(data: bytes) -> PointCloud:
    if len(data) % 16:
        whole = len(data) - len(data) % 16
        raise DataError(f"malformed scan: {len(data)} bytes is not a multiple of 16 "
                        f"(trailing bytes start at offset {whole})")
    arr = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    return PointCloud(arr[:, :3].astype(np.float32), intensity=arr[:, 3].astype(np.float32))


def write_kitti_scan(cloud: PointCloud) -> bytes:
    n = len(cloud)
    out = np.zeros((n, 4), dtype="<f4")
    out[:, :3] = cloud.points
    if cloud.intensity is not None:
        out[:, 3] = cloud.intensity
    return out.tobytes()


def read_labels(data: bytes) -> np.ndarray:
    if len(data) % 4:
        raise DataError(f"malformed label file: {len(data)} bytes is not a multiple of 4")
    return np.frombuffer(data, dtype="<u4").astype(np.int64)


def write_labels(labels) -> bytes:
    return np.asarray(labels, dtype="<u4").tobytes()


# --------------------------------------------------------------------------
# Synthetic world: ground plane, four walls and linearly moving boxes, seen by
# a static sensor at the origin.


@dataclass(frozen=True)
class SyntheticSceneConfig:
    seed: int = 0
    n_frames: int = 12
    n_boxes: int = 3
    v_min: float = 0.2  # m/frame
    v_max: float = 0.6
    extent: float = 15.0  # walls at +-extent
    sensor_height: float = 1.73
    wall_height: float = 4.0
    walls: bool = True
    box_size: tuple[float, float] = (1.5, 3.5)
    box_height: tuple[float, float] = (1.0, 2.5)

    def __post_init__(self):
        if self.n_frames < 1 or self.n_boxes < 0:
            raise ValueError("n_frames must be >= 1 and n_boxes >= 0")
        if not 0 <= self.v_min <= self.v_max:
            raise ValueError("need 0 <= v_min <= v_max")


@dataclass
class Box:
    center: np.ndarray  # (x, y) at frame 0
    velocity: np.ndarray  # (vx, vy) per frame
    half: np.ndarray  # (hx, hy)
    z_min: float
    z_max: float

    def bounds(self, frame: int):
        c = self.center + frame * self.velocity
        lo = np.array([c[0] - self.half[0], c[1] - self.half[1], self.z_min])
        hi = np.array([c[0] + self.half[0], c[1] + self.half[1], self.z_max])
        return lo, hi


@dataclass
class ScanRecord:
    cloud: PointCloud
    frame_index: int
    labels: Optional[np.ndarray] = None


def sample_boxes(cfg: SyntheticSceneConfig, rng: np.random.Generator) -> list[Box]:
    """Draw boxes whose whole trajectory stays inside the walls and off the sensor."""
    boxes = []
    margin = 0.5
    ground = -cfg.sensor_height
    span = cfg.n_frames - 1
    for _ in range(cfg.n_boxes):
        for _attempt in range(1000):
            half = rng.uniform(*cfg.box_size, size=2) / 2
            speed = rng.uniform(cfg.v_min, cfg.v_max)
            heading = rng.uniform(0, 2 * np.pi)
            vel = speed * np.array([np.cos(heading), np.sin(heading)])
            start = rng.uniform(-cfg.extent, cfg.extent, size=2)
            path = start + np.outer(np.arange(cfg.n_frames), vel)
            lim = cfg.extent - half - margin
            inside = np.all(np.abs(path) <= lim)
            # sensor keeps a clearance of 1 m from every box face
            clear = np.all(np.any(np.abs(path) > half + 1.0, axis=1))
            if inside and clear:
                break
        else:
            raise ValueError("could not place a box; enlarge extent or slow boxes")
        height = rng.uniform(*cfg.box_height)
        boxes.append(Box(start, vel, half, ground, ground + height))
    return boxes


def _ray_box(dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Slab test for rays from the origin; returns hit distance or inf."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = lo * inv
        t1 = hi * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    near = tmin.max(axis=-1)
    far = tmax.min(axis=-1)
    hit = (near <= far) & (near > 0)
    return np.where(hit, near, np.inf)


def raycast(dirs: np.ndarray, cfg: SyntheticSceneConfig, boxes: Sequence[Box], frame: int):
    """Cast unit rays ``(..., 3)`` from the origin; returns ``(range, class)``.

    Misses return range 0 and class ``NO_RETURN``.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    shape = dirs.shape[:-1]
    best = np.full(shape, np.inf)
    cls = np.full(shape, NO_RETURN, dtype=np.int64)
    ground = -cfg.sensor_height

    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(dirs[..., 2] < 0, ground / dirs[..., 2], np.inf)
    closer = t < best
    best[closer], cls[closer] = t[closer], GROUND

    if cfg.walls:
        with np.errstate(divide="ignore", invalid="ignore"):
            tx = np.where(dirs[..., 0] != 0, cfg.extent / np.abs(dirs[..., 0]), np.inf)
            ty = np.where(dirs[..., 1] != 0, cfg.extent / np.abs(dirs[..., 1]), np.inf)
        t = np.minimum(tx, ty)
        z = t * dirs[..., 2]
        t = np.where((z >= ground) & (z <= ground + cfg.wall_height), t, np.inf)
        closer = t < best
        best[closer], cls[closer] = t[closer], WALL

    for box in boxes:
        lo, hi = box.bounds(frame)
        t = _ray_box(dirs, lo, hi)
        closer = t < best
        best[closer], cls[closer] = t[closer], BOX

    hit = np.isfinite(best)
    out = np.where(hit, best, 0.0)
    cls[~hit] = NO_RETURN
    return out, cls


def generate_synthetic_sequence(cfg: SyntheticSceneConfig, sensor: SensorModel) -> list[ScanRecord]:
    """Ray-cast one ray per pixel for each frame; a pure function of ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    boxes = sample_boxes(cfg, rng)
    dirs = pixel_directions(sensor)
    records = []
    for frame in range(cfg.n_frames):
        r, cls = raycast(dirs, cfg, boxes, frame)
        valid = (r > 0) & (r <= sensor.max_range)
        pts = (dirs[valid] * r[valid][:, None]).astype(np.float32)
        labels = cls[valid]
        records.append(ScanRecord(PointCloud(pts, np.zeros(len(pts), np.float32), labels),
                                  frame, labels))
    return records


# --------------------------------------------------------------------------
# Manifests and windowing


@dataclass
class DatasetManifest:
    """One continuous sequence: either scan paths or a synthetic scene."""

    sensor: SensorModel
    paths: list[Path] = field(default_factory=list)
    synthetic: Optional[SyntheticSceneConfig] = None
    split: str = "train"

    def __len__(self):
        return self.synthetic.n_frames if self.synthetic is not None else len(self.paths)

    def load(self) -> list[ScanRecord]:
        if self.synthetic is not None:
            return generate_synthetic_sequence(self.synthetic, self.sensor)
        records = []
        for i, path in enumerate(self.paths):
            path = Path(path)
            if not path.exists():
                raise DataError(f"scan file not found: {path}")
            cloud = read_kitti_scan(path.read_bytes())
            label_path = path.with_suffix(".label")
            if label_path.exists():
                labels = read_labels(label_path.read_bytes())
                if len(labels) != len(cloud):
                    raise DataError(f"{label_path}: {len(labels)} labels for {len(cloud)} points")
                cloud.labels = labels
            records.append(ScanRecord(cloud, i, cloud.labels))
        return records


def read_manifest_file(path, sensor: SensorModel, split: str = "train") -> DatasetManifest:
    """Parse a one-path-per-line manifest; relative paths resolve against its folder."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    entries = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            p = Path(line)
            entries.append(p if p.is_absolute() else path.parent / p)
    missing = [str(p) for p in entries if not p.exists()]
    if missing:
        raise DataError(f"{path}: missing scan files: {', '.join(missing[:5])}")
    return DatasetManifest(sensor, entries, split=split)


def write_manifest_file(path, entries: Iterable, header: str = "") -> None:
    lines = [f"# {line}" for line in header.splitlines()]
    lines.extend(str(e) for e in entries)
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class SequenceSample:
    past: np.ndarray  # (P, H, W) meters
    future: np.ndarray  # (F, H, W) meters
    sensor: SensorModel = field(repr=False)
    future_labels: Optional[np.ndarray] = None  # (F, H, W) class ids
    start: int = 0


def frames_to_images(records: Sequence[ScanRecord], sensor: SensorModel):
    ranges, labels = [], []
    for rec in records:
        img, cls = build_range_image(rec.cloud, sensor)
        ranges.append(img.ranges.astype(np.float32))
        if cls is not None:
            cls = np.where(cls < 0, NO_RETURN, cls)
        labels.append(cls)
    has_labels = all(c is not None for c in labels)
    return np.stack(ranges), (np.stack(labels) if has_labels else None)


def window_sequences(manifest: Union[DatasetManifest, Sequence[ScanRecord]], P: int, F: int,
                     stride: int = 1, sensor: Optional[SensorModel] = None) -> list[SequenceSample]:
    """Cut a sequence into consecutive (past, future) windows."""
    if isinstance(manifest, DatasetManifest):
        sensor = manifest.sensor
        n = len(manifest)
        if n < P + F:
            warnings.warn(f"sequence has {n} frames, need at least {P + F}", RuntimeWarning)
            return []
        records = manifest.load()
    else:
        records = list(manifest)
        if sensor is None:
            raise ValueError("sensor is required when windowing raw records")
    n = len(records)
    if n < P + F:
        warnings.warn(f"sequence has {n} frames, need at least {P + F}", RuntimeWarning)
        return []
    ranges, labels = frames_to_images(records, sensor)
    samples = []
    for s in range(0, n - (P + F) + 1, stride):
        samples.append(SequenceSample(
            past=ranges[s:s + P], future=ranges[s + P:s + P + F], sensor=sensor,
            future_labels=None if labels is None else labels[s + P:s + P + F], start=s))
    return samples


# --------------------------------------------------------------------------
# RCTF tensor container


RCTF_MAGIC = b"RCTF"
RCTF_VERSION = 1


class RCTFError(DataError):
    code = "rctf_error"


class BadMagicError(RCTFError):
    code = "bad_magic"


class TruncatedError(RCTFError):
    code = "truncated"


class DuplicateNameError(RCTFError):
    code = "duplicate_name"


class UnsupportedVersionError(RCTFError):
    code = "unsupported_version"


def _entries(tensors) -> list[tuple[str, np.ndarray]]:
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    seen = set()
    for name, _ in items:
        if name in seen:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        seen.add(name)
    return items


def dump_tensors(tensors) -> bytes:
    """Serialise named float tensors (a mapping or a list of pairs)."""
    items = _entries(tensors)
    parts = [RCTF_MAGIC, struct.pack("<HI", RCTF_VERSION, len(items))]
    for name, arr in items:
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def parse_tensors(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 4 or data[:4] != RCTF_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {RCTF_MAGIC!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedError(f"truncated RCTF data: need {n} bytes at offset {pos}, "
                                 f"have {len(data) - pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<HI", take(6))
    if version != RCTF_VERSION:
        raise UnsupportedVersionError(f"unsupported RCTF version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        if name in out:
            raise DuplicateNameError(f"duplicate tensor name {name!r} in file")
        out[name] = arr
    return out


def save_tensor_file(path, tensors) -> None:
    Path(path).write_bytes(dump_tensors(tensors))


def load_tensor_file(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"tensor file not found: {path}")
    return parse_tensors(path.read_bytes())


def text_entry(meta: dict) -> np.ndarray:
    """Encode JSON metadata as a float tensor of UTF-8 byte values."""
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def read_text_entry(arr: np.ndarray) -> dict:
    return json.loads(np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8"))


def scene_config_dict(cfg: SyntheticSceneConfig) -> dict:
    return asdict(cfg)
