"""Synthetic moving-shape videos and the on-disk dataset formats.

The synthetic dataset is a deterministic class-conditional stand-in for real
footage: a single bright shape drifts with constant velocity over a dark
background, wrapping around the frame borders. A class fixes the shape kind
and the motion family (rightward or downward); everything else (speed, size,
color, start position) varies per seed.

On disk a dataset is a ``manifest.json`` plus one directory of zero-padded
PNG frames per video (``videos/<id>/frame_00000.png`` ...). A raw alternative
stores one video per ``.hvgt`` file: magic ``HVGT``, then five little-endian
u32 words (format version, T, C, H, W) and a row-major u8 payload.

Pixels are quantized to the u8 grid before they ever leave this module, so
write -> read round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .video import CropWindow, build_pyramid, spatial_downsample, temporal_subsample

FORMAT_VERSION = 1
HVGT_MAGIC = b"HVGT"

SHAPE_KINDS = ("disc", "square", "bar")
DIRECTIONS = ("right", "down")
MAX_CLASSES = len(SHAPE_KINDS) * len(DIRECTIONS)


@dataclass(frozen=True)
class ShapeSpec:
    """One rendered shape: kind, per-frame velocity (dy, dx), size, color."""

    shape_kind: str
    velocity: tuple[float, float]
    size: float
    color: tuple[float, float, float]


def class_family(class_label: int, num_classes: int = 4) -> tuple[str, str]:
    """Map a class label to its (shape kind, motion direction) family."""
    if not 0 <= class_label < num_classes:
        raise ValueError(f"class label {class_label} out of range [0, {num_classes})")
    if num_classes > MAX_CLASSES:
        raise ValueError(f"at most {MAX_CLASSES} classes supported, got {num_classes}")
    return SHAPE_KINDS[class_label // 2], DIRECTIONS[class_label % 2]


def float_to_u8(v) -> np.ndarray:
    arr = v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else np.asarray(v)
    return np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)


def u8_to_float(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0)


def _render_u8(spec: ShapeSpec, start: tuple[float, float], t: int, h: int, w: int) -> np.ndarray:
    """Render [T, 3, H, W] u8 frames of one wrapping shape."""
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    color = np.asarray(spec.color, dtype=np.float64)
    frames = np.zeros((t, 3, h, w), dtype=np.uint8)
    cy, cx = start
    vy, vx = spec.velocity
    for i in range(t):
        py = (cy + vy * i) % h
        px = (cx + vx * i) % w
        # Torus deltas keep the shape seamless under wrap-around motion.
        dy = np.abs(((ys - py + h / 2.0) % h) - h / 2.0)
        dx = np.abs(((xs - px + w / 2.0) % w) - w / 2.0)
        half = spec.size / 2.0
        if spec.shape_kind == "disc":
            dist = np.sqrt(dy * dy + dx * dx)
            alpha = np.clip(half + 0.5 - dist, 0.0, 1.0)
        elif spec.shape_kind == "square":
            alpha = np.clip(half + 0.5 - np.maximum(dy, dx), 0.0, 1.0)
        elif spec.shape_kind == "bar":
            ay = np.clip(half * 1.6 + 0.5 - dy, 0.0, 1.0)
            ax = np.clip(half * 0.5 + 0.5 - dx, 0.0, 1.0)
            alpha = ay * ax
        else:
            raise ValueError(f"unknown shape kind {spec.shape_kind!r}")
        # Background is -1; pixel = -1 + alpha * (color + 1), quantized to u8.
        pix = alpha[None] * (color[:, None, None] + 1.0)
        frames[i] = np.clip(np.rint(pix * 127.5), 0, 255).astype(np.uint8)
    return frames


def shape_spec_for(class_label: int, seed: int, h: int, w: int, num_classes: int = 4):
    """Deterministic (ShapeSpec, start position) for a class/seed pair."""
    kind, direction = class_family(class_label, num_classes)
    rng = np.random.default_rng([int(seed) & 0x7FFFFFFF, int(class_label), 0x5A17])
    speed = rng.uniform(0.6, 1.4)
    velocity = (0.0, speed) if direction == "right" else (speed, 0.0)
    size = rng.uniform(0.30, 0.48) * min(h, w)
    color = tuple(rng.uniform(0.1, 1.0, size=3).tolist())
    start = (rng.uniform(0, h), rng.uniform(0, w))
    return ShapeSpec(kind, velocity, float(size), color), start


def generate_synthetic_video(
    class_label: int, seed: int, t: int = 32, h: int = 32, w: int = 32, num_classes: int = 4
) -> torch.Tensor:
    """Deterministic [T, 3, H, W] video in [-1, 1], quantized to the u8 grid."""
    spec, start = shape_spec_for(class_label, seed, h, w, num_classes)
    return u8_to_float(_render_u8(spec, start, t, h, w))


@dataclass
class VideoRecord:
    id: str
    class_label: int
    num_frames: int
    height: int
    width: int
    path: str


@dataclass
class DatasetManifest:
    videos: list[VideoRecord]
    num_classes: int
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "num_classes": self.num_classes,
            "videos": [asdict(r) for r in self.videos],
        }


def write_dataset(root, videos, labels, num_classes: int, overwrite: bool = False) -> DatasetManifest:
    """Write videos ([T, 3, H, W] float or u8 each) as PNG frame directories."""
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not overwrite:
        raise FileExistsError(f"dataset directory {root} is not empty (pass overwrite)")
    (root / "videos").mkdir(parents=True, exist_ok=True)
    records = []
    for i, (video, label) in enumerate(zip(videos, labels)):
        arr = video if isinstance(video, np.ndarray) else float_to_u8(video)
        if arr.ndim != 4 or arr.shape[1] != 3:
            raise ValueError(f"video {i} must be [T, 3, H, W], got {arr.shape}")
        vid = f"{i:05d}"
        vdir = root / "videos" / vid
        vdir.mkdir(parents=True, exist_ok=True)
        for f in range(arr.shape[0]):
            Image.fromarray(arr[f].transpose(1, 2, 0)).save(vdir / f"frame_{f:05d}.png")
        records.append(
            VideoRecord(vid, int(label), arr.shape[0], arr.shape[2], arr.shape[3], f"videos/{vid}")
        )
    manifest = DatasetManifest(records, num_classes)
    (root / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2))
    return manifest


def make_synthetic_dataset(
    root,
    num_videos: int = 512,
    t: int = 32,
    h: int = 32,
    w: int = 32,
    num_classes: int = 4,
    seed: int = 0,
    overwrite: bool = False,
) -> DatasetManifest:
    """Render and write the canonical balanced moving-shapes dataset."""
    labels = [i % num_classes for i in range(num_videos)]
    vids = (
        generate_synthetic_video(labels[i], seed * 1_000_003 + i, t, h, w, num_classes)
        for i in range(num_videos)
    )
    return write_dataset(root, vids, labels, num_classes, overwrite=overwrite)


def read_dataset(root) -> DatasetManifest:
    """Load and validate a manifest; frame files must all exist."""
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    raw = json.loads(mpath.read_text())
    if raw.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"unknown dataset format_version {raw.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    records = [VideoRecord(**r) for r in raw["videos"]]
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate video ids in manifest")
    for r in records:
        vdir = root / r.path
        for f in range(r.num_frames):
            fp = vdir / f"frame_{f:05d}.png"
            if not fp.exists():
                raise FileNotFoundError(f"video {r.id}: missing frame file {fp}")
    return DatasetManifest(records, int(raw["num_classes"]), FORMAT_VERSION)


def load_video(root, record: VideoRecord) -> torch.Tensor:
    """Decode one video to [T, 3, H, W] float in [-1, 1]."""
    frames = np.empty((record.num_frames, 3, record.height, record.width), dtype=np.uint8)
    for f in range(record.num_frames):
        fp = Path(root) / record.path / f"frame_{f:05d}.png"
        try:
            img = np.asarray(Image.open(fp).convert("RGB"))
        except Exception as exc:
            raise ValueError(f"video {record.id}: corrupt frame file {fp}: {exc}") from exc
        if img.shape[:2] != (record.height, record.width):
            raise ValueError(
                f"video {record.id}: frame {fp} is {img.shape[1]}x{img.shape[0]}, "
                f"manifest says {record.width}x{record.height}"
            )
        frames[f] = img.transpose(2, 0, 1)
    return u8_to_float(frames)


def ingest_frame_directory(root) -> DatasetManifest:
    """Build a manifest for an existing tree of frame directories.

    Expects ``videos/<id>/frame_*.png`` plus ``labels.json`` mapping
    ``{"num_classes": C, "labels": {"<id>": int}}``. Writes manifest.json.
    """
    root = Path(root)
    labels_path = root / "labels.json"
    if not labels_path.exists():
        raise FileNotFoundError(f"no labels.json under {root}")
    labels = json.loads(labels_path.read_text())
    records = []
    for vdir in sorted((root / "videos").iterdir()):
        if not vdir.is_dir():
            continue
        frames = sorted(vdir.glob("frame_*.png"))
        if not frames:
            raise ValueError(f"video directory {vdir} contains no frames")
        img = np.asarray(Image.open(frames[0]).convert("RGB"))
        if vdir.name not in labels["labels"]:
            raise ValueError(f"video {vdir.name} missing from labels.json")
        records.append(
            VideoRecord(
                vdir.name,
                int(labels["labels"][vdir.name]),
                len(frames),
                img.shape[0],
                img.shape[1],
                f"videos/{vdir.name}",
            )
        )
    manifest = DatasetManifest(records, int(labels["num_classes"]))
    (root / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2))
    return manifest


def write_hvgt(path, video) -> None:
    """Raw single-video dump: HVGT magic, version/T/C/H/W u32 LE, u8 payload."""
    arr = video if isinstance(video, np.ndarray) and video.dtype == np.uint8 else float_to_u8(video)
    if arr.ndim != 4:
        raise ValueError(f"expected [T, C, H, W] video, got shape {arr.shape}")
    t, c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(HVGT_MAGIC)
        fh.write(struct.pack("<5I", FORMAT_VERSION, t, c, h, w))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_hvgt(path) -> torch.Tensor:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != HVGT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, t, c, h, w = struct.unpack("<5I", fh.read(20))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unknown format version {version}")
        payload = fh.read(t * c * h * w)
    if len(payload) != t * c * h * w:
        raise ValueError(f"{path}: truncated payload")
    return u8_to_float(np.frombuffer(payload, dtype=np.uint8).reshape(t, c, h, w))


class VideoDataset:
    """In-memory dataset: all pixels as one u8 array plus labels."""

    def __init__(self, root):
        root = Path(root)
        self.root = root
        self.manifest = read_dataset(root)
        recs = self.manifest.videos
        if not recs:
            raise ValueError(f"dataset {root} is empty")
        t, h, w = recs[0].num_frames, recs[0].height, recs[0].width
        for r in recs:
            if (r.num_frames, r.height, r.width) != (t, h, w):
                raise ValueError("all videos must share one shape for training")
        self.frames, self.height, self.width = t, h, w
        self.num_classes = self.manifest.num_classes
        self.labels = torch.tensor([r.class_label for r in recs], dtype=torch.long)
        pixels = np.empty((len(recs), t, 3, h, w), dtype=np.uint8)
        for i, r in enumerate(recs):
            pixels[i] = float_to_u8(load_video(root, r))
        self._pixels = pixels

    def __len__(self) -> int:
        return len(self.manifest.videos)

    def video(self, i: int) -> torch.Tensor:
        return u8_to_float(self._pixels[i])

    def videos(self, idx) -> torch.Tensor:
        return u8_to_float(self._pixels[np.asarray(idx)])


class TrainingSampler:
    """Serves first-level views or aligned crop pairs from a dataset pyramid.

    The full pyramid is precomputed once; batches draw video indices and
    window starts from the caller's generator, so a fixed seed yields a fixed
    batch sequence (single worker).
    """

    def __init__(self, dataset: VideoDataset, factors, data_reduce=(1, 1)):
        self.dataset = dataset
        self.factors = [tuple(f) for f in factors]
        full = dataset.videos(np.arange(len(dataset)))
        rt, rs = data_reduce
        finest = spatial_downsample(temporal_subsample(full, rt), rs)
        self.pyramid = build_pyramid(finest, self.factors)
        self.labels = dataset.labels
        for k_t, lvl in zip(self.pyramid.temporal_factors, range(1, len(self.pyramid.views))):
            if self.pyramid.views[lvl - 1].shape[1] < 1:
                raise ValueError(f"videos too short for pyramid level {lvl} (factor {k_t})")

    @property
    def num_classes(self) -> int:
        return self.dataset.num_classes

    def view_shape(self, level: int):
        v = self.pyramid.views[level]
        return tuple(v.shape[1:])

    def sample_first(self, batch: int, generator: torch.Generator):
        """Batch of coarsest views plus labels."""
        idx = torch.randint(len(self.dataset), (batch,), generator=generator)
        return self.pyramid.views[0][idx], self.labels[idx]

    def sample_pairs(self, level: int, window: int, batch: int, generator: torch.Generator):
        """Aligned (coarse window, fine window, labels) batches for level > 1."""
        views = self.pyramid.views
        if not 1 <= level < len(views):
            raise ValueError(f"level {level} out of range")
        low_t = views[level - 1].shape[1]
        if window > low_t:
            raise ValueError(f"window {window} longer than level-{level - 1} view ({low_t} frames)")
        k_t = self.pyramid.temporal_factors[level - 1]
        idx = torch.randint(len(self.dataset), (batch,), generator=generator)
        starts = torch.randint(low_t - window + 1, (batch,), generator=generator)
        lows, highs = [], []
        for b in range(batch):
            w = CropWindow.from_low(int(starts[b]), window, k_t)
            low, high = (
                views[level - 1][idx[b] : idx[b] + 1],
                views[level][idx[b] : idx[b] + 1],
            )
            w.validate(k_t, low.shape[1], high.shape[1])
            lows.append(low[:, w.low_start : w.low_start + w.low_len])
            highs.append(high[:, w.high_start : w.high_start + w.high_len])
        return torch.cat(lows), torch.cat(highs), self.labels[idx]
