"""Synthetic "visual word" corpus, the MGSQ sequence file format and flip augmentation.

Each clip shows an anti-aliased bright ellipse on a dark background.  A
class is a (motion program, texture program) pair.  Two groups of classes
are built:

* the texture group: pairs ``(2k, 2k+1)`` share one motion and differ only
  in a fine stripe pattern inside the ellipse;
* the motion group: all classes share the plain texture and differ only in
  how the ellipse moves.

Per-sample jitter (start phase, scale, centre offset) is drawn from a seed
that depends on the motion program and sample index but not on the texture,
so paired texture classes trace identical trajectories.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Optional, Sequence

import numpy as np
import yaml

from .codec import (BadMagicError, ExtentMismatchError, TruncatedPayloadError, VersionMismatchError,
                    read_tensor, write_tensor)

MOTIONS = ("lr", "ud", "cw", "ccw")
TEXTURES = ("plain", "a", "b")

SEQ_MAGIC = b"MGSQ"
SEQ_VERSION = 1
_SEQ_HEADER = struct.Struct("<4sIIQ")

_SUPERSAMPLE = 4


@dataclass(frozen=True)
class ClassProgram:
    motion: str
    texture: str
    group: str  # "texture" or "motion"


def default_classes() -> tuple[ClassProgram, ...]:
    return (
        ClassProgram("lr", "a", "texture"),
        ClassProgram("lr", "b", "texture"),
        ClassProgram("ud", "a", "texture"),
        ClassProgram("ud", "b", "texture"),
        ClassProgram("lr", "plain", "motion"),
        ClassProgram("ud", "plain", "motion"),
        ClassProgram("cw", "plain", "motion"),
        ClassProgram("ccw", "plain", "motion"),
    )


@dataclass
class DatasetSpec:
    classes: tuple[ClassProgram, ...] = field(default_factory=default_classes)
    t: int = 8
    h: int = 32
    w: int = 32
    train_per_class: int = 120
    val_per_class: int = 30
    noise: float = 0.05
    seed: int = 0
    radius: tuple[float, float] = (6.0, 4.0)  # ellipse semi-axes (x, y) in pixels
    amplitude: float = 5.0  # trajectory extent in pixels
    offset: float = 2.0  # max per-sample centre shift
    scale_jitter: float = 0.15
    stripe_period: float = 4.0

    @property
    def k(self) -> int:
        return len(self.classes)

    def subset(self, group: str) -> list[int]:
        return [i for i, c in enumerate(self.classes) if c.group == group]

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("t", "h", "w", "train_per_class", "val_per_class", "noise", "seed",
                                           "amplitude", "offset", "scale_jitter", "stripe_period")}
        d["radius"] = list(self.radius)
        d["classes"] = [[c.motion, c.texture, c.group] for c in self.classes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d or {})
        if "classes" in d:
            d["classes"] = tuple(ClassProgram(*c) for c in d["classes"])
        if "radius" in d:
            d["radius"] = tuple(d["radius"])
        spec = cls(**d)
        spec.check()
        return spec

    def check(self):
        for c in self.classes:
            if c.motion not in MOTIONS:
                raise ValueError(f"unknown motion program {c.motion!r}")
            if c.texture not in TEXTURES:
                raise ValueError(f"unknown texture program {c.texture!r}")
        if min(self.t, self.h, self.w) < 1:
            raise ValueError("t, h and w must be positive")
        reach = self.amplitude + self.offset + max(self.radius) * (1 + self.scale_jitter)
        if reach >= min(self.h, self.w) / 2:
            raise ValueError(f"ellipse can leave the frame: reach {reach:.1f} px")


def load_spec(path) -> DatasetSpec:
    data = yaml.safe_load(Path(path).read_text()) or {}
    return DatasetSpec.from_dict(data.get("data", data))


@dataclass
class SampleRecord:
    label: int
    frames: np.ndarray  # [1, T, H, W] float32 in [0, 1]
    seed: int

    def __eq__(self, other):
        return (isinstance(other, SampleRecord) and self.label == other.label and self.seed == other.seed
                and self.frames.shape == other.frames.shape and self.frames.tobytes() == other.frames.tobytes())


def _trajectory(motion: str, t: int, phase: float, amplitude: float) -> np.ndarray:
    """Centre displacement ``[T, 2]`` (x, y) for one cycle of the motion program."""
    theta = phase + 2 * np.pi * np.arange(t) / t
    if motion == "lr":
        return np.stack([amplitude * np.sin(theta), np.zeros(t)], axis=1)
    if motion == "ud":
        return np.stack([np.zeros(t), amplitude * np.sin(theta)], axis=1)
    # image y grows downwards, so clockwise on screen is +theta here
    sign = 1.0 if motion == "cw" else -1.0
    return np.stack([amplitude * np.cos(sign * theta), amplitude * np.sin(sign * theta)], axis=1)


def _texture(texture: str, du: np.ndarray, dv: np.ndarray, period: float) -> np.ndarray:
    if texture == "plain":
        return np.ones_like(du)
    u = dv if texture == "a" else du  # "a": horizontal stripes, "b": vertical stripes
    return 0.6 + 0.4 * np.cos(2 * np.pi * u / period)


def render(motion: str, texture: str, spec: DatasetSpec, phase: float, scale: float,
           centre: tuple[float, float]) -> np.ndarray:
    """Noise-free clip ``[T, H, W]``; each pixel holds the area-weighted ellipse intensity."""
    s = _SUPERSAMPLE
    ys = (np.arange(spec.h * s) + 0.5) / s
    xs = (np.arange(spec.w * s) + 0.5) / s
    rx, ry = spec.radius[0] * scale, spec.radius[1] * scale
    path = _trajectory(motion, spec.t, phase, spec.amplitude)
    out = np.empty((spec.t, spec.h, spec.w))
    for k, (dx, dy) in enumerate(path):
        cx, cy = centre[0] + dx, centre[1] + dy
        du = xs[None, :] - cx
        dv = ys[:, None] - cy
        inside = (du / rx) ** 2 + (dv / ry) ** 2 <= 1.0
        fine = inside * _texture(texture, du, dv, spec.stripe_period)
        out[k] = fine.reshape(spec.h, s, spec.w, s).mean(axis=(1, 3))
    return out


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0])


def generate_sample(spec: DatasetSpec, class_id: int, sample_index: int) -> SampleRecord:
    if not 0 <= class_id < spec.k:
        raise ValueError(f"class_id {class_id} outside [0, {spec.k})")
    prog = spec.classes[class_id]
    motion_id = MOTIONS.index(prog.motion)
    group_id = 0 if prog.group == "texture" else 1
    jitter = np.random.default_rng(_derived_seed(spec.seed, group_id, motion_id, sample_index))
    phase = jitter.uniform(0, 2 * np.pi)
    scale = 1.0 + jitter.uniform(-spec.scale_jitter, spec.scale_jitter)
    centre = (spec.w / 2 + jitter.uniform(-spec.offset, spec.offset),
              spec.h / 2 + jitter.uniform(-spec.offset, spec.offset))
    clip = render(prog.motion, prog.texture, spec, phase, scale, centre)
    seed = _derived_seed(spec.seed, 1000 + class_id, sample_index)
    noise = np.random.default_rng(seed).standard_normal(clip.shape) * spec.noise
    frames = np.clip(clip + noise, 0.0, 1.0).astype(np.float32)
    return SampleRecord(class_id, frames[None], seed)


def split_indices(spec: DatasetSpec, split: str) -> range:
    """Sample-index range of a split; train and val ranges never overlap."""
    if split == "train":
        return range(spec.train_per_class)
    if split == "val":
        return range(spec.train_per_class, spec.train_per_class + spec.val_per_class)
    raise ValueError(f"split must be 'train' or 'val', got {split!r}")


def generate_split(spec: DatasetSpec, split: str) -> list[SampleRecord]:
    return [generate_sample(spec, c, i) for i in split_indices(spec, split) for c in range(spec.k)]


def flip_horizontal(rec: SampleRecord) -> SampleRecord:
    return SampleRecord(rec.label, np.ascontiguousarray(rec.frames[..., ::-1]), rec.seed)


# ---------------------------------------------------------------------------
# MGSQ files


def write_sequence(rec: SampleRecord, path):
    with open(path, "wb") as f:
        f.write(_SEQ_HEADER.pack(SEQ_MAGIC, SEQ_VERSION, rec.label, rec.seed))
        write_tensor(f, rec.frames)


def sequence_bytes(rec: SampleRecord) -> bytes:
    buf = io.BytesIO()
    buf.write(_SEQ_HEADER.pack(SEQ_MAGIC, SEQ_VERSION, rec.label, rec.seed))
    write_tensor(buf, rec.frames)
    return buf.getvalue()


def _read_sequence(f: BinaryIO) -> SampleRecord:
    head = f.read(_SEQ_HEADER.size)
    if len(head) >= 4 and head[:4] != SEQ_MAGIC:
        raise BadMagicError(f"bad magic {head[:4]!r}, expected {SEQ_MAGIC!r}")
    if len(head) < _SEQ_HEADER.size:
        raise TruncatedPayloadError("sequence header is truncated")
    _, version, label, seed = _SEQ_HEADER.unpack(head)
    if version != SEQ_VERSION:
        raise VersionMismatchError(f"sequence version {version}, reader supports {SEQ_VERSION}")
    frames = read_tensor(f)
    if f.read(1):
        raise ExtentMismatchError("bytes remain after the declared tensor extents")
    if frames.ndim != 4 or frames.shape[0] != 1:
        raise ExtentMismatchError(f"sequence tensor must be [1, T, H, W], got {list(frames.shape)}")
    return SampleRecord(int(label), frames, int(seed))


def read_sequence(path) -> SampleRecord:
    with open(path, "rb") as f:
        return _read_sequence(f)


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path, entries: Sequence[tuple[str, int]]):
    Path(path).write_text("".join(f"{p} {label}\n" for p, label in entries))


def read_manifest(path) -> list[tuple[Path, int]]:
    """Entries ``(absolute path, label)``; paths are relative to the manifest."""
    root = Path(path).resolve().parent
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.rsplit(maxsplit=1)
        if len(parts) != 2 or not parts[1].lstrip("-").isdigit():
            raise ValueError(f"{path}:{n}: expected '<path> <label>'")
        out.append((root / parts[0], int(parts[1])))
    return out


def write_corpus(spec: DatasetSpec, out_dir) -> dict[str, Path]:
    """Write both splits as MGSQ files plus ``train.txt`` / ``val.txt`` manifests and ``spec.yaml``."""
    out = Path(out_dir)
    manifests = {}
    for split in ("train", "val"):
        (out / split).mkdir(parents=True, exist_ok=True)
        entries = []
        for rec_idx, rec in enumerate(generate_split(spec, split)):
            rel = f"{split}/{rec_idx:05d}_c{rec.label}.mgsq"
            write_sequence(rec, out / rel)
            entries.append((rel, rec.label))
        manifests[split] = out / f"{split}.txt"
        write_manifest(manifests[split], entries)
    (out / "spec.yaml").write_text(yaml.safe_dump({"data": spec.to_dict()}, sort_keys=True))
    return manifests


def load_records(manifest) -> list[SampleRecord]:
    recs = []
    for path, label in read_manifest(manifest):
        rec = read_sequence(path)
        if rec.label != label:
            raise ValueError(f"{path}: file label {rec.label} disagrees with manifest label {label}")
        recs.append(rec)
    return recs


def as_arrays(records: Sequence[SampleRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Stack records into ``videos [N, 1, T, H, W]`` and ``labels [N]``."""
    if not records:
        raise ValueError("dataset is empty")
    shapes = {r.frames.shape for r in records}
    if len(shapes) != 1:
        raise ValueError(f"records have mixed shapes {sorted(shapes)}")
    return np.stack([r.frames for r in records]), np.array([r.label for r in records], dtype=np.int64)


def frame_means(videos: np.ndarray) -> np.ndarray:
    """Per-frame mean intensity ``[N, T]``; the feature of the appearance-only baseline."""
    return videos.reshape(videos.shape[0], videos.shape[2], -1).mean(axis=-1)


def centroids(frames: np.ndarray, threshold: float = 0.3) -> np.ndarray:
    """Centroid ``[T, 2]`` (x, y) of the pixels above ``threshold`` in each frame of ``[T, H, W]``."""
    t, h, w = frames.shape
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    out = np.empty((t, 2))
    for k in range(t):
        m = frames[k] > threshold
        out[k] = (xx[m].mean(), yy[m].mean())
    return out


def subset_mask(labels: np.ndarray, classes: Optional[Sequence[int]]) -> np.ndarray:
    if classes is None:
        return np.ones(len(labels), dtype=bool)
    return np.isin(labels, list(classes))
