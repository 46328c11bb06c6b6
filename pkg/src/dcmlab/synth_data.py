"""Synthetic clips with separable motion (a drifting Gaussian blob) and detail (a static sinusoidal texture).

The blob carries layout and motion, the texture carries high-frequency
detail, so each can be scored on its own. Pixels lie in [-1, 1].
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .io_utils import atomic_write

MAGIC = b"DCMV"
VERSION = 1
_HEADER = struct.Struct("<4s6I")  # magic, version, count, L, H, W, C


class DatasetFormatError(ValueError):
    pass


@dataclass
class DataConfig:
    frames: int = 4
    height: int = 16
    width: int = 16
    classes: int = 8
    count: int = 2000
    seed: int = 0
    # region the blob center occupies in every frame (fraction of the frame extent)
    center_range: tuple[float, float] = (0.25, 0.75)
    # fraction of the frame extent per frame
    speed_range: tuple[float, float] = (0.06, 0.12)
    sigma_range: tuple[float, float] = (1.2, 2.0)
    freq_range: tuple[int, int] = (4, 6)
    amplitude_range: tuple[float, float] = (0.1, 0.3)

    def validate(self) -> None:
        lo, hi = self.center_range
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"center_range must satisfy 0 <= lo < hi <= 1, got {self.center_range}")
        if self.frames < 2 or self.height < 4 or self.width < 4:
            raise ValueError("clips need at least 2 frames and 4x4 pixels")
        if self.speed_range[0] < 0 or self.speed_range[0] > self.speed_range[1]:
            raise ValueError(f"bad speed_range {self.speed_range}")
        travel = self.speed_range[1] * (self.frames - 1)
        if travel > hi - lo:
            raise ValueError(
                f"velocity can push the blob out of frame: max travel {travel:.3f} exceeds "
                f"center range width {hi - lo:.3f}")
        if self.freq_range[0] < 2 or self.freq_range[0] > self.freq_range[1]:
            raise ValueError(f"texture frequencies must be integers >= 2, got {self.freq_range}")
        if not 0.0 <= self.amplitude_range[0] <= self.amplitude_range[1] <= 0.5:
            raise ValueError(f"texture amplitude must lie in [0, 0.5], got {self.amplitude_range}")
        if self.classes < 1:
            raise ValueError("need at least one class")


@dataclass
class ClipSpec:
    frames: int
    height: int
    width: int
    center: tuple[float, float]      # (x, y) of frame 0, fraction of extent
    velocity: tuple[float, float]    # fraction of extent per frame
    sigma: float                     # pixels
    freq: tuple[int, int]            # texture cycles per frame along (x, y)
    amplitude: float
    phase: float = 0.0
    classes: int = 8

    @property
    def label(self) -> int:
        return velocity_label(self.velocity, self.classes)

    def centers(self) -> np.ndarray:
        """[L, 2] blob centers as fractions of the frame extent."""
        f = np.arange(self.frames)[:, None]
        return np.asarray(self.center)[None, :] + f * np.asarray(self.velocity)[None, :]

    def centers_px(self) -> np.ndarray:
        scale = np.array([self.width - 1, self.height - 1], dtype=float)
        return self.centers() * scale


def velocity_label(velocity, classes: int = 8) -> int:
    """Direction sector of the velocity; a static blob falls in sector 0."""
    angle = math.atan2(velocity[1], velocity[0]) % (2 * math.pi)
    return int(angle // (2 * math.pi / classes)) % classes


def render_clip(spec: ClipSpec) -> np.ndarray:
    centers = spec.centers()
    if (centers < 0).any() or (centers > 1).any():
        raise ValueError("blob center leaves the frame")
    if not 0.0 <= spec.amplitude <= 0.5:
        raise ValueError("texture amplitude must lie in [0, 0.5]")
    ys, xs = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    texture = np.sin(2 * np.pi * (spec.freq[0] * xs / spec.width + spec.freq[1] * ys / spec.height)
                     + spec.phase)
    frames = []
    for cx, cy in centers * np.array([spec.width - 1, spec.height - 1]):
        blob = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * spec.sigma ** 2))
        frames.append((2 * blob - 1) * (1 - spec.amplitude) + spec.amplitude * texture)
    return np.clip(np.stack(frames), -1.0, 1.0).astype(np.float32)


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(list(seed) if isinstance(seed, (tuple, list)) else seed)


def sample_spec(seed, config: DataConfig) -> ClipSpec:
    config.validate()
    rng = _rng(seed)
    angle = rng.uniform(0, 2 * np.pi)
    speed = rng.uniform(*config.speed_range)
    vel = np.array([math.cos(angle), math.sin(angle)]) * speed
    lo, hi = config.center_range
    travel = vel * (config.frames - 1)
    start_lo = lo + np.maximum(0.0, -travel)
    start_hi = hi - np.maximum(0.0, travel)
    center = rng.uniform(start_lo, start_hi)
    return ClipSpec(
        frames=config.frames, height=config.height, width=config.width,
        center=(float(center[0]), float(center[1])), velocity=(float(vel[0]), float(vel[1])),
        sigma=float(rng.uniform(*config.sigma_range)),
        freq=(int(rng.integers(config.freq_range[0], config.freq_range[1] + 1)),
              int(rng.integers(config.freq_range[0], config.freq_range[1] + 1))),
        amplitude=float(rng.uniform(*config.amplitude_range)),
        phase=float(rng.uniform(0, 2 * np.pi)),
        classes=config.classes,
    )


def generate_clip(seed, config: DataConfig | None = None) -> tuple[np.ndarray, int, ClipSpec]:
    """Draw a clip spec from ``config`` and render it. Deterministic in ``seed``."""
    spec = sample_spec(seed, config or DataConfig())
    return render_clip(spec), spec.label, spec


@dataclass
class Dataset:
    clips: np.ndarray            # [count, L, H, W] float32
    labels: np.ndarray           # [count] uint32
    classes: int
    specs: list[ClipSpec] | None = field(default=None, compare=False)

    def __post_init__(self):
        self.clips = np.ascontiguousarray(self.clips, dtype="<f4")
        self.labels = np.ascontiguousarray(self.labels, dtype="<u4")
        if self.clips.ndim != 4:
            raise DatasetFormatError(f"clips must be [count, L, H, W], got {self.clips.shape}")
        if len(self.labels) != len(self.clips):
            raise DatasetFormatError("label count does not match clip count")

    def __len__(self) -> int:
        return len(self.clips)


def generate_dataset(config: DataConfig) -> Dataset:
    """Clip i draws from its own stream keyed by (seed, i)."""
    config.validate()
    clips, labels, specs = [], [], []
    for i in range(config.count):
        clip, label, spec = generate_clip((config.seed, i), config)
        clips.append(clip)
        labels.append(label)
        specs.append(spec)
    shape = (0, config.frames, config.height, config.width)
    return Dataset(np.stack(clips) if clips else np.zeros(shape, np.float32),
                   np.array(labels), config.classes, specs)


def dataset_bytes(ds: Dataset) -> bytes:
    count, L, H, W = ds.clips.shape
    return (_HEADER.pack(MAGIC, VERSION, count, L, H, W, ds.classes)
            + ds.labels.astype("<u4").tobytes() + ds.clips.astype("<f4").tobytes())


def write_dataset(ds: Dataset, path) -> None:
    if len(ds) and int(ds.labels.max()) >= ds.classes:
        raise DatasetFormatError("label exceeds class count")
    atomic_write(path, dataset_bytes(ds))


def parse_dataset(buf: bytes) -> Dataset:
    if len(buf) < _HEADER.size:
        raise DatasetFormatError("file shorter than the header")
    magic, version, count, L, H, W, C = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    n_pix = count * L * H * W
    expected = _HEADER.size + 4 * count + 4 * n_pix
    if len(buf) < expected:
        raise DatasetFormatError(f"truncated payload: expected {expected} bytes, found {len(buf)}")
    if len(buf) > expected:
        raise DatasetFormatError(f"payload longer than header shape: {len(buf) - expected} extra bytes")
    labels = np.frombuffer(buf, "<u4", count, _HEADER.size).copy()
    clips = np.frombuffer(buf, "<f4", n_pix, _HEADER.size + 4 * count).reshape(count, L, H, W).copy()
    if count and int(labels.max()) >= C:
        raise DatasetFormatError("label exceeds class count")
    return Dataset(clips, labels, C)


def read_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())


def estimate_centers(clip: np.ndarray, smooth: float = 1.5) -> np.ndarray:
    """Blob center per frame in pixels, [L, 2] as (x, y).

    Texture is removed with a Gaussian low-pass; the center is the intensity
    centroid of what rises above the frame median. A frame with nothing above
    the median reports the frame center.
    """
    clip = np.asarray(clip, dtype=np.float64)
    L, H, W = clip.shape
    ys, xs = np.mgrid[0:H, 0:W]
    out = np.empty((L, 2))
    for f in range(L):
        lp = gaussian_filter(clip[f], smooth, mode="nearest")
        w = np.clip(lp - np.median(lp), 0.0, None)
        total = w.sum()
        if total <= 1e-12:
            out[f] = ((W - 1) / 2, (H - 1) / 2)
        else:
            out[f] = ((w * xs).sum() / total, (w * ys).sum() / total)
    return out
