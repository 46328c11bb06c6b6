"""Trajectory diagnostics, kappa selection, noise-bucket tables, weight diffs and clip metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .denoiser import ADAPTER_PREFIX, DenoiserConfig, has_adapters
from .diffusion import TrajectoryGrid, sample_teacher
from .synth_data import DataConfig, Dataset, estimate_centers, generate_dataset
from .tensor_core import Group, ParamStore

WEIGHT_DIFF_DELTA = 1e-12


# ------------------------------------------------------------ trajectories


def trajectory_l1_curve(teacher, grid: TrajectoryGrid, c, seeds, shape: tuple | None = None,
                        space: str = "state") -> np.ndarray:
    """Mean absolute difference per adjacent pair of sampling results, averaged over seeds.

    ``space="state"`` compares the DDIM states x_{t_n}; ``space="x0"`` compares
    the clean sample predicted at each step. Position j of the result holds
    the pair (t_{N-j} -> t_{N-j-1}), so position 0 is the noisiest step.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    labels = np.broadcast_to(np.asarray(c, dtype=np.int64), (len(seeds),))
    _, traj = sample_teacher(teacher, grid, labels, seeds, keep_trajectory=True, shape=shape,
                             dtype=np.float64 if shape is not None else np.float32, trajectory=space)
    states = np.stack(traj).astype(np.float64)                    # [N+1, S, ...]
    per_seed = np.abs(np.diff(states, axis=0)).reshape(grid.N, len(seeds), -1).mean(axis=2)
    return per_seed.mean(axis=1)


def curve_grid_indices(grid: TrajectoryGrid) -> np.ndarray:
    """Grid index of the noisier end of each curve position."""
    return np.arange(grid.N, 0, -1)


class KappaSelectionError(ValueError):
    pass


def select_kappa(series, threshold_fraction: float) -> int:
    """First position (scanning from the noisiest) from which every later value is small.

    A value is small when it is <= threshold_fraction x the series maximum.
    """
    s = np.asarray(series, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("series must be a nonempty 1-D sequence")
    if not 0.0 < threshold_fraction < 1.0:
        raise ValueError("threshold_fraction must lie in (0, 1)")
    if not np.isfinite(s).all():
        raise ValueError("series contains non-finite values")
    peak = s.max()
    if peak <= 0.0:
        raise KappaSelectionError("degenerate all-zero series")
    small = s <= threshold_fraction * peak
    # suffix[i] is True when positions i..end are all small
    suffix = np.logical_and.accumulate(small[::-1])[::-1]
    if not suffix[-1]:
        raise KappaSelectionError(f"no position qualifies; bound is {s.size - 1}")
    return int(np.argmax(suffix))


# ----------------------------------------------------------- weight diffs


@dataclass(frozen=True)
class LayerDiff:
    name: str
    group: str
    distance: float


@dataclass
class WeightDiffReport:
    layers: list[LayerDiff]
    group_means: dict[str, float]


def effective_params(params: ParamStore, config: DenoiserConfig) -> ParamStore:
    """Base-layout weights a forward pass actually uses: psi_prime replaces psi, low-rank updates merged."""
    if not has_adapters(params):
        return params
    out = ParamStore()
    for n in params:
        if n.startswith(ADAPTER_PREFIX):
            continue
        value = params[n]
        if ADAPTER_PREFIX + n in params:
            value = params[ADAPTER_PREFIX + n]
        elif n.endswith(".weight") and ".attn." in n:
            stem = ADAPTER_PREFIX + n[: -len(".weight")]
            a, b = params[stem + ".lora_A"], params[stem + ".lora_B"]
            value = value + (config.lora_alpha / a.shape[0]) * (b @ a).T
        out.add(n, value, params.group(n), params.trainable(n))
    return out


def weight_diff_distribution(params_a: ParamStore, params_b: ParamStore) -> WeightDiffReport:
    """Per-parameter normalized L1 distance, largest first, with per-group means.

    distance = mean|A - B| / (0.5 (mean|A| + mean|B|) + delta)
    """
    if not params_a.same_layout(params_b):
        raise ValueError("parameter stores have different architectures")
    layers = []
    for n in params_a:
        a = params_a[n].astype(np.float64)
        b = params_b[n].astype(np.float64)
        num = np.abs(a - b).mean()
        den = 0.5 * (np.abs(a).mean() + np.abs(b).mean()) + WEIGHT_DIFF_DELTA
        layers.append(LayerDiff(n, params_a.group(n).value, float(num / den)))
    layers.sort(key=lambda d: (-d.distance, d.name))
    groups: dict[str, list[float]] = {}
    for d in layers:
        groups.setdefault(d.group, []).append(d.distance)
    return WeightDiffReport(layers, {g: float(np.mean(v)) for g, v in sorted(groups.items())})


# ---------------------------------------------------------- noise buckets

TWO_BUCKETS = (0.0, 0.5, 1.0)
TEN_BUCKETS = tuple(np.round(np.linspace(0.0, 1.0, 11), 10))


@dataclass(frozen=True)
class BucketStat:
    lo: float
    hi: float
    count: int
    mean_loss: float
    mean_grad_norm: float


def _field(rec, name):
    return rec[name] if isinstance(rec, dict) else getattr(rec, name)


def noise_bucket_stats(records, edges=TWO_BUCKETS, loss_key: str = "loss_total") -> list[BucketStat]:
    """Group records by alpha_bar into (edges[i], edges[i+1]] and report means and counts.

    Buckets with no records are omitted.
    """
    records = list(records)
    if not records:
        raise ValueError("record stream is empty")
    edges = np.asarray(edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bucket edges must strictly increase")
    ab = np.array([_field(r, "alpha_bar") for r in records], dtype=np.float64)
    loss = np.array([_field(r, loss_key) for r in records], dtype=np.float64)
    gn = np.array([_field(r, "grad_norm") for r in records], dtype=np.float64)
    which = np.searchsorted(edges, ab, side="left") - 1
    out = []
    for k in range(edges.size - 1):
        m = which == k
        if m.any():
            out.append(BucketStat(float(edges[k]), float(edges[k + 1]), int(m.sum()),
                                  float(np.sort(loss[m]).mean()), float(np.sort(gn[m]).mean())))
    return out


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class MetricWeights:
    motion: float = 1.0
    detail: float = 5.0
    coherence: float = 0.5


def texture_band_amplitude(clip: np.ndarray, band: tuple[int, int]) -> float:
    """sqrt(2 x mean band power) over frames, band = per-axis integer frequencies [lo, hi]."""
    clip = np.asarray(clip, dtype=np.float64)
    L, H, W = clip.shape
    fy = np.abs(np.fft.fftfreq(H, 1.0 / H))[:, None]
    fx = np.abs(np.fft.fftfreq(W, 1.0 / W))[None, :]
    mask = (fx >= band[0]) & (fx <= band[1]) & (fy >= band[0]) & (fy <= band[1])
    spec = np.fft.fft2(clip, axes=(1, 2))
    power = (np.abs(spec) ** 2 * mask).sum(axis=(1, 2)) / float(H * W) ** 2
    return float(np.sqrt(2.0 * power.mean()))


@dataclass
class ReferenceStats:
    band: tuple[int, int]
    amplitude: float

    @classmethod
    def from_dataset(cls, data: Dataset | np.ndarray, band: tuple[int, int]) -> "ReferenceStats":
        clips = data.clips if isinstance(data, Dataset) else np.asarray(data)
        return cls(tuple(band), float(np.mean([texture_band_amplitude(c, band) for c in clips])))

    @classmethod
    def from_config(cls, config: DataConfig, count: int = 256) -> "ReferenceStats":
        ref = generate_dataset(DataConfig(**{**asdict(config), "count": count}))
        return cls.from_dataset(ref, config.freq_range)


def motion_error(clip: np.ndarray) -> float:
    """Mean distance (px) between estimated centers and their per-axis linear fit."""
    centers = estimate_centers(clip)
    f = np.arange(len(centers), dtype=np.float64)
    design = np.stack([f, np.ones_like(f)], axis=1)
    coef, *_ = np.linalg.lstsq(design, centers, rcond=None)
    return float(np.linalg.norm(centers - design @ coef, axis=1).mean())


def path_r2(clip: np.ndarray) -> float:
    """R^2 of per-axis linear fits to the center path, pooled over both axes."""
    centers = estimate_centers(clip)
    f = np.arange(len(centers), dtype=np.float64)
    design = np.stack([f, np.ones_like(f)], axis=1)
    coef, *_ = np.linalg.lstsq(design, centers, rcond=None)
    ss_res = float(((centers - design @ coef) ** 2).sum())
    ss_tot = float(((centers - centers.mean(axis=0)) ** 2).sum())
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)


def centroid_jerk(clip: np.ndarray) -> float:
    """Mean magnitude (px) of the third difference of the center path; 0 for fewer than 4 frames."""
    centers = estimate_centers(clip)
    if len(centers) < 4:
        return 0.0
    return float(np.linalg.norm(np.diff(centers, n=3, axis=0), axis=1).mean())


@dataclass
class MetricsReport:
    motion: list[float]
    detail: list[float]
    coherence: list[float]
    combined: list[float]
    weights: MetricWeights = field(default_factory=MetricWeights)

    def means(self) -> dict[str, float]:
        return {k: float(np.mean(getattr(self, k))) for k in ("motion", "detail", "coherence", "combined")}

    def to_dict(self) -> dict:
        return {"per_clip": {k: getattr(self, k) for k in ("motion", "detail", "coherence", "combined")},
                "mean": self.means(), "weights": asdict(self.weights)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def eval_metrics(clips, reference: ReferenceStats, weights: MetricWeights | None = None) -> MetricsReport:
    """Per-clip motion, detail and coherence errors plus their weighted sum (lower is better)."""
    weights = weights or MetricWeights()
    clips = np.asarray(clips)
    if clips.ndim == 3:
        clips = clips[None]
    if clips.ndim != 4:
        raise ValueError(f"expected [B, L, H, W] clips, got shape {clips.shape}")
    if not np.isfinite(clips).all():
        raise ValueError("clips contain non-finite values")
    motion, detail, coh, comb = [], [], [], []
    for clip in clips:
        m = motion_error(clip)
        d = abs(texture_band_amplitude(clip, reference.band) - reference.amplitude)
        j = centroid_jerk(clip)
        motion.append(m)
        detail.append(d)
        coh.append(j)
        comb.append(weights.motion * m + weights.detail * d + weights.coherence * j)
    return MetricsReport(motion, detail, coh, comb, weights)


def group_label(group: Group | str) -> str:
    return Group(group).value
