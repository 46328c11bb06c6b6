"""Noise schedule, forward corruption, the deterministic DDIM step, and the teacher."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .denoiser import Denoiser, DenoiserConfig, Model, as_denoiser, init_params
from .synth_data import Dataset
from .tensor_core import AdamState, NonFiniteError, Tensor, adam_step, backward, ema_update, grad_norm

log = logging.getLogger(__name__)


class NoiseSchedule:
    """Cumulative signal levels alpha_bar[0..T] from a linear beta ramp; alpha_bar[0] = 1."""

    def __init__(self, steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2):
        if steps < 1 or not 0 < beta_start <= beta_end < 1:
            raise ValueError("invalid schedule parameters")
        self.steps = steps
        self.beta_start, self.beta_end = beta_start, beta_end
        betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])

    def __len__(self) -> int:
        return self.steps

    def snr(self) -> np.ndarray:
        """Signal-to-noise ratio per step; infinite at step 0."""
        with np.errstate(divide="ignore"):
            return self.alpha_bar / (1.0 - self.alpha_bar)

    def check(self, t) -> np.ndarray:
        t = np.asarray(t)
        if (t < 0).any() or (t > self.steps).any():
            raise ValueError(f"timestep outside [0, {self.steps}]")
        return t


class TrajectoryGrid:
    """N+1 evenly spaced schedule steps t_0 = 0 < t_1 < ... < t_N = T with split index kappa."""

    def __init__(self, schedule: NoiseSchedule, points: int = 50, kappa: int = 37):
        if points < 2 or not 0 < kappa < points:
            raise ValueError(f"need 0 < kappa < N, got N={points}, kappa={kappa}")
        self.schedule = schedule
        self.points = points
        self.kappa = kappa
        self.steps = np.rint(np.arange(points + 1) * schedule.steps / points).astype(np.int64)
        if np.any(np.diff(self.steps) <= 0):
            raise ValueError("grid steps collide; use fewer points")

    @property
    def N(self) -> int:
        return self.points

    def step(self, n: int) -> int:
        if not 0 <= n <= self.points:
            raise ValueError(f"grid index {n} outside [0, {self.points}]")
        return int(self.steps[n])

    def alpha_bar(self, n: int) -> float:
        return float(self.schedule.alpha_bar[self.step(n)])


def _coef(values: np.ndarray, ndim: int):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return float(values)
    return values.reshape((-1,) + (1,) * (ndim - 1))


def _scale(x, coef):
    """x * coef for arrays or Tensors; per-sample coefficients broadcast on the batch axis."""
    if isinstance(x, Tensor):
        return x * (coef if isinstance(coef, float) else coef.astype(x.dtype))
    return x * coef


def _plus(a, b):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return (a if isinstance(a, Tensor) else Tensor(np.asarray(a))) + b
    return a + b


def _minus(a, b):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return (a if isinstance(a, Tensor) else Tensor(np.asarray(a))) - b
    return a - b


def add_noise(x0, eps, t, schedule: NoiseSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps. ``t`` is a step or one step per batch item."""
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    ab = schedule.alpha_bar[schedule.check(t)]
    nd = len(x0.shape)
    return _plus(_scale(x0, _coef(np.sqrt(ab), nd)), _scale(eps, _coef(np.sqrt(1.0 - ab), nd)))


def solver_step(x_from, eps_hat, t_from: int, t_to: int, schedule: NoiseSchedule):
    """Deterministic DDIM jump from step ``t_from`` to ``t_to`` (t_to <= t_from)."""
    schedule.check([t_from, t_to])
    if t_to > t_from:
        raise ValueError(f"solver cannot move toward noise: t_to={t_to} > t_from={t_from}")
    if t_to == t_from:
        return x_from
    ab_f = float(schedule.alpha_bar[t_from])
    ab_t = float(schedule.alpha_bar[t_to])
    if ab_f <= 0.0:
        raise ValueError("alpha_bar at t_from is zero")
    x0_hat = _scale(_minus(x_from, _scale(eps_hat, np.sqrt(1.0 - ab_f))), 1.0 / np.sqrt(ab_f))
    return _plus(_scale(x0_hat, np.sqrt(ab_t)), _scale(eps_hat, np.sqrt(1.0 - ab_t)))


# ------------------------------------------------------------------- teacher


@dataclass
class TeacherConfig:
    iterations: int = 2000
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0
    warmup: int = 100
    lr_decay: str = "cosine"        # "cosine" | "constant"
    ema_decay: float = 0.995        # 0 returns the raw weights

    def lr_at(self, it: int) -> float:
        scale = 1.0
        if self.warmup > 0 and it < self.warmup:
            scale = (it + 1) / self.warmup
        if self.lr_decay == "cosine" and self.iterations > 0:
            scale *= 0.5 * (1.0 + math.cos(math.pi * it / self.iterations))
        elif self.lr_decay != "constant":
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")
        return self.lr * scale


@dataclass
class TeacherResult:
    model: Model
    records: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.records])


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


def train_teacher(dataset: Dataset, config: TeacherConfig, model_config: DenoiserConfig,
                  schedule: NoiseSchedule, params=None,
                  on_record: Callable[[dict], None] | None = None) -> TeacherResult:
    """Minimize E ||eps - eps_theta(x_t, t)||^2 over uniform t in [1, T] and Gaussian eps.

    The returned model holds the EMA of the weights when ``ema_decay`` > 0.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if not 0.0 <= config.ema_decay < 1.0:
        raise ValueError("ema_decay must lie in [0, 1)")
    params = init_params(model_config) if params is None else params
    ema = params.copy() if config.ema_decay > 0 else None
    rng = np.random.default_rng(config.seed)
    state = AdamState(lr=config.lr)
    records: list[dict] = []
    for it in range(config.iterations):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        t = rng.integers(1, schedule.steps + 1, size=config.batch_size)
        x0 = dataset.clips[idx]
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        x_t = add_noise(x0, eps, t, schedule).astype(np.float32)
        binding = params.bind()
        try:
            pred = Denoiser(binding, model_config)(x_t, t, dataset.labels[idx])
            diff = pred - Tensor(eps)
            loss = (diff * diff).mean()
            grads = backward(loss, binding.tracked())
        except NonFiniteError as exc:
            record = {"iteration": it, "loss": float("nan"), "error": str(exc)}
            raise TrainingDiverged(f"teacher training diverged at iteration {it}: {exc}", record) from exc
        record = {"iteration": it, "loss": float(loss.data), "grad_norm": grad_norm(grads)}
        records.append(record)
        if on_record:
            on_record(record)
        params, state = adam_step(params, grads, replace(state, lr=config.lr_at(it)))
        if ema is not None:
            ema = ema_update(ema, params, config.ema_decay)
        if it % 200 == 0:
            log.info("teacher it=%d loss=%.4f", it, record["loss"])
    final = ema if ema is not None else params
    return TeacherResult(Model(final, model_config, "teacher", config.iterations), records)


def _eps(net, x, t, labels) -> np.ndarray:
    out = net(x, t, labels)
    return out.data if isinstance(out, Tensor) else np.asarray(out)


def initial_noise(seed, count: int, shape: tuple, dtype=np.float32) -> np.ndarray:
    """Pure noise at t_N: one stream for an int seed, one stream per clip for a seed sequence."""
    if isinstance(seed, (list, tuple, np.ndarray)):
        if len(seed) != count:
            raise ValueError("need one seed per clip")
        noise = np.stack([np.random.default_rng(int(s)).standard_normal(tuple(shape)) for s in seed])
    else:
        noise = np.random.default_rng(int(seed)).standard_normal((count,) + tuple(shape))
    return noise.astype(dtype)


TRAJECTORY_KINDS = ("state", "x0")


def sample_teacher(teacher, grid: TrajectoryGrid, c, seed, keep_trajectory: bool = False,
                   shape: tuple | None = None, dtype=np.float32, trajectory: str = "state"):
    """Run DDIM over every grid point from pure noise at t_N down to t_0.

    ``c`` is a label or a sequence of labels (one clip each). Returns the
    clips, plus N+1 trajectory entries (noisiest first) when
    ``keep_trajectory`` is set: the states x_{t_N}..x_{t_0} for
    ``trajectory="state"``, or the clean prediction made at each of t_N..t_1
    followed by x_{t_0} for ``trajectory="x0"``.
    """
    if trajectory not in TRAJECTORY_KINDS:
        raise ValueError(f"trajectory must be one of {TRAJECTORY_KINDS}")
    if isinstance(teacher, Model):
        shape = teacher.clip_shape
        net = as_denoiser(teacher, require_stage="teacher")
    else:
        net = as_denoiser(teacher)
    if shape is None:
        raise ValueError("shape is required for a plain callable denoiser")
    labels = np.atleast_1d(np.asarray(c, dtype=np.int64))
    x = initial_noise(seed, len(labels), shape, dtype)
    states = keep_trajectory and trajectory == "state"
    traj = [x] if states else []
    for n in range(grid.N, 0, -1):
        eps_hat = _eps(net, x, grid.step(n), labels)
        if keep_trajectory and not states:
            traj.append(solver_step(x, eps_hat, grid.step(n), 0, grid.schedule).astype(dtype))
        x = solver_step(x, eps_hat, grid.step(n), grid.step(n - 1), grid.schedule).astype(dtype)
        if states:
            traj.append(x)
    if keep_trajectory and not states:
        traj.append(x)
    return (x, traj) if keep_trajectory else x
