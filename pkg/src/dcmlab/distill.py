"""Consistency distillation over full and split trajectories.

Stages:

* ``vcm``: one student over [t_0, t_N], endpoint t_0
* ``semantic``: full student over [t_kappa, t_N], endpoint t_kappa, plus temporal coherence
* ``detail``: frozen semantic expert + psi_prime/low-rank adapters over [t_0, t_kappa],
  endpoint t_0, plus adversarial and feature-matching terms on teacher features
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .denoiser import Denoiser, DenoiserConfig, Model, inject_adapters, trainable_subset
from .diffusion import TrainingDiverged, TrajectoryGrid, add_noise, solver_step
from .synth_data import Dataset
from .tensor_core import (AdamState, Group, NonFiniteError, ParamStore, Tensor, adam_step, backward,
                          ema_update, grad_norm, sigmoid, silu)

log = logging.getLogger(__name__)

DISTILL_STAGES = ("vcm", "semantic", "detail")
DEFAULT_LR = {"vcm": 1e-6, "semantic": 1e-6, "detail": 5e-6}


@dataclass
class DistillConfig:
    stage: str = "semantic"
    lr: float | None = None          # None -> stage default
    iterations: int = 1000
    batch_size: int = 4
    ema_decay: float = 0.95
    tc_weight: float = 1.0
    tc_shift: int = 1
    gan_weight: float = 0.05
    fm_weight: float = 1.0
    feature_stride: int = 1
    disc_lr: float = 1e-4
    disc_hidden: int = 32
    seed: int = 0

    @property
    def learning_rate(self) -> float:
        return DEFAULT_LR[self.stage] if self.lr is None else self.lr

    def validate(self, frames: int | None = None) -> None:
        if self.stage not in DISTILL_STAGES:
            raise ValueError(f"unknown distillation stage {self.stage!r}")
        for name in ("tc_weight", "gan_weight", "fm_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        if self.tc_shift < 1 or (frames is not None and self.tc_shift >= frames):
            raise ValueError(f"tc_shift must satisfy 1 <= l < L, got {self.tc_shift}")
        if self.feature_stride < 1 or self.batch_size < 1 or self.iterations < 0:
            raise ValueError("feature_stride and batch_size must be >= 1, iterations >= 0")


def stage_range(stage: str, grid: TrajectoryGrid) -> tuple[int, int, int]:
    """(lowest t_n index, highest t_n index, endpoint index) for a stage."""
    if stage == "vcm":
        return 1, grid.N, 0
    if stage == "semantic":
        return grid.kappa + 1, grid.N, grid.kappa
    if stage == "detail":
        return 1, grid.kappa, 0
    raise ValueError(f"unknown distillation stage {stage!r}")


# --------------------------------------------------------------- pair + losses


@dataclass
class CDPair:
    student: Tensor           # Phi(x_tn, F_S(x_tn, t_n), t_end), tracked
    target: Tensor            # Phi(x_hat_{n-1}, F_S^-(x_hat_{n-1}, t_{n-1}), t_end), constant
    x_tn: np.ndarray
    x_prev: np.ndarray
    n: int
    n_end: int


def _as_array(out) -> np.ndarray:
    return out.data if isinstance(out, Tensor) else np.asarray(out)


def cd_pair(teacher, student, student_ema, x0: np.ndarray, c, n: int, n_end: int,
            grid: TrajectoryGrid, rng: np.random.Generator | None = None,
            eps: np.ndarray | None = None) -> CDPair:
    """Student and EMA-target endpoints for one consistency step from grid index ``n``.

    The teacher makes one solver step n -> n-1; the EMA target jumps from
    there to the endpoint. Nothing on the target branch carries a gradient.
    """
    if not n_end < n <= grid.N:
        raise ValueError(f"t_n index {n} must lie above the endpoint index {n_end}")
    sched = grid.schedule
    if eps is None:
        eps = (rng or np.random.default_rng()).standard_normal(x0.shape)
    dtype = x0.dtype if x0.dtype in (np.float32, np.float64) else np.float32
    eps = eps.astype(dtype)
    t_n, t_prev, t_end = grid.step(n), grid.step(n - 1), grid.step(n_end)
    x_tn = add_noise(x0, eps, t_n, sched).astype(dtype)

    student_out = solver_step(Tensor(x_tn), student(x_tn, t_n, c), t_n, t_end, sched)

    eps_t = _as_array(teacher(x_tn, t_n, c))
    x_prev = solver_step(x_tn, eps_t, t_n, t_prev, sched).astype(dtype)
    if t_prev == t_end:
        target = x_prev
    else:
        target = solver_step(x_prev, _as_array(student_ema(x_prev, t_prev, c)), t_prev, t_end, sched)
    return CDPair(student_out, Tensor(np.asarray(target, dtype=dtype)), x_tn, x_prev, n, n_end)


def _mse(a, b) -> Tensor:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return (d * d).mean()


def loss_consistency(pair: CDPair) -> Tensor:
    return _mse(pair.student, pair.target)


def loss_temporal_coherence(x: Tensor, x_hat: Tensor, shift: int = 1) -> Tensor:
    """MSE between frame-difference stacks x[l:] - x[:L-l] of two [B, L, ...] endpoints."""
    L = x.shape[1]
    if not 1 <= shift < L:
        raise ValueError(f"shift must satisfy 1 <= l < L={L}, got {shift}")
    x_hat = x_hat if isinstance(x_hat, Tensor) else Tensor(np.asarray(x_hat))
    dx = x[:, shift:] - x[:, : L - shift]
    dxh = x_hat[:, shift:] - x_hat[:, : L - shift]
    return _mse(dx, dxh)


@dataclass
class GanBatch:
    x_fake: Tensor
    x_real: Tensor
    t_gan: int
    eps: np.ndarray


def gan_prepare(x_endpoint: Tensor, target_endpoint, grid: TrajectoryGrid,
                rng: np.random.Generator, t_gan: int | None = None) -> GanBatch:
    """Re-noise both endpoints with one shared eps at a level drawn from [t_0, t_kappa]."""
    if t_gan is None:
        t_gan = int(rng.integers(0, grid.step(grid.kappa) + 1))
    target = target_endpoint.data if isinstance(target_endpoint, Tensor) else np.asarray(target_endpoint)
    eps = rng.standard_normal(target.shape).astype(target.dtype)
    x_fake = add_noise(x_endpoint, eps, t_gan, grid.schedule)
    x_real = Tensor(add_noise(target, eps, t_gan, grid.schedule))
    return GanBatch(x_fake, x_real, t_gan, eps)


def extract_features(teacher: Denoiser, x, t_gan: int, c, stride: int = 1) -> list[Tensor]:
    """Post-block activations of the frozen teacher at every ``stride``-th block."""
    if teacher.binding.tracked():
        raise ValueError("feature backbone must be frozen (bind the teacher without tracking)")
    return teacher.features(x, t_gan, c, stride)


def loss_fm(feats_fake: list[Tensor], feats_real: list[Tensor]) -> Tensor:
    if len(feats_fake) != len(feats_real):
        raise ValueError(f"feature level mismatch: {len(feats_fake)} vs {len(feats_real)}")
    total = None
    for a, b in zip(feats_fake, feats_real):
        term = _mse(a, b.detach() if isinstance(b, Tensor) else Tensor(b))
        total = term if total is None else total + term
    return total


class DiscriminatorHead:
    """Per-level pooled MLP -> sigmoid; the head output averages the levels. Range [0, 1]."""

    def __init__(self, params: ParamStore, track: bool = False):
        self.store = params
        self.binding = params.bind(track=track)
        self._frozen = params.bind(track=False) if track else self.binding
        self.levels = sum(1 for n in params if n.endswith(".fc1.weight"))

    @staticmethod
    def init(levels: int, width: int, hidden: int = 32, seed: int = 0) -> ParamStore:
        rng = np.random.default_rng(seed)
        store = ParamStore()
        for k in range(levels):
            store.add(f"disc.{k}.fc1.weight",
                      (rng.normal(size=(width, hidden)) / math.sqrt(width)).astype(np.float32), Group.OTHER)
            store.add(f"disc.{k}.fc1.bias", np.zeros(hidden, np.float32), Group.OTHER)
            store.add(f"disc.{k}.fc2.weight",
                      (rng.normal(size=(hidden, 1)) / math.sqrt(hidden)).astype(np.float32), Group.OTHER)
            store.add(f"disc.{k}.fc2.bias", np.zeros(1, np.float32), Group.OTHER)
        return store

    def __call__(self, feats: list[Tensor], frozen: bool = False) -> Tensor:
        if len(feats) != self.levels:
            raise ValueError(f"head expects {self.levels} feature levels, got {len(feats)}")
        b = self._frozen if frozen else self.binding
        total = None
        for k, f in enumerate(feats):
            pooled = f.mean(axis=1)
            h = silu(pooled @ b[f"disc.{k}.fc1.weight"] + b[f"disc.{k}.fc1.bias"])
            score = sigmoid(h @ b[f"disc.{k}.fc2.weight"] + b[f"disc.{k}.fc2.bias"])
            total = score if total is None else total + score
        return total * (1.0 / len(feats))


def _bounded(out: Tensor) -> Tensor:
    if out.data.min() < 0.0 or out.data.max() > 1.0:
        raise ValueError("discriminator head output leaves [0, 1]")
    return out


def loss_gan(d_head, feats_fake: list[Tensor], feats_real: list[Tensor]) -> tuple[Tensor, Tensor]:
    """(generator adversarial loss, discriminator loss).

    L_G_adv = mean(1 - f_D(fake)) sees the head as constant;
    L_D = mean(f_D(fake)) + mean(1 - f_D(real)) sees both feature sets as constant.
    """
    g = (1.0 - _bounded(d_head(feats_fake, frozen=True))).mean()
    fake_c = [f.detach() for f in feats_fake]
    real_c = [f.detach() for f in feats_real]
    d = _bounded(d_head(fake_c)).mean() + (1.0 - _bounded(d_head(real_c))).mean()
    return g, d


# --------------------------------------------------------------------- stage


@dataclass
class IterationRecord:
    iteration: int
    t_n: int                 # grid index
    step: int                # schedule step of t_n
    alpha_bar: float
    loss_total: float
    loss_cd: float
    loss_tc: float = 0.0
    loss_g: float = 0.0
    loss_fm: float = 0.0
    loss_d: float = 0.0
    grad_norm: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DistillResult:
    model: Model
    ema: ParamStore
    discriminator: ParamStore | None
    records: list[IterationRecord] = field(default_factory=list)


class StageMismatchError(ValueError):
    pass


def prepare_student(stage: str, teacher: Model, init: Model, rank: int, seed: int = 0) -> ParamStore:
    if stage in ("vcm", "semantic"):
        if init.stage != "teacher":
            raise StageMismatchError(f"{stage} stage initializes from the teacher, got a {init.stage} model")
        params = init.params.copy()
    elif stage == "detail":
        if init.stage != "semantic" or init.iteration <= 0:
            raise StageMismatchError("detail stage requires a trained semantic expert as initialization")
        params = inject_adapters(init.params, rank=rank, seed=seed)
    else:
        raise ValueError(f"unknown distillation stage {stage!r}")
    return params.with_trainable(trainable_subset(params, stage))


def distill_stage(config: DistillConfig, teacher: Model, init: Model, dataset: Dataset,
                  grid: TrajectoryGrid, on_record: Callable[[IterationRecord], None] | None = None
                  ) -> DistillResult:
    mcfg: DenoiserConfig = teacher.config
    config.validate(mcfg.frames)
    if teacher.stage != "teacher" or teacher.iteration <= 0:
        raise StageMismatchError("distillation needs a trained teacher")
    if init.config != mcfg:
        raise StageMismatchError("initialization and teacher architectures differ")
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    stage = config.stage
    lo, hi, n_end = stage_range(stage, grid)
    rng = np.random.default_rng(config.seed)

    params = prepare_student(stage, teacher, init, mcfg.lora_rank, config.seed)
    ema = params.copy()
    state = AdamState(lr=config.learning_rate)
    teacher_net = Denoiser(teacher.params, mcfg, use_adapters=False)

    disc = d_state = None
    if stage == "detail":
        levels = len(range(config.feature_stride - 1, mcfg.blocks, config.feature_stride))
        if levels == 0:
            raise ValueError("feature stride selects no teacher block")
        disc = DiscriminatorHead.init(levels, mcfg.width_d, config.disc_hidden, config.seed + 1)
        d_state = AdamState(lr=config.disc_lr)

    records: list[IterationRecord] = []
    for it in range(config.iterations):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        x0, c = dataset.clips[idx], dataset.labels[idx].astype(np.int64)
        n = int(rng.integers(lo, hi + 1))
        binding = params.bind()
        student = Denoiser(binding, mcfg)
        try:
            pair = cd_pair(teacher_net, student, Denoiser(ema, mcfg), x0, c, n, n_end, grid, rng)
            l_cd = loss_consistency(pair)
            total = l_cd
            values = {"loss_cd": float(l_cd.data)}
            if stage == "semantic" and config.tc_weight > 0:
                l_tc = loss_temporal_coherence(pair.student, pair.target, config.tc_shift)
                total = total + l_tc * config.tc_weight
                values["loss_tc"] = float(l_tc.data)
            d_loss = None
            if stage == "detail":
                gb = gan_prepare(pair.student, pair.target, grid, rng)
                ff = extract_features(teacher_net, gb.x_fake, gb.t_gan, c, config.feature_stride)
                fr = extract_features(teacher_net, gb.x_real, gb.t_gan, c, config.feature_stride)
                head = DiscriminatorHead(disc, track=True)
                l_fm = loss_fm(ff, fr)
                l_g, d_loss = loss_gan(head, ff, fr)
                total = total + l_g * config.gan_weight + l_fm * config.fm_weight
                values.update(loss_g=float(l_g.data), loss_fm=float(l_fm.data), loss_d=float(d_loss.data))
            grads = backward(total, binding.tracked())
        except NonFiniteError as exc:
            record = {"iteration": it, "t_n": n, "error": str(exc)}
            raise TrainingDiverged(f"{stage} distillation diverged at iteration {it}: {exc}", record) from exc

        rec = IterationRecord(iteration=it, t_n=n, step=grid.step(n), alpha_bar=grid.alpha_bar(n),
                              loss_total=float(total.data), grad_norm=grad_norm(grads), **values)
        params, state = adam_step(params, grads, state)
        ema = ema_update(ema, params, config.ema_decay)
        if d_loss is not None:
            d_grads = backward(d_loss, head.binding.tracked())
            disc, d_state = adam_step(disc, d_grads, d_state)
        records.append(rec)
        if on_record:
            on_record(rec)
        if it % 100 == 0:
            log.info("%s it=%d n=%d loss=%.5f |g|=%.4f", stage, it, n, rec.loss_total, rec.grad_norm)

    model = Model(params, mcfg, stage, config.iterations)
    return DistillResult(model, ema, disc, records)
