"""Few-step sampling with a semantic phase above t_kappa and a detail phase below it."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .denoiser import Model, as_denoiser
from .diffusion import TrajectoryGrid, _eps, initial_noise, solver_step

VARIANTS = ("vcm", "seme+vcm", "vcm+dete", "seme+dete")
# expert key per (semantic phase, detail phase)
_PHASE_EXPERTS = {
    "vcm": ("vcm", "vcm"),
    "seme+vcm": ("semantic", "vcm"),
    "vcm+dete": ("vcm", "detail"),
    "seme+dete": ("semantic", "detail"),
}
_REQUIRED_STAGE = {"vcm": "vcm", "semantic": "semantic", "detail": "detail"}


class MissingExpertError(KeyError):
    pass


@dataclass(frozen=True)
class SamplePlan:
    total: int
    points: int
    kappa: int
    semantic: tuple[tuple[int, int], ...]   # (start, target) grid indices, noisiest first
    detail: tuple[tuple[int, int], ...]
    variant: str = "seme+dete"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        starts = [s for s, _ in self.semantic] + [s for s, _ in self.detail]
        if len(starts) != self.total:
            raise ValueError("plan size does not match total steps")
        if any(b >= a for a, b in zip(starts, starts[1:])):
            raise ValueError("plan start points must strictly decrease")
        if any(not self.kappa < s <= self.points for s, _ in self.semantic):
            raise ValueError("semantic starts must lie in (kappa, N]")
        if any(not 0 < s <= self.kappa for s, _ in self.detail):
            raise ValueError("detail starts must lie in (0, kappa]")

    def steps(self):
        """(phase, start, target) triples in sampling order."""
        return [("semantic", s, t) for s, t in self.semantic] + [("detail", s, t) for s, t in self.detail]

    def with_variant(self, variant: str) -> "SamplePlan":
        return SamplePlan(self.total, self.points, self.kappa, self.semantic, self.detail, variant)

    def to_dict(self) -> dict:
        return {"total": self.total, "points": self.points, "kappa": self.kappa, "variant": self.variant,
                "semantic": [list(p) for p in self.semantic], "detail": [list(p) for p in self.detail]}


def _round_half_down(x: float) -> int:
    # ties go to the lower (less noisy) grid index
    return int(math.ceil(x - 0.5))


def _phase(top: int, bottom: int, k: int) -> tuple[tuple[int, int], ...]:
    starts = [_round_half_down(top - i * (top - bottom) / k) for i in range(k)]
    return tuple(zip(starts, starts[1:] + [bottom]))


def allocate_steps(total: int, grid: TrajectoryGrid, variant: str = "seme+dete") -> SamplePlan:
    """Split ``total`` steps evenly between (t_kappa, t_N] and (t_0, t_kappa]."""
    if total < 2 or total % 2:
        raise ValueError(f"total steps must be even and >= 2, got {total}")
    k = total // 2
    N, kappa = grid.N, grid.kappa
    if k > N - kappa or k > kappa:
        raise ValueError(f"{k} steps per phase exceed a sub-trajectory (lengths {N - kappa}, {kappa})")
    return SamplePlan(total, N, kappa, _phase(N, kappa, k), _phase(kappa, 0, k), variant)


def _resolve(experts: dict, key: str):
    if key not in experts or experts[key] is None:
        raise MissingExpertError(f"variant needs the {key} expert")
    model = experts[key]
    if isinstance(model, Model):
        return as_denoiser(model, require_stage=_REQUIRED_STAGE[key])
    return as_denoiser(model)


def sample(plan: SamplePlan, experts: dict, c, seed, grid: TrajectoryGrid, shape: tuple | None = None,
           ledger: list | None = None, dtype=np.float32) -> np.ndarray:
    """Run the plan from pure noise at t_N; one expert evaluation and one solver jump per step.

    ``experts`` maps "vcm" / "semantic" / "detail" to a Model or callable.
    ``ledger`` (if given) receives (grid index, expert key) per call.
    """
    if plan.points != grid.N or plan.kappa != grid.kappa:
        raise ValueError(f"plan built for N={plan.points}, kappa={plan.kappa}; grid has N={grid.N}, "
                         f"kappa={grid.kappa}")
    sem_key, det_key = _PHASE_EXPERTS[plan.variant]
    nets = {"semantic": (sem_key, _resolve(experts, sem_key)), "detail": (det_key, _resolve(experts, det_key))}
    if shape is None:
        models = [m for m in experts.values() if isinstance(m, Model)]
        if not models:
            raise ValueError("shape is required when no expert is a Model")
        shape = models[0].clip_shape
    labels = np.atleast_1d(np.asarray(c, dtype=np.int64))
    x = initial_noise(seed, len(labels), shape, dtype)
    for phase, start, target in plan.steps():
        key, net = nets[phase]
        if ledger is not None:
            ledger.append((start, key))
        eps_hat = _eps(net, x, grid.step(start), labels)
        x = solver_step(x, eps_hat, grid.step(start), grid.step(target), grid.schedule).astype(dtype)
    if not np.isfinite(x).all():
        raise FloatingPointError("sampled clip contains non-finite values")
    return x
