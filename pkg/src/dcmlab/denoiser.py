"""Noise-prediction transformer over per-frame patch tokens.

Parameter groups:

* ``psi``: timestep MLP and every per-block/final modulation linear
* ``lambda``: q/k/v/out attention projections
* ``other``: patch/position/class embeddings, block MLPs, output projection

``inject_adapters`` adds a replacement copy of every ``psi`` parameter
(``psi_prime``) and a low-rank pair on every attention projection weight
(``lambda_dagger``), and freezes the base.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .tensor_core import (Binding, Group, ParamStore, Tensor, as_tensor, gelu, layernorm, silu,
                          softmax)

ADAPTER_PREFIX = "adapter."
ATTN_PROJ = ("q", "k", "v", "out")
STAGES = ("teacher", "vcm", "semantic", "detail")


@dataclass(frozen=True)
class DenoiserConfig:
    frames: int = 4
    height: int = 16
    width: int = 16
    patch: int = 4
    width_d: int = 64
    blocks: int = 3
    heads: int = 4
    temb_dim: int = 64
    classes: int = 8
    mlp_ratio: int = 4
    num_timesteps: int = 1000
    lora_rank: int = 4
    lora_alpha: float = 8.0
    seed: int = 0

    def validate(self) -> None:
        if self.width_d % self.heads:
            raise ValueError(f"width {self.width_d} is not divisible by {self.heads} heads")
        if self.height % self.patch or self.width % self.patch:
            raise ValueError("frame size must be a multiple of the patch size")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")
        if self.temb_dim % 2:
            raise ValueError("temb_dim must be even")

    @property
    def tokens(self) -> int:
        return self.frames * (self.height // self.patch) * (self.width // self.patch)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def init_params(config: DenoiserConfig) -> ParamStore:
    config.validate()
    rng = np.random.default_rng(config.seed)
    d, p2 = config.width_d, config.patch ** 2
    store = ParamStore()

    def dense(name, fan_in, fan_out, group, gain=1.0):
        store.add(f"{name}.weight", (rng.normal(size=(fan_in, fan_out)) * gain / math.sqrt(fan_in)
                                     ).astype(np.float32), group)
        store.add(f"{name}.bias", np.zeros(fan_out, np.float32), group)

    dense("patch_embed", p2, d, Group.OTHER)
    store.add("pos_embed", (rng.normal(size=(config.tokens, d)) * 0.1).astype(np.float32), Group.OTHER)
    store.add("class_embed", (rng.normal(size=(config.classes, d)) * 0.1).astype(np.float32), Group.OTHER)
    dense("time_mlp.fc1", config.temb_dim, d, Group.PSI)
    dense("time_mlp.fc2", d, d, Group.PSI)
    for i in range(config.blocks):
        dense(f"blocks.{i}.mod", d, 4 * d, Group.PSI, gain=0.1)
        for proj in ATTN_PROJ:
            dense(f"blocks.{i}.attn.{proj}", d, d, Group.LAMBDA)
        dense(f"blocks.{i}.mlp.fc1", d, config.mlp_ratio * d, Group.OTHER)
        dense(f"blocks.{i}.mlp.fc2", config.mlp_ratio * d, d, Group.OTHER, gain=0.5)
    dense("final.mod", d, 2 * d, Group.PSI, gain=0.1)
    dense("final.proj", d, p2, Group.OTHER, gain=0.5)
    return store


def has_adapters(params: ParamStore) -> bool:
    return any(params.group(n).is_adapter for n in params)


def base_names(params: ParamStore) -> list[str]:
    return [n for n in params if not params.group(n).is_adapter]


def adapter_names(params: ParamStore) -> list[str]:
    return [n for n in params if params.group(n).is_adapter]


def inject_adapters(params: ParamStore, rank: int = 4, seed: int = 0) -> ParamStore:
    """Freeze the base and add psi_prime copies plus zero-initialized low-rank pairs."""
    if rank < 1:
        raise ValueError(f"adapter rank must be >= 1, got {rank}")
    if has_adapters(params):
        raise ValueError("adapters are already present")
    rng = np.random.default_rng(seed)
    out = ParamStore()
    for n in params:
        out.add(n, params[n], params.group(n), trainable=False)
    for n in params.names_in(Group.PSI):
        out.add(ADAPTER_PREFIX + n, params[n].copy(), Group.PSI_PRIME)
    for n in params.names_in(Group.LAMBDA):
        if not n.endswith(".weight"):
            continue
        stem = n[: -len(".weight")]
        d_in, d_out = params[n].shape
        out.add(f"{ADAPTER_PREFIX}{stem}.lora_A",
                (rng.normal(size=(rank, d_in)) / math.sqrt(d_in)).astype(params[n].dtype),
                Group.LAMBDA_DAGGER)
        out.add(f"{ADAPTER_PREFIX}{stem}.lora_B", np.zeros((d_out, rank), params[n].dtype),
                Group.LAMBDA_DAGGER)
    return out


def trainable_subset(params: ParamStore, stage: str) -> set[str]:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    if stage == "detail":
        names = adapter_names(params)
        if not names:
            raise ValueError("detail stage requires injected adapters")
        return set(names)
    return set(base_names(params))


def init_student_from(teacher: ParamStore, teacher_config: DenoiserConfig,
                      student_config: DenoiserConfig | None = None) -> ParamStore:
    if student_config is not None and student_config != teacher_config:
        raise ValueError("student config differs from teacher config")
    if has_adapters(teacher):
        raise ValueError("teacher must not carry adapters")
    return teacher.copy()


def timestep_embedding(t: np.ndarray, dim: int, dtype) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


class Denoiser:
    """eps-prediction network bound to one parameter set.

    ``params`` may be a ParamStore (evaluated without gradients) or a
    Binding (trainable leaves tracked). With ``use_adapters`` and adapters
    present, timestep layers read their psi_prime copies and each attention
    projection adds the scaled low-rank branch.
    """

    def __init__(self, params: ParamStore | Binding, config: DenoiserConfig, use_adapters: bool = True):
        self.binding = params if isinstance(params, Binding) else params.bind(track=False)
        self.config = config
        self.adapted = use_adapters and has_adapters(self.binding.store)
        self.calls: list[int] | None = None

    # parameter lookup
    def _p(self, name: str) -> Tensor:
        return self.binding[name]

    def _psi(self, name: str) -> Tensor:
        return self.binding[ADAPTER_PREFIX + name] if self.adapted else self.binding[name]

    def _dense(self, h: Tensor, name: str, psi: bool = False) -> Tensor:
        get = self._psi if psi else self._p
        return h @ get(f"{name}.weight") + get(f"{name}.bias")

    def _attn_proj(self, h: Tensor, name: str) -> Tensor:
        y = h @ self._p(f"{name}.weight") + self._p(f"{name}.bias")
        if self.adapted:
            a = self._p(f"{ADAPTER_PREFIX}{name}.lora_A")
            b = self._p(f"{ADAPTER_PREFIX}{name}.lora_B")
            scale = self.config.lora_alpha / a.shape[0]
            y = y + ((h @ a.transpose(1, 0)) @ b.transpose(1, 0)) * scale
        return y

    def _validate(self, x: Tensor, t, c) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.frames, cfg.height, cfg.width):
            raise ValueError(f"expected [B, {cfg.frames}, {cfg.height}, {cfg.width}], got {x.shape}")
        B = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (B,))
        if (t < 0).any() or (t > cfg.num_timesteps).any():
            raise ValueError(f"timestep outside [0, {cfg.num_timesteps}]")
        if (c < 0).any() or (c >= cfg.classes).any():
            raise ValueError(f"class label outside [0, {cfg.classes})")
        return t, c

    def _run(self, x, t, c, stop_after: int | None = None):
        cfg = self.config
        x = as_tensor(x)
        t, c = self._validate(x, t, c)
        if self.calls is not None:
            self.calls.extend(int(v) for v in t)
        dtype = self.binding["patch_embed.weight"].dtype
        if x.dtype != dtype:
            x = Tensor(x.data.astype(dtype)) if not x.requires_grad else x
        B, L, H, W = x.shape
        P, d, nh = cfg.patch, cfg.width_d, cfg.heads
        gh, gw = H // P, W // P
        T = L * gh * gw

        tok = x.reshape(B, L, gh, P, gw, P).transpose(0, 1, 2, 4, 3, 5).reshape(B, T, P * P)
        h = self._dense(tok, "patch_embed") + self._p("pos_embed")

        temb = Tensor(timestep_embedding(t, cfg.temb_dim, dtype))
        cond = self._dense(silu(self._dense(temb, "time_mlp.fc1", psi=True)), "time_mlp.fc2", psi=True)
        cond = silu(cond + self._p("class_embed")[c])

        feats = []
        dh = d // nh
        for i in range(cfg.blocks):
            mod = self._dense(cond, f"blocks.{i}.mod", psi=True).reshape(B, 1, 4 * d)
            shift1, scale1 = mod[:, :, 0:d], mod[:, :, d:2 * d]
            shift2, scale2 = mod[:, :, 2 * d:3 * d], mod[:, :, 3 * d:4 * d]

            a = layernorm(h) * (scale1 + 1.0) + shift1
            q, k, v = (self._attn_proj(a, f"blocks.{i}.attn.{n}").reshape(B, T, nh, dh).transpose(0, 2, 1, 3)
                       for n in ("q", "k", "v"))
            att = softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)), axis=-1)
            o = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
            h = h + self._attn_proj(o, f"blocks.{i}.attn.out")

            m = layernorm(h) * (scale2 + 1.0) + shift2
            h = h + self._dense(gelu(self._dense(m, f"blocks.{i}.mlp.fc1")), f"blocks.{i}.mlp.fc2")
            feats.append(h)
            if stop_after is not None and i + 1 >= stop_after:
                return None, feats

        fmod = self._dense(cond, "final.mod", psi=True).reshape(B, 1, 2 * d)
        y = layernorm(h) * (fmod[:, :, d:2 * d] + 1.0) + fmod[:, :, 0:d]
        out = self._dense(y, "final.proj")
        out = out.reshape(B, L, gh, gw, P, P).transpose(0, 1, 2, 4, 3, 5).reshape(B, L, H, W)
        return out, feats

    def __call__(self, x, t, c) -> Tensor:
        return self._run(x, t, c)[0]

    def features(self, x, t, c, stride: int = 1) -> list[Tensor]:
        """Post-block activations of every ``stride``-th block (blocks stride, 2*stride, ...)."""
        if stride < 1:
            raise ValueError("stride must be >= 1")
        picks = list(range(stride - 1, self.config.blocks, stride))
        if not picks:
            raise ValueError(f"stride {stride} selects no block out of {self.config.blocks}")
        _, feats = self._run(x, t, c, stop_after=picks[-1] + 1)
        return [feats[i] for i in picks]


def forward(params: ParamStore | Binding, config: DenoiserConfig, x, t, c) -> Tensor:
    return Denoiser(params, config)(x, t, c)



class UntrainedModelError(ValueError):
    pass


@dataclass
class Model:
    """A parameter store with its architecture and training provenance."""

    params: ParamStore
    config: DenoiserConfig
    stage: str = "teacher"
    iteration: int = 0

    def denoiser(self, use_adapters: bool = True) -> Denoiser:
        return Denoiser(self.params, self.config, use_adapters)

    @property
    def clip_shape(self) -> tuple[int, int, int]:
        return (self.config.frames, self.config.height, self.config.width)


def as_denoiser(model, require_stage: str | None = None):
    """Accept a Model (checked to be trained) or any callable (x, t, c) -> eps."""
    if isinstance(model, Model):
        if model.iteration <= 0:
            raise UntrainedModelError(f"{model.stage} model has not been trained")
        if require_stage is not None and model.stage != require_stage:
            raise UntrainedModelError(f"expected a {require_stage} model, got {model.stage}")
        return model.denoiser()
    if not callable(model):
        raise TypeError("expected a Model or a callable denoiser")
    return model
