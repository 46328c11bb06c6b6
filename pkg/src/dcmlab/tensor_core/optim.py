from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamState
              ) -> tuple[ParamStore, AdamState]:
    """One bias-corrected Adam update of the trainable subset.

    Returns a new store and a new state; the inputs are left untouched and
    frozen arrays are carried over as the same objects.
    """
    trainable = set(params.trainable_names())
    if set(grads) != trainable:
        missing = sorted(trainable - set(grads))
        extra = sorted(set(grads) - trainable)
        raise KeyError(f"gradients must cover exactly the trainable set (missing={missing}, extra={extra})")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    m_new, v_new, updates = {}, {}, {}
    for name in params.trainable_names():
        p, g = params[name], grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        g = g.astype(p.dtype, copy=False)
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        m_new[name], v_new[name] = m, v
        updates[name] = (p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    new_state = AdamState(state.lr, b1, b2, state.eps, step, m_new, v_new)
    return params.replace(updates), new_state


def ema_update(target: ParamStore, online: ParamStore, decay: float) -> ParamStore:
    """Return decay * target + (1 - decay) * online for trainable parameters; frozen ones are carried over."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must lie in [0, 1], got {decay}")
    if not target.same_layout(online):
        raise ValueError("EMA target and online stores differ in names or shapes")
    return target.replace({
        n: (decay * target[n] + (1.0 - decay) * online[n]).astype(target[n].dtype)
        for n in target if online.trainable(n)
    })


def grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
