from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor, backward, precision
from .params import Binding, ParamStore


class NondeterminismError(RuntimeError):
    pass


@dataclass(frozen=True)
class GradCheckEntry:
    name: str
    max_rel_error: float
    checked: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]

    @property
    def max_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def __str__(self) -> str:
        return "\n".join(f"{e.name:40s} {e.max_rel_error:.3e} ({e.checked} elems)" for e in self.entries)


def grad_check(closure: Callable[[Binding], Tensor], params: ParamStore, h: float = 1e-4,
               max_elements: int | None = None, seed: int = 0, floor: float = 1e-7,
               rel_floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences in float64.

    The error for a parameter is max|analytic - numeric| over the checked
    elements, divided by the larger of the two gradients' max magnitudes
    (never below ``floor``, nor below ``rel_floor`` times the largest gradient
    anywhere in the check, so structurally zero gradients are judged against
    the overall gradient scale). ``max_elements`` checks a random subset of each
    tensor. Entries are sorted by descending error.
    """
    with precision(np.float64):
        store = params.astype(np.float64)

        def value(s: ParamStore) -> float:
            out = closure(s.bind(track=False))
            if out.data.size != 1:
                raise ValueError("closure must return a scalar")
            return float(out.data.reshape(()))

        first, second = value(store), value(store)
        if first != second:
            raise NondeterminismError(f"closure returned {first!r} then {second!r} for identical inputs")

        binding = store.bind(track=True)
        analytic = backward(closure(binding), binding.tracked())

        rng = np.random.default_rng(seed)
        results = []
        for name in store.trainable_names():
            base = store[name]
            flat_idx = np.arange(base.size)
            if max_elements is not None and base.size > max_elements:
                flat_idx = np.sort(rng.choice(base.size, size=max_elements, replace=False))
            numeric = np.empty(len(flat_idx))
            for k, i in enumerate(flat_idx):
                plus, minus = base.copy(), base.copy()
                plus.flat[i] += h
                minus.flat[i] -= h
                numeric[k] = (value(store.replace({name: plus})) - value(store.replace({name: minus}))) / (2 * h)
            results.append((name, analytic[name].reshape(-1), flat_idx, numeric))
        overall = max((max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0)) for _, a, _, n in results),
                      default=0.0)
        entries = []
        for name, a_full, flat_idx, numeric in results:
            scale = max(np.abs(a_full).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor,
                        rel_floor * overall)
            err = float(np.abs(a_full[flat_idx] - numeric).max(initial=0.0) / scale)
            entries.append(GradCheckEntry(name, err, len(flat_idx)))
    entries.sort(key=lambda e: e.max_rel_error, reverse=True)
    return GradCheckReport(entries)
