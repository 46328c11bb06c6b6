from __future__ import annotations

import enum
from typing import Iterator

import numpy as np

from .autodiff import Tensor


class Group(str, enum.Enum):
    PSI = "psi"                      # timestep-dependent embedding/modulation
    LAMBDA = "lambda"                # attention projections
    PSI_PRIME = "psi_prime"          # replacement timestep layers of the detail expert
    LAMBDA_DAGGER = "lambda_dagger"  # low-rank adapters on attention projections
    OTHER = "other"

    @property
    def is_adapter(self) -> bool:
        return self in (Group.PSI_PRIME, Group.LAMBDA_DAGGER)


class ParamStore:
    """Ordered name -> array map with an immutable group tag and a trainable flag per name.

    Arrays are treated as values: optimizers and EMA return new stores and
    never write into an existing array.
    """

    def __init__(self):
        self._data: dict[str, np.ndarray] = {}
        self._group: dict[str, Group] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, group: Group | str, trainable: bool = True) -> None:
        if name in self._data:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._data[name] = np.asarray(value)
        self._group[name] = Group(group)
        self._trainable[name] = bool(trainable)

    def __contains__(self, name: str) -> bool:
        return name in self._data

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def names(self) -> list[str]:
        return list(self._data)

    def group(self, name: str) -> Group:
        return self._group[name]

    def trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n in self._data if self._trainable[n]]

    def names_in(self, *groups: Group) -> list[str]:
        return [n for n in self._data if self._group[n] in groups]

    def count(self, names=None) -> int:
        names = self._data if names is None else names
        return int(sum(self._data[n].size for n in names))

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n in self._data:
            out.add(n, self._data[n].copy(), self._group[n], self._trainable[n])
        return out

    def replace(self, updates: dict[str, np.ndarray]) -> "ParamStore":
        """New store sharing untouched arrays, with ``updates`` swapped in."""
        out = ParamStore()
        for n in self._data:
            value = updates.get(n, self._data[n])
            if value.shape != self._data[n].shape:
                raise ValueError(f"shape mismatch for {n}: {value.shape} vs {self._data[n].shape}")
            out.add(n, value, self._group[n], self._trainable[n])
        return out

    def with_trainable(self, names) -> "ParamStore":
        names = set(names)
        unknown = names - set(self._data)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        out = ParamStore()
        for n in self._data:
            out.add(n, self._data[n], self._group[n], n in names)
        return out

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for n in self._data:
            out.add(n, self._data[n].astype(dtype), self._group[n], self._trainable[n])
        return out

    def same_layout(self, other: "ParamStore") -> bool:
        return (list(self._data) == list(other._data)
                and all(self._data[n].shape == other._data[n].shape for n in self._data))

    def bind(self, track: bool = True) -> "Binding":
        return Binding(self, track)


class Binding:
    """Leaf tensors for one forward pass over a store.

    With ``track=True`` trainable parameters become gradient-tracked leaves;
    everything else is a constant.
    """

    def __init__(self, store: ParamStore, track: bool = True):
        self.store = store
        self.leaves = {n: Tensor(store[n], requires_grad=track and store.trainable(n), name=n)
                       for n in store}

    def __getitem__(self, name: str) -> Tensor:
        return self.leaves[name]

    def __contains__(self, name: str) -> bool:
        return name in self.leaves

    def tracked(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.leaves.items() if t.requires_grad]
