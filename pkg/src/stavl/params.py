"""Named parameter tensors with per-tensor role and freeze flag."""

from __future__ import annotations

import zlib
from collections import OrderedDict

import numpy as np


class ParamStore:
    """Ordered mapping ``name -> ndarray`` plus metadata.

    ``role`` is the owning sub-module (``patch``, ``lste``, ``lsd``, ``fsra``,
    ``gstra``, ``fusion``, ``sequencer`` or ``lm``).
    """

    def __init__(self):
        self.tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        self.roles: dict[str, str] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, value: np.ndarray, role: str) -> np.ndarray:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        self.tensors[name] = np.asarray(value, dtype=np.float64)
        self.roles[name] = role
        return self.tensors[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self.tensors:
            raise KeyError(name)
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self, role: str | None = None) -> list[str]:
        return [n for n in self.tensors if role is None or self.roles[n] == role]

    def freeze_role(self, role: str, frozen: bool = True) -> None:
        for n in self.names(role):
            if frozen:
                self.frozen.add(n)
            else:
                self.frozen.discard(n)

    def trainable(self) -> list[str]:
        return [n for n in self.tensors if n not in self.frozen]

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, v in self.tensors.items():
            out.tensors[n] = v.copy()
        out.roles = dict(self.roles)
        out.frozen = set(self.frozen)
        return out

    def astype(self, dtype) -> "ParamStore":
        out = self.copy()
        for n in out.tensors:
            out.tensors[n] = out.tensors[n].astype(dtype)
        return out

    def size(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def equal(self, other: "ParamStore") -> bool:
        if list(self.tensors) != list(other.tensors):
            return False
        return all(np.array_equal(self[n], other[n]) for n in self.tensors)


def tensor_rng(seed: int, name: str) -> np.random.Generator:
    """Per-tensor generator so init is independent of which tensors exist."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def uniform_init(seed: int, name: str, shape, fan_in: int, scale: float = 1.0) -> np.ndarray:
    """Uniform with variance ``scale**2 / fan_in``, so unit-variance inputs keep unit variance."""
    a = scale * np.sqrt(3.0 / fan_in)
    return tensor_rng(seed, name).uniform(-a, a, size=shape)
