from __future__ import annotations

from typing import Iterator, Mapping

import numpy as np

from .tensor import Tensor, default_dtype

META = "META"
BASE = "BASE"


class ParamSet:
    """Named parameter tensors, each tagged META (adapted in the inner loop) or BASE."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._tags: dict[str, str] = {}

    def add(self, name: str, value, tag: str) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        if tag not in (META, BASE):
            raise ValueError(f"unknown partition tag {tag!r}")
        t = Tensor(np.array(value, dtype=default_dtype()), requires_grad=True, name=name)
        self._params[name] = t
        self._tags[name] = tag
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def tag(self, name: str) -> str:
        return self._tags[name]

    def names(self, tag: str | None = None) -> list[str]:
        return [n for n in self._params if tag is None or self._tags[n] == tag]

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self._params)

    def numel(self, tag: str | None = None) -> int:
        return sum(self._params[n].size for n in self.names(tag))

    def assign(self, values: Mapping[str, np.ndarray]) -> None:
        """Replace parameter values in place (new leaf tensors, same names)."""
        for name, v in values.items():
            if name not in self._params:
                raise KeyError(f"unknown parameter {name!r}")
            old = self._params[name]
            v = np.asarray(v, dtype=default_dtype())
            if v.shape != old.shape:
                raise ValueError(f"{name}: shape {v.shape} != {old.shape}")
            self._params[name] = Tensor(v.copy(), requires_grad=True, name=name)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def clone(self) -> "ParamSet":
        out = ParamSet()
        for n, t in self._params.items():
            out.add(n, t.data.copy(), self._tags[n])
        return out
