"""Named parameter storage and hierarchical lookup."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Mapping

import numpy as np

from .tensor import Tape, Tensor


class ParameterStore:
    """Ordered ``name -> ndarray`` map of learnable values.

    Names are dotted paths (``stage1.block0.attn.q.weight``). Iteration order
    is insertion order, which :func:`maformer.model.init_params` fixes per
    config.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None, seed: int | None = None):
        self.arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        self.seed = seed
        if arrays:
            for k, v in arrays.items():
                self.add(k, v)

    def add(self, name: str, value: np.ndarray):
        if name in self.arrays:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.arrays[name] = np.ascontiguousarray(value)

    def __getitem__(self, name):
        return self.arrays[name]

    def __contains__(self, name):
        return name in self.arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    def names(self) -> list[str]:
        return list(self.arrays)

    def num_elements(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore({k: v.astype(dtype) for k, v in self.arrays.items()}, self.seed)

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self.arrays.items()}, self.seed)

    def bind(self, tape: Tape | None = None) -> "Scope":
        """Wrap every array as a tensor; with a tape, each becomes a watched leaf."""
        if tape is None:
            tensors = {k: Tensor._wrap(v, None) for k, v in self.arrays.items()}
        else:
            tensors = {k: tape.watch(v) for k, v in self.arrays.items()}
        return Scope(tensors)

    def equals(self, other: "ParameterStore") -> bool:
        if self.names() != other.names():
            return False
        return all(a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)
                   for a, b in zip(self.arrays.values(), other.arrays.values()))


class Scope:
    """Prefix view over a ``name -> Tensor`` map."""

    __slots__ = ("tensors", "prefix")

    def __init__(self, tensors: dict, prefix: str = ""):
        self.tensors = tensors
        self.prefix = prefix

    def __getitem__(self, name) -> Tensor:
        return self.tensors[self.prefix + name]

    def __contains__(self, name):
        return self.prefix + name in self.tensors

    def get(self, name, default=None):
        return self.tensors.get(self.prefix + name, default)

    def sub(self, name: str) -> "Scope":
        return Scope(self.tensors, f"{self.prefix}{name}.")

    def grads(self) -> dict[str, np.ndarray]:
        """Gradients of every tensor in the map; zeros where none reached."""
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self.tensors.items()}
