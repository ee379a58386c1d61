"""Named parameter storage and tensor helpers."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from splitvfl.errors import NonFiniteError

DTYPE = np.float32


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=dtype)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(f"{what} has {bad} non-finite value(s)")
    return x


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(repr=False)
    velocity: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_array(cls, name: str, value: np.ndarray) -> "Parameter":
        return cls(name, value, np.zeros_like(value))


class ParameterStore:
    """Insertion-ordered mapping of parameter name to :class:`Parameter`.

    A store can hold every layer of a model; layers see their own slice
    through :meth:`view`, keyed by the part of the name after the prefix.
    """

    def __init__(self, params: list[Parameter] | None = None):
        self._params: dict[str, Parameter] = {}
        for p in params or ():
            self.add(p.name, p.value, p.grad)

    def add(self, name: str, value: np.ndarray, grad: np.ndarray | None = None) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.ascontiguousarray(value)
        grad = np.zeros_like(value) if grad is None else np.ascontiguousarray(grad)
        if grad.shape != value.shape:
            raise ValueError(f"gradient shape {grad.shape} != parameter shape {value.shape} for {name!r}")
        p = Parameter(name, value, grad)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def view(self, prefix: str) -> dict[str, Parameter]:
        n = len(prefix)
        return {k[n:]: p for k, p in self._params.items() if k.startswith(prefix)}

    def num_elements(self) -> int:
        return sum(p.value.size for p in self)

    def zero_grad(self) -> None:
        for p in self:
            p.grad[...] = 0

    def copy(self, dtype=None) -> "ParameterStore":
        out = ParameterStore()
        for p in self:
            value = p.value.astype(dtype or p.value.dtype, copy=True)
            q = out.add(p.name, value, p.grad.astype(value.dtype, copy=True))
            if p.velocity is not None:
                q.velocity = p.velocity.astype(value.dtype, copy=True)
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self}

    def digest(self) -> str:
        """SHA-256 over names, shapes and raw value bytes, in store order."""
        h = hashlib.sha256()
        for p in self:
            h.update(p.name.encode())
            h.update(repr(p.value.shape).encode())
            h.update(np.ascontiguousarray(p.value).tobytes())
        return h.hexdigest()

    def bit_equal(self, other: "ParameterStore") -> bool:
        if self.names() != other.names():
            return False
        return all(
            a.value.dtype == b.value.dtype
            and a.value.shape == b.value.shape
            and a.value.tobytes() == b.value.tobytes()
            for a, b in zip(self, other)
        )

    def __repr__(self) -> str:
        return f"ParameterStore({len(self)} tensors, {self.num_elements()} elements)"
