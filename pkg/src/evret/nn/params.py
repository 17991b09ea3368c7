"""Named-parameter registry with seeded initialization."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from evret.errors import ArgumentError, NumericError
from evret.nn.tensor import Tensor


class ParameterSet:
    """Ordered mapping of parameter names to trainable tensors.

    Weights are initialized uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) from
    a seeded generator; layer-norm gains start at 1 and shifts at 0 so the
    blocks begin as identity-scaled maps.
    """

    def __init__(self, seed: int):
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, shape: tuple[int, ...], fan_in: int | None = None) -> Tensor:
        if name in self._tensors:
            raise ArgumentError(f"duplicate parameter name {name!r}")
        if fan_in is None:
            fan_in = shape[0] if len(shape) > 1 else max(shape[0], 1)
        bound = 1.0 / np.sqrt(fan_in)
        data = self._rng.uniform(-bound, bound, size=shape)
        t = Tensor(data, requires_grad=True)
        self._tensors[name] = t
        return t

    def add_constant(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ArgumentError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._tensors.items())

    def num_scalars(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def validate_finite(self) -> None:
        for name, t in self._tensors.items():
            if not np.all(np.isfinite(t.data)):
                raise NumericError(f"parameter {name!r} contains non-finite values")

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            if name not in self._tensors:
                raise ArgumentError(f"unknown parameter {name!r} in state")
            t = self._tensors[name]
            if t.data.shape != value.shape:
                raise ArgumentError(
                    f"parameter {name!r}: shape {value.shape} does not match {t.data.shape}"
                )
            t.data = np.asarray(value, dtype=np.float64)


def add_layer_norm(ps: ParameterSet, prefix: str, dim: int) -> None:
    ps.add_constant(f"{prefix}.g", np.ones(dim))
    ps.add_constant(f"{prefix}.b", np.zeros(dim))


def add_linear(ps: ParameterSet, prefix: str, d_in: int, d_out: int) -> None:
    ps.add(f"{prefix}.w", (d_in, d_out), fan_in=d_in)
    ps.add(f"{prefix}.b", (d_out,), fan_in=d_in)
