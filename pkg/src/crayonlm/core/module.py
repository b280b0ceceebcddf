"""Minimal parameter container with recursive naming."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


class Module:
    """Objects holding Tensors, sub-Modules, or lists of Modules as attributes.

    Attribute order is insertion order, so parameter names are stable.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{k}", item

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def requires_grad_(self, flag: bool) -> "Module":
        for _, p in self.named_parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None


def normal_param(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor((rng.standard_normal(shape) * std).astype(np.float32), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)
