"""Minimal parameter containers on top of :mod:`superkernel.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, default_dtype, layer_norm


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=default_dtype()), requires_grad=True)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return param(rng.uniform(-bound, bound, size=shape or (fan_in, fan_out)))


def zeros(*shape) -> Tensor:
    return param(np.zeros(shape))


def ones(*shape) -> Tensor:
    return param(np.ones(shape))


class Module:
    """Walks attributes to find trainable tensors and submodules."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for key, value in state.items():
            if key not in own:
                continue
            if own[key].shape != tuple(value.shape):
                raise ValueError(f"{key}: shape {value.shape} != {own[key].shape}")
            own[key].data = np.array(value, dtype=own[key].dtype)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = xavier(rng, d_in, d_out)
        self.bias = zeros(d_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6):
        self.gamma = ones(d)
        self.beta = zeros(d)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)
