"""Layer building blocks on top of the tensor engine."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Parameter container. Attributes that are parameters, modules or lists of
    modules are discovered in assignment order, giving stable dotted names."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = params.keys() - state.keys()
            extra = state.keys() - params.keys()
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, arr in state.items():
            if name not in params:
                continue
            p = params[name]
            if p.shape != tuple(arr.shape):
                raise T.ShapeError(f"{name}: expected {p.shape}, got {tuple(arr.shape)}")
            p.data = np.array(arr, dtype=p.dtype)

    def set_frozen(self, frozen: bool = True) -> None:
        for p in self.parameters():
            p.frozen = frozen

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.zero_grad()
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def he_normal(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """Variance-preserving init for layers followed by ReLU."""
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = Parameter(xavier_uniform(rng, in_dim, out_dim, (in_dim, out_dim)), dtype=dtype)
        self.bias = Parameter(np.zeros(out_dim), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Parameter(np.ones(dim), dtype=dtype)
        self.beta = Parameter(np.zeros(dim), dtype=dtype)
        self._eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self._eps)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, kernel: int = 3,
                 stride: int = 1, padding: int = 1, dtype=np.float32):
        fan_in = kernel * kernel * in_ch
        self.weight = Parameter(he_normal(rng, fan_in, (kernel, kernel, in_ch, out_ch)), dtype=dtype)
        self.bias = Parameter(np.zeros(out_ch), dtype=dtype)
        self._stride = stride
        self._padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self._stride, self._padding)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = Parameter(rng.normal(0.0, 0.02, size=(num, dim)), dtype=dtype)

    def forward(self, ids) -> Tensor:
        return T.embedding(self.weight, ids)


class FFN(Module):
    """Two-layer MLP with ReLU."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, out_dim: int | None = None,
                 dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, out_dim or dim, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))
