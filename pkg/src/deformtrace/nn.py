"""Parameter containers: modules, linear layers, MLPs, layer norm."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class with recursive parameter discovery over attributes."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        found: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            name = f"{prefix}{key}" if prefix else key
            if isinstance(value, Tensor):
                if value.requires_grad:
                    found[name] = value
            elif isinstance(value, Module):
                found.update(value.named_parameters(f"{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        found.update(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        found[f"{name}.{i}"] = item
        return found

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ValueError(f"state mismatch: missing={missing} extra={extra}")
        for name, tens in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != tens.data.shape:
                raise ValueError(
                    f"shape mismatch for '{name}': {arr.shape} vs {tens.data.shape}"
                )
            tens.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    """y = x @ w + b. Weights uniform(+-1/sqrt(d_in)), bias zero.

    ``zero_init`` zeroes the weight too; used for offset and refinement heads
    that must start as the identity mapping of their residual path.
    """

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, zero_init: bool = False):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = T.uniform_init(rng, (d_in, d_out), fan_in=d_in)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_bias(x @ self.w, self.b)


class MLP(Module):
    """Relu MLP over the last axis; ``zero_last`` zeroes the output layer only,
    keeping earlier layers trainable so a zero-started head can still move."""

    def __init__(self, rng: np.random.Generator, dims: list[int], zero_last: bool = False):
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output dims")
        self.layers = [
            Linear(rng, dims[i], dims[i + 1], zero_init=zero_last and i == len(dims) - 2)
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class FFN(Module):
    """Two-layer relu feed-forward block applied pointwise."""

    def __init__(self, rng: np.random.Generator, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))
