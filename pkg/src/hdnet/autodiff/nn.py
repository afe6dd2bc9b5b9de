"""Parameter containers and the layers the network is assembled from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Attribute-registered tree of parameters, buffers and sub-modules.

    Registration order is attribute assignment order, which fixes the naming
    and iteration order of parameters.
    """

    training: bool = True

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            value = ModuleList(value)
            self._children[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, key: str, value: np.ndarray) -> None:
        self._buffers[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for k, p in self._params.items():
            yield prefix + k, p
        for k, child in self._children.items():
            yield from child.named_parameters(prefix + k + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, b in self._buffers.items():
            yield prefix + k, b
        for k, child in self._children.items():
            yield from child.named_buffers(prefix + k + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(expected) | set(buffers)) - set(state)
        unexpected = set(state) - set(expected) - set(buffers)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in expected.items():
            if p.data.shape != state[name].shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data[...] = state[name]
        for name, b in buffers.items():
            b[...] = state[name]


class ModuleList(Module):
    def __init__(self, items):
        super().__init__()
        object.__setattr__(self, "_items", list(items))
        for i, m in enumerate(self._items):
            self._children[str(i)] = m

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, kernel: int = 3, stride: int = 1,
                 padding: int | None = None, bias: bool = True):
        super().__init__()
        fan_in = c_in * kernel * kernel
        self.weight = Tensor(fan_in_uniform(rng, (c_out, c_in, kernel, kernel), fan_in), requires_grad=True)
        if bias:
            self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        else:
            self.bias = None
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, rng, n_in: int, n_out: int, bias: bool = True):
        super().__init__()
        self.weight = Tensor(fan_in_uniform(rng, (n_out, n_in), n_in), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    """Batch norm over channel axis 1 of NC or NCHW tensors."""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        super().__init__()
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class ConvBNReLU(Module):
    def __init__(self, rng, c_in: int, c_out: int, kernel: int = 3, stride: int = 1):
        super().__init__()
        self.conv = Conv2d(rng, c_in, c_out, kernel, stride, bias=False)
        self.bn = BatchNorm(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        return F.relu(self.bn(self.conv(x)))
