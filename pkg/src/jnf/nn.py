"""Fully connected layers, Glorot initialisation and the Adam optimiser."""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

ACTIVATIONS = {
    "tanh": ad.tanh,
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "identity": lambda x: x,
}


class OptimizerError(RuntimeError):
    """Raised when an update would inject non-finite values into a parameter."""


class Module:
    """Base class: parameters are discovered by walking instance attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and key in self._param_keys():
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def _param_keys(self) -> tuple[str, ...]:
        return getattr(self, "param_names", ())

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {value.shape}")
            p.data = value.copy()

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


@contextmanager
def frozen(*modules: Module):
    """Temporarily stop parameters of ``modules`` from entering the tape."""
    params = [p for m in modules for p in m.parameters()]
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class DenseLayer(Module):
    """y = act(x W^T + b) with W stored as (out, in)."""

    param_names = ("weight", "bias")

    def __init__(self, n_in: int, n_out: int, activation: str = "identity"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.n_in, self.n_out = n_in, n_out
        self.activation = activation
        self.weight = ad.parameter(np.zeros((n_out, n_in)))
        self.bias = ad.parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"layer expects width {self.n_in}, got {x.shape[-1]}")
        return ACTIVATIONS[self.activation](ad.matmul(x, ad.transpose(self.weight)) + self.bias)


class Mlp(Module):
    """Stack of dense layers; hidden layers share one activation."""

    def __init__(self, widths: Sequence[int], hidden: str = "tanh", output: str = "identity"):
        if len(widths) < 2:
            raise ValueError("an Mlp needs at least input and output widths")
        self.widths = list(widths)
        n = len(widths) - 1
        self.layers = [
            DenseLayer(widths[i], widths[i + 1], hidden if i < n - 1 else output)
            for i in range(n)
        ]

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def __call__(self, x) -> Tensor:
        x = ad.constant(x)
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"Mlp expects input width {self.n_in}, got {x.shape[-1]}")
        for layer in self.layers:
            x = layer(x)
        return x

    def features(self, x) -> Tensor:
        """Activations of the last hidden layer."""
        x = ad.constant(x)
        for layer in self.layers[:-1]:
            x = layer(x)
        return x


def init_params(net: Module, seed) -> Module:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    for name, p in net.named_parameters():
        if name.endswith("bias"):
            p.data = np.zeros(p.shape)
        else:
            p.data = glorot_uniform(rng, *p.shape)
    return net


@dataclass
class Adam:
    """Adam with bias correction over a fixed list of named parameters.

    Parameters are updated in place, so call :meth:`step` only once the
    gradients of the current tape have been computed.
    """

    params: list[tuple[str, Tensor]]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    _scratch: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.params = list(self.params)
        if not self.m:
            self.m = [np.zeros(p.shape) for _, p in self.params]
            self.v = [np.zeros(p.shape) for _, p in self.params]

    @classmethod
    def for_module(cls, module: Module, **kwargs) -> "Adam":
        return cls(list(module.named_parameters()), **kwargs)

    @property
    def tensors(self) -> list[Tensor]:
        return [p for _, p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameters")
        for (name, p), g in zip(self.params, grads):
            if g.shape != p.shape:
                raise ShapeError(f"{name}: gradient shape {g.shape} != {p.shape}")
            if not np.all(np.isfinite(g)):
                raise OptimizerError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        step = self.lr / c1
        if len(self._scratch) != len(self.params):
            self._scratch = [np.empty(p.shape) for _, p in self.params]
        for i, ((_, p), g) in enumerate(zip(self.params, grads)):
            m, v, buf = self.m[i], self.v[i], self._scratch[i]
            np.multiply(g, 1.0 - self.beta1, out=buf)
            m *= self.beta1
            m += buf
            np.multiply(g, g, out=buf)
            buf *= 1.0 - self.beta2
            v *= self.beta2
            v += buf
            np.multiply(v, 1.0 / c2, out=buf)
            np.sqrt(buf, out=buf)
            buf += self.eps
            np.divide(m, buf, out=buf)
            buf *= step
            # in place: gradients for this step have already been taken
            p.data -= buf


def adam_step(state: Adam, grads: Sequence[np.ndarray]) -> Adam:
    state.step(grads)
    return state
