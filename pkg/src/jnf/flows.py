"""Conditional Masked Autoregressive Flows.

Each MADE block parameterises the *density* direction in a single pass:
given y it emits shift ``m(y)`` and log-scale ``a(y)`` with output i depending
only on y_<i, and the block inverts as ``u = (y - m) * exp(-a)``.  Sampling
runs the same network d times, filling one coordinate per pass.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .distributions import DiagGaussian, gaussian_log_density
from .nn import Mlp, Module, init_params

LOG_SCALE_BOUND = 5.0


def made_build_masks(widths: Sequence[int], d: int, seed: int = 0, context_dim: int = 0):
    """Connectivity masks for a MADE with hidden ``widths`` over ``d`` inputs.

    Returns one mask per layer, shaped (out, in) like the weights.  Context
    columns (appended after the d inputs / hidden units) are always connected.
    """
    widths = list(widths)
    if any(w < d for w in widths):
        raise ShapeError(f"hidden widths {widths} cannot carry all {d} degrees")
    rng = np.random.default_rng(seed)
    in_deg = np.arange(1, d + 1)
    degrees = [in_deg]
    for w in widths:
        if d == 1:
            deg = np.zeros(w, dtype=int)
        else:
            deg = rng.permutation(np.arange(w) % (d - 1) + 1)
        degrees.append(deg)
    masks = []
    for prev, cur in zip(degrees[:-1], degrees[1:]):
        m = (cur[:, None] >= prev[None, :]).astype(np.float64)
        masks.append(m)
    out_deg = np.concatenate([in_deg, in_deg])
    masks.append((out_deg[:, None] > degrees[-1][None, :]).astype(np.float64))
    if context_dim:
        masks[0] = np.hstack([masks[0], np.ones((masks[0].shape[0], context_dim))])
        masks[-1] = np.hstack([masks[-1], np.ones((masks[-1].shape[0], context_dim))])
    return masks


class MaskedLayer(Module):
    param_names = ("weight", "bias")

    def __init__(self, mask: np.ndarray, activation: str):
        self.mask = mask
        self.activation = activation
        self.weight = ad.parameter(np.zeros(mask.shape))
        self.bias = ad.parameter(np.zeros(mask.shape[0]))

    def __call__(self, x: Tensor) -> Tensor:
        w = ad.mul(self.weight, ad.constant(self.mask))
        h = ad.matmul(x, ad.transpose(w)) + self.bias
        return ad.tanh(h) if self.activation == "tanh" else h


class MadeBlock(Module):
    """Masked autoencoder emitting per-dimension shift and bounded log-scale."""

    def __init__(self, d: int, context_dim: int = 0, hidden: Sequence[int] = (128, 128),
                 seed: int = 0):
        self.d = d
        self.context_dim = context_dim
        self.hidden = list(hidden)
        self.masks = made_build_masks(self.hidden, d, seed, context_dim)
        self.layers = [MaskedLayer(m, "tanh") for m in self.masks[:-1]]
        self.head = MaskedLayer(self.masks[-1], "identity")

    def shift_log_scale(self, y, c=None) -> tuple[Tensor, Tensor]:
        y = ad.constant(y)
        if y.shape[-1] != self.d:
            raise ShapeError(f"MADE over {self.d} dims got input width {y.shape[-1]}")
        if self.context_dim:
            if c is None or ad.constant(c).shape[-1] != self.context_dim:
                raise ShapeError(f"MADE expects context width {self.context_dim}")
            c = ad.constant(c)
            h = ad.concat([y, c], axis=1)
        else:
            h = y
        for layer in self.layers:
            h = layer(h)
        if self.context_dim:
            h = ad.concat([h, c], axis=1)
        out = self.head(h)
        m = ad.slice_cols(out, 0, self.d)
        raw = ad.slice_cols(out, self.d, 2 * self.d)
        a = ad.scale(ad.tanh(ad.scale(raw, 1.0 / LOG_SCALE_BOUND)), LOG_SCALE_BOUND)
        return m, a

    def inverse(self, y, c=None) -> tuple[Tensor, Tensor]:
        """Density direction: (u, log|det du/dy|) with log-det = -sum(a)."""
        y = ad.constant(y)
        m, a = self.shift_log_scale(y, c)
        u = ad.mul(y - m, ad.exp(ad.negate(a)))
        return u, ad.negate(ad.sum(a, axis=1))

    def forward(self, u: np.ndarray, c=None) -> tuple[np.ndarray, np.ndarray]:
        """Sampling direction, d sequential passes; returns (y, log|det dy/du|)."""
        u = np.asarray(u, dtype=np.float64)
        c = None if c is None else ad.constant(c).data
        y = np.zeros_like(u)
        a = np.zeros_like(u)
        for i in range(self.d):
            m_t, a_t = self.shift_log_scale(y, c)
            y[:, i] = u[:, i] * np.exp(a_t.data[:, i]) + m_t.data[:, i]
            a[:, i] = a_t.data[:, i]
        return y, a.sum(axis=1)


class FlowStack(Module):
    """Context-conditioned Gaussian base followed by MADE blocks.

    Consecutive blocks are separated by a reversal of the coordinates, and the
    original coordinate order is restored after the last block.  With
    ``n_flows=0`` this is a plain conditional diagonal Gaussian.
    """

    def __init__(self, d: int, context_dim: int, n_flows: int = 2,
                 made_hidden: Sequence[int] = (128, 128), base_hidden: Sequence[int] = (128,),
                 seed: int = 0):
        if context_dim < 1:
            raise ShapeError("FlowStack needs a context of width >= 1")
        self.d = d
        self.context_dim = context_dim
        self.n_flows = n_flows
        self.base = Mlp([context_dim, *base_hidden, 2 * d], hidden="tanh")
        self.blocks = [MadeBlock(d, context_dim, made_hidden, seed=seed + k)
                       for k in range(n_flows)]
        self.reverse = np.arange(d)[::-1].copy()

    @property
    def _restore_order(self) -> bool:
        # an odd number of inter-block reversals is undone at the end, so a
        # stack of identity blocks is the identity map
        return self.n_flows > 1 and (self.n_flows - 1) % 2 == 1

    def base_gaussian(self, c) -> DiagGaussian:
        out = self.base(c)
        return DiagGaussian(ad.slice_cols(out, 0, self.d), ad.slice_cols(out, self.d, 2 * self.d))

    def peel(self, z, c) -> tuple[Tensor, Tensor]:
        """Map z_K back to z_0; returns (z_0, summed density-direction log-det)."""
        y = ad.constant(z)
        if y.ndim != 2 or y.shape[1] != self.d:
            raise ShapeError(f"flow over {self.d} dims got z of shape {y.shape}")
        logdet = ad.constant(np.zeros(y.shape[0]))
        if self._restore_order:
            y = ad.permute_cols(y, self.reverse)
        for k in reversed(range(self.n_flows)):
            y, ld = self.blocks[k].inverse(y, c)
            logdet = logdet + ld
            if k > 0:
                y = ad.permute_cols(y, self.reverse)
        return y, logdet

    def regenerate(self, z0, c) -> tuple[np.ndarray, np.ndarray]:
        """Map z_0 forward through every block; returns (z_K, sampling log-det)."""
        y = np.asarray(z0, dtype=np.float64)
        logdet = np.zeros(y.shape[0])
        for k in range(self.n_flows):
            if k > 0:
                y = y[:, self.reverse]
            y, ld = self.blocks[k].forward(y, c)
            logdet += ld
        if self._restore_order:
            y = y[:, self.reverse]
        return y, logdet

    def log_density(self, z, c) -> Tensor:
        c = ad.constant(c)
        z0, logdet = self.peel(z, c)
        return gaussian_log_density(self.base_gaussian(c), z0) + logdet

    def sample(self, c, n: int | None = None, rng: np.random.Generator | None = None,
               seed: int | None = None) -> np.ndarray:
        """Draw one z per context row (or ``n`` rows for a single context)."""
        rng = rng if rng is not None else np.random.default_rng(seed)
        c = ad.constant(c).data
        if n is not None:
            if c.ndim == 1:
                c = c[None, :]
            if c.shape[0] == 1:
                c = np.repeat(c, n, axis=0)
        base = self.base_gaussian(c)
        z0 = base.mu.data + base.std * rng.standard_normal(base.mu.shape)
        return self.regenerate(z0, c)[0]


def flow_log_density(stack: FlowStack, z, c) -> Tensor:
    return stack.log_density(z, c)


def flow_sample(stack: FlowStack, c, n: int, seed: int) -> np.ndarray:
    return stack.sample(c, n=n, seed=seed)


def build_flow_stack(d: int, context_dim: int, n_flows: int = 2, seed: int = 0,
                     made_hidden: Sequence[int] = (128, 128), base_hidden: Sequence[int] = (128,),
                     zero_init_heads: bool = True) -> FlowStack:
    """Glorot-initialised stack; MADE output heads start at zero (identity flow)."""
    stack = FlowStack(d, context_dim, n_flows, made_hidden, base_hidden, seed=seed)
    init_params(stack, seed)
    if zero_init_heads:
        for block in stack.blocks:
            block.head.weight.data = np.zeros(block.head.weight.shape)
            block.head.bias.data = np.zeros(block.head.bias.shape)
    return stack
