"""Diagonal Gaussians, the standard-normal prior and the Bernoulli pixel likelihood."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

LOG_2PI = float(np.log(2.0 * np.pi))
PROB_EPS = 1e-7


@dataclass
class DiagGaussian:
    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        self.mu = ad.constant(self.mu)
        self.log_var = ad.constant(self.log_var)
        if self.mu.shape != self.log_var.shape:
            raise ShapeError(f"mu {self.mu.shape} and log_var {self.log_var.shape} differ")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var.data)

    def log_density(self, z) -> Tensor:
        return gaussian_log_density(self, z)

    def sample(self, rng: np.random.Generator) -> Tensor:
        return reparam_sample(self, rng)

    def entropy(self) -> np.ndarray:
        return 0.5 * np.sum(LOG_2PI + 1.0 + self.log_var.data, axis=-1)


@dataclass(frozen=True)
class StandardNormalPrior:
    dim: int

    def as_gaussian(self, batch: int) -> DiagGaussian:
        zeros = np.zeros((batch, self.dim))
        return DiagGaussian(zeros, zeros.copy())

    def log_density(self, z) -> Tensor:
        z = ad.constant(z)
        if z.shape[-1] != self.dim:
            raise ShapeError(f"prior has dimension {self.dim}, got {z.shape[-1]}")
        return ad.add_scalar(ad.scale(ad.sum(ad.square(z), axis=-1 if z.ndim == 1 else 1), -0.5),
                             -0.5 * self.dim * LOG_2PI)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self.dim))


def gaussian_log_density(g: DiagGaussian, z) -> Tensor:
    """Per-row log N(z; mu, exp(log_var)), summed over dimensions."""
    z = ad.constant(z)
    if z.shape != g.mu.shape:
        raise ShapeError(f"z {z.shape} does not match Gaussian {g.mu.shape}")
    diff = z - g.mu
    quad = ad.mul(ad.square(diff), ad.exp(ad.negate(g.log_var)))
    per_dim = ad.add_scalar(ad.scale(ad.add(g.log_var, quad), -0.5), -0.5 * LOG_2PI)
    return ad.sum(per_dim, axis=1) if per_dim.ndim == 2 else ad.sum(per_dim)


def reparam_sample(g: DiagGaussian, rng: np.random.Generator, noise: np.ndarray | None = None) -> Tensor:
    """z = mu + exp(log_var / 2) * eps with eps ~ N(0, I)."""
    if noise is None:
        noise = rng.standard_normal(g.mu.shape)
    return g.mu + ad.mul(ad.exp(ad.scale(g.log_var, 0.5)), ad.constant(noise))


def kl_diag_gaussians(a: DiagGaussian, b: DiagGaussian) -> Tensor:
    """KL(a || b) per row, closed form."""
    if a.mu.shape != b.mu.shape:
        raise ShapeError(f"KL between shapes {a.mu.shape} and {b.mu.shape}")
    var_ratio = ad.exp(a.log_var - b.log_var)
    mean_term = ad.mul(ad.square(a.mu - b.mu), ad.exp(ad.negate(b.log_var)))
    per_dim = ad.scale(ad.add_scalar(var_ratio + mean_term - (a.log_var - b.log_var), -1.0), 0.5)
    return ad.sum(per_dim, axis=1) if per_dim.ndim == 2 else ad.sum(per_dim)


def kl_to_standard_normal(a: DiagGaussian) -> Tensor:
    zeros = np.zeros(a.mu.shape)
    return kl_diag_gaussians(a, DiagGaussian(zeros, zeros.copy()))


def bernoulli_log_likelihood(probs, x) -> Tensor:
    """Sum over pixels of x log p + (1 - x) log(1 - p), with p clamped away from 0 and 1."""
    probs = ad.constant(probs)
    x = np.asarray(x, dtype=np.float64)
    if probs.shape != x.shape:
        raise ShapeError(f"probs {probs.shape} vs data {x.shape}")
    if not np.all((x == 0.0) | (x == 1.0)):
        raise ValueError("Bernoulli observations must be binary")
    p = ad.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    ll = ad.mul(ad.log(p), ad.constant(x)) + ad.mul(ad.log(ad.add_scalar(ad.negate(p), 1.0)), ad.constant(1.0 - x))
    return ad.sum(ll, axis=1) if ll.ndim == 2 else ad.sum(ll)
