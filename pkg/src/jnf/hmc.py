"""Product-of-experts subset posteriors sampled with Hamiltonian Monte Carlo.

The target for a subset S of modalities is

    log f(z) = sum_{j in S} log q_j(z | x_j) - (|S| - 1) log p(z)

known up to its normaliser.  Chains are vectorised: ``z`` has one row per
chain and every per-chain quantity (energy, acceptance) is a vector.
"""
from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .distributions import DiagGaussian, StandardNormalPrior
from .nn import frozen

log = logging.getLogger(__name__)

CHUNK = 256


class SamplingError(RuntimeError):
    pass


class Expert(Protocol):
    """A conditional density already bound to its observation, one row per chain."""

    def log_density(self, z: ad.Tensor) -> ad.Tensor: ...

    def sample(self, rng: np.random.Generator) -> np.ndarray: ...

    def take(self, index: np.ndarray) -> "Expert": ...


@dataclass
class GaussianExpert:
    mu: np.ndarray
    log_var: np.ndarray

    def log_density(self, z):
        return DiagGaussian(self.mu, self.log_var).log_density(z)

    def sample(self, rng):
        return self.mu + np.exp(0.5 * self.log_var) * rng.standard_normal(self.mu.shape)

    def take(self, index):
        return GaussianExpert(self.mu[index], self.log_var[index])


@dataclass
class FlowExpert:
    """A unimodal flow posterior with its context precomputed for every chain."""

    flow: object
    context: np.ndarray
    modules: tuple = ()

    def log_density(self, z):
        return self.flow.log_density(z, self.context)

    def sample(self, rng):
        return self.flow.sample(self.context, rng=rng)

    def take(self, index):
        return FlowExpert(self.flow, self.context[index], self.modules)


def flow_expert(posterior, x: np.ndarray, n: int | None = None) -> FlowExpert:
    """Bind a :class:`UnimodalPosterior` to observations (or repeat one observation n times)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if n is not None and len(x) == 1:
        x = np.repeat(x, n, axis=0)
    return FlowExpert(posterior.flow, posterior.context(x).data, (posterior,))


@dataclass
class SubsetPosteriorTarget:
    experts: Sequence[Expert]
    prior: StandardNormalPrior

    def __post_init__(self):
        if len(self.experts) < 1:
            raise ValueError("a subset posterior needs at least one expert")

    @property
    def size(self) -> int:
        return len(self.experts)

    def take(self, index) -> "SubsetPosteriorTarget":
        return SubsetPosteriorTarget([e.take(index) for e in self.experts], self.prior)

    def log_density(self, z) -> ad.Tensor:
        total = None
        for e in self.experts:
            lp = e.log_density(z)
            total = lp if total is None else ad.add(total, lp)
        if self.size > 1:
            total = ad.sub(total, ad.scale(self.prior.log_density(z), self.size - 1))
        return total


def target_log_density(t: SubsetPosteriorTarget, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-chain log f(z) and its gradient in z."""
    leaf = ad.parameter(np.asarray(z, dtype=np.float64))
    with ad.Tape() as tape:
        lp = t.log_density(leaf)
        grad, = tape.gradient(ad.sum(lp), [leaf])
    return lp.data, grad


def leapfrog(t: SubsetPosteriorTarget, z: np.ndarray, v: np.ndarray, eps: float, l: int,
             grad: np.ndarray | None = None):
    """``l`` leapfrog steps on H(z, v) = -log f(z) + |v|^2 / 2.

    Returns (z', v', log f(z'), grad log f(z')); with l == 0 the inputs come back untouched.
    """
    if l < 0:
        raise ValueError("number of leapfrog steps must be >= 0")
    z = np.array(z, dtype=np.float64)
    v = np.array(v, dtype=np.float64)
    if grad is None or l == 0:
        logf, grad = target_log_density(t, z)
    else:
        logf = None
    for _ in range(l):
        v = v + 0.5 * eps * grad
        z = z + eps * v
        logf, grad = target_log_density(t, z)
        if np.isnan(grad).any():
            raise SamplingError("NaN gradient in leapfrog integration")
        v = v + 0.5 * eps * grad
    return z, v, logf, grad


@dataclass
class HmcConfig:
    n_transitions: int = 100
    leapfrog_steps: int = 10
    step_size: float = 0.05
    seed: int = 0
    adapt: bool = True
    warmup: int = 20
    target_accept: float = 0.4
    max_halvings: int = 10
    init: str = "expert"  # or "prior"

    def __post_init__(self):
        if self.leapfrog_steps < 0:
            raise ValueError("leapfrog_steps must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.init not in ("expert", "prior"):
            raise ValueError(f"unknown initialisation rule {self.init!r}")


@dataclass
class HmcChain:
    z: np.ndarray
    logf: np.ndarray
    grad: np.ndarray
    accepted: np.ndarray
    transitions: int = 0
    last_alpha: np.ndarray | None = None

    @classmethod
    def start(cls, t: SubsetPosteriorTarget, z0: np.ndarray) -> "HmcChain":
        logf, grad = target_log_density(t, z0)
        return cls(np.array(z0, dtype=np.float64), logf, grad, np.zeros(len(z0), dtype=int))


def hmc_transition(t: SubsetPosteriorTarget, chain: HmcChain, cfg: HmcConfig,
                   rng: np.random.Generator, step_size: float | None = None) -> HmcChain:
    """One Metropolis-adjusted HMC move for every chain."""
    eps = cfg.step_size if step_size is None else step_size
    v0 = rng.standard_normal(chain.z.shape)
    h0 = -chain.logf + 0.5 * np.sum(v0 * v0, axis=1)
    z1, v1, logf1, grad1 = leapfrog(t, chain.z, v0, eps, cfg.leapfrog_steps, chain.grad)
    h1 = -logf1 + 0.5 * np.sum(v1 * v1, axis=1)
    with np.errstate(over="ignore", invalid="ignore"):
        alpha = np.minimum(1.0, np.exp(h0 - h1))
    alpha = np.where(np.isfinite(h1), alpha, 0.0)
    accept = rng.random(len(alpha)) < alpha
    z = np.where(accept[:, None], z1, chain.z)
    logf = np.where(accept, logf1, chain.logf)
    grad = np.where(accept[:, None], grad1, chain.grad)
    return HmcChain(z, logf, grad, chain.accepted + accept, chain.transitions + 1, alpha)


@dataclass
class SampleReport:
    acceptance_rate: float
    step_sizes: list[float]
    n_transitions: int
    subset_size: int
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"acceptance_rate": self.acceptance_rate, "step_sizes": self.step_sizes,
                "n_transitions": self.n_transitions, "subset_size": self.subset_size,
                "warnings": self.warnings}


def _initial_state(t: SubsetPosteriorTarget, cfg: HmcConfig, rng) -> np.ndarray:
    z0 = t.experts[0].sample(rng)
    if cfg.init == "prior":
        return t.prior.sample(len(z0), rng)
    return z0


def _run_chunk(t: SubsetPosteriorTarget, cfg: HmcConfig, seed_key) -> tuple[np.ndarray, float, float]:
    rng = np.random.default_rng(seed_key)
    z0 = _initial_state(t, cfg, rng)
    chain = HmcChain.start(t, z0)
    eps = cfg.step_size
    if cfg.adapt and cfg.warmup > 0:
        for _ in range(cfg.max_halvings + 1):
            accepted = chain.accepted.copy()
            for _ in range(cfg.warmup):
                chain = hmc_transition(t, chain, cfg, rng, eps)
            rate = float(np.mean(chain.accepted - accepted)) / cfg.warmup
            if rate >= cfg.target_accept:
                break
            eps *= 0.5
    start_acc = chain.accepted.copy()
    for _ in range(cfg.n_transitions):
        chain = hmc_transition(t, chain, cfg, rng, eps)
    rate = float(np.mean(chain.accepted - start_acc)) / max(cfg.n_transitions, 1)
    return chain.z, rate, eps


def _n_workers() -> int:
    try:
        return max(int(os.environ.get("JNF_THREADS", "0")), 0)
    except ValueError:
        return 0


def sample_subset_posterior(t: SubsetPosteriorTarget, cfg: HmcConfig, n_samples: int
                            ) -> tuple[np.ndarray, SampleReport]:
    """One independent chain per sample; each emits its final state.

    Chains run in fixed-size chunks seeded by (seed, chunk index), so results do
    not depend on how many worker threads are used.
    """
    modules = [m for e in t.experts for m in getattr(e, "modules", ())]
    chunks = [np.arange(s, min(s + CHUNK, n_samples)) for s in range(0, n_samples, CHUNK)]
    jobs = [(t.take(idx), cfg, [cfg.seed, c]) for c, idx in enumerate(chunks)]
    with frozen(*modules):
        workers = _n_workers()
        if workers > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda job: _run_chunk(*job), jobs))
        else:
            results = [_run_chunk(*job) for job in jobs]
    z = np.concatenate([r[0] for r in results]) if results else np.zeros((0, t.prior.dim))
    weights = np.array([len(c) for c in chunks], dtype=float)
    rate = float(np.dot([r[1] for r in results], weights) / weights.sum()) if results else float("nan")
    report = SampleReport(rate, [r[2] for r in results], cfg.n_transitions, t.size)
    if rate < 0.1:
        msg = f"HMC acceptance rate {rate:.3f} < 0.1; step size is likely too large"
        report.warnings.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return z, report
