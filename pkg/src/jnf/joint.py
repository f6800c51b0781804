"""Stage 1: the joint VAE trained with a beta-weighted ELBO."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .distributions import (
    DiagGaussian, StandardNormalPrior, bernoulli_log_likelihood, kl_to_standard_normal,
    reparam_sample,
)
from .nn import Adam, Mlp, Module, OptimizerError, init_params

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training diverged; ``last_state`` holds the last finite parameters."""

    def __init__(self, message: str, last_state: dict | None = None, trace: list | None = None):
        super().__init__(message)
        self.last_state = last_state
        self.trace = trace or []


@dataclass
class JointArch:
    input_dims: tuple[int, ...] = (1024, 1024)
    d_z: int = 2
    head_hidden: tuple[int, ...] = (256, 256)
    merge_hidden: tuple[int, ...] = (512, 512)
    decoder_hidden: tuple[int, ...] = (256, 256)
    merge_net: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "JointArch":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class JointTrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    beta: float = 1.0
    seed: int = 0
    d_z: int = 2
    lambdas: tuple[float, ...] = (1.0, 1.0)
    merge_net: bool = True

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")


class JointVae(Module):
    """Per-modality encoder heads, a merge network and per-modality Bernoulli decoders."""

    def __init__(self, arch: JointArch, beta: float = 1.0, lambdas: Sequence[float] | None = None):
        self.arch = arch
        self.beta = float(beta)
        m = len(arch.input_dims)
        self.lambdas = tuple(float(x) for x in (lambdas if lambdas is not None else [1.0] * m))
        if len(self.lambdas) != m:
            raise ValueError(f"{m} modalities but {len(self.lambdas)} rescaling weights")
        self.prior = StandardNormalPrior(arch.d_z)
        self.heads = [Mlp([dim, *arch.head_hidden], hidden="tanh", output="tanh")
                      for dim in arch.input_dims]
        merged = sum(arch.head_hidden[-1] for _ in arch.input_dims)
        widths = [merged, *arch.merge_hidden, 2 * arch.d_z] if arch.merge_net else [merged, 2 * arch.d_z]
        self.merge = Mlp(widths, hidden="tanh")
        self.decoders = [Mlp([arch.d_z, *arch.decoder_hidden, dim], hidden="tanh", output="sigmoid")
                         for dim in arch.input_dims]

    @property
    def n_modalities(self) -> int:
        return len(self.arch.input_dims)

    @property
    def d_z(self) -> int:
        return self.arch.d_z

    def freeze(self) -> "JointVae":
        self.set_trainable(False)
        return self

    @property
    def is_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def metadata(self) -> dict:
        return {"arch": asdict(self.arch), "beta": self.beta, "lambdas": list(self.lambdas)}

    @classmethod
    def from_metadata(cls, meta: dict) -> "JointVae":
        return cls(JointArch.from_dict(meta["arch"]), meta["beta"], meta["lambdas"])

    def decode(self, z, j: int) -> ad.Tensor:
        return self.decoders[j](z)


def joint_encode(model: JointVae, X: Sequence) -> DiagGaussian:
    """q(z|X) from all modalities; subsets go through the product-of-experts sampler."""
    if len(X) != model.n_modalities or any(x is None for x in X):
        raise ValueError(f"joint encoder needs all {model.n_modalities} modalities")
    feats = [head(x) for head, x in zip(model.heads, X)]
    out = model.merge(ad.concat(feats, axis=1))
    d = model.d_z
    return DiagGaussian(ad.slice_cols(out, 0, d), ad.slice_cols(out, d, 2 * d))


def elbo_terms(model: JointVae, X: Sequence, rng: np.random.Generator) -> dict:
    """Per-row reconstruction log-likelihoods and KL, all as tape tensors."""
    q = joint_encode(model, X)
    z = reparam_sample(q, rng)
    recon = [bernoulli_log_likelihood(dec(z), x) for dec, x in zip(model.decoders, X)]
    return {"recon": recon, "kl": kl_to_standard_normal(q), "posterior": q}


def beta_elbo(model: JointVae, X: Sequence, rng: np.random.Generator) -> tuple[ad.Tensor, dict]:
    """Negated beta-ELBO averaged over the batch, plus float diagnostics.

    With beta == 0 the KL term is reported but left out of the graph.
    """
    terms = elbo_terms(model, X, rng)
    rec = [ad.mean(r) for r in terms["recon"]]
    kl = ad.mean(terms["kl"])
    loss = ad.scale(rec[0], -model.lambdas[0])
    for lam, r in zip(model.lambdas[1:], rec[1:]):
        loss = ad.sub(loss, ad.scale(r, lam))
    if model.beta != 0.0:
        loss = ad.add(loss, ad.scale(kl, model.beta))
    stats = {f"recon_{j}": -r.item() for j, r in enumerate(rec)}
    stats["kl"] = kl.item()
    stats["total"] = loss.item()
    for name, value in stats.items():
        if not np.isfinite(value):
            raise TrainingError(f"ELBO term {name} diverged ({value})")
    return loss, stats


def build_joint(cfg: JointTrainConfig, input_dims=(1024, 1024), arch: JointArch | None = None) -> JointVae:
    arch = arch or JointArch(input_dims=tuple(input_dims), d_z=cfg.d_z, merge_net=cfg.merge_net)
    model = JointVae(arch, cfg.beta, cfg.lambdas)
    init_params(model, [cfg.seed, 1])
    return model


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_joint(modalities: Sequence[np.ndarray], cfg: JointTrainConfig,
                arch: JointArch | None = None) -> tuple[JointVae, list[dict]]:
    """Adam on the negated beta-ELBO; returns the model and a per-epoch loss trace."""
    modalities = [np.asarray(x, dtype=np.float64) for x in modalities]
    model = build_joint(cfg, [x.shape[1] for x in modalities], arch)
    opt = Adam.for_module(model, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 2])
    n = len(modalities[0])
    trace: list[dict] = []
    for epoch in range(cfg.epochs):
        sums: dict[str, float] = {}
        for idx in minibatches(n, cfg.batch_size, rng):
            last_state = model.state_dict()
            try:
                with ad.Tape() as tape:
                    loss, stats = beta_elbo(model, [x[idx] for x in modalities], rng)
                    opt.step(tape.gradient(loss, opt.tensors))
            except (TrainingError, OptimizerError) as err:
                model.load_state_dict(last_state)
                raise TrainingError(f"epoch {epoch}: {err}", last_state, trace) from err
            for k, v in stats.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
        row = {"epoch": epoch, **{k: v / n for k, v in sums.items()}}
        trace.append(row)
        log.info("joint epoch %d total %.3f kl %.3f", epoch, row["total"], row["kl"])
    return model, trace


def encode_means(model: JointVae, modalities: Sequence[np.ndarray], batch_size: int = 1024) -> np.ndarray:
    out = []
    for start in range(0, len(modalities[0]), batch_size):
        q = joint_encode(model, [x[start:start + batch_size] for x in modalities])
        out.append(q.mu.data)
    return np.concatenate(out)
