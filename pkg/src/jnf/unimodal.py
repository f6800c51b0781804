"""Stage 2: fit per-modality flow posteriors to the frozen joint posterior."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .flows import FlowStack, build_flow_stack
from .joint import JointVae, TrainingError, joint_encode, minibatches
from .nn import Adam, Mlp, Module, OptimizerError, init_params

log = logging.getLogger(__name__)

MODES = ("raw", "shared-dcca", "shared-cl")


class ConfigurationError(ValueError):
    pass


class UnfrozenModelError(RuntimeError):
    """The joint model must be frozen before fitting unimodal posteriors."""


@dataclass
class Stage2Config:
    epochs: int = 20
    batch_size: int = 256
    lr: float = 1e-3
    n_flows: int = 2
    mode: str = "raw"
    samples_per_point: int = 1
    seed: int = 0
    context_dim: int = 64

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.samples_per_point < 1:
            raise ConfigurationError("samples_per_point must be >= 1")


class UnimodalPosterior(Module):
    """q_j(z | c_j) with c_j a learned context of x_j (or of a frozen projection of x_j)."""

    def __init__(self, modality: int, input_dim: int, d_z: int, n_flows: int = 2,
                 context_dim: int = 64, context_hidden: Sequence[int] = (256, 256),
                 projector: Module | None = None, seed: int = 0):
        self.modality = modality
        self.input_dim = input_dim
        self.d_z = d_z
        self.n_flows = n_flows
        self.context_hidden = tuple(context_hidden)
        self.projector = projector
        in_width = projector.n_out if projector is not None else input_dim
        self.context_net = Mlp([in_width, *context_hidden, context_dim], hidden="tanh", output="tanh")
        self.flow = build_flow_stack(d_z, context_dim, n_flows, seed=seed)
        init_params(self.context_net, [seed, 7])

    def named_parameters(self, prefix: str = ""):
        # the projector is pretrained and frozen; it is saved with its own checkpoint
        yield from self.context_net.named_parameters(prefix + "context_net.")
        yield from self.flow.named_parameters(prefix + "flow.")

    def metadata(self) -> dict:
        return {"modality": self.modality, "input_dim": self.input_dim, "d_z": self.d_z,
                "n_flows": self.n_flows, "context_dim": self.flow.context_dim,
                "context_hidden": list(self.context_hidden)}

    def shared_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.projector is None:
            return x
        return self.projector(x).data

    def context(self, x) -> ad.Tensor:
        return self.context_net(self.shared_input(x))

    def log_density(self, z, x) -> ad.Tensor:
        return self.flow.log_density(z, self.context(x))

    def sample(self, x, rng: np.random.Generator) -> np.ndarray:
        """One latent draw per row of ``x``."""
        return self.flow.sample(self.context(x).data, rng=rng)


def luni_loss(joint: JointVae, posteriors: Sequence[UnimodalPosterior], X: Sequence,
              rng: np.random.Generator, samples_per_point: int = 1) -> tuple[ad.Tensor, list[float]]:
    """-sum_j E_{q(z|X)} log q_j(z | c_j), averaged over the batch.

    The joint model must be frozen so that no tape node reaches its parameters.
    """
    if not joint.is_frozen:
        raise UnfrozenModelError("freeze the joint model before computing the unimodal loss")
    q = joint_encode(joint, X)
    mu, std = q.mu.data, q.std
    total = None
    per_modality = []
    for post in posteriors:
        x = X[post.modality]
        ctx = post.context(x)
        terms = None
        for _ in range(samples_per_point):
            z = mu + std * rng.standard_normal(mu.shape)
            lp = ad.mean(post.flow.log_density(z, ctx))
            terms = lp if terms is None else ad.add(terms, lp)
        term = ad.scale(terms, -1.0 / samples_per_point)
        per_modality.append(term.item())
        total = term if total is None else ad.add(total, term)
    return total, per_modality


def build_posteriors(joint: JointVae, cfg: Stage2Config, projectors: Sequence[Module] | None = None,
                     input_dims: Sequence[int] | None = None) -> list[UnimodalPosterior]:
    shared = cfg.mode != "raw"
    if shared and not projectors:
        raise ConfigurationError(f"mode {cfg.mode!r} needs trained projectors")
    input_dims = input_dims or joint.arch.input_dims
    posteriors = []
    for j, dim in enumerate(input_dims):
        proj = projectors[j] if shared else None
        hidden = (64, 64) if shared else (256, 256)
        posteriors.append(UnimodalPosterior(j, dim, joint.d_z, cfg.n_flows, cfg.context_dim,
                                            hidden, proj, seed=cfg.seed * 100 + j))
    return posteriors


def train_unimodal(joint: JointVae, modalities: Sequence[np.ndarray], cfg: Stage2Config,
                   projectors: Sequence[Module] | None = None):
    """Adam on the unimodal loss; the joint model is frozen for the duration."""
    modalities = [np.asarray(x, dtype=np.float64) for x in modalities]
    posteriors = build_posteriors(joint, cfg, projectors, [x.shape[1] for x in modalities])
    if projectors:
        for p in projectors:
            p.set_trainable(False)
    params = [(f"{j}.{name}", p) for j, post in enumerate(posteriors)
              for name, p in post.named_parameters()]
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 3])
    n = len(modalities[0])
    was_trainable = [p.requires_grad for p in joint.parameters()]
    joint.freeze()
    trace: list[dict] = []
    try:
        for epoch in range(cfg.epochs):
            sums = np.zeros(len(posteriors))
            for idx in minibatches(n, cfg.batch_size, rng):
                with ad.Tape() as tape:
                    loss, per = luni_loss(joint, posteriors, [x[idx] for x in modalities], rng,
                                          cfg.samples_per_point)
                    if not np.isfinite(loss.item()):
                        raise TrainingError(f"epoch {epoch}: unimodal loss diverged", trace=trace)
                    try:
                        opt.step(tape.gradient(loss, opt.tensors))
                    except OptimizerError as err:
                        raise TrainingError(f"epoch {epoch}: {err}", trace=trace) from err
                sums += np.array(per) * len(idx)
            row = {"epoch": epoch, **{f"luni_{j}": s / n for j, s in enumerate(sums)},
                   "total": float(sums.sum() / n)}
            trace.append(row)
            log.info("stage2 epoch %d loss %.4f", epoch, row["total"])
    finally:
        for p, flag in zip(joint.parameters(), was_trainable):
            p.requires_grad = flag
    return posteriors, trace
