"""Shared-information projectors trained with deep CCA or multimodal contrastive learning."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .joint import TrainingError, minibatches
from .nn import Adam, Mlp, OptimizerError, init_params

log = logging.getLogger(__name__)


@dataclass
class DccaConfig:
    k: int = 10
    eps_cov: float = 1e-4
    epochs: int = 10
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.batch_size <= self.k:
            raise ValueError("DCCA batch size must exceed the projection dimension")


@dataclass
class ClConfig:
    temperature: float = 0.1
    k: int = 10
    epochs: int = 10
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 2:
            raise ValueError("contrastive batches need at least two samples")


class Projector(Mlp):
    """g_j: x_j -> k-dimensional embedding."""

    def __init__(self, modality: int, input_dim: int, k: int, hidden: Sequence[int] = (256, 256, 256)):
        super().__init__([input_dim, *hidden, k], hidden="tanh")
        self.modality = modality
        self.k = k

    def metadata(self) -> dict:
        return {"modality": self.modality, "input_dim": self.n_in, "k": self.k,
                "hidden": self.widths[1:-1]}


def _covariances(e1: Tensor, e2: Tensor, eps_cov: float):
    n = e1.shape[0]
    h1 = e1 - ad.mean(e1, axis=0)
    h2 = e2 - ad.mean(e2, axis=0)
    c = 1.0 / (n - 1)
    s11 = ad.add(ad.scale(ad.matmul(ad.transpose(h1), h1), c), eps_cov * np.eye(e1.shape[1]))
    s22 = ad.add(ad.scale(ad.matmul(ad.transpose(h2), h2), c), eps_cov * np.eye(e2.shape[1]))
    s12 = ad.scale(ad.matmul(ad.transpose(h1), h2), c)
    return s11, s22, s12


def whitened_cross_covariance(e1, e2, eps_cov: float = 1e-4) -> Tensor:
    """T = S11^{-1/2} S12 S22^{-1/2} from regularised sample covariances."""
    e1, e2 = ad.constant(e1), ad.constant(e2)
    if e1.ndim != 2 or e2.ndim != 2 or e1.shape[0] != e2.shape[0]:
        raise ShapeError(f"paired embeddings expected, got {e1.shape} and {e2.shape}")
    if e1.shape[0] <= max(e1.shape[1], e2.shape[1]):
        raise ShapeError("need more samples than embedding dimensions")
    s11, s22, s12 = _covariances(e1, e2, eps_cov)
    return ad.matmul(ad.matmul(ad.sym_matrix_power(s11, -0.5), s12), ad.sym_matrix_power(s22, -0.5))


def dcca_total_correlation(e1, e2, eps_cov: float = 1e-4) -> Tensor:
    """Sum of canonical correlations (singular values of T, each clamped to <= 1)."""
    return ad.clamped_nuclear_norm(whitened_cross_covariance(e1, e2, eps_cov), cap=1.0)


def canonical_correlations(e1, e2, eps_cov: float = 1e-4) -> np.ndarray:
    t = whitened_cross_covariance(np.asarray(e1), np.asarray(e2), eps_cov).data
    return np.minimum(np.linalg.svd(t, compute_uv=False), 1.0)


def _normalise_rows(e: Tensor) -> Tensor:
    norms = ad.sqrt(ad.clip(ad.sum(ad.square(e), axis=1), 1e-24, np.inf))
    return ad.div(e, ad.broadcast_to(ad.transpose(ad.broadcast_to(norms, (1, e.shape[0]))), e.shape))


def _pair_infonce(a: Tensor, b: Tensor, tau: float) -> Tensor:
    logits = ad.scale(ad.matmul(_normalise_rows(a), ad.transpose(_normalise_rows(b))), 1.0 / tau)
    k = a.shape[0]
    eye = np.eye(k)
    pos = ad.sum(ad.mul(logits, eye))
    rows = ad.sum(ad.logsumexp(logits, axis=1))
    cols = ad.sum(ad.logsumexp(logits, axis=0))
    # sum_i [lse_row_i - pos_i] + sum_i [lse_col_i - pos_i]
    return ad.sub(ad.add(rows, cols), ad.scale(pos, 2.0))


def infonce_loss(embeddings: Sequence, tau: float = 0.1) -> Tensor:
    """Symmetric InfoNCE with exponential cosine similarity, summed over modality pairs."""
    embs = [ad.constant(e) for e in embeddings]
    if len(embs) < 2:
        raise ShapeError("need at least two modalities")
    k = embs[0].shape[0]
    if k < 2:
        raise ShapeError("InfoNCE needs at least two samples per batch")
    if any(e.shape[0] != k for e in embs):
        raise ShapeError("embeddings must be aligned across modalities")
    total = None
    for a, b in itertools.combinations(embs, 2):
        term = _pair_infonce(a, b, tau)
        total = term if total is None else ad.add(total, term)
    return total


def projector_objective(method: str, embeddings: Sequence[Tensor], cfg) -> Tensor:
    if method == "dcca":
        total = None
        for a, b in itertools.combinations(embeddings, 2):
            term = dcca_total_correlation(a, b, cfg.eps_cov)
            total = term if total is None else ad.add(total, term)
        return ad.negate(total)
    if method == "cl":
        return infonce_loss(embeddings, cfg.temperature)
    raise ValueError(f"unknown projector method {method!r}")


def train_projectors(method: str, modalities: Sequence[np.ndarray], cfg) -> tuple[list[Projector], list[dict]]:
    """Train one projector per modality jointly; they are frozen on return."""
    modalities = [np.asarray(x, dtype=np.float64) for x in modalities]
    projectors = [Projector(j, x.shape[1], cfg.k) for j, x in enumerate(modalities)]
    for j, p in enumerate(projectors):
        init_params(p, [cfg.seed, 4, j])
    params = [(f"{j}.{name}", p) for j, proj in enumerate(projectors)
              for name, p in proj.named_parameters()]
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 5])
    n = len(modalities[0])
    trace: list[dict] = []
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in minibatches(n, cfg.batch_size, rng):
            if len(idx) <= (cfg.k if method == "dcca" else 1):
                continue
            with ad.Tape() as tape:
                emb = [proj(x[idx]) for proj, x in zip(projectors, modalities)]
                loss = projector_objective(method, emb, cfg)
                if not np.isfinite(loss.item()):
                    raise TrainingError(f"{method} projector loss diverged at epoch {epoch}", trace=trace)
                try:
                    opt.step(tape.gradient(loss, opt.tensors))
                except OptimizerError as err:
                    raise TrainingError(str(err), trace=trace) from err
            total += loss.item()
            count += 1
        trace.append({"epoch": epoch, "loss": total / max(count, 1)})
        log.info("%s projectors epoch %d loss %.4f", method, epoch, trace[-1]["loss"])
    for p in projectors:
        p.set_trainable(False)
    return projectors, trace


def project(projector: Projector, x: np.ndarray, batch_size: int = 2048) -> np.ndarray:
    return np.concatenate([projector(x[s:s + batch_size]).data for s in range(0, len(x), batch_size)])
