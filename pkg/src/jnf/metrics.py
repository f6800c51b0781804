"""Coherence and Fréchet-distance evaluation on the toy dataset."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .hmc import HmcConfig, SubsetPosteriorTarget, flow_expert, sample_subset_posterior
from .joint import minibatches
from .nn import Adam, Mlp, init_params
from .toydata import MODALITIES, SIZE, ToyDataset, ToyDatasetConfig, generate_dataset

log = logging.getLogger(__name__)

COV_JITTER = 1e-6


class EvaluationError(RuntimeError):
    pass


class MissingStageError(EvaluationError):
    """A pipeline stage needed for evaluation has not been provided."""


class ToyClassifier(Mlp):
    """1024 pixels -> 2 logits; the 16-unit penultimate layer doubles as a feature map."""

    def __init__(self, input_dim: int = 1024, hidden: Sequence[int] = (64, 16)):
        super().__init__([input_dim, *hidden, 2], hidden="tanh")

    def logits(self, x) -> np.ndarray:
        return self(np.asarray(x, dtype=np.float64)).data

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def proba(self, x) -> np.ndarray:
        lg = self.logits(x)
        e = np.exp(lg - lg.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    onehot = np.eye(logits.shape[1])[labels]
    picked = ad.sum(ad.mul(logits, onehot), axis=1)
    return ad.mean(ad.sub(ad.logsumexp(logits, axis=1), picked))


def train_classifier(x: np.ndarray, labels: np.ndarray, seed: int = 0, epochs: int = 3,
                     batch_size: int = 128, lr: float = 1e-3) -> ToyClassifier:
    clf = init_params(ToyClassifier(x.shape[1]), [seed, 6])
    opt = Adam.for_module(clf, lr=lr)
    rng = np.random.default_rng([seed, 6])
    for _ in range(epochs):
        for idx in minibatches(len(x), batch_size, rng):
            with ad.Tape() as tape:
                loss = cross_entropy(clf(x[idx]), labels[idx])
                opt.step(tape.gradient(loss, opt.tensors))
    clf.set_trainable(False)
    return clf


def train_toy_classifier(modalities: Sequence[np.ndarray], labels: np.ndarray, seed: int = 0,
                         test: tuple[Sequence[np.ndarray], np.ndarray] | None = None,
                         min_accuracy: float = 0.99, epochs: int = 3) -> list[ToyClassifier]:
    """One classifier per modality; refuses to return one below ``min_accuracy``."""
    classifiers = []
    for j, x in enumerate(modalities):
        clf = train_classifier(np.asarray(x, dtype=np.float64), labels, seed=seed + j, epochs=epochs)
        if test is not None:
            acc = float(np.mean(clf.predict(test[0][j]) == test[1]))
            if acc < min_accuracy:
                raise EvaluationError(f"modality {j} classifier accuracy {acc:.4f} < {min_accuracy}")
        classifiers.append(clf)
    return classifiers


def binarize(probs: np.ndarray) -> np.ndarray:
    return (np.asarray(probs) > 0.5).astype(np.float64)


def conditional_coherence(generated: np.ndarray, reference_labels: np.ndarray,
                          classifier: ToyClassifier) -> float:
    """Fraction of generated images classified like their conditioning sample."""
    if len(generated) == 0:
        raise ValueError("empty sample set")
    pred = classifier.predict(binarize(generated))
    return float(np.mean(pred == np.asarray(reference_labels)))


def joint_coherence(generated: Sequence[np.ndarray], classifiers: Sequence[ToyClassifier]) -> float:
    """Fraction of generated tuples whose modalities all get the same label."""
    if len(generated) == 0 or len(generated[0]) == 0:
        raise ValueError("empty sample set")
    preds = np.stack([clf.predict(binarize(g)) for clf, g in zip(classifiers, generated)])
    return float(np.mean(np.all(preds == preds[0], axis=0)))


def coherence(generated, classifiers, reference_labels=None) -> float:
    """Conditional coherence when ``reference_labels`` is given, joint coherence otherwise."""
    if reference_labels is not None:
        return conditional_coherence(generated, reference_labels, classifiers)
    return joint_coherence(generated, classifiers)


@dataclass
class FrechetStats:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "FrechetStats":
        feats = np.asarray(feats, dtype=np.float64)
        return cls(feats.mean(axis=0), np.atleast_2d(np.cov(feats, rowvar=False)))


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    lam, u = np.linalg.eigh(0.5 * (a + a.T))
    lam = np.where(lam < 1e-10, np.maximum(lam, 0.0), lam)
    return (u * np.sqrt(lam)) @ u.T


def frechet_distance(a: FrechetStats, b: FrechetStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)."""
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise ValueError(f"feature dimensions differ: {a.mean.shape} vs {b.mean.shape}")
    root_a = _psd_sqrt(a.cov)
    cross = _psd_sqrt(root_a @ b.cov @ root_a)
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def feature_stats(classifier: ToyClassifier, images: np.ndarray, jitter: float = COV_JITTER) -> FrechetStats:
    feats = classifier.features(binarize(images)).data
    stats = FrechetStats.from_features(feats)
    stats.cov = stats.cov + jitter * np.eye(len(stats.cov))
    return stats


@dataclass
class CoherenceReport:
    conditional: dict[str, float] = field(default_factory=dict)
    joint: float = float("nan")
    frechet: dict[str, float] = field(default_factory=dict)
    n: dict[str, int] = field(default_factory=dict)
    seed: int = 0
    checkpoints: dict[str, str] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        directions = [
            {"direction": name, "coherence": value, "frechet": self.frechet.get(name),
             "n": self.n.get(name)}
            for name, value in self.conditional.items()
        ]
        directions.append({"direction": "joint", "coherence": self.joint,
                           "frechet": self.frechet.get("joint"), "n": self.n.get("joint")})
        return {"directions": directions, "seed": self.seed, "checkpoint_hashes": self.checkpoints,
                **self.extras}


def split_half_floor(classifier: ToyClassifier, images: np.ndarray, seed: int = 0) -> float:
    """Fréchet distance between two random halves of the same real image set."""
    order = np.random.default_rng([seed, 9]).permutation(len(images))
    half = len(images) // 2
    return frechet_distance(feature_stats(classifier, images[order[:half]]),
                            feature_stats(classifier, images[order[half:2 * half]]))


def linear_probe_accuracy(features: np.ndarray, labels: np.ndarray, seed: int = 0,
                          steps: int = 500, lr: float = 0.5) -> float:
    """Logistic regression fitted on one half, accuracy on the other half."""
    x = np.asarray(features, dtype=np.float64)
    x = x.reshape(len(x), -1)
    y = np.asarray(labels, dtype=np.float64)
    order = np.random.default_rng([seed, 10]).permutation(len(x))
    tr, te = order[:len(x) // 2], order[len(x) // 2:]
    mu, sd = x[tr].mean(axis=0), x[tr].std(axis=0) + 1e-12
    xs = np.hstack([(x - mu) / sd, np.ones((len(x), 1))])
    w = np.zeros(xs.shape[1])
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-np.clip(xs[tr] @ w, -50, 50)))
        w -= lr * xs[tr].T @ (p - y[tr]) / len(tr)
    return float(np.mean((xs[te] @ w > 0) == (y[te] > 0.5)))


def write_pgm(path, images: np.ndarray, n_cols: int = 8, size: int = SIZE, pad: int = 1) -> None:
    """ASCII (P2) mosaic of flattened square images with values in [0, 1]."""
    images = np.asarray(images, dtype=np.float64).reshape(-1, size, size)
    n_rows = max(1, -(-len(images) // n_cols))
    h, w = n_rows * (size + pad) + pad, n_cols * (size + pad) + pad
    canvas = np.full((h, w), 128, dtype=int)
    for k, img in enumerate(images):
        r, c = divmod(k, n_cols)
        y0, x0 = pad + r * (size + pad), pad + c * (size + pad)
        # black shapes on white, like the toy figures
        canvas[y0:y0 + size, x0:x0 + size] = np.rint(255 * (1 - np.clip(img, 0, 1)))
    with open(path, "w") as fh:
        fh.write(f"P2\n{w} {h}\n255\n")
        for row in canvas:
            fh.write(" ".join(map(str, row)) + "\n")


@dataclass
class EvalConfig:
    n_conditional: int = 2000
    n_joint: int = 2000
    seed: int = 0
    sampler: str = "flow"  # "hmc" routes single-modality conditionals through the PoE sampler
    classifier_train: int = 4000
    classifier_test: int = 2000
    classifier_epochs: int = 3
    hmc: HmcConfig = field(default_factory=HmcConfig)

    def __post_init__(self):
        if self.sampler not in ("flow", "hmc"):
            raise ValueError(f"unknown sampler {self.sampler!r}")


def fit_evaluation_classifiers(cfg: EvalConfig) -> list[ToyClassifier]:
    """Classifiers trained and gated on freshly generated data, disjoint from the pipeline seeds."""
    train = generate_dataset(ToyDatasetConfig(cfg.classifier_train, seed=10_000 + cfg.seed))
    test = generate_dataset(ToyDatasetConfig(cfg.classifier_test, seed=20_000 + cfg.seed))
    return train_toy_classifier(train.modalities, train.labels, seed=cfg.seed,
                                test=(test.modalities, test.labels), epochs=cfg.classifier_epochs)


def _decode(joint, z: np.ndarray, j: int, batch: int = 1000) -> np.ndarray:
    return np.concatenate([joint.decode(z[s:s + batch], j).data for s in range(0, len(z), batch)])


def conditional_latents(posterior, x: np.ndarray, cfg: EvalConfig, prior) -> np.ndarray:
    """One z per conditioning image, from q_i(z | x_i)."""
    if cfg.sampler == "hmc":
        t = SubsetPosteriorTarget([flow_expert(posterior, x)], prior)
        z, _ = sample_subset_posterior(t, cfg.hmc, len(x))
        return z
    rng = np.random.default_rng([cfg.seed, 11, posterior.modality])
    return posterior.sample(x, rng)


def evaluate_pipeline(joint, posteriors, test: ToyDataset, cfg: EvalConfig | None = None,
                      classifiers: Sequence[ToyClassifier] | None = None,
                      checkpoints: dict | None = None, mosaic_dir=None) -> CoherenceReport:
    cfg = cfg or EvalConfig()
    if joint is None:
        raise MissingStageError("joint checkpoint missing")
    if not posteriors or len(posteriors) != joint.n_modalities:
        raise MissingStageError("flows checkpoint missing")
    classifiers = classifiers or fit_evaluation_classifiers(cfg)
    xs = test.modalities
    n = min(cfg.n_conditional, len(test))
    report = CoherenceReport(seed=cfg.seed, checkpoints=dict(checkpoints or {}))
    floors = {}
    for i, post in enumerate(posteriors):
        x_i = xs[i][:n]
        z = conditional_latents(post, x_i, cfg, joint.prior)
        ref = classifiers[i].predict(x_i)
        for j in range(joint.n_modalities):
            if j == i:
                continue
            gen = _decode(joint, z, j)
            name = f"{MODALITIES[i]}->{MODALITIES[j]}"
            report.conditional[name] = conditional_coherence(gen, ref, classifiers[j])
            report.frechet[name] = frechet_distance(feature_stats(classifiers[j], gen),
                                                    feature_stats(classifiers[j], xs[j][:n]))
            report.n[name] = int(n)
            if mosaic_dir is not None:
                write_pgm(f"{mosaic_dir}/cond_{MODALITIES[i]}_to_{MODALITIES[j]}.pgm",
                          np.concatenate([x_i[:8], gen[:56]]))
    rng = np.random.default_rng([cfg.seed, 12])
    z = joint.prior.sample(cfg.n_joint, rng)
    gens = [_decode(joint, z, j) for j in range(joint.n_modalities)]
    report.joint = joint_coherence(gens, classifiers)
    prior_fd = [frechet_distance(feature_stats(clf, g), feature_stats(clf, x))
                for clf, g, x in zip(classifiers, gens, xs)]
    report.frechet["joint"] = float(np.mean(prior_fd))
    report.n["joint"] = int(cfg.n_joint)
    for j, clf in enumerate(classifiers):
        floors[MODALITIES[j]] = split_half_floor(clf, xs[j], cfg.seed)
    report.extras["frechet_floor"] = floors
    report.extras["frechet_prior"] = {MODALITIES[j]: v for j, v in enumerate(prior_fd)}
    report.extras["sampler"] = cfg.sampler
    if mosaic_dir is not None:
        write_pgm(f"{mosaic_dir}/joint.pgm", np.stack(gens[:2], axis=1).reshape(-1, SIZE * SIZE)[:64])
    return report
