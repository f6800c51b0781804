"""Stage runners and model (de)serialisation shared by the CLI and the acceptance suite."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig
from .hmc import HmcConfig
from .joint import JointTrainConfig, JointVae, encode_means, train_joint
from .metrics import CoherenceReport, EvalConfig, evaluate_pipeline
from .projectors import ClConfig, DccaConfig, Projector, train_projectors
from .toydata import ToyDataset, ToyDatasetConfig, generate_dataset
from .unimodal import Stage2Config, UnimodalPosterior, train_unimodal

log = logging.getLogger(__name__)


class PipelineOrderError(RuntimeError):
    """A stage was requested before the stage it depends on."""


# -- configuration plumbing ---------------------------------------------------

def data_config(cfg: RunConfig, test: bool = False) -> ToyDatasetConfig:
    if test:
        return ToyDatasetConfig(cfg["data.test_n"], cfg["data.test_seed"])
    return ToyDatasetConfig(cfg["data.n"], cfg["data.seed"])


def joint_config(cfg: RunConfig) -> JointTrainConfig:
    j = cfg.section("joint")
    return JointTrainConfig(epochs=j["epochs"], batch_size=j["batch_size"], lr=j["lr"], beta=j["beta"],
                            seed=j["seed"], d_z=j["d_z"], lambdas=(j["lambda_0"], j["lambda_1"]),
                            merge_net=j["merge_net"])


def projector_config(cfg: RunConfig, method: str | None = None):
    p = cfg.section("projectors")
    method = method or p["method"]
    if method == "dcca":
        return DccaConfig(k=p["k"], eps_cov=p["eps_cov"], epochs=p["epochs"],
                          batch_size=p["batch_size"], lr=p["lr"], seed=p["seed"])
    if method == "cl":
        return ClConfig(temperature=p["temperature"], k=p["k"], epochs=p["epochs"],
                        batch_size=p["batch_size"], lr=p["lr"], seed=p["seed"])
    raise ValueError(f"unknown projector method {method!r}")


def stage2_config(cfg: RunConfig) -> Stage2Config:
    f = cfg.section("flows")
    return Stage2Config(epochs=f["epochs"], batch_size=f["batch_size"], lr=f["lr"], n_flows=f["n_flows"],
                        mode=f["mode"], samples_per_point=f["samples_per_point"], seed=f["seed"],
                        context_dim=f["context_dim"])


def hmc_config(cfg: RunConfig) -> HmcConfig:
    h = cfg.section("hmc")
    return HmcConfig(n_transitions=h["steps"], leapfrog_steps=h["leapfrog"], step_size=h["step_size"],
                     seed=h["seed"], adapt=h["adapt"], warmup=h["warmup"])


def eval_config(cfg: RunConfig) -> EvalConfig:
    e = cfg.section("eval")
    return EvalConfig(n_conditional=e["n_conditional"], n_joint=e["n_joint"], seed=e["seed"],
                      sampler=e["sampler"], hmc=hmc_config(cfg))


# -- checkpoints ------------------------------------------------------------------

def save_joint(model: JointVae, path, seed: int) -> str:
    return save_checkpoint(path, "joint", {**model.metadata(), "seed": seed}, model.state_dict())


def load_joint(path) -> tuple[JointVae, str]:
    ckpt = load_checkpoint(path, kind="joint")
    model = JointVae.from_metadata(ckpt.metadata)
    model.load_state_dict(ckpt.state)
    return model.freeze(), ckpt.digest


def _prefixed(models: Sequence, prefix=lambda j: f"{j}.") -> dict[str, np.ndarray]:
    state = {}
    for j, m in enumerate(models):
        state.update({prefix(j) + k: v for k, v in m.state_dict().items()})
    return state


def _split(state: dict, j: int) -> dict:
    p = f"{j}."
    return {k[len(p):]: v for k, v in state.items() if k.startswith(p)}


def save_projectors(projectors: Sequence[Projector], method: str, path, seed: int) -> str:
    meta = {"method": method, "seed": seed, "projectors": [p.metadata() for p in projectors]}
    return save_checkpoint(path, "projectors", meta, _prefixed(projectors))


def load_projectors(path) -> tuple[list[Projector], str, str]:
    ckpt = load_checkpoint(path, kind="projectors")
    out = []
    for j, meta in enumerate(ckpt.metadata["projectors"]):
        p = Projector(meta["modality"], meta["input_dim"], meta["k"], meta["hidden"])
        p.load_state_dict(_split(ckpt.state, j))
        p.set_trainable(False)
        out.append(p)
    return out, ckpt.metadata["method"], ckpt.digest


def save_posteriors(posteriors: Sequence[UnimodalPosterior], cfg: Stage2Config, path,
                    joint_hash: str, projector_hash: str | None = None) -> str:
    meta = {"parent": joint_hash, "projectors": projector_hash, "stage2": asdict(cfg),
            "posteriors": [p.metadata() for p in posteriors]}
    return save_checkpoint(path, "flows", meta, _prefixed(posteriors))


def load_posteriors(path, joint_hash: str, projectors: Sequence[Projector] | None = None,
                    projector_hash: str | None = None) -> tuple[list[UnimodalPosterior], dict, str]:
    ckpt = load_checkpoint(path, kind="flows", parent=joint_hash)
    need = ckpt.metadata.get("projectors")
    if need is not None:
        if projectors is None:
            raise PipelineOrderError(f"{path} needs the projectors checkpoint {need}")
        if projector_hash is not None and projector_hash != need:
            raise CheckpointError(f"{path} was trained with projectors {need}, not {projector_hash}")
    out = []
    for j, meta in enumerate(ckpt.metadata["posteriors"]):
        proj = projectors[j] if need is not None else None
        post = UnimodalPosterior(meta["modality"], meta["input_dim"], meta["d_z"], meta["n_flows"],
                                 meta["context_dim"], meta["context_hidden"], proj)
        post.load_state_dict(_split(ckpt.state, j))
        post.set_trainable(False)
        out.append(post)
    return out, ckpt.metadata["stage2"], ckpt.digest


# -- artefact writers ---------------------------------------------------------------

def write_trace(path, trace: Sequence[dict]) -> None:
    if not trace:
        Path(path).write_text("")
        return
    keys = list(trace[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for row in trace:
            w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in keys])


def write_latent_scatter(path, model: JointVae, data: ToyDataset) -> None:
    z = encode_means(model, data.modalities)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"z{i + 1}" for i in range(z.shape[1])] + ["class", "square_width"])
        for row, c, sw in zip(z, data.labels, data.square_widths):
            w.writerow([repr(float(v)) for v in row] + [int(c), int(sw)])


# -- in-memory full pipeline ------------------------------------------------------------

@dataclass
class PipelineResult:
    joint: JointVae
    posteriors: list
    projectors: list | None
    report: CoherenceReport
    traces: dict = field(default_factory=dict)


def run_in_memory(cfg: RunConfig, joint: JointVae | None = None, train: ToyDataset | None = None,
                  test: ToyDataset | None = None, classifiers=None, projectors=None) -> PipelineResult:
    """Every stage without touching disk; pretrained pieces may be passed in to share them."""
    train = train or generate_dataset(data_config(cfg))
    test = test or generate_dataset(data_config(cfg, test=True))
    traces = {}
    if joint is None:
        joint, traces["joint"] = train_joint(train.modalities, joint_config(cfg))
    s2 = stage2_config(cfg)
    if s2.mode != "raw" and projectors is None:
        method = s2.mode.split("-", 1)[1]
        projectors, traces["projectors"] = train_projectors(method, train.modalities,
                                                            projector_config(cfg, method))
    posteriors, traces["flows"] = train_unimodal(joint, train.modalities, s2,
                                                 projectors if s2.mode != "raw" else None)
    report = evaluate_pipeline(joint, posteriors, test, eval_config(cfg), classifiers)
    return PipelineResult(joint, posteriors, projectors, report, traces)
