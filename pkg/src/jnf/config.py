"""Flat ``section.key = value`` run configuration.

Every key has a default below; unknown keys are rejected.  Blank lines and
lines starting with ``#`` are ignored.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    pass


# key -> (default, description)
DEFAULTS: dict[str, tuple[Any, str]] = {
    "data.n": (20000, "training pairs (even)"),
    "data.seed": (0, "training set seed"),
    "data.test_n": (2000, "test pairs used for evaluation"),
    "data.test_seed": (1, "test set seed"),
    "joint.epochs": (10, "stage-1 epochs"),
    "joint.batch_size": (256, "stage-1 minibatch size"),
    "joint.lr": (1e-3, "Adam learning rate"),
    "joint.beta": (1.0, "KL weight"),
    "joint.d_z": (2, "latent dimension"),
    "joint.seed": (0, "stage-1 seed"),
    "joint.merge_net": (True, "merge the encoder heads through an MLP"),
    "joint.lambda_0": (1.0, "likelihood weight of the square modality"),
    "joint.lambda_1": (1.0, "likelihood weight of the circle modality"),
    "projectors.method": ("cl", "cl or dcca"),
    "projectors.k": (10, "projection dimension"),
    "projectors.epochs": (10, "projector epochs"),
    "projectors.batch_size": (256, "projector minibatch size"),
    "projectors.lr": (1e-3, "Adam learning rate"),
    "projectors.eps_cov": (1e-4, "DCCA covariance ridge"),
    "projectors.temperature": (0.1, "InfoNCE temperature"),
    "projectors.seed": (0, "projector seed"),
    "flows.mode": ("raw", "raw, shared-dcca or shared-cl"),
    "flows.n_flows": (2, "MADE blocks per posterior (0 = Gaussian posterior)"),
    "flows.epochs": (10, "stage-2 epochs"),
    "flows.batch_size": (256, "stage-2 minibatch size"),
    "flows.lr": (1e-3, "Adam learning rate"),
    "flows.context_dim": (64, "context vector width"),
    "flows.samples_per_point": (1, "joint-posterior draws per datapoint"),
    "flows.seed": (0, "stage-2 seed"),
    "hmc.steps": (100, "MH transitions per sample"),
    "hmc.leapfrog": (10, "leapfrog steps per transition"),
    "hmc.step_size": (0.05, "initial leapfrog step size"),
    "hmc.adapt": (True, "halve the step size during warm-up while acceptance < 0.4"),
    "hmc.warmup": (20, "transitions per warm-up window"),
    "hmc.seed": (0, "sampler seed"),
    "eval.n_conditional": (2000, "conditional generations per direction"),
    "eval.n_joint": (2000, "prior generations"),
    "eval.seed": (0, "evaluation seed"),
    "eval.sampler": ("flow", "flow (direct sampling) or hmc for single-modality conditionals"),
}


def _coerce(key: str, raw: Any) -> Any:
    default = DEFAULTS[key][0]
    if not isinstance(raw, str):
        raw = str(raw)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


class RunConfig(dict):
    """A dict of every known key, defaults filled in."""

    def __init__(self, overrides: Mapping[str, Any] | None = None):
        super().__init__({k: v for k, (v, _) in DEFAULTS.items()})
        for key, value in (overrides or {}).items():
            self.set(key, value)

    def set(self, key: str, value: Any) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        self[key] = _coerce(key, value)

    def section(self, name: str) -> dict[str, Any]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.items() if k.startswith(prefix)}

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.items()))

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            try:
                cfg.set(key, value)
            except ConfigError as err:
                raise ConfigError(f"line {lineno}: {err}") from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text())


def describe() -> str:
    return "".join(f"{k} = {v}    # {doc}\n" for k, (v, doc) in DEFAULTS.items())
