"""Command-line front end: ``jnf <subcommand> ...``.

Exit codes: 0 ok, 1 runtime error, 2 usage error, 3 pipeline-order error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, ParentMismatchError, file_digest
from .config import ConfigError, RunConfig, describe
from .hmc import SubsetPosteriorTarget, flow_expert, sample_subset_posterior
from .joint import joint_encode, train_joint
from .metrics import evaluate_pipeline
from .pipeline import (
    PipelineOrderError, data_config, eval_config, hmc_config, joint_config, load_joint,
    load_posteriors, load_projectors, projector_config, save_joint, save_posteriors,
    save_projectors, stage2_config, write_latent_scatter, write_trace,
)
from .projectors import canonical_correlations, project, train_projectors
from .toydata import MODALITIES, ToyDatasetConfig, generate_dataset, load_dataset, save_dataset
from .unimodal import train_unimodal

log = logging.getLogger("jnf")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_ORDER = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg


def _require(path, what: str) -> Path:
    if path is None:
        raise PipelineOrderError(f"missing prerequisite: {what} checkpoint (pass --{what})")
    p = Path(path)
    if not p.exists():
        raise PipelineOrderError(f"missing prerequisite: {what} checkpoint {p} does not exist")
    return p


def _load_train(args, cfg: RunConfig):
    if getattr(args, "data", None):
        return load_dataset(args.data), file_digest(args.data)
    return generate_dataset(data_config(cfg)), None


def _manifest(out: Path, command: str, argv, cfg: RunConfig, inputs: dict, outputs: dict, extra=None):
    doc = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "config": dict(sorted(cfg.items())),
        "inputs": inputs,
        "outputs": {k: file_digest(v) for k, v in outputs.items()},
        **(extra or {}),
    }
    path = out.with_name(out.name + ".manifest.json")
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def cmd_gen_data(args, argv) -> int:
    cfg = _config(args)
    n = args.n if args.n is not None else cfg["data.n"]
    seed = args.seed if args.seed is not None else cfg["data.seed"]
    cfg.set("data.n", n)
    cfg.set("data.seed", seed)
    ds = generate_dataset(ToyDatasetConfig(n, seed))
    out = Path(args.out)
    save_dataset(ds, out)
    _manifest(out, "gen-data", argv, cfg, {}, {"data": out})
    print(f"wrote {len(ds)} samples to {out}")
    return EXIT_OK


def _suffixed(out: Path, beta: float, many: bool) -> Path:
    return out.with_name(f"{out.stem}.beta{beta:g}{out.suffix}") if many else out


def cmd_train_joint(args, argv) -> int:
    cfg = _config(args)
    ds, data_hash = _load_train(args, cfg)
    betas = args.beta or [cfg["joint.beta"]]
    for beta in betas:
        cfg.set("joint.beta", beta)
        out = _suffixed(Path(args.out), beta, len(betas) > 1)
        model, trace = train_joint(ds.modalities, joint_config(cfg))
        digest = save_joint(model, out, cfg["joint.seed"])
        trace_path = out.with_name(out.name + ".trace.csv")
        write_trace(trace_path, trace)
        outputs = {"checkpoint": out, "trace": trace_path}
        if model.d_z == 2:
            scatter = out.with_name(out.name + ".latent.csv")
            write_latent_scatter(scatter, model, ds)
            outputs["latent"] = scatter
        _manifest(out, "train-joint", argv, cfg, {"data": data_hash}, outputs)
        print(f"joint model -> {out} ({digest[:12]})")
    return EXIT_OK


def cmd_train_projectors(args, argv) -> int:
    cfg = _config(args)
    method = args.method or cfg["projectors.method"]
    cfg.set("projectors.method", method)
    ds, data_hash = _load_train(args, cfg)
    projectors, trace = train_projectors(method, ds.modalities, projector_config(cfg, method))
    out = Path(args.out)
    digest = save_projectors(projectors, method, out, cfg["projectors.seed"])
    trace_path = out.with_name(out.name + ".trace.csv")
    write_trace(trace_path, trace)
    emb = [project(p, x) for p, x in zip(projectors, ds.modalities)]
    corr = canonical_correlations(emb[0], emb[1], cfg["projectors.eps_cov"]).tolist()
    _manifest(out, "train-projectors", argv, cfg, {"data": data_hash},
              {"checkpoint": out, "trace": trace_path}, {"canonical_correlations": corr})
    print(f"{method} projectors -> {out} ({digest[:12]})")
    return EXIT_OK


def cmd_train_flows(args, argv) -> int:
    cfg = _config(args)
    if args.mode:
        cfg.set("flows.mode", args.mode)
    joint_path = _require(args.joint, "joint")
    s2 = stage2_config(cfg)
    projectors, proj_hash = None, None
    if s2.mode != "raw":
        projectors, method, proj_hash = load_projectors(_require(args.projectors, "projectors"))
        if f"shared-{method}" != s2.mode:
            raise UsageError(f"mode {s2.mode} but the projectors were trained with {method}")
    joint, joint_hash = load_joint(joint_path)
    ds, data_hash = _load_train(args, cfg)
    posteriors, trace = train_unimodal(joint, ds.modalities, s2, projectors)
    out = Path(args.out)
    digest = save_posteriors(posteriors, s2, out, joint_hash, proj_hash)
    trace_path = out.with_name(out.name + ".trace.csv")
    write_trace(trace_path, trace)
    _manifest(out, "train-flows", argv, cfg,
              {"data": data_hash, "joint": joint_hash, "projectors": proj_hash},
              {"checkpoint": out, "trace": trace_path})
    print(f"unimodal posteriors -> {out} ({digest[:12]})")
    return EXIT_OK


def _load_stack(args):
    joint, joint_hash = load_joint(_require(args.joint, "joint"))
    flows_path = _require(args.flows, "flows")
    projectors, proj_hash = None, None
    if args.projectors:
        projectors, _, proj_hash = load_projectors(_require(args.projectors, "projectors"))
    posteriors, _, flows_hash = load_posteriors(flows_path, joint_hash, projectors, proj_hash)
    hashes = {"joint": joint_hash, "flows": flows_hash}
    if proj_hash:
        hashes["projectors"] = proj_hash
    return joint, posteriors, hashes


def _parse_subset(text: str) -> list[int]:
    names = [s.strip() for s in text.split(",") if s.strip()]
    unknown = [s for s in names if s not in MODALITIES]
    if not names or unknown:
        raise UsageError(f"--condition-on takes a comma list of {MODALITIES}, got {text!r}")
    return sorted({MODALITIES.index(s) for s in names})


def cmd_sample(args, argv) -> int:
    cfg = _config(args)
    subset = _parse_subset(args.condition_on)
    joint, posteriors, hashes = _load_stack(args)
    if args.data:
        ds = load_dataset(args.data)
    else:
        ds = generate_dataset(data_config(cfg, test=True))
    if not 0 <= args.index < len(ds):
        raise UsageError(f"--index {args.index} out of range for {len(ds)} samples")
    xs = [x[args.index:args.index + 1] for x in ds.modalities]
    hcfg = hmc_config(cfg)
    if len(subset) == joint.n_modalities:
        q = joint_encode(joint, [np.repeat(x, args.n, axis=0) for x in xs])
        rng = np.random.default_rng([hcfg.seed, 13])
        z = q.mu.data + q.std * rng.standard_normal(q.mu.shape)
        report = {"method": "joint_encode", "subset": [MODALITIES[j] for j in subset]}
    else:
        experts = [flow_expert(posteriors[j], xs[j], args.n) for j in subset]
        z, rep = sample_subset_posterior(SubsetPosteriorTarget(experts, joint.prior), hcfg, args.n)
        report = {"method": "hmc", "subset": [MODALITIES[j] for j in subset], **rep.to_json()}
    out = Path(args.out)
    header = ",".join(f"z{i + 1}" for i in range(z.shape[1]))
    np.savetxt(out, z, delimiter=",", header=header, comments="", fmt="%.17g")
    side = out.with_name(out.name + ".report.json")
    side.write_text(json.dumps({**report, "index": args.index, "n": args.n,
                                "checkpoints": hashes}, indent=2, sort_keys=True) + "\n")
    _manifest(out, "sample", argv, cfg, hashes, {"samples": out, "report": side})
    print(f"{args.n} samples of q(z | {','.join(report['subset'])}) -> {out}")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    cfg = _config(args)
    joint, posteriors, hashes = _load_stack(args)
    test = load_dataset(args.data) if args.data else generate_dataset(data_config(cfg, test=True))
    mosaics = None
    if args.mosaics:
        mosaics = Path(args.mosaics)
        mosaics.mkdir(parents=True, exist_ok=True)
    report = evaluate_pipeline(joint, posteriors, test, eval_config(cfg), checkpoints=hashes,
                               mosaic_dir=mosaics)
    out = Path(args.out)
    out.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    _manifest(out, "eval", argv, cfg, hashes, {"report": out})
    for d in report.to_json()["directions"]:
        print(f"{d['direction']:>16}: coherence {d['coherence']:.4f}  frechet {d['frechet']:.4f}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jnf", description="Two-stage multimodal VAE with flow posteriors on toy data.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="key = value file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key")
        if data:
            sp.add_argument("--data", help="dataset file (default: generate from data.* keys)")
        return sp

    g = common(sub.add_parser("gen-data", help="write a toy dataset"), data=False)
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    j = common(sub.add_parser("train-joint", help="stage 1"))
    j.add_argument("--beta", type=float, nargs="+", help="one run per value")
    j.add_argument("--out", required=True)
    j.set_defaults(func=cmd_train_joint)

    pr = common(sub.add_parser("train-projectors", help="DCCA or contrastive projectors"))
    pr.add_argument("--method", choices=["cl", "dcca"])
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_train_projectors)

    f = common(sub.add_parser("train-flows", help="stage 2"))
    f.add_argument("--joint")
    f.add_argument("--projectors")
    f.add_argument("--mode", choices=["raw", "shared-dcca", "shared-cl"])
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_train_flows)

    s = common(sub.add_parser("sample", help="sample a subset posterior"))
    s.add_argument("--joint")
    s.add_argument("--flows")
    s.add_argument("--projectors")
    s.add_argument("--condition-on", required=True, help="comma list, e.g. square or square,circle")
    s.add_argument("--index", type=int, default=0, help="which observation to condition on")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = common(sub.add_parser("eval", help="coherence and Fréchet report"))
    e.add_argument("--joint")
    e.add_argument("--flows")
    e.add_argument("--projectors")
    e.add_argument("--mosaics", help="directory for PGM sample grids")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    sub.add_parser("config", help="print every configuration key with its default").set_defaults(
        func=lambda args, argv: print(describe(), end="") or EXIT_OK)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"jnf: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    start = time.time()
    try:
        code = args.func(args, argv)
    except (UsageError, ConfigError) as err:
        print(f"jnf: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (PipelineOrderError, ParentMismatchError) as err:
        print(f"jnf: pipeline order: {err}", file=sys.stderr)
        return EXIT_ORDER
    except (CheckpointError, OSError, RuntimeError, ValueError) as err:
        print(f"jnf: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    log.info("%s finished in %.1fs", args.command, time.time() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
