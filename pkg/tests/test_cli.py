import json
import subprocess
import sys

import numpy as np
import pytest

from jnf.cli import main
from jnf.toydata import load_dataset

SMALL = """\
data.n = 200
data.test_n = 60
joint.epochs = 1
projectors.epochs = 1
projectors.batch_size = 64
flows.epochs = 1
hmc.steps = 3
hmc.warmup = 2
eval.n_conditional = 60
eval.n_joint = 60
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.cfg").write_text(SMALL)

    def call(*argv):
        return main([a.replace("@", str(root) + "/") for a in argv])
    call.root = root
    return call


@pytest.fixture(scope="module")
def pipeline(run):
    cfg = ("--config", "@small.cfg")
    assert run("gen-data", *cfg, "--out", "@train.txt") == 0
    assert run("train-joint", *cfg, "--data", "@train.txt", "--out", "@joint.ckpt") == 0
    assert run("train-projectors", *cfg, "--data", "@train.txt", "--method", "dcca",
               "--set", "projectors.k=3", "--out", "@proj.ckpt") == 0
    assert run("train-flows", *cfg, "--data", "@train.txt", "--joint", "@joint.ckpt",
               "--out", "@flows.ckpt") == 0
    assert run("sample", *cfg, "--joint", "@joint.ckpt", "--flows", "@flows.ckpt",
               "--condition-on", "circle", "--n", "7", "--out", "@z.csv") == 0
    assert run("eval", *cfg, "--joint", "@joint.ckpt", "--flows", "@flows.ckpt",
               "--mosaics", "@mosaics", "--out", "@report.json") == 0
    return run.root


def test_gen_data_small(run):
    assert run("gen-data", "--n", "4", "--seed", "1", "--out", "@d.txt") == 0
    ds = load_dataset(run.root / "d.txt")
    assert len(ds) == 4 and sorted(ds.labels.tolist()) == [0, 0, 1, 1]
    manifest = json.loads((run.root / "d.txt.manifest.json").read_text())
    assert manifest["config"]["data.n"] == 4 and manifest["config"]["data.seed"] == 1


def test_usage_errors(run, capsys):
    assert run("frobnicate") == 2
    assert run("gen-data", "--out", "@x.txt", "--bogus") == 2
    assert run() == 2
    assert run("gen-data", "--out", "@x.txt", "--set", "joint.nope=1") == 2
    assert run("sample", "--joint", "@joint.ckpt", "--flows", "@f", "--condition-on", "triangle",
               "--out", "@z.csv") in (2, 3)


def test_missing_prerequisites_exit_3(run, capsys):
    assert run("train-flows", "--config", "@small.cfg", "--out", "@f.ckpt") == 3
    assert "joint" in capsys.readouterr().err
    assert run("eval", "--joint", "@nope.ckpt", "--flows", "@f.ckpt", "--out", "@r.json") == 3


def test_shared_mode_needs_projectors(pipeline, run, capsys):
    assert run("train-flows", "--config", "@small.cfg", "--joint", "@joint.ckpt",
               "--mode", "shared-dcca", "--out", "@fs.ckpt") == 3
    assert "projectors" in capsys.readouterr().err


def test_mismatched_parent_exit_3(pipeline, run):
    assert run("train-joint", "--config", "@small.cfg", "--data", "@train.txt",
               "--set", "joint.seed=5", "--out", "@joint5.ckpt") == 0
    assert run("eval", "--config", "@small.cfg", "--joint", "@joint5.ckpt", "--flows", "@flows.ckpt",
               "--out", "@r.json") == 3


def test_pipeline_artifacts(pipeline):
    root = pipeline
    trace = (root / "joint.ckpt.trace.csv").read_text().splitlines()
    assert trace[0] == "epoch,recon_0,recon_1,kl,total" and len(trace) == 2
    scatter = (root / "joint.ckpt.latent.csv").read_text().splitlines()
    assert scatter[0] == "z1,z2,class,square_width" and len(scatter) == 201
    z = np.loadtxt(root / "z.csv", delimiter=",", skiprows=1)
    assert z.shape == (7, 2)
    side = json.loads((root / "z.csv.report.json").read_text())
    assert side["subset"] == ["circle"] and 0 <= side["acceptance_rate"] <= 1
    report = json.loads((root / "report.json").read_text())
    names = {d["direction"] for d in report["directions"]}
    assert names == {"square->circle", "circle->square", "joint"}
    assert set(report["checkpoint_hashes"]) == {"joint", "flows"}
    assert (root / "mosaics" / "joint.pgm").read_text().startswith("P2")
    manifest = json.loads((root / "flows.ckpt.manifest.json").read_text())
    assert manifest["inputs"]["joint"] == report["checkpoint_hashes"]["joint"]
    proj = json.loads((root / "proj.ckpt.manifest.json").read_text())
    assert len(proj["canonical_correlations"]) == 3


def test_full_subset_routes_to_joint_encoder(pipeline, run):
    assert run("sample", "--config", "@small.cfg", "--joint", "@joint.ckpt", "--flows", "@flows.ckpt",
               "--condition-on", "square,circle", "--n", "4", "--out", "@zj.csv") == 0
    side = json.loads((pipeline / "zj.csv.report.json").read_text())
    assert side["method"] == "joint_encode"


def test_rerun_is_bit_identical(pipeline, run):
    assert run("train-joint", "--config", "@small.cfg", "--data", "@train.txt", "--out", "@joint_b.ckpt") == 0
    assert (pipeline / "joint.ckpt").read_bytes() == (pipeline / "joint_b.ckpt").read_bytes()


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "jnf", "config"], capture_output=True, text=True)
    assert out.returncode == 0 and "hmc.steps = 100" in out.stdout
