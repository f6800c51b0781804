import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from jnf.checkpoint import (
    MAGIC, CheckpointError, IncompatibleVersionError, ParentMismatchError, decode, encode,
    load_checkpoint, save_checkpoint,
)
from jnf.joint import JointArch, JointTrainConfig, build_joint
from jnf.pipeline import (
    PipelineOrderError, load_joint, load_posteriors, load_projectors, save_joint, save_posteriors,
    save_projectors,
)
from jnf.projectors import Projector
from jnf.nn import init_params
from jnf.unimodal import Stage2Config, build_posteriors

SMALL = JointArch(input_dims=(6, 5), d_z=2, head_hidden=(4,), merge_hidden=(4,), decoder_hidden=(3,))


def _small_joint(seed=0):
    return build_joint(JointTrainConfig(seed=seed), arch=SMALL)


finite = hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                    elements=st.floats(allow_nan=False, width=64))


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12), finite, max_size=4))
def test_roundtrip_bit_exact(state):
    blob = encode("thing", {"seed": 3}, state)
    ck = decode(blob)
    assert ck.kind == "thing" and ck.metadata == {"seed": 3}
    assert list(ck.state) == list(state)
    for k, v in state.items():
        assert ck.state[k].shape == np.shape(v)
        assert ck.state[k].tobytes() == np.asarray(v, dtype="<f8").tobytes()
    assert encode(ck.kind, ck.metadata, ck.state) == blob


def test_layout_matches_format(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, "k", {}, {"w": np.array([[1.5, -2.0]])})
    data = path.read_bytes()
    assert data[:8] == b"JNFCKPT1"
    (n_meta,) = struct.unpack("<I", data[8:12])
    pos = 12 + n_meta
    assert struct.unpack("<H", data[pos:pos + 2])[0] == 1
    assert data[pos + 2:pos + 3] == b"w"
    assert data[pos + 3] == 2
    assert struct.unpack("<2I", data[pos + 4:pos + 12]) == (1, 2)
    assert np.frombuffer(data[pos + 12:], "<f8").tolist() == [1.5, -2.0]


def test_save_load_save_identical(tmp_path):
    model = _small_joint()
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    ha = save_joint(model, a, seed=0)
    loaded, hl = load_joint(a)
    hb = save_joint(loaded, b, seed=0)
    assert a.read_bytes() == b.read_bytes() and ha == hb == hl


@pytest.mark.parametrize("cut", [3, 10, 30, -1, -9])
def test_truncation_reports_offset(tmp_path, cut):
    path = tmp_path / "a.ckpt"
    save_joint(_small_joint(), path, seed=0)
    data = path.read_bytes()
    path.write_bytes(data[:cut])
    with pytest.raises(CheckpointError) as err:
        load_joint(path)
    assert "byte offset" in str(err.value) and err.value.offset is not None


def test_bad_magic_and_version(tmp_path):
    path = tmp_path / "a.ckpt"
    blob = encode("k", {}, {"w": np.zeros(2)})
    path.write_bytes(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointError, match="offset 0"):
        load_checkpoint(path)
    path.write_bytes(MAGIC[:-1] + b"2" + blob[8:])
    with pytest.raises(IncompatibleVersionError, match="version"):
        load_checkpoint(path)


def test_kind_is_checked(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, "projectors", {}, {})
    with pytest.raises(CheckpointError, match="joint"):
        load_joint(path)


def test_stage2_parent_hash(tmp_path):
    j1, j2 = _small_joint(0), _small_joint(1)
    h1 = save_joint(j1, tmp_path / "j1.ckpt", 0)
    h2 = save_joint(j2, tmp_path / "j2.ckpt", 1)
    cfg = Stage2Config(n_flows=1, context_dim=3)
    posts = build_posteriors(j1, cfg)
    save_posteriors(posts, cfg, tmp_path / "f.ckpt", h1)
    loaded, _, _ = load_posteriors(tmp_path / "f.ckpt", h1)
    for a, b in zip(posts, loaded):
        assert all(np.array_equal(a.state_dict()[k], v) for k, v in b.state_dict().items())
    with pytest.raises(ParentMismatchError):
        load_posteriors(tmp_path / "f.ckpt", h2)


def test_shared_posteriors_need_projectors(tmp_path):
    joint = _small_joint()
    hj = save_joint(joint, tmp_path / "j.ckpt", 0)
    projs = [init_params(Projector(j, d, 3, (4,)), j) for j, d in enumerate(SMALL.input_dims)]
    hp = save_projectors(projs, "cl", tmp_path / "p.ckpt", 0)
    cfg = Stage2Config(mode="shared-cl", n_flows=1, context_dim=3)
    posts = build_posteriors(joint, cfg, projs)
    save_posteriors(posts, cfg, tmp_path / "f.ckpt", hj, hp)
    with pytest.raises(PipelineOrderError):
        load_posteriors(tmp_path / "f.ckpt", hj)
    loaded_p, method, hp2 = load_projectors(tmp_path / "p.ckpt")
    assert method == "cl" and hp2 == hp
    posts2, _, _ = load_posteriors(tmp_path / "f.ckpt", hj, loaded_p, hp2)
    x = np.random.default_rng(0).random((4, 6))
    z = np.zeros((4, 2))
    assert np.array_equal(posts[0].log_density(z, x).data, posts2[0].log_density(z, x).data)
