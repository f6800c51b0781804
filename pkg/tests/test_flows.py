import numpy as np
import pytest

from jnf import autodiff as ad
from jnf.distributions import DiagGaussian
from jnf.flows import MadeBlock, build_flow_stack, made_build_masks
from jnf.nn import Adam
from flowcases import perturbed_stack as _perturbed
from gradcheck import numeric_grad, rel_error


def _made_outputs(block, y, c):
    m, a = block.shift_log_scale(y, c)
    return np.concatenate([m.data, a.data], axis=1)


def test_masks_deterministic_and_width_guard():
    a = made_build_masks([8, 8], 3, seed=4, context_dim=2)
    b = made_build_masks([8, 8], 3, seed=4, context_dim=2)
    assert all((x == y).all() for x, y in zip(a, b))
    with pytest.raises(ad.ShapeError):
        made_build_masks([2, 8], 3)


def test_d1_outputs_ignore_z():
    block = MadeBlock(1, context_dim=2, hidden=(8,), seed=0)
    rng = np.random.default_rng(0)
    for p in block.parameters():
        p.data = rng.standard_normal(p.shape)
    c = rng.standard_normal((1, 2))
    outs = [_made_outputs(block, np.array([[z]]), c) for z in (-3.0, 0.0, 2.5)]
    assert all(np.array_equal(outs[0], o) for o in outs[1:])


def test_d3_jacobian_is_strictly_autoregressive():
    d = 3
    block = MadeBlock(d, context_dim=2, hidden=(12, 12), seed=1)
    rng = np.random.default_rng(1)
    for p in block.parameters():
        p.data = rng.standard_normal(p.shape)
    c = rng.standard_normal((1, 2))
    y0 = rng.standard_normal(d)
    for out_idx in range(2 * d):
        i = out_idx % d
        jac = numeric_grad(lambda y: _made_outputs(block, y[None], c)[0, out_idx], y0)
        assert np.all(jac[i:] == 0.0), (out_idx, jac)
        # every output can depend on all strictly preceding inputs
        if i > 0:
            assert np.all(np.abs(jac[:i]) > 0)
    # context reaches every output
    for out_idx in range(2 * d):
        jc = numeric_grad(lambda cc: _made_outputs(block, y0[None], cc[None])[0, out_idx], c[0])
        assert np.any(jc != 0)


def test_zero_heads_give_base_density():
    stack = build_flow_stack(2, 3, n_flows=2, seed=0, made_hidden=(16, 16))
    rng = np.random.default_rng(2)
    z, c = rng.standard_normal((10, 2)), rng.standard_normal((10, 3))
    z0, logdet = stack.peel(z, c)
    np.testing.assert_array_equal(z0.data, z)
    np.testing.assert_array_equal(logdet.data, np.zeros(10))
    base = stack.base_gaussian(c)
    np.testing.assert_array_equal(stack.log_density(z, c).data, base.log_density(z).data)


def test_scalar_affine_block_logdet():
    stack = build_flow_stack(1, 1, n_flows=1, seed=0, made_hidden=(4,))
    head = stack.blocks[0].head
    scale_a, shift_b = 1.7, -0.4
    head.bias.data = np.array([shift_b, 5 * np.arctanh(np.log(scale_a) / 5)])
    c = np.zeros((3, 1))
    z0 = np.array([[0.3], [-1.0], [2.0]])
    y, fwd = stack.regenerate(z0, c)
    np.testing.assert_allclose(y, scale_a * z0 + shift_b, rtol=1e-12)
    _, dens = stack.peel(y, c)
    np.testing.assert_allclose(dens.data, -np.log(scale_a), rtol=1e-12)
    np.testing.assert_allclose(fwd, np.log(scale_a), rtol=1e-12)


def _simpson_weights(n, h):
    w = np.ones(n)
    w[1:-1:2], w[2:-1:2] = 4, 2
    return w * h / 3


def test_trained_d1_flow_normalises():
    stack = build_flow_stack(1, 2, n_flows=2, seed=3, made_hidden=(8, 8), base_hidden=(8,))
    rng = np.random.default_rng(3)
    c_all = np.eye(2)[rng.integers(0, 2, 512)]
    target = np.where(c_all[:, :1] > 0, 2.0, -1.0) + 0.5 * rng.standard_normal((512, 1))
    opt = Adam.for_module(stack, lr=1e-2)
    for _ in range(60):
        with ad.Tape() as tape:
            loss = ad.negate(ad.mean(stack.log_density(target, c_all)))
            opt.step(tape.gradient(loss, opt.tensors))
    z = np.linspace(-8, 8, 4001)[:, None]
    for c in np.eye(2):
        p = np.exp(stack.log_density(z, np.tile(c, (len(z), 1))).data)
        assert abs(np.sum(p * _simpson_weights(len(z), z[1, 0] - z[0, 0])) - 1) < 1e-3


def test_d2_flow_normalises():
    stack = _perturbed(2, 1, seed=5, scale=0.2)
    g = np.linspace(-8, 8, 401)
    zz = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    p = np.exp(stack.log_density(zz, np.full((len(zz), 1), 0.7)).data).reshape(401, 401)
    w = _simpson_weights(401, g[1] - g[0])
    assert abs(w @ p @ w - 1.0) < 1e-2


def test_round_trip_and_logdet_antisymmetry():
    stack = _perturbed(3, 4, n_flows=3, seed=6, scale=0.5)
    rng = np.random.default_rng(6)
    z, c = 2 * rng.standard_normal((1000, 3)), rng.standard_normal((1000, 4))
    z0, dens_logdet = stack.peel(z, c)
    z_back, samp_logdet = stack.regenerate(z0.data, c)
    assert np.abs(z_back - z).max() < 1e-8
    assert np.abs(dens_logdet.data + samp_logdet).max() < 1e-10


def test_sample_then_peel_round_trip():
    stack = _perturbed(2, 2, seed=7)
    c = np.random.default_rng(7).standard_normal((50, 2))
    z = stack.sample(c, seed=1)
    z0, _ = stack.peel(z, c)
    np.testing.assert_allclose(stack.regenerate(z0.data, c)[0], z, atol=1e-8)
    assert np.isfinite(stack.log_density(z, c).data).all()


def test_identity_stack_samples_like_base():
    stack = build_flow_stack(2, 1, seed=8, made_hidden=(8, 8))
    c = np.array([[0.4]])
    base = stack.base_gaussian(c)
    n = 100_000
    z = stack.sample(c, n=n, seed=2)
    se_mean = base.std[0] / np.sqrt(n)
    assert np.all(np.abs(z.mean(0) - base.mu.data[0]) < 3 * se_mean)
    var = base.std[0] ** 2
    assert np.all(np.abs(z.var(0) - var) < 3 * var * np.sqrt(2 / n))


def test_fixed_seed_samples_identical():
    stack = _perturbed(2, 2, seed=9)
    c = np.ones((5, 2))
    assert stack.sample(c, seed=3).tobytes() == stack.sample(c, seed=3).tobytes()


def test_log_density_parameter_gradients():
    stack = _perturbed(2, 2, seed=10, hidden=(4, 4))
    rng = np.random.default_rng(10)
    z, c = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
    params = list(stack.named_parameters())
    with ad.Tape() as tape:
        grads = tape.gradient(ad.sum(stack.log_density(z, c)), [p for _, p in params])
    for (name, p), g in zip(params, grads):
        orig = p.data

        def f(v, p=p):
            p.data = v
            return float(stack.log_density(z, c).data.sum())

        fd = numeric_grad(f, orig)
        p.data = orig
        assert rel_error(g, fd) < 1e-4, name


def test_dimension_mismatch():
    stack = build_flow_stack(2, 1)
    with pytest.raises(ad.ShapeError):
        stack.log_density(np.zeros((3, 3)), np.zeros((3, 1)))
