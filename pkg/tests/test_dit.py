import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from voldit import dit
from voldit import tensor as tc
from voldit.errors import ConfigError, DimensionError

from helpers import rel_err

REFERENCE_COUNTS = {"XS": 17.2e6, "S": 33.2e6, "B": 131.0e6, "L": 580.0e6}


def randomize(model, seed=0, scale=0.05):
    rng = np.random.default_rng(seed)
    for _, p in model.params.items():
        p.data = (rng.standard_normal(p.shape) * scale).astype(model.dtype)


def test_size_table():
    assert dit.MODEL_SIZES["XS"] == (6, 384, 6)
    assert dit.MODEL_SIZES["S"] == (12, 384, 6)
    assert dit.MODEL_SIZES["B"] == (12, 768, 12)
    assert dit.MODEL_SIZES["L"][0] == 24


@pytest.mark.parametrize("size", sorted(REFERENCE_COUNTS))
def test_parameter_ladder_within_tolerance(size):
    cfg = dit.make_config(size, 2, 8, (8, 8, 8))
    n = dit.parameter_count(cfg)
    assert abs(n - REFERENCE_COUNTS[size]) / REFERENCE_COUNTS[size] < 0.15


def test_parameter_count_matches_allocation():
    cfg = dit.make_config("XS", 2, 8, (4, 4, 4))
    m = dit.DiTModel(cfg, dtype=np.float32)
    assert m.parameter_count() == dit.parameter_count(cfg)
    assert m.parameter_count(include_positional=True) == dit.parameter_count(cfg) + 8 * 384


@pytest.mark.parametrize("extents,p,n", [((4, 4, 4), 2, 8), ((8, 8, 8), 2, 64), ((8, 8, 8), 4, 8), ((4, 8, 4), 1, 128)])
def test_token_law(extents, p, n):
    cfg = dit.DiTConfig(2, 12, 2, p, 3, extents)
    assert cfg.num_tokens == n == math.prod(extents) // p**3
    z = np.random.default_rng(0).standard_normal((2, 3) + extents)
    blocks = dit.patchify_blocks(z, p)
    assert blocks.shape == (2, n, 3 * p**3)
    np.testing.assert_array_equal(dit.unpatchify(blocks, cfg), z)
    back = dit.unpatchify(tc.tensor(blocks), cfg).data
    np.testing.assert_array_equal(back, z)


def test_patchify_token_order_oracle():
    p, C = 2, 2
    z = np.random.default_rng(1).standard_normal((1, C, 4, 6, 2))
    blocks = dit.patchify_blocks(z, p)
    tok = 0
    for i in range(2):
        for j in range(3):
            for k in range(1):
                cube = z[0, :, i * p : (i + 1) * p, j * p : (j + 1) * p, k * p : (k + 1) * p]
                np.testing.assert_array_equal(blocks[0, tok], cube.reshape(-1))
                tok += 1


def test_conv_patchify_equals_block_projection():
    p, C, d = 2, 3, 12
    rng = np.random.default_rng(2)
    z = rng.standard_normal((2, C, 4, 4, 4))
    w, b = rng.standard_normal((d, C, p, p, p)), rng.standard_normal(d)
    got = dit.patchify(tc.tensor(z), p, tc.tensor(w), tc.tensor(b)).data
    want = dit.patchify_blocks(z, p) @ w.reshape(d, -1).T + b
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_geometry_validation():
    with pytest.raises(ConfigError):
        dit.DiTConfig(2, 12, 2, 2, 3, (4, 5, 4))
    with pytest.raises(ConfigError):
        dit.DiTConfig(2, 14, 2, 2, 3, (4, 4, 4))
    with pytest.raises(ConfigError):
        dit.make_config("XL")
    cfg = dit.DiTConfig(2, 12, 2, 2, 3, (4, 4, 4))
    with pytest.raises(DimensionError):
        dit.unpatchify(np.zeros((1, 7, 24)), cfg)
    m = dit.DiTModel(cfg)
    with pytest.raises(DimensionError):
        m.forward(np.zeros((1, 3, 8, 8, 8)), 5)


def test_posenc_layout():
    pe = dit.posenc3d((2, 3, 4), 12)
    assert pe.shape == (24, 12)
    # token (z=1, y=2, x=3) is index 1*12 + 2*4 + 3
    row = pe[1 * 12 + 2 * 4 + 3]
    omega = 1.0 / 10000 ** (np.arange(2) / 2.0)
    for axis, pos in enumerate((1, 2, 3)):
        seg = row[axis * 4 : (axis + 1) * 4]
        np.testing.assert_allclose(seg, np.concatenate([np.sin(pos * omega), np.cos(pos * omega)]))
    with pytest.raises(ConfigError):
        dit.posenc3d((2, 2, 2), 10)


def test_timestep_frequencies():
    f = dit.timestep_frequencies(np.array([0, 7]))
    assert f.shape == (2, 256)
    np.testing.assert_array_equal(f[0, 0::2], 0.0)
    np.testing.assert_array_equal(f[0, 1::2], 1.0)
    assert f[1, 0] == pytest.approx(math.sin(7.0)) and f[1, 1] == pytest.approx(math.cos(7.0))


def test_fresh_blocks_are_identity_and_output_is_zero():
    cfg = dit.make_config("XS", 2, 8, (4, 4, 4))
    m = dit.DiTModel(cfg, seed=3)
    rng = np.random.default_rng(0)
    x = tc.tensor(rng.standard_normal((2, cfg.num_tokens, cfg.hidden)))
    c = tc.tensor(rng.standard_normal((2, cfg.hidden)))
    for i in range(cfg.depth):
        np.testing.assert_array_equal(dit.dit_block(x, c, m.params, f"blocks.{i}.", cfg.heads).data, x.data)
    out = m.forward(rng.standard_normal((2, 8, 4, 4, 4)), np.array([1, 300]))
    assert out.shape == (2, 8, 4, 4, 4)
    assert np.all(out.data == 0.0)


def test_attention_weights_are_distributions():
    cfg = dit.DiTConfig(1, 12, 3, 1, 2, (2, 2, 2))
    m = dit.DiTModel(cfg)
    randomize(m)
    x = tc.tensor(np.random.default_rng(0).standard_normal((2, 8, 12)))
    _, w = dit.attention(x, m.params, "blocks.0.", 3, return_weights=True)
    assert w.shape == (6, 8, 8)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-12)


def test_attention_is_permutation_equivariant():
    cfg = dit.DiTConfig(1, 12, 3, 1, 2, (2, 2, 2))
    m = dit.DiTModel(cfg)
    randomize(m)
    x = np.random.default_rng(1).standard_normal((1, 8, 12))
    perm = np.random.default_rng(2).permutation(8)
    a = dit.attention(tc.tensor(x), m.params, "blocks.0.", 3).data
    b = dit.attention(tc.tensor(x[:, perm]), m.params, "blocks.0.", 3).data
    np.testing.assert_allclose(b, a[:, perm], atol=1e-12)


def test_unbatched_forward_matches_batched():
    cfg = dit.DiTConfig(2, 12, 2, 2, 3, (4, 4, 4))
    m = dit.DiTModel(cfg)
    randomize(m)
    z = np.random.default_rng(0).standard_normal((2, 3, 4, 4, 4))
    both = m.forward(z, np.array([5, 9])).data
    np.testing.assert_allclose(m.forward(z[1], 9).data, both[1], atol=1e-12)


def test_full_xs_model_gradients():
    cfg = dit.make_config("XS", 2, 8, (4, 4, 4))
    m = dit.DiTModel(cfg, dtype=np.float64)
    randomize(m, seed=1, scale=0.03)
    rng = np.random.default_rng(4)
    z = tc.Tensor(rng.standard_normal((1, 8, 4, 4, 4)), requires_grad=True)
    r = tc.tensor(rng.standard_normal((1, 8, 4, 4, 4)))
    t = np.array([37])

    def loss(_=None):
        return tc.sum_(tc.mul(m.forward(z, t), r))

    tc.backward(loss())
    probes = [("input", z)] + [(k, m.params[k]) for k in (
        "x_embed.w", "t_embed.w1", "blocks.0.qkv.w", "blocks.2.ada.w", "blocks.5.fc1.w", "blocks.5.fc2.b",
        "blocks.3.proj.w", "final.ada.w", "final.proj.w",
    )]
    worst = 0.0
    checked = 0
    for name, p in probes:
        flat = rng.choice(p.size, size=3, replace=False)
        idx = [np.unravel_index(i, p.shape) for i in flat]
        num = tc.finite_difference_grad(lambda _x: loss(), p, h=1e-6, indices=idx)
        sel = tuple(np.array(idx).T)
        worst = max(worst, rel_err(p.grad[sel], num[sel]))
        checked += len(idx)
    assert checked >= 20
    assert worst < 1e-3


@given(st.sampled_from([1, 2, 4]), st.integers(1, 2), st.integers(0, 50))
def test_roundtrip_property(p, mult, seed):
    extents = (p * mult, p, p * 2)
    cfg = dit.DiTConfig(1, 6, 1, p, 2, extents)
    z = np.random.default_rng(seed).standard_normal((1, 2) + extents)
    np.testing.assert_array_equal(dit.unpatchify(dit.patchify_blocks(z, p), cfg), z)
