import numpy as np
import pytest

from voldit import diffusion, dit, training
from voldit import tensor as tc
from voldit.errors import ConfigError, ContractError, DimensionError
from voldit.tgca import AdapterConfig, ControlAdapter, inject

CFG = dit.DiTConfig(2, 12, 2, 2, 8, (4, 4, 4))


def small_adapter(mode="learned", pi=1.0, layers=None, dtype=np.float64, seed=0):
    acfg = AdapterConfig.for_backbone(CFG, 3, (8, 8, 8), layers, mode=mode, pi=pi)
    return ControlAdapter(acfg, seed=seed, dtype=dtype)


def random_masks(n, seed=0):
    rng = np.random.default_rng(seed)
    lab = rng.integers(0, 3, size=(n, 8, 8, 8))
    return np.stack([(lab == c) for c in range(3)], axis=1).astype(np.float64)


def test_encoder_stages_and_token_count():
    a = small_adapter()
    assert a.acfg.stages == 2
    assert a.acfg.channel_schedule() == [6, 12]
    toks = a.encode_condition(random_masks(2))
    assert toks.shape == (2, CFG.num_tokens, CFG.hidden)
    big = AdapterConfig.for_backbone(dit.make_config("XS", 2, 512, (4, 4, 4)), 3, (32, 32, 32))
    assert big.stages == 4 and big.channel_schedule() == [48, 96, 192, 384]


def test_fresh_adapter_outputs_zero_tokens_and_half_gate():
    a = small_adapter()
    assert np.all(a.encode_condition(random_masks(1)).data == 0.0)
    g = a.gate(tc.tensor(np.random.default_rng(0).standard_normal((4, 12))))
    np.testing.assert_array_equal(g.data, 0.5)
    assert all(float(a.params[f"lambda.{l}"].data) == 1.0 for l in (1, 2))


def test_fresh_adapter_is_bit_equal_to_unconditional():
    m = dit.DiTModel(CFG, seed=1)
    rng = np.random.default_rng(2)
    for p in m.params.values():
        p.data = rng.standard_normal(p.shape) * 0.05
    a = small_adapter()
    for i in range(10):
        z = rng.standard_normal((1, 8, 4, 4, 4))
        t = np.array([rng.integers(1, 301)])
        ctrl = a.control(random_masks(1, seed=i))
        np.testing.assert_array_equal(m.forward(z, t, ctrl).data, m.forward(z, t).data)


def test_injection_formula():
    rng = np.random.default_rng(3)
    x, c = rng.standard_normal((2, 4, 6)), rng.standard_normal((2, 4, 6))
    gamma = np.array([0.2, 0.7])
    got = inject(tc.tensor(x), tc.tensor(c), tc.tensor(gamma), tc.tensor(np.array(1.5))).data
    np.testing.assert_allclose(got, x + 1.5 * gamma[:, None, None] * c)
    np.testing.assert_allclose(inject(tc.tensor(x), tc.tensor(c), 0.1, 2.0).data, x + 0.2 * c)
    with pytest.raises(DimensionError):
        inject(tc.tensor(x), tc.tensor(c[:, :3]), 0.1, 1.0)


def test_only_selected_layers_receive_control():
    m = dit.DiTModel(CFG)
    a = small_adapter(layers=(2,))
    seen = []

    class Spy:
        def begin(self, t_emb):
            return None

        def inject(self, layer, x, state):
            seen.append(layer)
            return x

    m.forward(np.zeros((1, 8, 4, 4, 4)), 3, Spy())
    assert seen == [1, 2]
    assert [k for k in a.params if k.startswith("lambda")] == ["lambda.2"]


def test_fixed_mode():
    a = small_adapter(mode="fixed", pi=0.1)
    with pytest.raises(ContractError):
        a.gate(tc.tensor(np.zeros((1, 12))))
    assert all(k.startswith("enc.") for k in (n for n, p in a.params.items() if any(p is q for q in a.learnable())))
    with pytest.raises(ContractError):
        a.set_fixed_scale(-1.0)
    b = small_adapter().set_fixed_scale(0.3)
    assert b.mode == "fixed" and b.acfg.pi == 0.3


def test_fixed_mode_scales_tokens_by_pi():
    m = dit.DiTModel(CFG)
    seen = {}

    class Rec:
        def __init__(self, inner):
            self.inner = inner

        def begin(self, t_emb):
            return self.inner.begin(t_emb)

        def inject(self, layer, x, state):
            out = self.inner.inject(layer, x, state)
            seen[layer] = out.data - x.data
            return out

    a = small_adapter(mode="fixed", pi=0.25)
    rng = np.random.default_rng(0)
    for k, p in a.params.items():
        p.data = rng.standard_normal(p.shape) * 0.1
    ctrl = a.control(random_masks(1))
    m.forward(np.zeros((1, 8, 4, 4, 4)), 3, Rec(ctrl))
    for l in (1, 2):
        np.testing.assert_allclose(seen[l], 0.25 * ctrl.tokens.data, atol=1e-12)


def test_condition_shape_errors():
    a = small_adapter()
    with pytest.raises(DimensionError):
        a.encode_condition(np.zeros((1, 2, 8, 8, 8)))
    with pytest.raises(DimensionError):
        a.encode_condition(np.zeros((1, 3, 16, 16, 16)))
    with pytest.raises(ConfigError):
        AdapterConfig(12, 3, (8, 8, 12), (2, 2, 2), (1,))
    with pytest.raises(ConfigError):
        AdapterConfig.for_backbone(CFG, 3, (8, 8, 8), (3,))


def test_adapter_gradients_reach_encoder_gate_and_lambda():
    from helpers import rel_err

    m = dit.DiTModel(CFG)
    rng = np.random.default_rng(5)
    for p in m.params.values():
        p.data = rng.standard_normal(p.shape) * 0.05
    a = small_adapter()
    for p in a.params.values():
        p.data = np.asarray(p.data + rng.standard_normal(p.shape) * 0.05)
    masks = random_masks(1)
    z = rng.standard_normal((1, 8, 4, 4, 4))
    r = tc.tensor(rng.standard_normal((1, 8, 4, 4, 4)))
    m.params.set_trainable(False)
    for p in a.params.values():
        p.requires_grad = True

    def loss():
        return tc.sum_(tc.mul(m.forward(z, np.array([40]), a.control(masks)), r))

    tc.backward(loss())
    for name in ("enc.0.w", "enc.1.w", "gate.w1", "gate.w2", "lambda.1"):
        p = a.params[name]
        idx = [np.unravel_index(i, p.shape) for i in range(min(p.size, 3))]
        num = tc.finite_difference_grad(lambda _x: loss(), p, indices=idx)
        sel = tuple(np.array(idx).T) if p.ndim else ()
        assert rel_err(p.grad[sel], num[sel]) < 1e-5, name
    assert all(p.grad is None for p in m.params.values())


def test_adapter_training_freezes_backbone():
    m = dit.DiTModel(CFG, dtype=np.float32)
    rng = np.random.default_rng(0)
    for p in m.params.values():
        p.data = (rng.standard_normal(p.shape) * 0.05).astype(np.float32)
    before = m.params.checksum()
    a = small_adapter(dtype=np.float32)
    a_before = a.params.checksum()
    lat = rng.standard_normal((4, 8, 4, 4, 4))
    losses = training.train_adapter(m, a, lat, random_masks(4), diffusion.cosine_schedule(300), 10, lr=1e-3)
    assert len(losses) == 10
    assert m.params.checksum() == before
    assert a.params.checksum() != a_before
    assert all(p.requires_grad for p in m.params.values())
    with pytest.raises(ContractError):
        training.train_adapter(m, a, lat[:0], random_masks(1)[:0], diffusion.cosine_schedule(10), 1)
