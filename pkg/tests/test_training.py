import numpy as np
import pytest

from voldit import codec, dit, training
from voldit.diffusion import cosine_schedule
from voldit.errors import ContractError
from voldit.tgca import AdapterConfig, ControlAdapter


def tiny(seed=0):
    cfg = dit.DiTConfig(depth=2, hidden=24, heads=2, patch=2, latent_channels=2, latent_extents=(2, 2, 2))
    return dit.DiTModel(cfg, seed=seed)


def data(n=3):
    return np.random.default_rng(5).standard_normal((n, 2, 2, 2, 2))


def test_loss_log_and_best_step():
    sched = cosine_schedule(20)
    m = tiny()
    seen = []
    res = training.train_backbone(m, data(), sched, 9, batch=2, lr=1e-2, eval_every=4,
                                  on_eval=lambda s, v, r: seen.append(s))
    assert len(res.losses) == 9 and seen == [4, 8, 9]
    steps, vals = zip(*res.val)
    assert res.best_val == min(vals) and res.best_step == steps[int(np.argmin(vals))]
    assert set(res.best_params) == {k for k, _ in m.params.items()}


def test_training_is_deterministic():
    sched = cosine_schedule(20)
    a = training.train_backbone(tiny(), data(), sched, 5, lr=1e-2, seed=3)
    b = training.train_backbone(tiny(), data(), sched, 5, lr=1e-2, seed=3)
    assert a.losses == b.losses
    for k in a.best_params:
        assert np.array_equal(a.best_params[k], b.best_params[k])
    assert a.rng_state == b.rng_state


def test_training_reduces_loss_on_a_single_latent():
    sched = cosine_schedule(20)
    z = data(1)
    m = tiny()
    before = training.validation_loss(m, z, sched)
    training.train_backbone(m, z, sched, 150, batch=4, lr=3e-3)
    assert training.validation_loss(m, z, sched) < 0.8 * before


def test_empty_training_set_is_rejected():
    with pytest.raises(ContractError):
        training.train_backbone(tiny(), np.zeros((0, 2, 2, 2, 2)), cosine_schedule(5), 1)


def test_adapter_training_leaves_backbone_untouched():
    sched = cosine_schedule(20)
    m = tiny()
    before = {k: p.data.copy() for k, p in m.params.items()}
    acfg = AdapterConfig.for_backbone(m.cfg, 3, (8, 8, 8))
    ad = ControlAdapter(acfg, seed=1)
    masks = np.random.default_rng(0).random((3, 3, 8, 8, 8))
    losses = training.train_adapter(m, ad, data(), masks, sched, 4, lr=1e-2)
    assert len(losses) == 4
    assert all(np.array_equal(before[k], p.data) for k, p in m.params.items())
    assert all(p.requires_grad for p in m.params.values())
    with pytest.raises(ContractError):
        training.train_adapter(m, ad, data(), masks[:2], sched, 1)


def test_generation_independent_of_batch_size():
    sched = cosine_schedule(10)
    m = tiny()
    for p in m.params.values():
        p.data += 0.05 * np.random.default_rng(1).standard_normal(p.data.shape)
    a = training.generate_latents(m, sched, 5, seed=2, batch=5)
    b = training.generate_latents(m, sched, 5, seed=2, batch=2)
    assert np.allclose(a, b, atol=1e-12)


def test_decode_inverts_encode_through_normalizer():
    vols = np.random.default_rng(0).standard_normal((3, 1, 8, 8, 8))
    spec = codec.LatentSpec(2)
    lat = training.volumes_to_latents(vols, spec)
    norm = codec.LatentNormalizer.fit(lat)
    back = training.decode_latents(norm.normalize(lat), spec, norm)
    assert np.allclose(back, vols, atol=1e-10)
