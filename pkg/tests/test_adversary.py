import inspect

import numpy as np
import pytest
import torch

from advfield import adversary as A
from advfield import transforms as T
from advfield.adversary import AttackConfig, attack_bias, attack_morph, attack_sequential, attack_vat
from advfield.data import images_of
from advfield.distance import kl
from conftest import TOY_SIZE

D = torch.float64


def images(toy_splits, n=20):
    return torch.from_numpy(images_of(toy_splits[2][:n]))


@pytest.fixture
def const_net(trained_net):
    return trained_net.copy().zero_head()


def test_constant_net_gives_zero_objective_and_flags(const_net, toy_splits):
    x = images(toy_splits, 4)
    for res in (attack_bias(const_net, x), attack_morph(const_net, x)):
        assert torch.all(res.value == 0)
        assert res.zero_grad.all()
    res = attack_vat(const_net, x, 1.0)
    assert res.zero_grad.all()
    assert torch.all(res.value == 0)


def test_bias_attack_respects_alpha(trained_net, toy_splits):
    res = attack_bias(trained_net, images(toy_splits), AttackConfig(n=3, xi=5.0))
    assert float((res.field - 1).abs().max()) <= 0.3
    assert bool((res.field > 0).all())
    assert torch.allclose(res.adv_image, images(toy_splits) * res.field)


def test_morph_attack_respects_beta(trained_net, toy_splits):
    res = attack_morph(trained_net, images(toy_splits, 8), AttackConfig(n=2, xi_morph=500.0))
    assert res.params.norm(dim=-1).max().item() <= 2.0 + 1e-12
    zero = attack_morph(trained_net, images(toy_splits, 4), AttackConfig(beta=0.0))
    ident = T.identity_grid(TOY_SIZE, TOY_SIZE).expand(4, -1, -1, -1)
    assert torch.allclose(zero.field, ident, atol=1e-14)
    assert torch.all(zero.value.abs() < 1e-12)


@pytest.mark.parametrize("eps", [0.5, 1.0, 3.0])
def test_vat_noise_norm(trained_net, toy_splits, eps):
    res = attack_vat(trained_net, images(toy_splits, 5), eps)
    norms = res.params.flatten(1).norm(dim=1)
    assert torch.allclose(norms, torch.full_like(norms, eps), atol=1e-9, rtol=0)


def test_single_image_shapes(trained_net, toy_splits):
    x = images(toy_splits, 1)[0]
    r = attack_bias(trained_net, x)
    assert r.params.shape == (4, 4) and r.field.shape == x.shape and r.value.dim() == 0
    r = attack_morph(trained_net, x)
    assert r.params.shape == (*x.shape, 2)


def test_attacks_do_not_touch_parameters(trained_net, toy_splits):
    before = trained_net.checksum()
    x = images(toy_splits, 4)
    attack_bias(trained_net, x)
    attack_morph(trained_net, x)
    attack_vat(trained_net, x)
    attack_sequential(trained_net, x)
    assert trained_net.checksum() == before


def test_attacks_deterministic(trained_net, toy_splits):
    x = images(toy_splits, 4)
    a = attack_bias(trained_net, x, AttackConfig(seed=4))
    b = attack_bias(trained_net, x, AttackConfig(seed=4))
    assert torch.equal(a.params, b.params) and torch.equal(a.adv_image, b.adv_image)
    a = attack_morph(trained_net, x, AttackConfig(seed=4))
    b = attack_morph(trained_net, x, AttackConfig(seed=4))
    assert torch.equal(a.field, b.field)


def test_small_step_does_not_decrease_objective(trained_net, toy_splits):
    x = images(toy_splits, 10)
    cfg = AttackConfig(xi=1e-3, seed=21)
    c0 = torch.from_numpy(np.random.default_rng(21).uniform(-cfg.init_scale, cfg.init_scale, size=(10, 4, 4)))
    with torch.no_grad():
        before = A.bias_objective(trained_net, x, T.realize_bias(c0, TOY_SIZE, TOY_SIZE, cfg.alpha), cfg.w)
    after = attack_bias(trained_net, x, cfg).value
    assert torch.all(after >= before - 1e-8)


def test_attack_signatures_take_no_labels():
    for fn in (attack_bias, attack_morph, attack_vat, attack_sequential,
               A.bias_objective, A.morph_objective, A.vat_objective):
        names = set(inspect.signature(fn).parameters)
        assert not names & {"mask", "masks", "label", "labels", "y", "gt", "target"}


def test_invalid_configs():
    with pytest.raises(ValueError):
        AttackConfig(alpha=1.2).validate()
    with pytest.raises(ValueError):
        AttackConfig(n=0).validate()
    with pytest.raises(ValueError):
        AttackConfig(k=1).validate()


# --- Monte-Carlo adversariality oracles --------------------------------------------------


def mean_random_bias_objective(net, x, draws=20, seed=0):
    rng = np.random.default_rng(seed)
    acc = torch.zeros(x.shape[0], dtype=D)
    with torch.no_grad():
        p = net(x)
        for _ in range(draws):
            phi = T.random_bias(rng, 0.3, 4, TOY_SIZE, TOY_SIZE, n=x.shape[0])
            acc += A.bias_objective(net, x, phi, 0.5, p)
    return (acc / draws).mean().item()


def mean_random_morph_objective(net, x, vp, draws=20, seed=0):
    rng = np.random.default_rng(seed)
    acc = torch.zeros(x.shape[0], dtype=D)
    cfg = AttackConfig()
    with torch.no_grad():
        p = net(x)
        for _ in range(draws):
            v = A.random_velocity_like(rng, vp)
            # already smooth and within beta; integrate with the same pipeline
            _, phi = T.realize_morph(v, cfg.beta, 0.0, cfg.sigma_phi, cfg.steps)
            acc += A.morph_objective(net, x, phi, 0.5, p)
    return (acc / draws).mean().item()


def mean_random_noise_kl(net, x, eps=1.0, draws=20, seed=0):
    rng = np.random.default_rng(seed)
    acc = torch.zeros(x.shape[0], dtype=D)
    with torch.no_grad():
        p = net(x)
        for _ in range(draws):
            r = torch.from_numpy(rng.standard_normal(x.shape))
            r = eps * r / r.flatten(1).norm(dim=1).reshape(-1, 1, 1)
            acc += kl(p, net(x + r), reduction="none")
    return (acc / draws).mean().item()


def test_bias_attack_beats_random_fields(trained_net, toy_splits):
    x = images(toy_splits)
    adv = attack_bias(trained_net, x, AttackConfig(n=1, xi=1.0, alpha=0.3)).value.mean().item()
    assert adv > mean_random_bias_objective(trained_net, x)


def test_morph_attack_beats_random_velocities(trained_net, toy_splits):
    x = images(toy_splits)
    res = attack_morph(trained_net, x)
    assert res.value.mean().item() > mean_random_morph_objective(trained_net, x, res.params)


def test_vat_beats_random_noise(trained_net, toy_splits):
    x = images(toy_splits)
    adv = attack_vat(trained_net, x, 1.0).value.mean().item()
    assert adv > mean_random_noise_kl(trained_net, x, 1.0)
