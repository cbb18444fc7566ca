import math

import numpy as np
import pytest
import torch

from advfield.segnet import (
    AdamState,
    SegNet,
    SegNetConfig,
    adam_step,
    cross_entropy,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
    write_manifest,
)
from advfield.tensor import backward
from conftest import grad_check, probe_weights, tiny_net

D = torch.float64


def test_forward_is_a_softmax_map():
    net = SegNet(SegNetConfig(16, 16, 3, (4, 8), 0))
    x = torch.from_numpy(np.random.default_rng(0).normal(size=(2, 16, 16)))
    p = net(x)
    assert p.shape == (2, 3, 16, 16)
    assert torch.allclose(p.sum(1), torch.ones(2, 16, 16, dtype=D), atol=1e-9)
    assert net(x[0]).shape == (3, 16, 16)


def test_forward_deterministic_for_seed():
    x = torch.from_numpy(np.random.default_rng(0).normal(size=(16, 16)))
    a = SegNet(SegNetConfig(16, 16, seed=5))(x)
    b = SegNet(SegNetConfig(16, 16, seed=5))(x)
    assert a.numpy().tobytes() == b.numpy().tobytes()
    c = SegNet(SegNetConfig(16, 16, seed=6))(x)
    assert not torch.equal(a, c)


def test_zeroed_head_gives_uniform_map():
    net = SegNet(SegNetConfig(16, 16, 4, (4, 8), 0)).zero_head()
    p = net(torch.from_numpy(np.random.default_rng(0).normal(size=(16, 16))))
    assert torch.allclose(p, torch.full_like(p, 0.25), atol=1e-15)


def test_config_and_input_validation():
    with pytest.raises(ValueError):
        SegNet(SegNetConfig(10, 16, widths=(4, 8, 16)))
    with pytest.raises(ValueError):
        SegNet(SegNetConfig(16, 16, n_classes=1))
    net = SegNet(SegNetConfig(16, 16))
    with pytest.raises(ValueError):
        net(torch.zeros(8, 8, dtype=D))


def test_cross_entropy_cases():
    y = torch.from_numpy(np.random.default_rng(0).integers(0, 3, size=(5, 5)))
    onehot = torch.nn.functional.one_hot(y, 3).permute(2, 0, 1).to(D)
    eps = 1e-12
    p = onehot * (1 - 2 * eps) + (1 - onehot) * eps
    assert cross_entropy(p, y).item() == pytest.approx(0.0, abs=1e-10)
    uniform = torch.full((3, 5, 5), 1 / 3, dtype=D)
    assert cross_entropy(uniform, y).item() == pytest.approx(math.log(3), abs=1e-12)
    single = torch.tensor([0.75, 0.25], dtype=D).reshape(2, 1, 1)
    assert cross_entropy(single, torch.tensor([[1]])).item() == pytest.approx(-math.log(0.25), abs=1e-12)
    assert cross_entropy(single, torch.tensor([[1]])).item() == pytest.approx(1.3863, abs=1e-4)
    with pytest.raises(ValueError):
        cross_entropy(uniform, torch.full((5, 5), 3))


def test_adam_zero_gradient_leaves_params():
    params = {"a": torch.tensor([1.0, -2.0], dtype=D)}
    new, state = adam_step(params, {"a": torch.zeros(2, dtype=D)}, AdamState(), 0.1)
    assert torch.equal(new["a"], params["a"])
    assert state.step == 1


def test_adam_first_step_is_lr_times_sign():
    params = {"a": torch.tensor([0.5, 0.5, 0.5], dtype=D)}
    grads = {"a": torch.tensor([3.0, -0.01, 1e3], dtype=D)}
    new, _ = adam_step(params, grads, AdamState(), 1e-2)
    # bias correction cancels exactly; only eps separates the step from lr * sign(g)
    g = grads["a"]
    assert torch.allclose(new["a"], 0.5 - 1e-2 * g / (g.abs() + 1e-8), atol=1e-15, rtol=0)
    big = {"a": torch.tensor([2e4, -5e4, 1e5], dtype=D)}
    new, _ = adam_step(params, big, AdamState(), 1e-2)
    assert torch.allclose(new["a"], 0.5 - 1e-2 * torch.sign(big["a"]), atol=1e-12, rtol=0)
    # inputs untouched
    assert torch.equal(params["a"], torch.tensor([0.5, 0.5, 0.5], dtype=D))


def test_adam_converges_on_quadratic_bowl():
    params = {"a": torch.tensor([0.7], dtype=D)}
    state = AdamState()
    for _ in range(200):
        params, state = adam_step(params, {"a": 2 * params["a"]}, state, 1e-2)
    assert abs(params["a"].item()) < 1e-2


@pytest.mark.parametrize("seed", range(5))
def test_cross_entropy_gradient_wrt_params(seed):
    net = tiny_net(seed)
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.uniform(-1, 1, size=(8, 8)))
    y = torch.from_numpy(rng.integers(0, 2, size=(8, 8)))
    name = "enc0a.weight"
    base = dict(net.params)

    def loss(w):
        params = dict(base)
        params[name] = w
        return cross_entropy(SegNet(net.config, params)(x), y)

    assert grad_check(loss, base[name].numpy()) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_full_net_gradient_wrt_input(seed):
    net = tiny_net(seed)
    w = probe_weights((2, 8, 8), seed)
    x = np.random.default_rng(seed).uniform(-1, 1, size=(8, 8))
    assert grad_check(lambda img: (net(img) * w).sum(), x) < 1e-4


def test_backward_covers_every_parameter():
    net = tiny_net(0).requires_grad_(True)
    x = torch.from_numpy(np.random.default_rng(0).uniform(-1, 1, size=(8, 8)))
    grads = backward(net(x)[1].sum(), net.params)
    assert set(grads) == set(net.params)
    for k, g in grads.items():
        assert g.shape == net.params[k].shape


def test_checkpoint_roundtrip(tmp_path):
    net = SegNet(SegNetConfig(16, 16, 2, (4, 8), 3))
    params = {k: v + 0.01 for k, v in net.params.items()}
    _, state = adam_step(net.params, params, AdamState(), 1e-3)
    save_checkpoint(tmp_path / "ck", net, state, {"note": "x", "n": 3})
    net2, state2, manifest = load_checkpoint(tmp_path / "ck")
    assert net2.checksum() == net.checksum()
    assert state2.step == state.step
    for k in state.m:
        assert torch.equal(state2.m[k], state.m[k]) and torch.equal(state2.v[k], state.v[k])
    assert manifest["note"] == "x" and manifest["n"] == "3"


def test_manifest_roundtrip(tmp_path):
    entries = {"a": "plain", "b": 1.5, "c": [1, 2]}
    write_manifest(tmp_path / "m.txt", entries)
    back = read_manifest(tmp_path / "m.txt")
    assert back["a"] == "plain"
    assert set(back) == set(entries)


def test_detached_view_records_no_param_gradients():
    net = tiny_net(0).requires_grad_(True)
    view = net.detached()
    x = torch.from_numpy(np.random.default_rng(0).uniform(size=(8, 8))).requires_grad_(True)
    out = view(x).sum()
    (gx,) = torch.autograd.grad(out, x)
    assert gx.shape == x.shape
    assert all(not v.requires_grad for v in view.params.values())
