import copy

import numpy as np
import pytest
import torch

from advfield.data import SynthConfig, generate, split
from advfield.segnet import SegNet, SegNetConfig
from advfield.trainer import TrainConfig, train

torch.set_num_threads(1)

# 32x32 toy task: small enough that a 500-iteration pretraining takes well under a minute
TOY_SIZE = 32


def toy_synth(seed=0, **kw):
    base = dict(height=TOY_SIZE, width=TOY_SIZE, radius_min=6, radius_max=11, thickness_min=2,
                thickness_max=4, center_jitter=3, texture_sigma=3, seed=seed)
    base.update(kw)
    return SynthConfig(**base)


def toy_train_config(seed=0, **kw) -> TrainConfig:
    cfg = TrainConfig(net=SegNetConfig(TOY_SIZE, TOY_SIZE, seed=seed), seed=seed)
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


def tiny_net(seed=0, size=8, widths=(2, 4)) -> SegNet:
    return SegNet(SegNetConfig(size, size, 2, widths, seed))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_splits():
    """(train, val, test, unlabelled) of 30/10/40/20 samples."""
    return split(generate(toy_synth(), 100), (0.3, 0.1, 0.4, 0.2), seed=0)


@pytest.fixture(scope="session")
def pretrained_state(toy_splits):
    """State after 500 iterations of random-augmentation pretraining (seed 0)."""
    tr, va, _, _ = toy_splits
    state, _ = train(toy_train_config(0, finetune_iters=0), tr, va)
    return state


@pytest.fixture(scope="session")
def trained_net(pretrained_state):
    return pretrained_state.net.copy()


@pytest.fixture
def pretrained(pretrained_state):
    return copy.deepcopy(pretrained_state)


@pytest.fixture(scope="session")
def directional_runs(toy_splits):
    """Three finetuning variants from shared pretraining, three seeds.

    Returns ``{attack: [AblationRow per seed]}``; rows score the final network.
    """
    from advfield.evaluation import ablate, expand_grid

    tr, va, te, _ = toy_splits
    cells = expand_grid(toy_train_config(0), {"attack": ["none", "random-bias", "bias"]}, [0, 1, 2])
    rows = ablate(cells, tr, va, te, corruption_alpha=0.3, corruption_trials=5)
    out = {}
    for r in rows:
        out.setdefault(r.attack, []).append(r)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def grad_check(fn, x: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between backward and central differences for scalar ``fn`` at ``x``."""
    from advfield.tensor import backward, finite_diff_grad, max_relative_error

    leaf = torch.from_numpy(np.array(x, dtype=np.float64)).requires_grad_(True)
    g = backward(fn(leaf), {"x": leaf})["x"].numpy()
    fd = finite_diff_grad(lambda a: fn(torch.from_numpy(a)).item(), np.array(x, dtype=np.float64), step)
    return max_relative_error(g, fd)


def probe_weights(shape, seed=0) -> torch.Tensor:
    """Fixed random weights turning a tensor output into an O(1) scalar."""
    w = np.random.default_rng(seed + 10_000).uniform(-1, 1, size=shape)
    return torch.from_numpy(w / np.sqrt(w.size))
