"""Two-phase training: random-augmentation pretraining, then adversarial finetuning.

Finetuning minimises CE + lambda_l * D_comp on labelled data and, in the
semi-supervised mode, adds lambda_u * D_comp on unlabelled data. The
perturbation is rebuilt from the current network at every iteration.
"""
from __future__ import annotations

import copy
import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import transforms as T
from .adversary import AttackConfig, attack_bias, attack_morph, attack_vat
from .data import Sample, images_of, masks_of
from .distance import composite, kl
from .metrics import mean_dice
from .segnet import AdamState, SegNet, SegNetConfig, adam_step, cross_entropy, load_checkpoint, save_checkpoint
from .tensor import NonFiniteError, backward

ATTACKS = ("bias", "morph", "vat", "random-bias", "none")
MODES = ("supervised", "semi")
LOG_COLUMNS = ["iter", "loss_total", "loss_ce", "loss_cons", "val_dice", "dcomp_l", "dcomp_u"]


class TrainingDiverged(NonFiniteError):
    pass


@dataclass
class TrainConfig:
    pretrain_iters: int = 500
    pretrain_lr: float = 1e-3
    finetune_iters: int = 200
    finetune_lr: float = 1e-5
    batch_size: int = 8
    lambda_l: float = 1.0
    lambda_u: float = 0.1
    attack: str = "bias"
    mode: str = "supervised"
    finetune_randaug: bool = True
    reset_optimizer: bool = True
    val_every: int = 50
    seed: int = 0
    net: SegNetConfig = field(default_factory=SegNetConfig)
    attack_cfg: AttackConfig = field(default_factory=AttackConfig)
    randaug: T.RandAugConfig = field(default_factory=T.RandAugConfig)

    def validate(self) -> None:
        if self.attack not in ATTACKS:
            raise ValueError(f"attack must be one of {ATTACKS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.lambda_l < 0 or self.lambda_u < 0:
            raise ValueError("lambda weights must be non-negative")
        if self.pretrain_lr <= 0 or self.finetune_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.pretrain_iters < 0 or self.finetune_iters < 0 or self.batch_size < 1 or self.val_every < 1:
            raise ValueError("iteration counts must be non-negative and batch size, val_every positive")
        self.net.validate()
        self.attack_cfg.validate()
        self.randaug.validate()

    @property
    def total_iters(self) -> int:
        return self.pretrain_iters + self.finetune_iters


@dataclass
class LossBreakdown:
    total: torch.Tensor
    ce: torch.Tensor
    cons_l: torch.Tensor
    cons_u: torch.Tensor
    lambda_l: float
    lambda_u: float

    @property
    def cons(self) -> torch.Tensor:
        return self.lambda_l * self.cons_l + self.lambda_u * self.cons_u


@dataclass
class TrainState:
    net: SegNet
    opt: AdamState
    iteration: int
    rng: np.random.Generator
    history: list = field(default_factory=list)
    best_dice: float = -1.0
    best_iter: int = -1
    best_params: dict | None = None


# --- losses -------------------------------------------------------------------


def _zero() -> torch.Tensor:
    return torch.zeros((), dtype=torch.float64)


def consistency(net: SegNet, images: torch.Tensor, p: torch.Tensor, attack: str,
                cfg: AttackConfig, rng: np.random.Generator) -> torch.Tensor:
    """D_comp between ``p`` (treated as constant) and the prediction on a perturbed copy.

    Reads images only; no labels are involved.
    """
    p = p.detach()
    if attack == "none":
        return _zero()
    h, w = images.shape[-2:]
    if attack == "bias":
        res = attack_bias(net, images, cfg, rng)
        return composite(p, net(res.adv_image), cfg.w)
    if attack == "random-bias":
        phi = T.random_bias(rng, cfg.alpha, cfg.k, h, w, n=images.shape[0])
        return composite(p, net(T.apply_bias(images, phi)), cfg.w)
    if attack == "morph":
        res = attack_morph(net, images, cfg, rng)
        return composite(T.warp(p, res.field), net(res.adv_image), cfg.w)
    if attack == "vat":
        res = attack_vat(net, images, cfg.epsilon, rng)
        return kl(p, net(res.adv_image))
    raise ValueError(f"unknown attack {attack!r}")


def _with_w(cfg: AttackConfig, w: float | None) -> AttackConfig:
    if w is None:
        return cfg
    out = copy.copy(cfg)
    out.w = w
    return out


def loss_supervised(net: SegNet, images, masks, attack: str = "bias", lambda_l: float = 1.0,
                    cfg: AttackConfig | None = None, rng: np.random.Generator | None = None,
                    w: float | None = None) -> LossBreakdown:
    """L_SU = CE(p, y) + lambda_l * D_comp(p, p_hat), averaged over the batch."""
    if masks is None:
        raise ValueError("supervised loss needs label masks")
    cfg = _with_w(cfg or AttackConfig(), w)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    images = torch.as_tensor(images, dtype=torch.float64)
    logp = net.log_proba(images)
    ce = cross_entropy(logp, masks, log_input=True)
    cons = consistency(net, images, logp.exp(), attack, cfg, rng) if lambda_l > 0 else _zero()
    total = ce + lambda_l * cons
    return LossBreakdown(total, ce, cons, _zero(), lambda_l, 0.0)


def loss_semisupervised(net: SegNet, images, masks, unlabelled, attack: str = "bias",
                        lambda_l: float = 1.0, lambda_u: float = 0.1, cfg: AttackConfig | None = None,
                        rng: np.random.Generator | None = None, w: float | None = None) -> LossBreakdown:
    """L_SE = L_SU + lambda_u * D_comp on the unlabelled batch."""
    cfg = _with_w(cfg or AttackConfig(), w)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    sup = loss_supervised(net, images, masks, attack, lambda_l, cfg, rng)
    if lambda_u == 0:
        return sup
    if unlabelled is None or len(unlabelled) == 0:
        raise ValueError("semi-supervised loss needs a non-empty unlabelled batch")
    u = torch.as_tensor(unlabelled, dtype=torch.float64)
    with torch.no_grad():
        pu = net.detached()(u)
    cons_u = consistency(net, u, pu, attack, cfg, rng)
    return LossBreakdown(sup.total + lambda_u * cons_u, sup.ce, sup.cons_l, cons_u, lambda_l, lambda_u)


def loss_and_grads(net: SegNet, breakdown: LossBreakdown) -> dict:
    return backward(breakdown.total, net.params)


# --- training loop ----------------------------------------------------------------


def init_state(config: TrainConfig) -> TrainState:
    net = SegNet(SegNetConfig(**asdict(config.net)))
    return TrainState(net=net, opt=AdamState(), iteration=0, rng=np.random.default_rng(config.seed))


def _batch(samples: Sequence[Sample], size: int, rng: np.random.Generator,
           aug: T.RandAugConfig | None, n_classes: int) -> list[Sample]:
    idx = rng.integers(0, len(samples), size=size)
    out = [samples[i] for i in idx]
    if aug is not None:
        out = [T.rand_augment(s, aug, rng, n_classes) for s in out]
    return out


def predict_masks(net: SegNet, images, batch: int = 32) -> np.ndarray:
    imgs = torch.as_tensor(np.asarray(images), dtype=torch.float64)
    out = []
    with torch.no_grad():
        det = net.detached()
        for i in range(0, imgs.shape[0], batch):
            out.append(det(imgs[i:i + batch]).argmax(dim=1).numpy())
    return np.concatenate(out) if out else np.zeros((0,) + tuple(imgs.shape[1:]), dtype=np.int64)


def validation_dice(net: SegNet, samples: Sequence[Sample]) -> float:
    preds = predict_masks(net, images_of(samples))
    return mean_dice(preds, masks_of(samples))


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _step_terms(net, config, finetune, semi, images, masks, unlabelled, use_aug, rng, n_classes) -> LossBreakdown:
    if not finetune:
        logp = net.log_proba(images)
        ce = cross_entropy(logp, masks, log_input=True)
        return LossBreakdown(ce, ce, _zero(), _zero(), 0.0, 0.0)
    if semi:
        ubatch = _batch(unlabelled, config.batch_size, rng, use_aug, n_classes)
        return loss_semisupervised(net, images, masks, torch.from_numpy(images_of(ubatch)),
                                   config.attack, config.lambda_l, config.lambda_u, config.attack_cfg, rng)
    return loss_supervised(net, images, masks, config.attack, config.lambda_l, config.attack_cfg, rng)


def train(config: TrainConfig, train_set: Sequence[Sample], val_set: Sequence[Sample] | None = None,
          unlabelled: Sequence[Sample] | None = None, state: TrainState | None = None,
          log_path=None, checkpoint_dir=None, stop_at: int | None = None) -> tuple[TrainState, dict]:
    """Run (or resume) training up to ``stop_at`` (default: all iterations).

    Returns the final state and a small report dict. The log CSV is appended to,
    one row per iteration. With ``checkpoint_dir`` the best-on-validation
    network goes to ``best/`` and the resumable final state to ``last/``.
    """
    config.validate()
    if not train_set:
        raise ValueError("labelled training set is empty")
    if any(s.mask is None for s in train_set):
        raise ValueError("training samples must carry masks")
    semi = config.mode == "semi"
    if semi and not unlabelled:
        raise ValueError("semi-supervised mode needs unlabelled samples")
    if not semi and unlabelled:
        raise ValueError("unlabelled samples given to a supervised run")
    state = state or init_state(config)
    net = state.net
    n_classes = net.config.n_classes
    stop = config.total_iters if stop_at is None else min(stop_at, config.total_iters)

    log_file = None
    writer = None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = not log_path.exists() or state.iteration == 0
        log_file = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(log_file, lineterminator="\n")
        if fresh:
            writer.writerow(LOG_COLUMNS)
    t0 = time.perf_counter()
    try:
        while state.iteration < stop:
            it = state.iteration
            finetune = it >= config.pretrain_iters
            if finetune and it == config.pretrain_iters and config.reset_optimizer and it > 0:
                # fresh moments for the finetuning stage; stale ones from the CE phase inflate early steps
                state.opt = AdamState()
            use_aug = config.randaug if (not finetune or config.finetune_randaug) else None
            batch = _batch(train_set, config.batch_size, state.rng, use_aug, n_classes)
            images = torch.from_numpy(images_of(batch))
            masks = torch.from_numpy(masks_of(batch))
            net.requires_grad_(True)
            try:
                terms = _step_terms(net, config, finetune, semi, images, masks, unlabelled, use_aug, state.rng,
                                    n_classes)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite values at iteration {it}: {exc}") from exc
            total = float(terms.total.detach())
            if not np.isfinite(total):
                raise TrainingDiverged(f"non-finite loss at iteration {it}")
            grads = backward(terms.total, net.params)
            lr = config.finetune_lr if finetune else config.pretrain_lr
            new_params, state.opt = adam_step(net.params, grads, state.opt, lr)
            net.params = new_params
            net.requires_grad_(False)
            state.iteration = it + 1

            val = None
            if val_set and (state.iteration % config.val_every == 0 or state.iteration == config.total_iters):
                val = validation_dice(net, val_set)
                if val > state.best_dice:
                    state.best_dice, state.best_iter = val, state.iteration
                    state.best_params = {k: v.detach().clone() for k, v in net.params.items()}
            row = {
                "iter": state.iteration,
                "loss_total": total,
                "loss_ce": float(terms.ce.detach()),
                "loss_cons": float(terms.cons.detach()),
                "val_dice": val,
                "dcomp_l": float(terms.cons_l.detach()),
                "dcomp_u": float(terms.cons_u.detach()),
            }
            state.history.append(row)
            if writer is not None:
                writer.writerow([row["iter"]] + [_fmt(row[c]) for c in LOG_COLUMNS[1:]])
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
    if state.best_params is None and not val_set:
        state.best_iter = state.iteration
    if checkpoint_dir is not None:
        save_train_state(Path(checkpoint_dir) / "last", state, config)
        best = best_network(state)
        save_checkpoint(Path(checkpoint_dir) / "best", best, None,
                        {"best_iter": state.best_iter, "best_dice": repr(float(state.best_dice))})
    report = {
        "iterations": state.iteration,
        "best_iter": state.best_iter,
        "best_val_dice": state.best_dice,
        "final_loss": state.history[-1]["loss_total"] if state.history else None,
        "runtime_s": time.perf_counter() - t0,
    }
    return state, report


def best_network(state: TrainState) -> SegNet:
    if state.best_params is None:
        return state.net.copy()
    return SegNet(SegNetConfig(**asdict(state.net.config)),
                  {k: v.clone() for k, v in state.best_params.items()})


# --- state persistence ---------------------------------------------------------


def save_train_state(path, state: TrainState, config: TrainConfig | None = None) -> Path:
    extra = {
        "iteration": state.iteration,
        "rng_state": state.rng.bit_generator.state,
        "best_dice": repr(float(state.best_dice)),
        "best_iter": state.best_iter,
    }
    if config is not None:
        extra["seed"] = config.seed
    root = save_checkpoint(path, state.net, state.opt, extra)
    (root / "history.json").write_text(json.dumps(state.history, sort_keys=True) + "\n")
    if state.best_params is not None:
        best = SegNet(state.net.config, state.best_params)
        save_checkpoint(root / "best_params", best)
    return root


def load_train_state(path) -> TrainState:
    root = Path(path)
    net, opt, manifest = load_checkpoint(root)
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(manifest["rng_state"])
    history = json.loads((root / "history.json").read_text())
    best_params = None
    if (root / "best_params").exists():
        best_params = dict(load_checkpoint(root / "best_params")[0].params)
    return TrainState(net=net, opt=opt, iteration=int(manifest["iteration"]), rng=rng, history=history,
                      best_dice=float(manifest["best_dice"]), best_iter=int(manifest["best_iter"]),
                      best_params=best_params)
