"""Label-free adversarial example construction by projected gradient ascent.

Every attack takes only a network and images; the clean prediction serves as
the (constant) target, so the same code runs on labelled and unlabelled data.
Images may be a single ``(H, W)`` array or an ``(N, H, W)`` batch, in which
case each element gets its own parameters, normalisation and flag.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import transforms as T
from .distance import composite, kl
from .segnet import SegNet
from .tensor import DTYPE


@dataclass
class AttackConfig:
    n: int = 1
    xi: float = 1.0
    xi_morph: float = 50.0
    alpha: float = T.DEFAULT_ALPHA
    beta: float = T.DEFAULT_BETA
    epsilon: float = 1.0
    w: float = 0.5
    k: int = 4
    sigma_v: float = T.DEFAULT_SIGMA_V
    sigma_phi: float = T.DEFAULT_SIGMA_PHI
    steps: int = T.DEFAULT_STEPS
    init_scale: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.xi <= 0 or self.xi_morph <= 0:
            raise ValueError("step sizes must be positive")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.beta < 0 or self.epsilon <= 0 or self.w < 0 or self.init_scale < 0:
            raise ValueError("beta, w, init_scale must be non-negative and epsilon positive")
        if self.k < 2:
            raise ValueError("control grid needs k >= 2")


@dataclass
class AttackResult:
    """``params``: control grid, velocity or noise; ``field``: bias field or
    sampling coordinates (None for VAT); ``value``: per-sample objective at
    the returned parameters; ``zero_grad``: per-sample flag set when an ascent
    step had no direction."""

    params: torch.Tensor
    field: torch.Tensor | None
    adv_image: torch.Tensor
    value: torch.Tensor
    zero_grad: np.ndarray


def _as_batch(image) -> tuple[torch.Tensor, bool]:
    img = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image).to(DTYPE).detach()
    if img.dim() == 2:
        return img[None], True
    if img.dim() == 3:
        return img, False
    raise ValueError("image must be (H, W) or (N, H, W)")


def _unbatch(result: AttackResult, single: bool) -> AttackResult:
    if not single:
        return result
    return AttackResult(
        params=result.params[0],
        field=None if result.field is None else result.field[0],
        adv_image=result.adv_image[0],
        value=result.value[0],
        zero_grad=result.zero_grad[:1],
    )


def _unit_step(param: torch.Tensor, grad: torch.Tensor, step: float):
    norms = grad.flatten(1).norm(dim=1)
    zero = norms == 0
    safe = torch.where(zero, torch.ones_like(norms), norms)
    direction = grad / safe.reshape(-1, *([1] * (grad.dim() - 1)))
    new = torch.where(zero.reshape(-1, *([1] * (grad.dim() - 1))), param, param + step * direction)
    return new, zero.numpy()


def _clean_prediction(net: SegNet, img: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return net(img).detach()


def bias_objective(net: SegNet, image: torch.Tensor, phi: torch.Tensor, w: float = 0.5,
                   p: torch.Tensor | None = None) -> torch.Tensor:
    """Per-sample composite distance between predictions on clean and biased images."""
    img, _ = _as_batch(image)
    p = _clean_prediction(net, img) if p is None else p
    phat = net(T.apply_bias(img, phi))
    return composite(p, phat, w, reduction="none")


def morph_objective(net: SegNet, image: torch.Tensor, phi: torch.Tensor, w: float = 0.5,
                    p: torch.Tensor | None = None) -> torch.Tensor:
    """Per-sample equivariance gap D_comp[warp(f(I)), f(warp(I))]."""
    img, _ = _as_batch(image)
    p = _clean_prediction(net, img) if p is None else p
    phi = phi.expand(img.shape[0], *phi.shape[-3:]) if phi.dim() == 3 else phi
    return composite(T.warp(p, phi), net(T.warp(img, phi)), w, reduction="none")


def vat_objective(net: SegNet, image: torch.Tensor, noise: torch.Tensor,
                  p: torch.Tensor | None = None) -> torch.Tensor:
    img, _ = _as_batch(image)
    p = _clean_prediction(net, img) if p is None else p
    return kl(p, net(img + noise.reshape(img.shape)), reduction="none")


def attack_bias(net: SegNet, image, cfg: AttackConfig | None = None,
                rng: np.random.Generator | None = None) -> AttackResult:
    """Adversarial bias field: PGD on log-domain control points, alpha-rescale after each step."""
    cfg = cfg or AttackConfig()
    cfg.validate()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    img, single = _as_batch(image)
    n_img, h, w = img.shape
    net = net.detached()
    p = _clean_prediction(net, img)
    c = torch.from_numpy(rng.uniform(-cfg.init_scale, cfg.init_scale, size=(n_img, cfg.k, cfg.k)))
    flagged = np.zeros(n_img, dtype=bool)
    for _ in range(cfg.n):
        leaf = c.clone().requires_grad_(True)
        phi = T.realize_bias(leaf, h, w, cfg.alpha, straight_through=True)
        obj = composite(p, net(T.apply_bias(img, phi)), cfg.w, reduction="none").sum()
        (grad,) = torch.autograd.grad(obj, leaf, allow_unused=True)
        grad = torch.zeros_like(c) if grad is None else grad.detach()
        c, zero = _unit_step(c, grad, cfg.xi)
        flagged |= zero
    with torch.no_grad():
        phi = T.realize_bias(c, h, w, cfg.alpha)
        adv = T.apply_bias(img, phi)
        value = composite(p, net(adv), cfg.w, reduction="none")
    return _unbatch(AttackResult(c, phi, adv, value, flagged), single)


def attack_morph(net: SegNet, image, cfg: AttackConfig | None = None,
                 rng: np.random.Generator | None = None) -> AttackResult:
    """Adversarial diffeomorphism: PGD on a stationary velocity field.

    The objective compares the warped clean prediction with the prediction on
    the warped image; projection smooths the velocity and rescales it to the
    per-pixel bound beta.
    """
    cfg = cfg or AttackConfig()
    cfg.validate()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    img, single = _as_batch(image)
    n_img, h, w = img.shape
    net = net.detached()
    p = _clean_prediction(net, img)
    v = torch.from_numpy(rng.uniform(-cfg.init_scale, cfg.init_scale, size=(n_img, h, w, 2)))
    flagged = np.zeros(n_img, dtype=bool)

    for _ in range(cfg.n):
        leaf = v.clone().requires_grad_(True)
        _, phi = T.realize_morph(leaf, cfg.beta, cfg.sigma_v, cfg.sigma_phi, cfg.steps, straight_through=True)
        obj = composite(T.warp(p, phi), net(T.warp(img, phi)), cfg.w, reduction="none").sum()
        (grad,) = torch.autograd.grad(obj, leaf, allow_unused=True)
        grad = torch.zeros_like(v) if grad is None else grad.detach()
        v, zero = _unit_step(v, grad, cfg.xi_morph)
        flagged |= zero
    with torch.no_grad():
        vp, phi = T.realize_morph(v, cfg.beta, cfg.sigma_v, cfg.sigma_phi, cfg.steps)
        adv = T.warp(img, phi)
        value = composite(T.warp(p, phi), net(adv), cfg.w, reduction="none")
    return _unbatch(AttackResult(vp, phi, adv, value, flagged), single)


def attack_vat(net: SegNet, image, epsilon: float = 1.0,
               rng: np.random.Generator | None = None, seed: int = 0) -> AttackResult:
    """Single gradient step VAT noise: epsilon * grad / ||grad|| from a random unit probe."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = rng if rng is not None else np.random.default_rng(seed)
    img, single = _as_batch(image)
    net = net.detached()
    p = _clean_prediction(net, img)
    r = torch.from_numpy(rng.standard_normal(img.shape))
    r = r / r.flatten(1).norm(dim=1).reshape(-1, 1, 1)
    leaf = r.clone().requires_grad_(True)
    obj = kl(p, net(img + leaf), reduction="none").sum()
    (grad,) = torch.autograd.grad(obj, leaf, allow_unused=True)
    grad = torch.zeros_like(r) if grad is None else grad.detach()
    norms = grad.flatten(1).norm(dim=1)
    zero = norms == 0
    direction = torch.where(zero.reshape(-1, 1, 1), r,
                            grad / torch.where(zero, torch.ones_like(norms), norms).reshape(-1, 1, 1))
    noise = epsilon * direction
    with torch.no_grad():
        adv = img + noise
        value = kl(p, net(adv), reduction="none")
    return _unbatch(AttackResult(noise, None, adv, value, zero.numpy()), single)


def attack_sequential(net: SegNet, image, cfg: AttackConfig | None = None,
                      rng: np.random.Generator | None = None) -> tuple[AttackResult, AttackResult]:
    """Bias attack followed by a morphological attack on the biased image."""
    cfg = cfg or AttackConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    bias = attack_bias(net, image, cfg, rng)
    morph = attack_morph(net, bias.adv_image, cfg, rng)
    return bias, morph


def random_velocity_like(rng: np.random.Generator, v: torch.Tensor, sigma: float = 4.0) -> torch.Tensor:
    """Random smooth velocities whose per-sample peak magnitude matches ``v``."""
    batch = v if v.dim() == 4 else v[None]
    out = T.random_velocity(rng, batch.shape[1], batch.shape[2], 1.0, sigma, n=batch.shape[0])
    peak = torch.sqrt((batch * batch).sum(-1).flatten(1).amax(1)).reshape(-1, 1, 1, 1)
    out = out * peak
    return out if v.dim() == 4 else out[0]

