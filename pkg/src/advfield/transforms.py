"""Bias fields, diffeomorphic warps and the random augmentation baseline.

Conventions: scalar fields are ``(..., H, W)``; vector fields (velocities,
displacements, sampling coordinates) are ``(..., H, W, 2)`` with the last
axis ordered ``(x, y)`` = (column, row), in pixel units.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .data import Sample
from .tensor import DTYPE, as_tensor, check_finite, conv2d

DEFAULT_ALPHA = 0.3
DEFAULT_BETA = 2.0
DEFAULT_SIGMA_V = 1.5
DEFAULT_SIGMA_PHI = 1.0
DEFAULT_STEPS = 6


@dataclass
class ControlGrid:
    """k×k log-domain control values of a bias field plus its magnitude bound."""

    values: torch.Tensor
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        self.values = as_tensor(self.values) if not torch.is_tensor(self.values) else self.values
        k = self.values.shape[-1]
        if self.values.dim() < 2 or self.values.shape[-2] != k or k < 2:
            raise ValueError("control grid must be k×k with k >= 2")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")

    @property
    def k(self) -> int:
        return self.values.shape[-1]

    def realize(self, height: int, width: int) -> torch.Tensor:
        return realize_bias(self.values, height, width, self.alpha)


# --- bias fields -------------------------------------------------------------


def cubic_bspline(t):
    """Uniform cubic B-spline basis, support [-2, 2]."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    out = np.where(t < 1, 2.0 / 3.0 - t**2 + 0.5 * t**3, 0.0)
    return np.where((t >= 1) & (t < 2), (2.0 - t) ** 3 / 6.0, out)


def bspline_weights(n: int, k: int) -> torch.Tensor:
    """(n, k) matrix mapping k control points spanning [0, n-1] to n samples.

    Rows are normalised to sum to one, so constant control values give an
    exactly constant field, borders included.
    """
    if n < k:
        raise ValueError(f"image extent {n} is smaller than the control grid {k}")
    spacing = (n - 1) / (k - 1)
    x = np.arange(n, dtype=np.float64)[:, None]
    knots = np.arange(k, dtype=np.float64)[None, :] * spacing
    w = cubic_bspline((x - knots) / spacing)
    return torch.from_numpy(w / w.sum(axis=1, keepdims=True))


def bspline_upsample(grid, height: int, width: int) -> torch.Tensor:
    """Dense log-domain field (..., H, W) from control values (..., k, k); linear in the grid."""
    values = grid.values if isinstance(grid, ControlGrid) else grid
    values = values if torch.is_tensor(values) else as_tensor(values)
    k = values.shape[-1]
    wy = bspline_weights(height, k)
    wx = bspline_weights(width, k)
    return wy @ values @ wx.T


def _rescale_into_bound(dev_from_one: torch.Tensor, dev: torch.Tensor, bound: float) -> torch.Tensor:
    # scale deviations so max |.| <= bound; nudges the scale down by ulps if
    # floating-point rounding would overshoot the bound
    over = dev > bound
    scale = torch.where(over, bound / torch.where(over, dev, torch.ones_like(dev)), torch.ones_like(dev))
    out = dev_from_one * scale
    for _ in range(8):
        peak = out.detach().abs().flatten(-2).amax(-1)[..., None, None]
        bad = peak > bound
        if not bad.any():
            break
        out = out * torch.where(bad, 1.0 - 4 * torch.finfo(DTYPE).eps, 1.0).to(DTYPE)
    return out


def project_bias(phi: torch.Tensor, alpha: float = DEFAULT_ALPHA) -> torch.Tensor:
    """Rescale deviations from one so that max|phi - 1| <= alpha per image; idempotent."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    dev = (phi - 1.0).abs().flatten(-2).amax(-1)[..., None, None]
    out = 1.0 + _rescale_into_bound(phi - 1.0, dev, alpha)
    # 1 + d can round past the bound when |d| sits exactly on it
    one = torch.ones_like(out)
    for _ in range(8):
        over = (out - 1.0).abs() > alpha
        if not over.any():
            break
        out = torch.where(over, out + (torch.nextafter(out.detach(), one) - out.detach()), out)
    return out


def realize_bias(grid, height: int, width: int, alpha: float = DEFAULT_ALPHA,
                 straight_through: bool = False) -> torch.Tensor:
    """Positive multiplicative field exp(B-spline(grid)), projected into the alpha band.

    With ``straight_through`` the projection is applied in the forward pass
    but treated as the identity when differentiating.
    """
    phi = torch.exp(bspline_upsample(grid, height, width))
    check_finite(phi, "bias field")
    projected = project_bias(phi, alpha)
    if straight_through:
        return phi + (projected - phi).detach()
    return projected


def apply_bias(image: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
    if image.shape[-2:] != phi.shape[-2:]:
        raise ValueError(f"image {tuple(image.shape)} and field {tuple(phi.shape)} differ")
    return image * phi


def random_bias(rng: np.random.Generator, alpha: float = DEFAULT_ALPHA, k: int = 4,
                height: int = 64, width: int = 64, n: int | None = None) -> torch.Tensor:
    """Bias field from control values drawn uniformly in [-log(1+alpha), log(1+alpha)]."""
    lim = math.log1p(alpha)
    shape = (k, k) if n is None else (n, k, k)
    values = torch.from_numpy(rng.uniform(-lim, lim, size=shape))
    return realize_bias(values, height, width, alpha)


# --- smoothing ----------------------------------------------------------------


def gaussian_kernel1d(sigma: float) -> torch.Tensor:
    radius = int(math.ceil(4 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return torch.from_numpy(g / g.sum())


def gaussian_smooth(field: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian over the last two axes, truncated at 4 sigma, replicate borders."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return field
    g = gaussian_kernel1d(sigma)
    out = conv2d(field, g[None, :], padding="replicate")
    return conv2d(out, g[:, None], padding="replicate")


def smooth_vector(v: torch.Tensor, sigma: float) -> torch.Tensor:
    """gaussian_smooth applied to each component of a (..., H, W, 2) field."""
    if sigma == 0:
        return v
    return gaussian_smooth(v.movedim(-1, -3), sigma).movedim(-3, -1)


# --- sampling and deformations -----------------------------------------------


def identity_grid(height: int, width: int) -> torch.Tensor:
    ys, xs = torch.meshgrid(torch.arange(height, dtype=DTYPE), torch.arange(width, dtype=DTYPE), indexing="ij")
    return torch.stack([xs, ys], dim=-1)


def _bilinear(img: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample img (N, C, H, W) at absolute coords (N, H', W', 2); coordinates clamp to the frame."""
    n, c, h, w = img.shape
    x = coords[..., 0].clamp(0, w - 1)
    y = coords[..., 1].clamp(0, h - 1)
    x0 = torch.floor(x.detach()).clamp(0, max(w - 2, 0))
    y0 = torch.floor(y.detach()).clamp(0, max(h - 2, 0))
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    flat = img.reshape(n, c, h * w)

    def gather(yy, xx):
        idx = (yy * w + xx).reshape(n, 1, -1).expand(n, c, -1)
        return flat.gather(2, idx).reshape(n, c, *coords.shape[1:3])

    top = gather(y0, x0) * (1 - fx) + gather(y0, x1) * fx
    bottom = gather(y1, x0) * (1 - fx) + gather(y1, x1) * fx
    return top * (1 - fy) + bottom * fy


def _sample_vector(u: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    # u, coords: (N, H, W, 2)
    return _bilinear(u.movedim(-1, 1), coords).movedim(1, -1)


def _batched(fn, field: torch.Tensor, *others: torch.Tensor):
    if field.dim() == 3:
        return fn(field[None], *(o[None] for o in others))[0]
    lead = field.shape[:-3]
    flat = field.reshape(-1, *field.shape[-3:])
    res = fn(flat, *(o.reshape(-1, *o.shape[-3:]) for o in others))
    return res.reshape(*lead, *res.shape[1:])


def integrate_svf(v: torch.Tensor, steps: int = DEFAULT_STEPS) -> torch.Tensor:
    """Scaling and squaring: exp of a stationary velocity field as absolute sampling coordinates."""
    if steps < 1:
        raise ValueError("need at least one squaring step")
    h, w = v.shape[-3], v.shape[-2]
    ident = identity_grid(h, w)

    def run(vb):
        u = vb / (2.0**steps)
        for _ in range(steps):
            u = u + _sample_vector(u, ident + u)
        return ident + u

    return check_finite(_batched(run, v), "deformation")


def compose(phi_a: torch.Tensor, phi_b: torch.Tensor) -> torch.Tensor:
    """(phi_a ∘ phi_b)(x) = phi_a(phi_b(x)) for coordinate maps of equal shape."""
    return _batched(_sample_vector, phi_a, phi_b)


def warp(image: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
    """Bilinearly resample ``image`` at the coordinates ``phi``.

    ``phi`` of shape (H, W, 2) pairs with images (H, W) or (C, H, W);
    (N, H, W, 2) pairs with (N, H, W) or (N, C, H, W).
    """
    if image.shape[-2:] != phi.shape[-3:-1]:
        raise ValueError(f"image {tuple(image.shape)} does not match deformation {tuple(phi.shape)}")
    if phi.dim() == 3:
        img = image.reshape(1, -1, *image.shape[-2:])
        return _bilinear(img, phi[None]).reshape(image.shape)
    if phi.dim() == 4 and image.shape[0] == phi.shape[0] and image.dim() in (3, 4):
        img = image.reshape(image.shape[0], -1, *image.shape[-2:])
        return _bilinear(img, phi).reshape(image.shape)
    raise ValueError(f"unsupported image/deformation shapes {tuple(image.shape)}, {tuple(phi.shape)}")


def warp_mask(mask, phi: torch.Tensor, n_classes: int) -> torch.Tensor:
    """Warp integer labels through their one-hot probability channels, then argmax."""
    m = torch.as_tensor(np.asarray(mask) if not torch.is_tensor(mask) else mask).long()
    onehot = torch.nn.functional.one_hot(m, n_classes).movedim(-1, -3).to(DTYPE)
    return warp(onehot, phi).argmax(dim=-3)


# --- velocity fields ----------------------------------------------------------


def _magnitude_peak(v: torch.Tensor) -> torch.Tensor:
    # sqrt after the max keeps the gradient finite at zero-magnitude pixels
    sq = (v * v).sum(-1).flatten(-2).amax(-1)
    return torch.sqrt(sq)[..., None, None, None]


def rescale_velocity(v: torch.Tensor, beta: float = DEFAULT_BETA) -> torch.Tensor:
    """Global rescale so the largest per-pixel Euclidean magnitude is at most ``beta``."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if beta == 0:
        return v * 0.0
    peak = _magnitude_peak(v)
    over = peak > beta
    scale = torch.where(over, beta / torch.where(over, peak, torch.ones_like(peak)), torch.ones_like(peak))
    out = v * scale
    for _ in range(8):
        bad = _magnitude_peak(out.detach()) > beta
        if not bad.any():
            break
        out = out * torch.where(bad, 1.0 - 4 * torch.finfo(DTYPE).eps, 1.0).to(DTYPE)
    return out


def project_velocity(v: torch.Tensor, beta: float = DEFAULT_BETA, sigma: float = DEFAULT_SIGMA_V) -> torch.Tensor:
    """Fluid-style smoothing followed by the magnitude rescale."""
    return rescale_velocity(smooth_vector(v, sigma), beta)


def realize_morph(v: torch.Tensor, beta: float = DEFAULT_BETA, sigma_v: float = DEFAULT_SIGMA_V,
                  sigma_phi: float = DEFAULT_SIGMA_PHI, steps: int = DEFAULT_STEPS,
                  straight_through: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Project a raw velocity, integrate it and diffusion-smooth the displacement.

    Returns ``(projected velocity, sampling coordinates)``. With
    ``straight_through`` the magnitude rescale is skipped when differentiating;
    the (linear) smoothing is always differentiated.
    """
    vs = smooth_vector(v, sigma_v)
    vp = rescale_velocity(vs, beta)
    if straight_through:
        vp = vs + (vp - vs).detach()
    phi = integrate_svf(vp, steps)
    ident = identity_grid(v.shape[-3], v.shape[-2])
    phi = ident + smooth_vector(phi - ident, sigma_phi)
    return vp, phi


def random_velocity(rng: np.random.Generator, height: int, width: int, beta: float = DEFAULT_BETA,
                    sigma: float = 4.0, n: int | None = None) -> torch.Tensor:
    """Smooth random velocity whose largest per-pixel magnitude equals ``beta``."""
    shape = (height, width, 2) if n is None else (n, height, width, 2)
    v = smooth_vector(torch.from_numpy(rng.standard_normal(shape)), sigma)
    peak = _magnitude_peak(v)
    return v * (beta / torch.clamp(peak, min=1e-12))


# --- random augmentation -----------------------------------------------------


@dataclass
class RandAugConfig:
    scale: float = 0.1          # s ~ U[1-scale, 1+scale]
    rotation: float = 15.0      # degrees, ~ U[-rotation, rotation]
    translation: float = 3.0    # pixels per axis
    flip_x: float = 0.5
    flip_y: float = 0.5
    brightness: float = 0.1     # additive, ~ U[-b, b]
    contrast: float = 0.1       # multiplicative about the mean, ~ U[1-c, 1+c]
    elastic_sigma: float = 4.0
    elastic_magnitude: float = 1.5
    seed: int = 0

    def validate(self) -> None:
        for name in ("scale", "rotation", "translation", "brightness", "contrast",
                     "elastic_sigma", "elastic_magnitude"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.scale >= 1 or self.contrast >= 1:
            raise ValueError("scale and contrast ranges must stay below 1")
        for name in ("flip_x", "flip_y"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be a probability")

    @classmethod
    def off(cls) -> "RandAugConfig":
        return cls(scale=0, rotation=0, translation=0, flip_x=0, flip_y=0, brightness=0,
                   contrast=0, elastic_sigma=0, elastic_magnitude=0)


def flip(sample: Sample, axis: int) -> Sample:
    """Mirror image and mask along ``axis`` (1 = horizontal, 0 = vertical)."""
    mask = None if sample.mask is None else np.flip(sample.mask, axis).copy()
    return sample.replace(image=np.flip(sample.image, axis).copy(), mask=mask)


def rand_augment(sample: Sample, cfg: RandAugConfig, rng: np.random.Generator,
                 n_classes: int = 2) -> Sample:
    """Random affine + elastic geometry, flips, then brightness/contrast on the image only."""
    cfg.validate()
    h, w = sample.image.shape
    # draw everything up front in a fixed order so the stream never depends on branches
    s = 1.0 + cfg.scale * rng.uniform(-1, 1)
    theta = math.radians(cfg.rotation * rng.uniform(-1, 1))
    tx, ty = cfg.translation * rng.uniform(-1, 1, size=2)
    do_fx = rng.uniform() < cfg.flip_x
    do_fy = rng.uniform() < cfg.flip_y
    b = cfg.brightness * rng.uniform(-1, 1)
    c = 1.0 + cfg.contrast * rng.uniform(-1, 1)
    mag = cfg.elastic_magnitude * rng.uniform()
    noise = rng.standard_normal((h, w, 2))

    image, mask = sample.image, sample.mask
    if s != 1.0 or theta != 0.0 or tx != 0.0 or ty != 0.0 or mag > 0:
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        grid = identity_grid(h, w)
        dx, dy = grid[..., 0] - cx, grid[..., 1] - cy
        cos, sin = math.cos(theta), math.sin(theta)
        src = torch.stack([(cos * dx - sin * dy) / s + cx - tx,
                           (sin * dx + cos * dy) / s + cy - ty], dim=-1)
        if mag > 0 and cfg.elastic_sigma > 0:
            el = smooth_vector(torch.from_numpy(noise), cfg.elastic_sigma)
            src = src + el * (mag / max(float(_magnitude_peak(el)), 1e-12))
        image = warp(torch.from_numpy(image), src).numpy()
        if mask is not None:
            mask = warp_mask(mask, src, n_classes).numpy()
    out = sample.replace(image=image, mask=mask)
    if do_fx:
        out = flip(out, 1)
    if do_fy:
        out = flip(out, 0)
    if b != 0.0 or c != 1.0:
        img = out.image
        mean = img.mean()
        out = out.replace(image=(img - mean) * c + mean + b)
    return out
