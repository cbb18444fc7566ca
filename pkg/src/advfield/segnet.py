"""A small U-net style segmentation network with an explicit parameter store.

Parameters live in an ordered ``name -> tensor`` dict so that gradients,
optimizer moments and checkpoints all share one layout.
"""
from __future__ import annotations

import hashlib
import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .tensor import DTYPE, check_finite, load_tensor, save_tensor


@dataclass
class SegNetConfig:
    height: int = 64
    width: int = 64
    n_classes: int = 2
    widths: tuple = (8, 16, 32)
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if len(self.widths) < 1 or min(self.widths) < 1:
            raise ValueError("widths must be a non-empty list of positive ints")
        f = 2**self.depth
        if self.height % f or self.width % f:
            raise ValueError(f"input extents must be divisible by {f}")


def _layer_shapes(cfg: SegNetConfig):
    shapes = []
    w = cfg.widths
    c_in = 1
    for i, c in enumerate(w):
        shapes += [(f"enc{i}a", c, c_in, 3), (f"enc{i}b", c, c, 3)]
        c_in = c
    for i in reversed(range(cfg.depth)):
        shapes += [(f"up{i}", w[i], w[i + 1], 3), (f"dec{i}", w[i], 2 * w[i], 3)]
    shapes.append(("head", cfg.n_classes, w[0], 1))
    return shapes


class SegNet:
    """Encoder-decoder: 3x3 conv+ReLU pairs, 2x2 max-pool, nearest upsampling,
    skip concatenation and a 1x1 softmax head."""

    def __init__(self, config: SegNetConfig | None = None, params: dict | None = None):
        self.config = config or SegNetConfig()
        self.config.validate()
        self.params = self._init_params() if params is None else OrderedDict(params)
        self._check_params()

    def _init_params(self) -> "OrderedDict[str, torch.Tensor]":
        gen = torch.Generator().manual_seed(int(self.config.seed))
        params = OrderedDict()
        for name, c_out, c_in, k in _layer_shapes(self.config):
            std = math.sqrt(2.0 / (c_in * k * k))
            params[f"{name}.weight"] = torch.randn(c_out, c_in, k, k, generator=gen, dtype=DTYPE) * std
            params[f"{name}.bias"] = torch.zeros(c_out, dtype=DTYPE)
        return params

    def _check_params(self) -> None:
        for name, c_out, c_in, k in _layer_shapes(self.config):
            if tuple(self.params[f"{name}.weight"].shape) != (c_out, c_in, k, k):
                raise ValueError(f"parameter {name}.weight has the wrong shape")
            if tuple(self.params[f"{name}.bias"].shape) != (c_out,):
                raise ValueError(f"parameter {name}.bias has the wrong shape")

    def requires_grad_(self, flag: bool = True) -> "SegNet":
        for k in self.params:
            self.params[k] = self.params[k].detach().requires_grad_(flag)
        return self

    def copy(self) -> "SegNet":
        return SegNet(SegNetConfig(**asdict(self.config)),
                      OrderedDict((k, v.detach().clone()) for k, v in self.params.items()))

    def detached(self) -> "SegNet":
        """View sharing parameter storage but recording no gradients for them."""
        net = SegNet.__new__(SegNet)
        net.config = self.config
        net.params = OrderedDict((k, v.detach()) for k, v in self.params.items())
        return net

    def zero_head(self) -> "SegNet":
        """Zero the final layer so the net outputs 1/C everywhere (test helper)."""
        self.params["head.weight"] = torch.zeros_like(self.params["head.weight"])
        self.params["head.bias"] = torch.zeros_like(self.params["head.bias"])
        return self

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(v.detach().numpy().tobytes())
        return h.hexdigest()

    def _conv(self, name, x, relu=True):
        w = self.params[f"{name}.weight"]
        x = F.conv2d(x, w, self.params[f"{name}.bias"], padding=w.shape[-1] // 2)
        return F.relu(x) if relu else x

    def logits(self, image: torch.Tensor) -> torch.Tensor:
        h, w = self.config.height, self.config.width
        if image.shape[-2:] != (h, w) or image.dim() not in (2, 3):
            raise ValueError(f"expected an ({h}, {w}) image or (N, {h}, {w}) batch, got {tuple(image.shape)}")
        x = image.to(DTYPE).reshape(-1, 1, h, w)
        skips = []
        for i in range(len(self.config.widths)):
            if i:
                x = F.max_pool2d(x, 2)
            x = self._conv(f"enc{i}b", self._conv(f"enc{i}a", x))
            skips.append(x)
        for i in reversed(range(self.config.depth)):
            x = self._conv(f"up{i}", F.interpolate(x, scale_factor=2, mode="nearest"))
            x = self._conv(f"dec{i}", torch.cat([x, skips[i]], dim=1))
        out = self._conv("head", x, relu=False)
        return out[0] if image.dim() == 2 else out

    def log_proba(self, image: torch.Tensor) -> torch.Tensor:
        return check_finite(F.log_softmax(self.logits(image), dim=-3), "log-probabilities")

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """Per-pixel class probabilities, (C, H, W) or (N, C, H, W)."""
        return check_finite(F.softmax(self.logits(image), dim=-3), "probabilities")

    __call__ = forward


def cross_entropy(p: torch.Tensor, y, log_input: bool = False) -> torch.Tensor:
    """Pixel-mean of -log p[y]; ``p`` is (C, H, W) or (N, C, H, W)."""
    y = torch.as_tensor(np.asarray(y) if not torch.is_tensor(y) else y).long()
    n_classes = p.shape[-3]
    if y.shape != p.shape[:-3] + p.shape[-2:]:
        raise ValueError(f"labels {tuple(y.shape)} do not match probabilities {tuple(p.shape)}")
    if y.numel() and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    logp = p if log_input else torch.log(p.clamp_min(1e-300))
    picked = logp.gather(-3, y.unsqueeze(-3)).squeeze(-3)
    return -picked.mean()


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns ``(new params, new state)``; inputs are not mutated."""
    t = state.step + 1
    new_params, new_m, new_v = OrderedDict(), {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        g = g.detach()
        m = beta1 * state.m.get(name, torch.zeros_like(g)) + (1 - beta1) * g
        v = beta2 * state.v.get(name, torch.zeros_like(g)) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_params[name] = p.detach() - lr * m_hat / (torch.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t)


# --- checkpoints --------------------------------------------------------------


def _format_value(v) -> str:
    return json.dumps(v, sort_keys=True) if not isinstance(v, str) else v


def write_manifest(path, entries: dict) -> None:
    lines = [f"{k}={_format_value(v)}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def save_checkpoint(path, net: SegNet, state: AdamState | None = None, extra: dict | None = None) -> Path:
    """Directory checkpoint: manifest.txt (key=value) plus one ADVF file per tensor."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = {f"config.{k}": v for k, v in asdict(net.config).items()}
    entries["config.widths"] = list(net.config.widths)
    entries["params"] = list(net.params)
    entries["step"] = 0 if state is None else state.step
    entries.update(extra or {})
    groups = {"param": net.params}
    if state is not None and state.step:
        groups.update({"adam_m": state.m, "adam_v": state.v})
    for group, tensors in groups.items():
        (root / group).mkdir(exist_ok=True)
        for name, t in tensors.items():
            save_tensor(t, root / group / f"{name}.advf")
    write_manifest(root / "manifest.txt", entries)
    return root


def load_checkpoint(path) -> tuple[SegNet, AdamState, dict]:
    root = Path(path)
    manifest = read_manifest(root / "manifest.txt")
    cfg = SegNetConfig(
        height=int(manifest["config.height"]),
        width=int(manifest["config.width"]),
        n_classes=int(manifest["config.n_classes"]),
        widths=tuple(json.loads(manifest["config.widths"])),
        seed=int(manifest["config.seed"]),
    )
    names = json.loads(manifest["params"])
    params = OrderedDict((n, load_tensor(root / "param" / f"{n}.advf")) for n in names)
    step = int(manifest.get("step", 0))
    state = AdamState(step=step)
    if step:
        state.m = {n: load_tensor(root / "adam_m" / f"{n}.advf") for n in names}
        state.v = {n: load_tensor(root / "adam_v" / f"{n}.advf") for n in names}
    return SegNet(cfg, params), state, manifest
