"""Synthetic annulus segmentation data, deterministic splits and dataset I/O.

Each image shows a bright cavity surrounded by a ring (the foreground class)
on a smooth textured background, a loose stand-in for a short-axis cardiac
slice with the left-ventricular myocardium labelled.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor import TensorFormatError, load_tensor, save_tensor

FORMAT_NAME = "advfield-dataset"
FORMAT_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray | None = None
    id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def labelled(self) -> bool:
        return self.mask is not None

    def replace(self, **changes) -> "Sample":
        return dataclasses.replace(self, **changes)


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    center_jitter: float = 4.0
    radius_min: float = 12.0
    radius_max: float = 20.0
    thickness_min: float = 3.0
    thickness_max: float = 6.0
    contrast_min: float = 0.7
    contrast_max: float = 1.0
    background: float = 0.25
    ring: float = 0.55
    cavity: float = 0.9
    texture_sigma: float = 4.0
    texture_amplitude: float = 0.08
    noise: float = 0.02
    n_classes: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise DatasetError("image extents must be at least 8")
        if not (0 < self.thickness_min <= self.thickness_max):
            raise DatasetError("thickness range must be positive and ordered")
        if not (0 < self.radius_min <= self.radius_max):
            raise DatasetError("radius range must be positive and ordered")
        if self.thickness_max >= self.radius_min:
            raise DatasetError("thickness_max must be below radius_min")
        if self.contrast_min > self.contrast_max or self.contrast_min < 0:
            raise DatasetError("contrast range must be non-negative and ordered")
        if self.center_jitter < 0 or self.noise < 0 or self.texture_sigma < 0:
            raise DatasetError("jitter, noise and texture sigma must be non-negative")
        half = min(self.height, self.width) / 2.0
        if self.radius_max + self.center_jitter > half - 1.0:
            raise DatasetError(
                f"ring of radius {self.radius_max} with jitter {self.center_jitter} "
                f"does not fit inside a {self.height}x{self.width} frame"
            )
        if self.n_classes != 2:
            raise DatasetError("the annulus task has exactly two classes")

    def area_bounds(self) -> tuple[float, float]:
        """Analytic min/max annulus area over the configured radius/thickness ranges."""
        lo = math.pi * self.thickness_min * (2 * self.radius_min - self.thickness_min)
        hi = math.pi * self.thickness_max * (2 * self.radius_max - self.thickness_max)
        return lo, hi


_SUPERSAMPLE = 4


def _coverage(h, w, cx, cy, r_in, r_out):
    # fraction of each pixel covered by the annulus, by 4x4 supersampling
    offs = (np.arange(_SUPERSAMPLE) + 0.5) / _SUPERSAMPLE - 0.5
    ys = (np.arange(h)[:, None] + offs[None, :]).reshape(-1)
    xs = (np.arange(w)[:, None] + offs[None, :]).reshape(-1)
    d = np.hypot(xs[None, :] - cx, ys[:, None] - cy)
    ring = ((d >= r_in) & (d < r_out)).astype(np.float64)
    cav = (d < r_in).astype(np.float64)
    shape = (h, _SUPERSAMPLE, w, _SUPERSAMPLE)
    return ring.reshape(shape).mean(axis=(1, 3)), cav.reshape(shape).mean(axis=(1, 3))


def _one_sample(cfg: SynthConfig, rng: np.random.Generator, idx: int) -> Sample:
    h, w = cfg.height, cfg.width
    for _ in range(100):
        cx = (w - 1) / 2.0 + rng.uniform(-cfg.center_jitter, cfg.center_jitter)
        cy = (h - 1) / 2.0 + rng.uniform(-cfg.center_jitter, cfg.center_jitter)
        r_out = rng.uniform(cfg.radius_min, cfg.radius_max)
        thick = rng.uniform(cfg.thickness_min, cfg.thickness_max)
        contrast = rng.uniform(cfg.contrast_min, cfg.contrast_max)
        texture = rng.standard_normal((h, w))
        noise = rng.standard_normal((h, w))
        r_in = r_out - thick
        d = np.hypot(np.arange(w)[None, :] - cx, np.arange(h)[:, None] - cy)
        mask = ((d >= r_in) & (d < r_out)).astype(np.int64)
        if mask.any():
            break
    else:  # pragma: no cover - geometry validation makes this unreachable
        raise DatasetError("could not draw a non-empty ring")
    ring_cov, cav_cov = _coverage(h, w, cx, cy, r_in, r_out)
    bg = cfg.background
    if cfg.texture_sigma > 0 and cfg.texture_amplitude > 0:
        tex = gaussian_filter(texture, cfg.texture_sigma, mode="nearest")
        tex /= max(np.abs(tex).max(), 1e-12)
        bg = bg + cfg.texture_amplitude * tex
    img = bg + contrast * (ring_cov * (cfg.ring - bg) + cav_cov * (cfg.cavity - bg))
    img = img + cfg.noise * noise
    img = np.clip(img, 0.0, 1.0)
    meta = {
        "cx": cx, "cy": cy, "r_out": r_out, "thickness": thick,
        "contrast": contrast, "index": idx,
    }
    return Sample(image=img, mask=mask, id=f"s{idx:05d}", meta=meta)


def generate(cfg: SynthConfig, count: int) -> list[Sample]:
    """Generate ``count`` samples; each sample uses its own seed derived from ``cfg.seed``."""
    if count < 1:
        raise DatasetError("count must be at least 1")
    cfg.validate()
    seeds = np.random.SeedSequence(cfg.seed).spawn(count)
    return [_one_sample(cfg, np.random.default_rng(s), i) for i, s in enumerate(seeds)]


def split(
    samples: Sequence[Sample],
    fractions: Sequence[float],
    seed: int = 0,
) -> tuple[list[Sample], list[Sample], list[Sample], list[Sample]]:
    """Partition into (train, val, test, unlabelled); unlabelled samples lose their masks.

    Each split gets ``floor(fraction * n)`` samples; leftovers are dropped.
    A positive fraction that rounds down to zero samples is an error.
    """
    if len(fractions) != 4:
        raise DatasetError("need four fractions: train, val, test, unlabelled")
    if any(f < 0 for f in fractions) or sum(fractions) > 1 + 1e-12:
        raise DatasetError("fractions must be non-negative and sum to at most 1")
    n = len(samples)
    counts = [int(math.floor(f * n + 1e-9)) for f in fractions]
    for name, f, c in zip(("train", "val", "test", "unlabelled"), fractions, counts):
        if f > 0 and c == 0:
            raise DatasetError(f"{name} split requested but would be empty for {n} samples")
    order = np.random.default_rng(seed).permutation(n)
    parts, start = [], 0
    for c in counts:
        parts.append([samples[i] for i in order[start:start + c]])
        start += c
    parts[3] = [s.replace(mask=None) for s in parts[3]]
    return parts[0], parts[1], parts[2], parts[3]


def images_of(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float64)


def masks_of(samples: Sequence[Sample]) -> np.ndarray:
    if any(s.mask is None for s in samples):
        raise DatasetError("masks requested from unlabelled samples")
    return np.stack([s.mask for s in samples]).astype(np.int64)


def write_pgm(path, image: np.ndarray, vmin: float | None = None, vmax: float | None = None) -> None:
    """Write an 8-bit binary PGM, linearly mapping [vmin, vmax] to [0, 255]."""
    img = np.asarray(image, dtype=np.float64)
    lo = img.min() if vmin is None else vmin
    hi = img.max() if vmax is None else vmax
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    data = np.clip(np.round(scaled * 255), 0, 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def save_dataset(samples: Sequence[Sample], path, config: dict | None = None, preview: bool = True) -> Path:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    if preview:
        (root / "preview").mkdir(exist_ok=True)
    entries = []
    for s in samples:
        h, w = s.image.shape
        save_tensor(s.image, root / "images" / f"{s.id}.advf")
        if s.mask is not None:
            save_tensor(s.mask.astype(np.float64), root / "masks" / f"{s.id}.advf")
        if preview:
            write_pgm(root / "preview" / f"{s.id}.pgm", s.image, 0.0, 1.0)
        entries.append({"id": s.id, "height": h, "width": w, "labelled": s.mask is not None, "meta": s.meta})
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": config or {},
        "samples": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_dataset(path) -> list[Sample]:
    root = Path(path)
    mf = root / "manifest.json"
    if not mf.exists():
        raise DatasetError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(mf.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise DatasetError("manifest is not an advfield dataset")
    out = []
    for e in manifest["samples"]:
        try:
            img = load_tensor(root / "images" / f"{e['id']}.advf").numpy()
            mask = None
            if e["labelled"]:
                mask = load_tensor(root / "masks" / f"{e['id']}.advf").numpy().astype(np.int64)
        except TensorFormatError as exc:
            raise DatasetError(f"sample {e['id']}: corrupt header ({exc})") from exc
        if img.shape != (e["height"], e["width"]) or (mask is not None and mask.shape != img.shape):
            raise DatasetError(f"sample {e['id']}: extent mismatch with manifest")
        out.append(Sample(image=img, mask=mask, id=e["id"], meta=e.get("meta", {})))
    return out


def dataset_config(path) -> dict:
    return json.loads((Path(path) / "manifest.json").read_text()).get("config", {})
