"""Robustness reports and ablation harnesses."""
from __future__ import annotations

import copy
import csv
import hashlib
import itertools
import json
import time
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import transforms as T
from .adversary import AttackConfig, attack_bias, attack_morph, random_velocity_like
from .data import Sample, images_of, masks_of, write_pgm
from .metrics import dice
from .segnet import SegNet
from .trainer import TrainConfig, TrainState, predict_masks, train

ROBUSTNESS_ATTACKS = ("random-bias", "adv-bias", "random-morph", "adv-morph")


def fingerprint(config) -> str:
    """sha256 of the canonical JSON text of a (dataclass) config."""
    obj = asdict(config) if is_dataclass(config) else config
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    columns: list = field(default_factory=list)
    fingerprint: str = ""

    def aggregates(self) -> dict:
        out = {}
        for c in self.columns:
            vals = np.array([r[c] for r in self.rows], dtype=np.float64)
            out[c] = (float(vals.mean()), float(vals.std())) if vals.size else (float("nan"), float("nan"))
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id"] + self.columns)
            for r in self.rows:
                w.writerow([r["id"]] + [repr(float(r[c])) for c in self.columns])

    def summary(self) -> str:
        lines = [f"config fingerprint: {self.fingerprint}", f"samples: {len(self.rows)}"]
        for c, (m, s) in self.aggregates().items():
            lines.append(f"{c:>18s}: mean {m:.4f}  std {s:.4f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Path:
        root = Path(out_dir)
        root.mkdir(parents=True, exist_ok=True)
        self.write_csv(root / "report.csv")
        (root / "summary.txt").write_text(self.summary())
        return root


def _pred(net: SegNet, images: torch.Tensor) -> np.ndarray:
    return predict_masks(net, images)


def evaluate_robustness(net: SegNet, samples: Sequence[Sample], attacks: Iterable[str] = ("random-bias", "adv-bias"),
                        trials: int = 5, cfg: AttackConfig | None = None, seed: int = 0,
                        dump_dir=None, cls: int = 1) -> EvalReport:
    """Per-sample foreground Dice, clean and under each requested perturbation.

    Random columns average ``trials`` draws. Morphological columns compare to
    the ground truth warped by the same deformation. The network is only read.
    """
    attacks = list(attacks)
    for a in attacks:
        if a not in ROBUSTNESS_ATTACKS:
            raise ValueError(f"unknown robustness attack {a!r}; choose from {ROBUSTNESS_ATTACKS}")
    if trials < 1:
        raise ValueError("trials must be at least 1")
    cfg = cfg or AttackConfig()
    rng = np.random.default_rng(seed)
    imgs = torch.from_numpy(images_of(samples))
    gts = masks_of(samples)
    n, h, w = imgs.shape
    n_classes = net.config.n_classes
    columns = ["dice_clean"] + [f"dice_{a.replace('-', '_')}" for a in attacks]
    scores = {"dice_clean": [dice(p, g, cls) for p, g in zip(_pred(net, imgs), gts)]}
    dumps = {}

    for a in attacks:
        col = f"dice_{a.replace('-', '_')}"
        if a == "random-bias":
            acc = np.zeros(n)
            for _ in range(trials):
                phi = T.random_bias(rng, cfg.alpha, cfg.k, h, w, n=n)
                acc += [dice(p, g, cls) for p, g in zip(_pred(net, imgs * phi), gts)]
            scores[col] = list(acc / trials)
        elif a == "adv-bias":
            res = attack_bias(net, imgs, cfg, rng)
            preds = _pred(net, res.adv_image)
            scores[col] = [dice(p, g, cls) for p, g in zip(preds, gts)]
            dumps["bias"] = (res.adv_image, preds, res.field)
        elif a == "random-morph":
            acc = np.zeros(n)
            for _ in range(trials):
                v = T.random_velocity(rng, h, w, cfg.beta, n=n)
                _, phi = T.realize_morph(v, cfg.beta, cfg.sigma_v, cfg.sigma_phi, cfg.steps)
                warped_gt = T.warp_mask(torch.from_numpy(gts), phi, n_classes).numpy()
                acc += [dice(p, g, cls) for p, g in zip(_pred(net, T.warp(imgs, phi)), warped_gt)]
            scores[col] = list(acc / trials)
        elif a == "adv-morph":
            res = attack_morph(net, imgs, cfg, rng)
            warped_gt = T.warp_mask(torch.from_numpy(gts), res.field, n_classes).numpy()
            preds = _pred(net, res.adv_image)
            scores[col] = [dice(p, g, cls) for p, g in zip(preds, warped_gt)]
            dumps["morph"] = (res.adv_image, preds, None)

    rows = [{"id": s.id, **{c: float(scores[c][i]) for c in columns}} for i, s in enumerate(samples)]
    report = EvalReport(rows, columns, fingerprint({"attacks": attacks, "trials": trials, "seed": seed,
                                                    "attack_cfg": asdict(cfg)}))
    if dump_dir is not None:
        _dump_quadruplets(Path(dump_dir), samples, _pred(net, imgs), dumps)
    return report


def _dump_quadruplets(root: Path, samples, clean_preds, dumps) -> None:
    root.mkdir(parents=True, exist_ok=True)
    for kind, (adv, preds, fields) in dumps.items():
        for i, s in enumerate(samples):
            stem = root / f"{s.id}_{kind}"
            write_pgm(f"{stem}_image.pgm", adv[i].numpy(), 0.0, 1.3)
            write_pgm(f"{stem}_clean_pred.pgm", clean_preds[i], 0, 1)
            write_pgm(f"{stem}_attacked_pred.pgm", preds[i], 0, 1)
            if fields is not None:
                write_pgm(f"{stem}_field.pgm", fields[i].numpy(), 0.7, 1.3)


def corrupted_test_dice(net: SegNet, samples: Sequence[Sample], alpha: float = 0.3, k: int = 4,
                        trials: int = 5, seed: int = 10_000, cls: int = 1) -> float:
    """Mean foreground Dice under held-out random bias fields (seeded separately from training)."""
    rng = np.random.default_rng(seed)
    imgs = torch.from_numpy(images_of(samples))
    gts = masks_of(samples)
    n, h, w = imgs.shape
    total = 0.0
    for _ in range(trials):
        phi = T.random_bias(rng, alpha, k, h, w, n=n)
        total += float(np.mean([dice(p, g, cls) for p, g in zip(predict_masks(net, imgs * phi), gts)]))
    return total / trials


def clean_test_dice(net: SegNet, samples: Sequence[Sample], cls: int = 1) -> float:
    preds = predict_masks(net, images_of(samples))
    return float(np.mean([dice(p, g, cls) for p, g in zip(preds, masks_of(samples))]))


# --- ablation -------------------------------------------------------------------


def _set_path(cfg: TrainConfig, key: str, value) -> None:
    target = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        target = getattr(target, p)
    if not hasattr(target, parts[-1]):
        raise KeyError(f"unknown ablation key {key!r}")
    setattr(target, parts[-1], value)


def expand_grid(base: TrainConfig, axes: dict, seeds: Sequence[int]) -> list[tuple[str, TrainConfig]]:
    """Cartesian product of ``axes`` (dotted TrainConfig paths -> values) times seeds."""
    keys = list(axes)
    cells = []
    for combo in itertools.product(*(axes[k] for k in keys)) if keys else [()]:
        for seed in seeds:
            cfg = copy.deepcopy(base)
            for k, v in zip(keys, combo):
                _set_path(cfg, k, v)
            cfg.seed = int(seed)
            cfg.net.seed = int(seed)
            name = ",".join(f"{k}={v}" for k, v in zip(keys, combo)) or "base"
            cells.append((name, cfg))
    return cells


def _pretrain_key(cfg: TrainConfig) -> str:
    return fingerprint({
        "net": asdict(cfg.net), "seed": cfg.seed, "pretrain_iters": cfg.pretrain_iters,
        "pretrain_lr": cfg.pretrain_lr, "batch_size": cfg.batch_size, "randaug": asdict(cfg.randaug),
        "val_every": cfg.val_every, "total": cfg.total_iters,
    })


@dataclass
class AblationRow:
    cell: str
    seed: int
    attack: str
    w: float
    test_dice_clean: float
    test_dice_corrupted: float
    best_val_dice: float
    final_val_dice: float
    runtime_s: float
    error: str = ""

    def key(self) -> tuple:
        """Everything except wall-clock runtime."""
        d = asdict(self)
        d.pop("runtime_s")
        return tuple(d.values())


def _final_val(state: TrainState) -> float:
    vals = [r["val_dice"] for r in state.history if r.get("val_dice") is not None]
    return float(vals[-1]) if vals else float("nan")


def ablate(cells: Sequence[tuple[str, TrainConfig]], train_set, val_set=None, test_set=None, unlabelled=None,
           corruption_alpha: float = 0.3, corruption_trials: int = 5, corruption_seed: int = 10_000,
           share_pretraining: bool = True) -> list[AblationRow]:
    """Train every cell and score its final network on the test set.

    Cells that share a pretraining configuration reuse one pretraining run;
    training is deterministic, so this gives the same rows as separate runs.
    A failing cell yields a row with ``error`` set and NaN scores.
    """
    if not cells:
        raise ValueError("ablation grid is empty")
    test_set = test_set or val_set or train_set
    cache: dict[str, TrainState] = {}
    rows = []
    for name, cfg in cells:
        t0 = time.perf_counter()
        try:
            unl = unlabelled if cfg.mode == "semi" else None
            key = _pretrain_key(cfg)
            if share_pretraining and key in cache:
                state = copy.deepcopy(cache[key])
            else:
                state, _ = train(cfg, train_set, val_set, unl, stop_at=cfg.pretrain_iters)
                if share_pretraining:
                    cache[key] = copy.deepcopy(state)
            state, report = train(cfg, train_set, val_set, unl, state=state)
            net = state.net
            rows.append(AblationRow(name, cfg.seed, cfg.attack, cfg.attack_cfg.w,
                                    clean_test_dice(net, test_set),
                                    corrupted_test_dice(net, test_set, corruption_alpha, cfg.attack_cfg.k,
                                                        corruption_trials, corruption_seed),
                                    float(state.best_dice), _final_val(state), time.perf_counter() - t0))
        except Exception as exc:  # noqa: BLE001 - one failing cell must not stop the grid
            rows.append(AblationRow(name, cfg.seed, cfg.attack, cfg.attack_cfg.w, float("nan"), float("nan"),
                                    float("nan"), float("nan"), time.perf_counter() - t0, f"{type(exc).__name__}: {exc}"))
    return rows


def write_ablation(rows: Sequence[AblationRow], out_dir) -> Path:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    cols = [f for f in AblationRow.__dataclass_fields__]
    with open(root / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([getattr(r, c) if not isinstance(getattr(r, c), float) else repr(getattr(r, c))
                        for c in cols])
    by_cell: dict[str, list[AblationRow]] = {}
    for r in rows:
        by_cell.setdefault(r.cell, []).append(r)
    lines = ["cell | n | clean dice | corrupted dice"]
    for cell, rs in by_cell.items():
        clean = np.mean([r.test_dice_clean for r in rs])
        corr = np.mean([r.test_dice_corrupted for r in rs])
        lines.append(f"{cell} | {len(rs)} | {clean:.4f} | {corr:.4f}")
    (root / "summary.txt").write_text("\n".join(lines) + "\n")
    return root
