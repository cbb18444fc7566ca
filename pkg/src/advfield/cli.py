"""Command-line entry point: ``advfield {synth,train,attack,eval,ablate}``.

Exit codes: 0 success, 2 configuration/usage error, 3 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .adversary import attack_bias, attack_morph, attack_vat
from .config import ConfigError, RunConfig
from .evaluation import ablate, evaluate_robustness, expand_grid, write_ablation
from .segnet import load_checkpoint
from .tensor import NonFiniteError, save_tensor
from .trainer import predict_masks, train

log = logging.getLogger("advfield")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _set_pairs(pairs) -> dict:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ConfigError(f"--set expects key=value, got {p!r}")
        k, _, v = p.partition("=")
        out[k.strip()] = v.strip()
    return out


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file (e.g. a previous effective_config.txt)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--seed", type=int, help="global seed (run.seed)")
    p.add_argument("--out", help="output directory (run.out)")
    p.add_argument("--profile", choices=["desk", "paper"], help="hyperparameter profile")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advfield", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic annulus dataset")
    _common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)

    p = sub.add_parser("train", help="pretrain with random augmentation, then adversarially finetune")
    _common(p)
    p.add_argument("--data", help="dataset directory (data.path)")
    p.add_argument("--mode", choices=["supervised", "semi"])
    p.add_argument("--attack", choices=["bias", "morph", "vat", "random-bias", "none"])
    p.add_argument("--pretrain-iters", type=int)
    p.add_argument("--finetune-iters", type=int)

    p = sub.add_parser("attack", help="construct adversarial examples for a checkpoint")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--kind", choices=["bias", "morph", "vat"], help="attack_run.kind (default bias)")
    p.add_argument("--limit", type=int, help="attack at most this many samples (attack_run.limit, 0 = all)")

    p = sub.add_parser("eval", help="robustness report for a checkpoint")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--attacks", help="comma list from random-bias,adv-bias,random-morph,adv-morph; '' for clean only")
    p.add_argument("--trials", type=int)

    p = sub.add_parser("ablate", help="train a grid of configurations and tabulate test Dice")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--axes", help="e.g. 'train.attack=random-bias|bias;attack.w=0.5|0'")
    p.add_argument("--seeds", help="comma list of seeds")
    return parser


def _overrides(args) -> dict:
    o = _set_pairs(args.set)
    simple = {"seed": "run.seed", "out": "run.out", "count": "synth.count", "height": "synth.height",
              "width": "synth.width", "data": "data.path", "mode": "train.mode", "attack": "train.attack",
              "pretrain_iters": "train.pretrain_iters", "finetune_iters": "train.finetune_iters",
              "checkpoint": "eval.checkpoint", "attacks": "eval.attacks", "trials": "eval.trials",
              "axes": "ablate.axes", "seeds": "ablate.seeds",
              "kind": "attack_run.kind", "limit": "attack_run.limit"}
    for attr, key in simple.items():
        val = getattr(args, attr, None)
        if val is not None:
            o[key] = str(val)
    return o


def _out_dir(rc: RunConfig) -> Path:
    out = Path(rc["run.out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_splits(rc: RunConfig):
    path = rc["data.path"]
    if not path:
        raise ConfigError("no dataset given (--data or data.path)")
    if not (Path(path) / "manifest.json").exists():
        raise ConfigError(f"dataset {path!r} not found")
    samples = D.load_dataset(path)
    return D.split(samples, rc["data.fractions"], rc["data.split_seed"])


def cmd_synth(rc: RunConfig) -> int:
    count = rc["synth.count"]
    if count < 1:
        raise ConfigError("--count must be at least 1")
    cfg = rc.synth_config()
    try:
        samples = D.generate(cfg, count)
    except D.DatasetError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(rc)
    # the output path is not part of the dataset identity
    D.save_dataset(samples, out, config={k: v for k, v in sorted(rc.values.items()) if k != "run.out"})
    rc.write(out / "effective_config.txt")
    print(f"wrote {count} samples ({cfg.height}x{cfg.width}) to {out}")
    return EXIT_OK


def cmd_train(rc: RunConfig) -> int:
    train_set, val_set, _, unl = _load_splits(rc)
    if not train_set:
        raise ConfigError("training split is empty")
    h, w = train_set[0].image.shape
    tc = rc.train_config(h, w)
    out = _out_dir(rc)
    rc.write(out / "effective_config.txt")
    state, report = train(tc, train_set, val_set or None, unl if tc.mode == "semi" else None,
                          log_path=out / "train_log.csv", checkpoint_dir=out / "checkpoints")
    print(f"finished {report['iterations']} iterations; best val dice {report['best_val_dice']:.4f} "
          f"at {report['best_iter']} ({report['runtime_s']:.1f}s)")
    return EXIT_OK


def _checkpoint(rc: RunConfig, height: int, width: int):
    ck = rc["eval.checkpoint"]
    if not ck:
        raise ConfigError("no checkpoint given (--checkpoint)")
    if not (Path(ck) / "manifest.txt").exists():
        raise ConfigError(f"checkpoint {ck!r} not found")
    net, _, _ = load_checkpoint(ck)
    if (net.config.height, net.config.width) != (height, width):
        raise ConfigError(f"checkpoint extents {net.config.height}x{net.config.width} "
                          f"do not match data {height}x{width}")
    return net


def _eval_samples(rc: RunConfig):
    train_set, val_set, test_set, _ = _load_splits(rc)
    split = {"train": train_set, "val": val_set, "test": test_set}.get(rc["eval.split"])
    if split is None:
        raise ConfigError("eval.split must be train, val or test")
    if not split:
        raise ConfigError(f"{rc['eval.split']} split is empty")
    return split


def cmd_attack(rc: RunConfig) -> int:
    kind, limit = rc["attack_run.kind"], rc["attack_run.limit"]
    if kind not in ("bias", "morph", "vat"):
        raise ConfigError("attack_run.kind must be bias, morph or vat")
    if limit < 0:
        raise ConfigError("attack_run.limit must be non-negative")
    samples = _eval_samples(rc)
    if limit:
        samples = samples[:limit]
    h, w = samples[0].image.shape
    net = _checkpoint(rc, h, w)
    cfg = rc.attack_config()
    rng = np.random.default_rng(rc["run.seed"])
    out = _out_dir(rc)
    rc.write(out / "effective_config.txt")
    imgs = torch.from_numpy(D.images_of(samples))
    if kind == "bias":
        res = attack_bias(net, imgs, cfg, rng)
    elif kind == "morph":
        res = attack_morph(net, imgs, cfg, rng)
    else:
        res = attack_vat(net, imgs, cfg.epsilon, rng)
    before = predict_masks(net, imgs)
    after = predict_masks(net, res.adv_image)
    dump = out / "attacks"
    dump.mkdir(exist_ok=True)
    with open(out / "attack_summary.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", "kind", "objective", "zero_grad"])
        for i, s in enumerate(samples):
            save_tensor(res.params[i], dump / f"{s.id}_params.advf")
            if res.field is not None:
                save_tensor(res.field[i], dump / f"{s.id}_field.advf")
            save_tensor(res.adv_image[i], dump / f"{s.id}_adv_image.advf")
            save_tensor(before[i].astype(np.float64), dump / f"{s.id}_pred_before.advf")
            save_tensor(after[i].astype(np.float64), dump / f"{s.id}_pred_after.advf")
            D.write_pgm(dump / f"{s.id}_adv_image.pgm", res.adv_image[i].numpy(), 0.0, 1.3)
            D.write_pgm(dump / f"{s.id}_pred_before.pgm", before[i], 0, 1)
            D.write_pgm(dump / f"{s.id}_pred_after.pgm", after[i], 0, 1)
            wr.writerow([s.id, kind, repr(float(res.value[i])), int(bool(res.zero_grad[i]))])
    flagged = int(np.sum(res.zero_grad))
    print(f"attacked {len(samples)} samples ({kind}); zero-gradient flags: {flagged}")
    return EXIT_OK


def cmd_eval(rc: RunConfig) -> int:
    samples = _eval_samples(rc)
    h, w = samples[0].image.shape
    net = _checkpoint(rc, h, w)
    out = _out_dir(rc)
    rc.write(out / "effective_config.txt")
    attacks = [a for a in rc["eval.attacks"] if a]
    report = evaluate_robustness(net, samples, attacks, rc["eval.trials"], rc.attack_config(), rc["run.seed"],
                                 dump_dir=out / "pgm" if rc["eval.dump_pgm"] else None)
    report.write(out)
    sys.stdout.write(report.summary())
    return EXIT_OK


def cmd_ablate(rc: RunConfig) -> int:
    train_set, val_set, test_set, unl = _load_splits(rc)
    h, w = train_set[0].image.shape
    base = rc.train_config(h, w)
    cells = expand_grid(base, rc.ablation_axes(), rc["ablate.seeds"])
    out = _out_dir(rc)
    rc.write(out / "effective_config.txt")
    rows = ablate(cells, train_set, val_set or None, test_set or None, unl or None,
                  rc["ablate.corruption_alpha"], rc["ablate.corruption_trials"])
    write_ablation(rows, out)
    sys.stdout.write((out / "summary.txt").read_text())
    return EXIT_RUNTIME if any(r.error for r in rows) else EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("ADVFIELD_THREADS")
    torch.set_num_threads(max(1, int(threads)) if threads and threads.isdigit() else 1)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        rc = RunConfig.resolve(args.config, _overrides(args), args.profile)
        if args.command == "synth":
            return cmd_synth(rc)
        if args.command == "train":
            return cmd_train(rc)
        if args.command == "attack":
            return cmd_attack(rc)
        if args.command == "eval":
            return cmd_eval(rc)
        return cmd_ablate(rc)
    except (ConfigError, D.DatasetError, FileNotFoundError) as exc:
        print(f"advfield {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, RuntimeError, ValueError) as exc:
        print(f"advfield {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
