"""Flat ``key = value`` run configuration with dotted namespaces and profiles.

Resolution order: profile defaults, then the config file, then command-line
overrides. Unknown keys are rejected. The effective configuration is written
next to every command's outputs and can be fed back in with ``--config``.
"""
from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

from .adversary import AttackConfig
from .data import SynthConfig
from .segnet import SegNetConfig
from .trainer import TrainConfig
from .transforms import RandAugConfig


class ConfigError(ValueError):
    pass


_TRAIN_SCALARS = ("pretrain_iters", "pretrain_lr", "finetune_iters", "finetune_lr", "batch_size", "lambda_l",
                  "lambda_u", "attack", "mode", "finetune_randaug", "reset_optimizer", "val_every")


def _defaults() -> dict:
    d = {"run.seed": 0, "run.profile": "desk", "run.out": "out"}
    d.update({f"synth.{k}": v for k, v in asdict(SynthConfig()).items() if k != "seed"})
    d["synth.count"] = 200
    tc = TrainConfig()
    d.update({f"train.{k}": getattr(tc, k) for k in _TRAIN_SCALARS})
    d["net.widths"] = tuple(SegNetConfig().widths)
    d.update({f"attack.{k}": v for k, v in asdict(AttackConfig()).items() if k != "seed"})
    d.update({f"randaug.{k}": v for k, v in asdict(RandAugConfig()).items() if k != "seed"})
    d.update({
        "data.path": "",
        "data.fractions": (0.3, 0.1, 0.3, 0.3),
        "data.split_seed": 0,
        "eval.attacks": ("random-bias", "adv-bias"),
        "eval.trials": 5,
        "eval.checkpoint": "",
        "eval.dump_pgm": False,
        "eval.split": "test",
        "attack_run.kind": "bias",
        "attack_run.limit": 0,
        "ablate.axes": "train.attack=random-bias|bias",
        "ablate.seeds": (0, 1, 2),
        "ablate.corruption_alpha": 0.3,
        "ablate.corruption_trials": 5,
    })
    return d


PROFILES = {
    "desk": {},
    "paper": {
        "train.pretrain_iters": 10_000,
        "train.pretrain_lr": 1e-3,
        "train.finetune_iters": 2_000,
        "train.finetune_lr": 1e-5,
        "train.batch_size": 20,
        "train.lambda_l": 1.0,
        "train.lambda_u": 0.1,
        "attack.alpha": 0.3,
        "attack.w": 0.5,
        "attack.n": 1,
        "attack.xi": 1.0,
        "attack.k": 4,
        "synth.height": 128,
        "synth.width": 128,
        "synth.radius_min": 20.0,
        "synth.radius_max": 40.0,
        "synth.thickness_min": 5.0,
        "synth.thickness_max": 12.0,
        "synth.center_jitter": 8.0,
    },
}


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        elem = default[0] if default else ""
        return tuple(_parse_value(x, elem) for x in items)
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r}: {exc}") from exc
    return raw


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_lines(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


class RunConfig:
    """Resolved configuration: a flat mapping of dotted keys to typed values."""

    def __init__(self, values: dict):
        self.values = values

    @classmethod
    def resolve(cls, file=None, overrides: dict | None = None, profile: str | None = None) -> "RunConfig":
        defaults = _defaults()
        raw_file = parse_lines(Path(file).read_text()) if file else {}
        raw_over = {k: v for k, v in (overrides or {}).items() if v is not None}
        for k in list(raw_file) + list(raw_over):
            if k not in defaults:
                raise ConfigError(f"unknown config key {k!r}")
        prof = profile or raw_over.get("run.profile") or raw_file.get("run.profile") or "desk"
        prof = str(prof)
        if prof not in PROFILES:
            raise ConfigError(f"unknown profile {prof!r}; choose from {sorted(PROFILES)}")
        values = dict(defaults)
        values.update(PROFILES[prof])
        values["run.profile"] = prof
        for layer in (raw_file, raw_over):
            for k, v in layer.items():
                values[k] = _parse_value(v, defaults[k]) if isinstance(v, str) else _coerce(v, defaults[k])
        values["run.profile"] = prof
        return cls(values)

    def __getitem__(self, key):
        return self.values[key]

    def section(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def text(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in sorted(self.values.items()))

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.text())

    # --- builders -----------------------------------------------------------

    def synth_config(self) -> SynthConfig:
        s = self.section("synth")
        s.pop("count")
        return SynthConfig(seed=self["run.seed"], **s)

    def attack_config(self) -> AttackConfig:
        return AttackConfig(seed=self["run.seed"], **self.section("attack"))

    def randaug_config(self) -> RandAugConfig:
        return RandAugConfig(seed=self["run.seed"], **self.section("randaug"))

    def train_config(self, height: int, width: int, n_classes: int = 2) -> TrainConfig:
        seed = self["run.seed"]
        tc = TrainConfig(
            seed=seed,
            net=SegNetConfig(height=height, width=width, n_classes=n_classes, widths=self["net.widths"], seed=seed),
            attack_cfg=self.attack_config(),
            randaug=self.randaug_config(),
            **self.section("train"),
        )
        try:
            tc.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return tc

    def ablation_axes(self) -> dict:
        """Parse ``ablate.axes``: ``key=v1|v2;key2=v3|v4`` with TrainConfig paths."""
        axes = {}
        spec = str(self["ablate.axes"]).strip()
        if not spec:
            return axes
        defaults = _defaults()
        for part in spec.split(";"):
            key, _, vals = part.partition("=")
            key = key.strip()
            flat = key
            if flat not in defaults:
                raise ConfigError(f"unknown ablation key {key!r}")
            axes[_to_train_path(flat)] = [_parse_value(v, defaults[flat]) for v in vals.split("|")]
        return axes


def _coerce(v, default):
    if isinstance(default, tuple) and not isinstance(v, tuple):
        return tuple(v) if isinstance(v, list) else (v,)
    return v


def _to_train_path(flat: str) -> str:
    section, _, name = flat.partition(".")
    if section == "train":
        return name
    if section == "attack":
        return f"attack_cfg.{name}"
    if section == "randaug":
        return f"randaug.{name}"
    if section == "net":
        return f"net.{name}"
    raise ConfigError(f"{flat!r} cannot be varied in an ablation")
