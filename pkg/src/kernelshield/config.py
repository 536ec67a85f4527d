"""Experiment configuration files.

Configs are INI-style text read with :mod:`configparser`::

    [data]
    kind = synthetic-blobs       ; or synthetic-rings, cifar10-subset
    n_train = 1200
    noise = 0.2

    [model]
    stem_width = 8
    block_widths = 8, 16, 16, 16

    [train]
    epochs = 10
    adv_epochs = 6
    epsilon = 0.12

    [defense]                    ; shared by both training kinds
    c1 = 1.875
    layers = 1-5

    [defense.Std]                ; per-training-kind overrides
    c3 = 1

    [defense.Adv]
    c3 = 4

    [attack.BIM]                 ; one section per table column
    kind = BIM
    epsilon = 0.12

    [experiment]
    count = 200
    scenarios = A, B
    seed = 0

Every key is optional and falls back to the toy defaults below.  Any
``[attack.*]`` section replaces the default attack list.  Unknown keys are
rejected.  :func:`config_hash` fingerprints the parsed config.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from .attacks import AttackConfig
from .defense import DefenseConfig
from .kernels import KernelParams
from .network import ModelSpec
from .training import OptimizerConfig

TRAINING_KINDS = ("Std", "Adv")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "synthetic-blobs"
    path: str = ""
    num_classes: int = 4
    shape: Tuple[int, int, int] = (3, 8, 8)
    n_train: int = 1200
    n_validation: int = 200
    n_test: int = 200
    noise: float = 0.2
    texture: float = 0.0
    seed: int = 0


@dataclass
class TrainConfig:
    epochs: int = 10
    adv_epochs: int = 6
    smoothing_augmented: bool = True
    m: int = 5
    trades_lambda: float = 1.0
    epsilon: float = 0.12
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    grad_clip: float = 1.0
    lr_decay_epochs: Tuple[int, ...] = ()
    lr_decay: float = 0.1
    dtype: str = "float64"
    # a finished run must beat chance (1/K) on the training set by this much
    min_accuracy_margin: float = 0.1

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(self.lr, self.momentum, self.weight_decay, self.batch_size,
                               tuple(self.lr_decay_epochs), self.lr_decay, self.grad_clip)


@dataclass
class ExperimentSettings:
    count: int = 200
    scenarios: Tuple[str, ...] = ("A", "B")
    seed: int = 0
    workers: int = 1


# c1 = 30 on 3x32x32 images, scaled to the 3x8x8 toy images by pixel count
TOY_C1 = 30.0 * (3 * 8 * 8) / (3 * 32 * 32)
TOY_EPSILON = 0.12


def default_defenses() -> Dict[str, DefenseConfig]:
    """Toy analogs of the Std / Adv settings: c3 of 3 and 9 out of 10 copies,
    rounded to the 4 copies of the 4-class toy task."""
    return {"Std": DefenseConfig(c1=TOY_C1, c3=1), "Adv": DefenseConfig(c1=TOY_C1, c3=4)}


def default_attacks(epsilon: float = TOY_EPSILON) -> Dict[str, AttackConfig]:
    """The attack columns of the results table at toy budgets."""
    return {
        "DeepFool": AttackConfig(kind="DeepFool", iterations=50),
        "CW k=0": AttackConfig(kind="CW_L2", cw_confidence=0.0, cw_iterations=20),
        "CW k=5": AttackConfig(kind="CW_L2", cw_confidence=5.0, cw_iterations=20),
        "BIM eps/2": AttackConfig(kind="BIM", epsilon=epsilon / 2, alpha=epsilon / 8, iterations=20),
        "BIM eps": AttackConfig(kind="BIM", epsilon=epsilon, alpha=epsilon / 4, iterations=20),
    }


@dataclass
class HarnessConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    defenses: Dict[str, DefenseConfig] = field(default_factory=default_defenses)
    attacks: Dict[str, AttackConfig] = field(default_factory=default_attacks)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)

    def to_dict(self) -> dict:
        return {
            "data": dataclasses.asdict(self.data),
            "model": self.model.to_dict(),
            "train": dataclasses.asdict(self.train),
            "defenses": {k: v.to_dict() for k, v in sorted(self.defenses.items())},
            "attacks": {k: dataclasses.asdict(v) for k, v in self.attacks.items()},
            "experiment": dataclasses.asdict(self.experiment),
        }


def config_hash(cfg: HarnessConfig) -> str:
    """Hex blake2b-64 of the canonical JSON form of ``cfg``."""
    blob = json.dumps(cfg.to_dict(), sort_keys=True, default=list).encode()
    return hashlib.blake2b(blob, digest_size=8).hexdigest()


# ---------------------------------------------------------------------------
# value parsing
# ---------------------------------------------------------------------------

def parse_int_list(text: str) -> Tuple[int, ...]:
    """``"1-5"`` -> (1, 2, 3, 4, 5); ``"0, 2"`` -> (0, 2); ranges and lists may mix."""
    out: List[int] = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1) if not part.startswith("-") else (part, "")
            lo_i, hi_i = int(lo), int(hi)
            if hi_i < lo_i:
                raise ConfigError(f"empty range {part!r}")
            out.extend(range(lo_i, hi_i + 1))
        else:
            out.append(int(part))
    return tuple(out)


def _coerce(text: str, default, name: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return _parse_float(text)
        if isinstance(default, tuple):
            if default and isinstance(default[0], str) or name == "scenarios":
                return tuple(p.strip() for p in text.split(",") if p.strip())
            return parse_int_list(text)
        if default is None:
            return _parse_float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value {text!r} for {name}") from exc


def _parse_float(text: str) -> float:
    """Floats, also written as a fraction such as ``8/255``."""
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _apply(obj, section: configparser.SectionProxy, skip=()):
    """Return a copy of dataclass ``obj`` with fields overridden from ``section``."""
    names = {f.name for f in dataclasses.fields(obj)}
    updates = {}
    for key, text in section.items():
        if key in skip:
            continue
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in section [{section.name}]")
        updates[key] = _coerce(text, getattr(obj, key), key)
    return dataclasses.replace(obj, **updates)


def _defense(base: DefenseConfig, section: configparser.SectionProxy) -> DefenseConfig:
    if "kernel" in section:
        raise ConfigError(f"[{section.name}]: set the kernel with keys e and d")
    cfg = _apply(base, section, skip=("e", "d"))
    if "e" in section or "d" in section:
        e = _parse_float(section.get("e", str(cfg.kernel.e)))
        d = int(section.get("d", str(cfg.kernel.d)))
        try:
            cfg = dataclasses.replace(cfg, kernel=KernelParams(e, d))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return cfg


def parse_config(text: str) -> HarnessConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    parser.optionxform = str  # keys are case sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc

    cfg = HarnessConfig()
    known = {"data", "model", "train", "defense", "experiment"}
    for name in parser.sections():
        if name in known or name.startswith("attack.") or name in {f"defense.{k}" for k in TRAINING_KINDS}:
            continue
        raise ConfigError(f"unknown section [{name}]")

    if parser.has_section("data"):
        cfg.data = _apply(cfg.data, parser["data"])
    if parser.has_section("model"):
        cfg.model = _model(parser["model"], cfg.data)
    else:
        cfg.model = ModelSpec(in_shape=cfg.data.shape, num_classes=cfg.data.num_classes)
    if parser.has_section("train"):
        cfg.train = _apply(cfg.train, parser["train"])
    defaults = default_defenses()
    for kind in TRAINING_KINDS:
        d = defaults[kind]
        if parser.has_section("defense"):
            d = _defense(d, parser["defense"])
        if parser.has_section(f"defense.{kind}"):
            d = _defense(d, parser[f"defense.{kind}"])
        cfg.defenses[kind] = d
    if any(n.startswith("attack.") for n in parser.sections()):
        cfg.attacks = {}
    for name in parser.sections():
        if name.startswith("attack."):
            label = name[len("attack."):]
            attack = _apply(AttackConfig(kind=label), parser[name])
            try:
                attack.validate()
            except ValueError as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
            cfg.attacks[label] = attack
    if parser.has_section("experiment"):
        cfg.experiment = _apply(cfg.experiment, parser["experiment"])
    _check(cfg)
    return cfg


def _model(section: configparser.SectionProxy, data: DataConfig) -> ModelSpec:
    base = ModelSpec(in_shape=data.shape, num_classes=data.num_classes)
    try:
        return _apply(base, section)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _check(cfg: HarnessConfig) -> None:
    if cfg.model.num_classes != cfg.data.num_classes:
        raise ConfigError("model and data disagree on the number of classes")
    if tuple(cfg.model.in_shape) != tuple(cfg.data.shape):
        raise ConfigError("model input shape differs from the data shape")
    for s in cfg.experiment.scenarios:
        if s not in ("A", "B"):
            raise ConfigError(f"unknown scenario {s!r}")
    if cfg.experiment.count < 1:
        raise ConfigError("experiment count must be >= 1")
    for kind, d in cfg.defenses.items():
        try:
            d.validate(cfg.model.num_classes)
        except ValueError as exc:
            raise ConfigError(f"defense for {kind}: {exc}") from exc


def load_config(path: Union[str, Path, None]) -> HarnessConfig:
    """Parse a config file; ``None`` gives the built-in defaults."""
    if path is None:
        return parse_config("")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    return parse_config(p.read_text())
