"""Command line interface: ``kernelshield {train,attack,defend,evaluate,validate,report}``.

Exit codes: 0 ok, 1 configuration error, 2 data error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .attacks import AttackConfig, AttackError, run_attack
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, HarnessConfig, config_hash, load_config, parse_int_list
from .data import DataFormatError
from .defense import DefenseConfig, DefenseConfigError, DefensePipeline, build_sample_pool, write_diagnostics
from .experiment import (ConfigHashError, ExperimentPlan, build_datasets, run_experiment, train_model,
                         validate_hyperparameters)
from .kernels import KernelParams
from .report import FORMATS, ReportError, read_csv, render
from .training import TrainingError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("kernelshield")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# flags generated from config dataclasses; these fields are set elsewhere
_DEFENSE_SKIP = ("seed", "kernel", "batch_size")
_ATTACK_SKIP = ("seed",)


def _flag_type(default):
    if isinstance(default, bool):
        return lambda s: s.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int
    if isinstance(default, tuple):
        return parse_int_list
    if isinstance(default, str):
        return str
    return float


def _add_fields(parser, cls, skip, rename=None):
    rename = rename or {}
    group = parser.add_argument_group(f"{cls.__name__} fields")
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = cls().__getattribute__(f.name)
        flag = "--" + rename.get(f.name, f.name).replace("_", "-")
        group.add_argument(flag, dest=f"{cls.__name__}.{f.name}", default=None,
                           type=_flag_type(default), metavar=f.name.upper())


def _override(obj, args, cls_name: str):
    updates = {}
    for key, value in vars(args).items():
        if key.startswith(cls_name + ".") and value is not None:
            updates[key.split(".", 1)[1]] = value
    return dataclasses.replace(obj, **updates) if updates else obj


def _defense_from_args(cfg: HarnessConfig, args) -> DefenseConfig:
    d = _override(cfg.defenses[args.training], args, "DefenseConfig")
    if args.e is not None or args.d is not None:
        d = dataclasses.replace(d, kernel=KernelParams(d.kernel.e if args.e is None else args.e,
                                                       d.kernel.d if args.d is None else args.d))
    d = dataclasses.replace(d, seed=args.seed)
    d.validate(cfg.model.num_classes)
    return d


def _attack_from_args(cfg: HarnessConfig, args) -> AttackConfig:
    if args.attack:
        if args.attack not in cfg.attacks:
            raise ConfigError(f"no [attack.{args.attack}] in the config; have {list(cfg.attacks)}")
        base = cfg.attacks[args.attack]
    else:
        base = AttackConfig()
    a = dataclasses.replace(_override(base, args, "AttackConfig"), seed=args.seed)
    a.validate()
    return a


def _common(p, seed_required=False):
    p.add_argument("--config", help="INI config file (defaults to the built-in toy setup)")
    p.add_argument("--seed", type=int, required=seed_required, default=None if seed_required else 0)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kernelshield", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a Std or Adv network and write a checkpoint")
    _common(p)
    p.add_argument("--training", choices=("Std", "Adv"), default="Std")
    p.add_argument("--epochs", type=int, help="override the configured epoch count")
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub.add_parser("attack", help="attack a bare network on the test split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attack", help="label of an [attack.*] config section")
    p.add_argument("--count", type=int)
    p.add_argument("--out", help="write adversarial images and labels to this .npz")
    _add_fields(p, AttackConfig, _ATTACK_SKIP)

    p = sub.add_parser("defend", help="classify images with the kernel-transform defense")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--training", choices=("Std", "Adv"), default="Adv",
                   help="which configured defense to use")
    p.add_argument("--input", help=".npz with 'images' and 'labels' (default: clean test split)")
    p.add_argument("--count", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--diagnostics", help="write per-copy diagnostics CSV here")
    p.add_argument("--e", type=float)
    p.add_argument("--d", type=int)
    _add_fields(p, DefenseConfig, _DEFENSE_SKIP)

    p = sub.add_parser("evaluate", help="run the full attack x scenario table")
    _common(p, seed_required=True)
    p.add_argument("--std-checkpoint")
    p.add_argument("--adv-checkpoint")
    p.add_argument("--count", type=int)
    p.add_argument("--scenarios", help="comma list, e.g. A,B")
    p.add_argument("--workers", type=int)
    p.add_argument("--format", choices=FORMATS, default="csv")
    p.add_argument("--out", help="report path (default: stdout)")
    p.add_argument("--diagnostics", help="write per-copy diagnostics CSV here")

    p = sub.add_parser("validate", help="grid-search defense hyperparameters on the validation split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--training", choices=("Std", "Adv"), default="Adv")
    p.add_argument("--c1-grid", help="comma list of c1 values")
    p.add_argument("--c2-grid", help="comma list of c2 values")
    p.add_argument("--c3-grid", help="comma list of c3 values")
    p.add_argument("--layers-grid", help="semicolon list of layer subsets, e.g. '0-2;1-5'")
    p.add_argument("--iterations-grid", help="comma list of transform iteration counts")
    p.add_argument("--attacks", help="comma list of [attack.*] labels (default: all configured)")
    p.add_argument("--no-clean", action="store_true", help="score only attacked images")

    p = sub.add_parser("report", help="re-render a results CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=FORMATS, default="markdown")
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text, newline="")
    else:
        sys.stdout.write(text)


def cmd_train(cfg: HarnessConfig, args) -> int:
    train, _, _ = build_datasets(cfg.data)
    tcfg = cfg.train
    if args.epochs is not None:
        field = "epochs" if args.training == "Std" else "adv_epochs"
        tcfg = dataclasses.replace(tcfg, **{field: args.epochs})
    window = cfg.defenses[args.training].smoother_window
    ckpt = train_model(args.training, cfg.model, train, tcfg, args.seed, window)
    ckpt.metadata["config_hash"] = config_hash(cfg)
    save_checkpoint(ckpt, args.out)
    print(f"{args.training} model: train accuracy {100 * ckpt.metadata['train_accuracy']:.1f}% -> {args.out}")
    return EXIT_OK


def _test_slice(cfg: HarnessConfig, count: Optional[int]):
    _, _, test = build_datasets(cfg.data)
    n = len(test) if count is None else count
    if not 1 <= n <= len(test):
        raise ConfigError(f"count {n} outside [1, {len(test)}]")
    return test.images[:n], test.labels[:n]


def cmd_attack(cfg: HarnessConfig, args) -> int:
    net = load_checkpoint(args.checkpoint, cfg.model).to_network()
    acfg = _attack_from_args(cfg, args)
    x, y = _test_slice(cfg, args.count)
    out = run_attack(net, x, y, acfg)
    acc = float(np.mean(net.predict(out.adversarial).labels == y))
    print(f"{acfg.kind}: success rate {100 * out.success_rate:.1f}%, accuracy {100 * acc:.1f}%, "
          f"mean L2 {out.l2.mean():.4f}, max Linf {out.linf.max():.4f}")
    if args.out:
        np.savez(args.out, images=out.adversarial, labels=y, success=out.success)
    return EXIT_OK


def _load_npz(path: str):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing input file {p}")
    try:
        with np.load(p) as data:
            return np.asarray(data["images"], dtype=np.float64), np.asarray(data["labels"], dtype=np.int64)
    except (KeyError, ValueError, OSError) as exc:
        raise DataFormatError(f"unreadable image archive {p}: {exc}", 0) from exc


def cmd_defend(cfg: HarnessConfig, args) -> int:
    net = load_checkpoint(args.checkpoint, cfg.model).to_network()
    dcfg = _defense_from_args(cfg, args)
    train, _, _ = build_datasets(cfg.data)
    if args.input:
        x, y = _load_npz(args.input)
        if args.count is not None:
            x, y = x[:args.count], y[:args.count]
    else:
        x, y = _test_slice(cfg, args.count)
    pipeline = DefensePipeline(net, dcfg, build_sample_pool(net, train.images, train.labels, dcfg))
    diag: List[dict] = []
    results = pipeline.classify(x, workers=args.workers, diagnostics=diag if args.diagnostics else None)
    final = np.array([r.final for r in results])
    bare = np.array([r.original for r in results])
    overruled = sum(r.overruled for r in results)
    print(f"undefended accuracy {100 * np.mean(bare == y):.1f}%, defended accuracy "
          f"{100 * np.mean(final == y):.1f}%, overruled {overruled}/{len(results)}")
    if args.diagnostics:
        with open(args.diagnostics, "w", newline="") as fh:
            write_diagnostics(diag, fh)
    return EXIT_OK


def cmd_evaluate(cfg: HarnessConfig, args) -> int:
    exp = cfg.experiment
    updates = {"seed": args.seed}
    if args.count is not None:
        updates["count"] = args.count
    if args.scenarios:
        updates["scenarios"] = tuple(s.strip() for s in args.scenarios.split(",") if s.strip())
    if args.workers is not None:
        updates["workers"] = args.workers
    cfg = dataclasses.replace(cfg, experiment=dataclasses.replace(exp, **updates))
    checkpoints = {}
    if args.std_checkpoint:
        checkpoints["Std"] = args.std_checkpoint
    if args.adv_checkpoint:
        checkpoints["Adv"] = args.adv_checkpoint
    if not checkpoints:
        raise ConfigError("evaluate needs --std-checkpoint and/or --adv-checkpoint")
    train, _, test = build_datasets(cfg.data)
    plan = ExperimentPlan.from_config(cfg, checkpoints, config_hash(cfg))
    try:
        plan.validate(len(test))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    table = run_experiment(plan, train, test, collect_diagnostics=bool(args.diagnostics))
    _emit(render(table, args.format), args.out)
    if args.diagnostics:
        with open(args.diagnostics, "w", newline="") as fh:
            write_diagnostics(table.diagnostics, fh)
    log.info("wall time %.1f s", table.metadata["wall_time_s"])
    return EXIT_OK


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_validate(cfg: HarnessConfig, args) -> int:
    net = load_checkpoint(args.checkpoint, cfg.model).to_network()
    train, val, _ = build_datasets(cfg.data)
    base = dataclasses.replace(cfg.defenses[args.training], seed=args.seed)
    grid = {}
    if args.c1_grid:
        grid["c1"] = _floats(args.c1_grid)
    if args.c2_grid:
        grid["c2"] = _floats(args.c2_grid)
    if args.c3_grid:
        grid["c3"] = [int(v) for v in _floats(args.c3_grid)]
    if args.layers_grid:
        grid["layers"] = [parse_int_list(s) for s in args.layers_grid.split(";") if s.strip()]
    if args.iterations_grid:
        grid["transform_iterations"] = [int(v) for v in _floats(args.iterations_grid)]
    labels = [a.strip() for a in args.attacks.split(",")] if args.attacks else list(cfg.attacks)
    missing = [a for a in labels if a not in cfg.attacks]
    if missing:
        raise ConfigError(f"unknown attack labels {missing}")
    result = validate_hyperparameters(net, train, val, grid, base, {a: cfg.attacks[a] for a in labels},
                                      include_clean=not args.no_clean, seed=args.seed)
    for dcfg, score in result.scores:
        print(f"c1={dcfg.c1:g} c2={dcfg.c2:g} c3={dcfg.c3} layers={list(dcfg.layers)} "
              f"iterations={dcfg.transform_iterations}: {100 * score:.2f}%")
    print("best: " + json.dumps({k: result.best.to_dict()[k] for k in
                                 ("c1", "c2", "c3", "layers", "transform_iterations")}))
    return EXIT_OK


def cmd_report(args) -> int:
    p = Path(args.input)
    if not p.exists():
        raise FileNotFoundError(f"missing results file {p}")
    table = read_csv(p.read_text())
    _emit(render(table, args.format), args.out)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "defend": cmd_defend,
            "evaluate": cmd_evaluate, "validate": cmd_validate}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "report":
            return cmd_report(args)
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, DefenseConfigError, ConfigHashError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointError, ReportError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, AttackError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
