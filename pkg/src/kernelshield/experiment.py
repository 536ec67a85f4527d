"""Dataset assembly, model training and the attack x scenario evaluation grid.

Scenario A attacks the bare network and hands the resulting images to the
defense.  Scenario B attacks the whole defended pipeline through
:class:`~kernelshield.attacks.BPDASurrogate`.  Both scenarios report the
undefended network and the defended pipeline on the same images.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .attacks import AttackConfig, BPDASurrogate, bpda_adaptive, run_attack
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint
from .config import DataConfig, HarnessConfig, TrainConfig
from .data import Dataset, ingest_cifar10, make_synthetic, split_dataset
from .defense import DefenseConfig, DefensePipeline, SamplePool, build_sample_pool, median_filter, vote
from .network import ModelSpec, Network
from .training import train_adversarial, train_smoothing_augmented, train_standard

log = logging.getLogger(__name__)

SCENARIOS = ("A", "B")
NO_DEFENSE = "No Defense"
# attacks that scenario B runs as PGD-style BPDA/EOT on the aggregated logits
LINF_ITERATIVE = ("BIM", "PGD", "BPDA_adaptive")


class ExperimentError(RuntimeError):
    pass


class ConfigHashError(ExperimentError):
    """A checkpoint was built for a different model spec than the plan's."""


# ---------------------------------------------------------------------------
# data and models
# ---------------------------------------------------------------------------

def build_datasets(cfg: DataConfig) -> Tuple[Dataset, Dataset, Dataset]:
    """Disjoint train / validation / test splits."""
    if cfg.kind == "cifar10-subset":
        if not cfg.path:
            raise FileNotFoundError("data.path must point at the CIFAR-10 batch directory")
        train = ingest_cifar10(cfg.path, "train", cfg.n_train, balanced=True, seed=cfg.seed)
        held = ingest_cifar10(cfg.path, "test", cfg.n_validation + cfg.n_test, balanced=True,
                              seed=cfg.seed)
        val, test = split_dataset(held, [cfg.n_validation, cfg.n_test], ["validation", "test"],
                                  seed=cfg.seed)
        return train, val, test
    total = cfg.n_train + cfg.n_validation + cfg.n_test
    ds = make_synthetic(cfg.kind, total, cfg.num_classes, cfg.noise, cfg.seed,
                        shape=tuple(cfg.shape), texture=cfg.texture)
    return split_dataset(ds, [cfg.n_train, cfg.n_validation, cfg.n_test],
                         ["train", "validation", "test"], seed=cfg.seed)


def smoother_for(window: int):
    return lambda img: median_filter(img, window)


def train_model(kind: str, spec: ModelSpec, train: Dataset, cfg: TrainConfig, seed: int,
                smoother_window: int = 2) -> Checkpoint:
    """Train a ``Std`` or ``Adv`` network from scratch."""
    net = Network(spec, seed=seed, dtype=np.dtype(cfg.dtype))
    opt = cfg.optimizer()
    smoother = smoother_for(smoother_window) if cfg.smoothing_augmented else None
    margin = cfg.min_accuracy_margin
    if kind == "Std":
        if smoother is None:
            return train_standard(net, train.images, train.labels, cfg.epochs, opt, seed,
                                  min_accuracy_margin=margin)
        return train_smoothing_augmented(net, train.images, train.labels, smoother, cfg.epochs,
                                         opt, seed, margin)
    if kind == "Adv":
        return train_adversarial(net, train.images, train.labels, cfg.adv_epochs, cfg.m,
                                 cfg.trades_lambda, cfg.epsilon, opt, seed, smoother, margin)
    raise ValueError(f"unknown training kind {kind!r}")


# ---------------------------------------------------------------------------
# plan and table
# ---------------------------------------------------------------------------

@dataclass
class ExperimentPlan:
    checkpoints: Dict[str, Union[str, Path, Checkpoint]]  # training kind -> checkpoint
    attacks: Dict[str, AttackConfig]  # column label -> attack
    defenses: Dict[str, DefenseConfig] = field(default_factory=dict)  # training kind -> defense
    scenarios: Tuple[str, ...] = ("A", "B")
    count: int = 200
    seed: int = 0
    model_spec: Optional[ModelSpec] = None  # checkpoints must match this architecture
    config_hash: str = ""
    workers: int = 1

    def validate(self, test_size: int) -> None:
        if not self.checkpoints:
            raise ValueError("plan names no checkpoints")
        for s in self.scenarios:
            if s not in SCENARIOS:
                raise ValueError(f"unknown scenario {s!r}")
        missing = [k for k in self.checkpoints if k not in self.defenses]
        if "B" in self.scenarios and missing:
            raise ValueError(f"scenario B needs a defense config for {missing}")
        if not 1 <= self.count <= test_size:
            raise ValueError(f"evaluation count {self.count} exceeds the test split ({test_size})")
        for cfg in self.attacks.values():
            cfg.validate()

    @classmethod
    def from_config(cls, cfg: HarnessConfig, checkpoints, config_hash: str = "") -> "ExperimentPlan":
        return cls(dict(checkpoints), dict(cfg.attacks), dict(cfg.defenses),
                   tuple(cfg.experiment.scenarios), cfg.experiment.count, cfg.experiment.seed,
                   cfg.model, config_hash, cfg.experiment.workers)


def format_layers(layers: Sequence[int]) -> str:
    """``(1, 2, 3, 4, 5)`` -> ``"1-5"``; non-contiguous subsets as a list."""
    layers = sorted(layers)
    if len(layers) > 1 and layers == list(range(layers[0], layers[-1] + 1)):
        return f"{layers[0]}-{layers[-1]}"
    return ",".join(str(l) for l in layers)


def system_name(cfg: Optional[DefenseConfig]) -> str:
    if cfg is None:
        return NO_DEFENSE
    e = int(cfg.kernel.e) if float(cfg.kernel.e).is_integer() else cfg.kernel.e
    return f"Kernel defense e,d = {e},{cfg.kernel.d}"


@dataclass
class ResultsRow:
    system: str
    training: str
    scenario: str
    layers: str
    clean: float
    attacks: Dict[str, float] = field(default_factory=dict)

    def key(self) -> Tuple[str, str, str, str]:
        return (self.system, self.training, self.scenario, self.layers)


@dataclass
class ResultsTable:
    """Accuracies in percent, one row per system / training / scenario / layers."""

    attack_labels: Tuple[str, ...]
    rows: List[ResultsRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    counts: Dict[Tuple, int] = field(default_factory=dict)  # (row key, column) -> images
    diagnostics: List[dict] = field(default_factory=list)

    def row(self, training: str, scenario: str, defended: bool = True) -> ResultsRow:
        for r in self.rows:
            if r.training == training and r.scenario == scenario and (r.system != NO_DEFENSE) == defended:
                return r
        raise KeyError((training, scenario, defended))

    def body(self) -> List[tuple]:
        return [r.key() + (r.clean,) + tuple(r.attacks.get(a) for a in self.attack_labels)
                for r in self.rows]


def _percent(pred: np.ndarray, labels: np.ndarray) -> float:
    return 100.0 * float(np.mean(pred == labels))


def _resolve(ref, spec: Optional[ModelSpec]) -> Checkpoint:
    if isinstance(ref, Checkpoint):
        if spec is not None and ref.spec.spec_hash() != spec.spec_hash():
            raise ConfigHashError("checkpoint spec hash does not match the plan's model spec")
        return ref
    path = Path(ref)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    try:
        return load_checkpoint(path, spec)
    except CheckpointError as exc:
        if "hash" in str(exc):
            raise ConfigHashError(f"config hash mismatch for {path}: {exc}") from exc
        raise


def _diag_rows(raw: List[dict], training: str, scenario: str, attack: str) -> List[dict]:
    out = []
    for r in raw:
        row = {"training": training, "scenario": scenario, "attack": attack,
               "input_id": r["input_id"], "copy_class": r["copy_class"],
               "initial_loss": r["initial_loss"], "final_loss": r["final_loss"]}
        for t in range(6):
            row[f"share_tap{t}"] = r.get(f"share_tap{t}", "")
        row["prediction"] = r["prediction"]
        out.append(row)
    return out


def run_experiment(plan: ExperimentPlan, train: Dataset, test: Dataset,
                   collect_diagnostics: bool = False) -> ResultsTable:
    """Evaluate every training kind x scenario x attack cell of ``plan``.

    ``train`` supplies the defense's sample pool; the first ``plan.count``
    test images are evaluated.  The table body is a pure function of the
    plan, the data and the checkpoints.
    """
    plan.validate(len(test))
    start = time.perf_counter()
    x, y = test.images[:plan.count], test.labels[:plan.count]
    ids = list(range(plan.count))
    labels = tuple(plan.attacks)
    table = ResultsTable(labels)
    table.metadata = {"seed": plan.seed, "config_hash": plan.config_hash, "count": plan.count,
                      "scenarios": list(plan.scenarios), "defense_calls_scenario_a": 0}

    for training, ref in plan.checkpoints.items():
        ckpt = _resolve(ref, plan.model_spec)
        net = ckpt.to_network()
        bare = ResultsRow(NO_DEFENSE, training, "A", "-", _percent(net.predict(x).labels, y))
        table.counts[(bare.key(), "clean")] = len(y)
        table.rows.append(bare)

        dcfg = plan.defenses.get(training)
        pipeline = None
        defended: Dict[str, ResultsRow] = {}
        if dcfg is not None:
            dcfg = dataclasses.replace(dcfg, seed=plan.seed)
            pool = build_sample_pool(net, train.images, train.labels, dcfg)
            pipeline = DefensePipeline(net, dcfg, pool)
            diag: List[dict] = []
            clean = _percent(_defended(pipeline, x, ids, plan.workers, diag if collect_diagnostics else None), y)
            table.diagnostics += _diag_rows(diag, training, "-", "clean")
            for s in plan.scenarios:
                defended[s] = ResultsRow(system_name(dcfg), training, s, format_layers(dcfg.layers), clean)
                table.counts[(defended[s].key(), "clean")] = len(y)

        for label, acfg in plan.attacks.items():
            acfg = dataclasses.replace(acfg, seed=plan.seed)
            calls = pipeline.calls if pipeline is not None else 0
            adv_a = run_attack(net, x, y, acfg).adversarial
            if pipeline is not None and pipeline.calls != calls:
                raise ExperimentError("scenario A attack called into the defense pipeline")
            bare.attacks[label] = _percent(net.predict(adv_a).labels, y)
            table.counts[(bare.key(), label)] = len(adv_a)
            if pipeline is None:
                continue
            for s in plan.scenarios:
                adv = adv_a if s == "A" else _scenario_b(pipeline, x, y, acfg, ids)
                diag = []
                pred = _defended(pipeline, adv, ids, plan.workers, diag if collect_diagnostics else None)
                defended[s].attacks[label] = _percent(pred, y)
                table.counts[(defended[s].key(), label)] = len(pred)
                table.diagnostics += _diag_rows(diag, training, s, label)
                if s == "B":
                    table.metadata.setdefault("undefended_on_scenario_b", {}).setdefault(
                        training, {})[label] = _percent(net.predict(adv).labels, y)
        table.rows.extend(defended[s] for s in plan.scenarios if s in defended)

    for (key, col), n in table.counts.items():
        if n != plan.count:
            raise ExperimentError(f"cell {key}/{col} evaluated {n} images, expected {plan.count}")
    table.metadata["wall_time_s"] = time.perf_counter() - start
    return table


def _defended(pipeline: DefensePipeline, images, ids, workers, diagnostics) -> np.ndarray:
    results = pipeline.classify(images, ids, workers=workers, diagnostics=diagnostics)
    return np.array([r.final for r in results], dtype=np.int64)


def _scenario_b(pipeline: DefensePipeline, x, y, cfg: AttackConfig, ids) -> np.ndarray:
    if cfg.kind in LINF_ITERATIVE:
        return bpda_adaptive(pipeline, x, y, cfg, ids).adversarial
    surrogate = BPDASurrogate(pipeline, ids, cfg.seed, cfg.eot_samples)
    return run_attack(surrogate, x, y, cfg).adversarial


# ---------------------------------------------------------------------------
# validation grid search
# ---------------------------------------------------------------------------

GRID_KEYS = ("c1", "c2", "c3", "layers", "transform_iterations")


@dataclass
class ValidationResult:
    best: DefenseConfig
    scores: List[Tuple[DefenseConfig, float]]


def validate_hyperparameters(model: Network, train: Dataset, validation: Dataset,
                             grid: Mapping[str, Sequence], base: DefenseConfig,
                             attacks: Mapping[str, AttackConfig], include_clean: bool = True,
                             seed: int = 0, pool: Optional[SamplePool] = None) -> ValidationResult:
    """Grid search maximising mean defended accuracy over clean and attacked validation sets.

    Adversaries are generated once on the bare model.  Grid points that
    differ only in ``c3`` share their transform runs and are re-voted.  Ties
    go to the earliest grid point.
    """
    if len(validation) == 0:
        raise ValueError("validation split is empty")
    bad = set(grid) - set(GRID_KEYS)
    if bad:
        raise ValueError(f"unsupported grid keys {sorted(bad)}")
    axes = {k: list(grid.get(k, [getattr(base, k)])) for k in GRID_KEYS}
    if any(len(v) == 0 for v in axes.values()):
        raise ValueError("grid axes must be nonempty")

    x, y = validation.images, validation.labels
    ids = list(range(len(y)))
    inputs = [x] if include_clean else []
    for acfg in attacks.values():
        inputs.append(run_attack(model, x, y, dataclasses.replace(acfg, seed=seed)).adversarial)
    if not inputs:
        raise ValueError("nothing to validate on: no attacks and include_clean=False")
    if pool is None:
        all_layers = sorted({l for layers in axes["layers"] for l in layers})
        pool = build_sample_pool(model, train.images, train.labels,
                                 dataclasses.replace(base, layers=tuple(all_layers)))

    scores: Dict[tuple, float] = {}
    shared_keys = ("c1", "c2", "layers", "transform_iterations")
    for shared in itertools.product(*(axes[k] for k in shared_keys)):
        cfg = dataclasses.replace(base, seed=seed, c3=1, **dict(zip(shared_keys, shared)))
        pipeline = DefensePipeline(model, cfg, pool)
        committees = [pipeline.classify(inp, ids) for inp in inputs]
        for c3 in axes["c3"]:
            accs = []
            for results in committees:
                pred = np.array([vote(r.original, r.copy_predictions, c3)[0] for r in results])
                accs.append(np.mean(pred == y))
            scores[shared + (c3,)] = float(np.mean(accs))

    ordered = []
    for point in itertools.product(*(axes[k] for k in GRID_KEYS)):
        d = dict(zip(GRID_KEYS, point))
        cfg = dataclasses.replace(base, seed=seed, **d)
        cfg.validate(model.spec.num_classes)
        ordered.append((cfg, scores[tuple(d[k] for k in shared_keys) + (d["c3"],)]))
    best = max(ordered, key=lambda t: t[1])[0]  # max keeps the first of equal scores
    return ValidationResult(best, ordered)
