import functools
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kernelshield.checkpoint import Checkpoint
from kernelshield.config import HarnessConfig
from kernelshield.data import Dataset, make_synthetic
from kernelshield.experiment import build_datasets, train_model
from kernelshield.network import ModelSpec, Network
from kernelshield.training import OptimizerConfig, train_standard

settings.register_profile("ci", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


# a model small enough for full finite-difference sweeps over its parameters
TINY_SPEC = ModelSpec(in_shape=(2, 5, 5), num_classes=3, stem_width=2,
                      block_widths=(2, 3, 3, 3), block_strides=(1, 2, 1, 1))


@pytest.fixture
def tiny_spec():
    return TINY_SPEC


@pytest.fixture
def tiny_net():
    return Network(TINY_SPEC, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@functools.lru_cache(maxsize=None)
def tiny_data():
    return make_synthetic("blobs", 90, 3, noise=0.1, seed=1, shape=TINY_SPEC.in_shape)


@functools.lru_cache(maxsize=None)
def tiny_trained_checkpoint():
    data = tiny_data()
    return train_standard(Network(TINY_SPEC, seed=0), data.images, data.labels, 15,
                          OptimizerConfig(batch_size=16), seed=0)


@pytest.fixture
def tiny_trained():
    """A TINY_SPEC model fitted to :func:`tiny_data` (fresh copy per test)."""
    return tiny_trained_checkpoint().to_network()


@dataclass
class ToySetup:
    config: HarnessConfig
    train: Dataset
    validation: Dataset
    test: Dataset
    std: Checkpoint
    adv: Checkpoint


@functools.lru_cache(maxsize=None)
def toy_setup(rep: int = 0) -> ToySetup:
    """Default toy configuration: data, a Std and an Adv model.  Cached per process."""
    cfg = HarnessConfig()
    cfg.data.seed = rep
    train, val, test = build_datasets(cfg.data)
    window = cfg.defenses["Std"].smoother_window
    std = train_model("Std", cfg.model, train, cfg.train, seed=100 + rep, smoother_window=window)
    adv = train_model("Adv", cfg.model, train, cfg.train, seed=100 + rep, smoother_window=window)
    return ToySetup(cfg, train, val, test, std, adv)


@pytest.fixture(scope="session")
def toy():
    return toy_setup(0)


# a complete experiment config on TINY_SPEC-sized data; the CLI runs it in seconds
TINY_INI = """
[data]
kind = synthetic-blobs
num_classes = 3
shape = 2, 5, 5
n_train = 90
n_validation = 15
n_test = 15
noise = 0.1
seed = 1

[model]
stem_width = 2
block_widths = 2, 3, 3, 3
block_strides = 1, 2, 1, 1

[train]
epochs = 15
adv_epochs = 4
m = 2
epsilon = 0.1
batch_size = 16

[defense]
c1 = 1.0
c2 = 0.05
transform_iterations = 2
layers = 1-5

[defense.Std]
c3 = 1

[defense.Adv]
c3 = 3

[attack.BIM]
kind = BIM
epsilon = 0.1
alpha = 0.05
iterations = 3

[attack.DeepFool]
kind = DeepFool
iterations = 5

[experiment]
count = 8
seed = 0
"""


@pytest.fixture
def tiny_ini(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return path


# one "criterion N: PASS|FAIL ..." line per acceptance criterion, echoed at the end
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
