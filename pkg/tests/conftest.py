import time

import numpy as np
import pytest

from orthounlearn.data import gen_synthetic, partition_tasks
from orthounlearn.model import ModelConfig, attach_lora
from orthounlearn.scenario import PretrainConfig, build_subspaces, pretrain

from oracles import ACCEPTANCE_LINES, DEFAULT_RUN_SECONDS


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def small_world():
    ds = gen_synthetic(6, 32, 40, 8.0, 0)
    model = pretrain(ds, ModelConfig(hidden_dim=16, num_classes=6, lora_rank=4), PretrainConfig(), seed=0)
    tasks = partition_tasks(ds, [[0, 1], [2]])
    return ds, model, tasks


@pytest.fixture
def adapted_problem(small_world):
    _, model, tasks = small_world
    subs = build_subspaces(model, tasks[0], 0.99)
    return attach_lora(model, seed=1), tasks[0], subs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """One full default scenario through the CLI plumbing: (report, output directory)."""
    from orthounlearn.cli import RunConfig, do_run

    out = tmp_path_factory.mktemp("default_run")
    start = time.process_time()
    report = do_run(RunConfig(), 42, out)
    DEFAULT_RUN_SECONDS.append(time.process_time() - start)
    return report, out
