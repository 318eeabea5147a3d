import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tapmerge.task_vector import TaskVector
from tapmerge.tensor_store import WeightMap
from tapmerge.toy_bench import BenchConfig, build_bench

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# seed of the calibrated bench used for the end-to-end checks
BENCH_SEED = 7


@pytest.fixture(scope="session")
def bench():
    return build_bench(BenchConfig(seed=BENCH_SEED))


@pytest.fixture(scope="session")
def small_bench():
    return build_bench(BenchConfig(seed=1, n_train=64, n_test=64, finetune_steps=200))


def wm(**tensors) -> WeightMap:
    return WeightMap({k: np.asarray(v, dtype=np.float32) for k, v in tensors.items()})


def tv(task_id: str, **tensors) -> TaskVector:
    return TaskVector(task_id, wm(**tensors))


# acceptance criterion outcomes, filled by tests/test_acceptance.py
CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
