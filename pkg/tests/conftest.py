import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fedsel.dataset import PartitionSpec, generate_synthetic, make_partitions  # noqa: E402


@pytest.fixture
def small_data():
    return generate_synthetic(400, 6, 2, seed=3)


@pytest.fixture
def small_parts(small_data):
    return make_partitions(small_data, PartitionSpec("iid", 4, {}, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(acceptance.RESULTS, key=lambda l: int(l.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
