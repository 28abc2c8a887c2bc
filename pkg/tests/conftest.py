import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from iamnn.block import BlockConfig
from iamnn.network import NetConfig, StemConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_net(channels=(8, 8), iters=(2, 2), size=12, classes=3, **block_kw) -> NetConfig:
    blocks = [BlockConfig(c, m, **block_kw) for c, m in zip(channels, iters)]
    return NetConfig(blocks, num_classes=classes, input_shape=(3, size, size), stem=StemConfig(3, 1, 4, False))


def desk16(iters=(2, 2, 2, 2), classes=5, **block_kw) -> NetConfig:
    blocks = [BlockConfig(c, m, **block_kw) for c, m in zip((16, 32, 32, 64), iters)]
    return NetConfig(blocks, num_classes=classes, input_shape=(3, 16, 16), stem=StemConfig(3, 1, 16, False))


_criteria = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _criteria[report.nodeid] = report


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_criteria):
        report = _criteria[nodeid]
        name = nodeid.split("test_criterion_")[1]
        number, _, title = name.partition("_")
        detail = dict(report.user_properties).get("detail", "")
        status = "PASS" if report.passed else "FAIL"
        terminalreporter.write_line(f"criterion {int(number):2d} {title.replace('_', ' ')}: {status}  {detail}")
