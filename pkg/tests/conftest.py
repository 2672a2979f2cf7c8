import sys

import numpy as np
import pytest

from seqforget import kernels


@pytest.fixture(autouse=True)
def _restore_kernel_backend():
    # tests may switch backends; never leak that into the next test
    name = kernels.backend_name()
    yield
    kernels.set_backend(name)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or all(status == "NOT RUN"
                                 for status, _, _ in acceptance.RESULTS.values()):
        return
    write = terminalreporter.write_line
    write("")
    write("acceptance criteria", bold=True)
    for num in sorted(acceptance.RESULTS):
        status, description, detail = acceptance.RESULTS[num]
        line = f"[{status}] {num:2d}. {description}"
        if detail:
            line += f" | {detail}"
        color = {"PASS": {"green": True}, "FAIL": {"red": True},
                 "WARN": {"yellow": True}}.get(status, {})
        write(line, **color)
