import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

_criteria: dict[int, tuple[str, str, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def pretrained():
    """The seed-42 pretrained vault (trained once, then loaded from the on-disk cache)."""
    from graybox.harness.pretrain import pretrain_vault

    return pretrain_vault(42)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, name = mark.args[:2]
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _criteria[number] = (name, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_criteria):
        name, verdict, detail = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d} {verdict}  {name}" + (f"  [{detail}]" if detail else ""))
