import numpy as np
import pytest

from stein_scanmatch.manifold import Pose, se3_exp


def random_twist(rng, rot=1.0, trans=1.0):
    return np.concatenate([rng.normal(scale=rot, size=3), rng.normal(scale=trans, size=3)])


def random_pose(rng, rot=1.0, trans=1.0) -> Pose:
    return se3_exp(random_twist(rng, rot, trans))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE_LINES[number] = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
    print(ACCEPTANCE_LINES[number])
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
