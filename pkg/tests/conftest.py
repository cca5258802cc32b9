import math

import numpy as np
import pytest
from hypothesis import settings

from sparsecoop.geometry import BBox, Pose

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def pose_close(a: Pose, b: Pose, tol: float = 1e-9) -> bool:
    dyaw = (a.yaw - b.yaw + math.pi) % (2 * math.pi) - math.pi
    return abs(a.x - b.x) < tol and abs(a.y - b.y) < tol and abs(a.z - b.z) < tol and abs(dyaw) < tol


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_boxes(rng: np.random.Generator, n: int, spread: float = 40.0) -> list[BBox]:
    """Boxes on a jittered lattice so no two share a center."""
    out = []
    cells = rng.choice(400, size=n, replace=False)
    for c in cells:
        gx, gy = divmod(int(c), 20)
        x = (gx - 10) * spread / 10 + rng.uniform(-0.5, 0.5)
        y = (gy - 10) * spread / 10 + rng.uniform(-0.5, 0.5)
        out.append(BBox(x, y, 0.8, rng.uniform(3.9, 5.2), rng.uniform(1.7, 2.1), rng.uniform(1.4, 1.9), rng.uniform(-math.pi, math.pi)))
    return out


_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the test still asserts on its own."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] A{number:<2} {title}: {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
