"""Shared fixtures and the acceptance summary printed at the end of a run."""

from __future__ import annotations

import numpy as np
import pytest

from interplay.geometry import BevGrid
from interplay.scene import CameraRig, CameraView

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed or (report.when == "call" and not report.passed)
    prev = _criteria.get(number, (title, "PASS"))[1]
    if report.when == "call" or failed:
        status = "FAIL" if failed or prev == "FAIL" else "PASS"
        _criteria[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")


@pytest.fixture
def toy_grid() -> BevGrid:
    return BevGrid(-8.0, 8.0, -8.0, 8.0, 0.5)


@pytest.fixture
def full_grid() -> BevGrid:
    return BevGrid()


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_view(rng: np.random.Generator, width: int = 96, height: int = 64) -> CameraView:
    T = np.eye(4)
    T[:3, :3] = random_rotation(rng)
    T[:3, 3] = rng.uniform(-3, 3, size=3)
    fx, fy = rng.uniform(30, 120, size=2)
    K = np.array([[fx, rng.uniform(-2, 2), rng.uniform(0, width)],
                  [0.0, fy, rng.uniform(0, height)],
                  [0.0, 0.0, 1.0]])
    return CameraView(K=K, T=T, width=width, height=height)


def identity_view(f: float = 100.0, c: float = 50.0, size: int = 100) -> CameraView:
    K = np.array([[f, 0.0, c], [0.0, f, c], [0.0, 0.0, 1.0]])
    return CameraView(K=K, T=np.eye(4), width=size, height=size)


def single_rig(view: CameraView) -> CameraRig:
    return CameraRig((view,))
