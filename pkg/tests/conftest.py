import numpy as np
import pytest

from splatpose.lie import RigidTransform, exp_so3
from splatpose.render import CameraIntrinsics, rasterize
from splatpose.scene import synth_scene


@pytest.fixture(scope="session")
def K():
    return CameraIntrinsics.from_fov(128, 128, 40)


@pytest.fixture(scope="session")
def cube():
    return synth_scene(shape="cube", count=2000, seed=0)


@pytest.fixture(scope="session")
def T_view():
    return RigidTransform(exp_so3(np.array([0.3, 0.2, 0.1])), np.array([0.0, 0.0, 0.5]))


@pytest.fixture(scope="session")
def cube_frame(cube, T_view, K):
    return rasterize(cube, T_view, K)


def random_rotation(rng):
    v = rng.normal(size=3)
    v *= rng.uniform(0, np.pi - 1e-3) / np.linalg.norm(v)
    return exp_so3(v)


# acceptance criteria report one summary line each
def pytest_configure(config):
    config.acceptance_lines = {}


@pytest.fixture
def acceptance(request):
    lines = request.config.acceptance_lines

    def record(number: int, name: str, ok: bool, detail: str) -> bool:
        lines[number] = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
