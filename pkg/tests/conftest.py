import numpy as np
import pytest
import torch

from omnigs.geometry import CameraModel, VolumeSpec, look_rotation


@pytest.fixture(autouse=True)
def _f64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def make_cam(center=(0.0, 0.0, 0.5), forward=(1.0, 0.0, 0.0), w=32, h=24, f=20.0):
    R = look_rotation(forward)
    return CameraModel(f, f, w / 2, h / 2, w, h, R, -R @ np.asarray(center, dtype=float))


@pytest.fixture
def cam():
    return make_cam()


@pytest.fixture
def spec():
    return VolumeSpec(8, 8, 4, (-4, -4, -0.5), (4, 4, 1.5))


def pytest_terminal_summary(terminalreporter):
    import sys

    lines = getattr(sys.modules.get("test_acceptance"), "LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
