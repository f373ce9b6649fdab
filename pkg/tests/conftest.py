import numpy as np
import pytest

from panosynth.geometry import ImageDims, Pose, rotation_yaw_pitch_roll
from panosynth.scene import preset, render_grid, write_fixture


@pytest.fixture
def rng():
    return np.random.default_rng(20260816)


def random_pose(rng, span: float = 2.0) -> Pose:
    angles = rng.uniform(-np.pi, np.pi, size=3)
    return Pose(rng.uniform(-span, span, size=3),
                rotation_yaw_pitch_roll(*angles))


@pytest.fixture(scope="session")
def tiny_fixture(tmp_path_factory):
    """All nine atrium frames at 64x32 with ground-truth depth as refined."""
    out = tmp_path_factory.mktemp("tiny_fixture")
    manifest = write_fixture(preset("atrium"), out, ImageDims(64, 32))
    return manifest


@pytest.fixture(scope="session")
def small_grid():
    """In-memory 128x64 atrium grid: list of (id, pose, rgb, depth)."""
    return render_grid(preset("atrium"), ImageDims(128, 64))


def rgb_noise(rng, h=16, w=32):
    return rng.random((h, w, 3)).astype(np.float32)


# gate lines registered by test_acceptance.py; echoed after the run so the
# values survive pytest's output capture
GATE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.section("acceptance gates")
        for line in GATE_LINES:
            terminalreporter.write_line(line)
