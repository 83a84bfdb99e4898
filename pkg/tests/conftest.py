import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from maskdepth.data import SceneSpec, generate_triplets  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training experiments")
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])


@pytest.fixture(scope="session")
def small_dataset():
    """Six 64x64 triplets rendered from a fixed scene seed."""
    return generate_triplets(SceneSpec(seed=7), 6)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Four 32x32 triplets without supersampling, for fast plumbing tests."""
    return generate_triplets(SceneSpec(seed=3, width=32, height=32, supersample=1), 4)
