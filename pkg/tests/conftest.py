import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from occlusion_vo.sim import generate, scenario_config  # noqa: E402


@pytest.fixture(scope="session")
def static_noise_free():
    return generate(scenario_config("static", seed=3, frames=30, pixel_noise_sigma=0.0))


@pytest.fixture(scope="session")
def pair_dataset():
    return generate(scenario_config("pair", seed=1, frames=30))


@pytest.fixture(scope="session")
def mixed_small():
    return generate(scenario_config("mixed", seed=2, frames=20))


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance(request):
    """Record one ``criterion N: PASS|FAIL ...`` line for the end-of-run summary."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(number: int, passed: bool, detail: str) -> None:
        lines.append((number, f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"))

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
