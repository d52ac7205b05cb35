import sys
from dataclasses import replace
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cloudmatch.augment import AugConfig  # noqa: E402
from cloudmatch.config import TrainConfig  # noqa: E402
from cloudmatch.data import prepare_dataset, synthesize_dataset  # noqa: E402

TINY_PATCH = 32

# one "criterion N: PASS|FAIL ..." line per acceptance test, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory) -> Path:
    """24 synthetic 32x32 scenes: 18 training patches, 6 test patches, split seeds 0-2."""
    root = tmp_path_factory.mktemp("tiny")
    synthesize_dataset(root, 24, TINY_PATCH, seed=0)
    for seed in (0, 1, 2):
        prepare_dataset(root, TINY_PATCH, seed)
    return root


@pytest.fixture
def tiny_cfg(tiny_data, tmp_path):
    def make(**overrides) -> TrainConfig:
        base = TrainConfig(data_dir=str(tiny_data), out_dir=str(tmp_path / "run"), epochs=2,
                           labeled_ratio="1/4", aug=AugConfig(patch_size=TINY_PATCH))
        return replace(base, **overrides)

    return make


@pytest.fixture
def verdict():
    """Record the outcome of an acceptance criterion before asserting on it."""

    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
