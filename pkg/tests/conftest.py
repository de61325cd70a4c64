import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from uncreg.grid import Grid, Mask, MeanStdField  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_field(grid, rng, mask=None, lo=0.5, hi=2.0):
    mask = mask if mask is not None else Mask.full(grid)
    mean = rng.normal(scale=5.0, size=(3,) + grid.dims)
    std = rng.uniform(lo, hi, size=(3,) + grid.dims)
    return MeanStdField(grid, mean, std, mask)


def ball_mask(grid, frac=0.45):
    xyz = grid.all_world()
    c = grid.world_of((np.asarray(grid.dims) - 1) / 2.0).reshape(3, 1, 1, 1)
    r = np.sqrt(((xyz - c) ** 2).sum(axis=0))
    ext = min(d * h for d, h in zip(grid.dims, grid.spacing))
    return Mask(grid, r <= frac * ext)


@pytest.fixture
def grid4():
    return Grid((4, 4, 4), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(label: str, ok: bool, detail: str, seconds: float) -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {label}: {detail} [{seconds:.1f} s]")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
