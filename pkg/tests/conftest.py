import numpy as np
import pytest

from radioloc.scenario import (ClockModel, PathGeometry, Scenario, SpectralGrid, rotation_zyx, single_antenna,
                               upa)

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def grid():
    return SpectralGrid(28e9, 10e6, 16, n_symbols=4)


@pytest.fixture
def mimo_scenario(grid):
    """4x4 planar arrays at both ends, LoS plus one bounce."""
    lam = grid.wavelength
    bs = upa(4, 4, lam / 2, center=(0.0, 0.0, 3.0), orientation=rotation_zyx(0.6))
    ue = upa(4, 4, lam / 2, center=(12.0, 7.0, 1.5), orientation=rotation_zyx(3.4, 0.1, 0.05))
    paths = (PathGeometry.los(), PathGeometry.bounce((9.0, -4.0, 2.0), loss=0.3))
    return Scenario(bs, ue, paths, grid, ClockModel(bias=3e-9), noise_psd=1e-21)


@pytest.fixture
def siso_scenario(grid):
    return Scenario(single_antenna((0.0, 0.0, 0.0)), single_antenna((20.0, 5.0, 0.0)), (PathGeometry.los(),),
                    grid, noise_psd=1e-21)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))
