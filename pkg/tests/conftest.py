import sys

import numpy as np
import pytest

from updraft.grid_io import Grid3D


def make_grid(values, name="field", units="dBZ", datum="AGL", dz=0.5, dxy=3.0, missing=-9999.0):
    values = np.asarray(values, dtype=np.float32)
    nz, ny, nx = values.shape
    return Grid3D(
        name=name,
        units=units,
        values=values,
        z_coords=0.5 + dz * np.arange(nz),
        y_coords=dxy * np.arange(ny),
        x_coords=dxy * np.arange(nx),
        height_datum=datum,
        missing_value=missing,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
