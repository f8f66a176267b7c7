import numpy as np
import pytest

from navtune import nav, robot, world


@pytest.fixture
def empty_grid():
    cells = np.zeros((20, 20), dtype=bool)
    return world.OccupancyGrid(20, 20, 0.15, cells)


@pytest.fixture
def walled_grid():
    cells = np.zeros((20, 20), dtype=bool)
    cells[0, :] = cells[-1, :] = True
    cells[:, 0] = cells[:, -1] = True
    return world.OccupancyGrid(20, 20, 0.15, cells)


def make_gap_grid(width=30, height=30, gap_cells=3, gap_x=None, wall_row=None, res=0.15):
    """Open room split by one horizontal wall with a narrow gap."""
    cells = np.zeros((height, width), dtype=bool)
    cells[0, :] = cells[-1, :] = True
    cells[:, 0] = cells[:, -1] = True
    row = height // 2 if wall_row is None else wall_row
    cells[row, :] = True
    x0 = (width - gap_cells) // 2 if gap_x is None else gap_x
    cells[row, x0 : x0 + gap_cells] = False
    return world.OccupancyGrid(width, height, res, cells)


@pytest.fixture
def gap_grid():
    return make_gap_grid()
