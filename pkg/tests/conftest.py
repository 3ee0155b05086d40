import numpy as np
import pytest

from katolab.adjoint_weight import solve_adjoint_weight
from katolab.coefficients import make_coefficients
from katolab.grid import make_grid
from katolab.nondiv_ops import assemble_L


def build(preset, dim, n, params=None):
    grid = make_grid(dim, n)
    fld = make_coefficients(preset, params, grid)
    L = assemble_L(fld)
    return grid, fld, L, solve_adjoint_weight(L)


@pytest.fixture(scope="session")
def setup_cache():
    store = {}

    def get(preset, dim, n, params=None):
        key = (preset, dim, n, repr(params))
        if key not in store:
            store[key] = build(preset, dim, n, params)
        return store[key]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
