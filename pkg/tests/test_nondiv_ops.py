import numpy as np
import pytest

from katolab.coefficients import make_coefficients
from katolab.errors import WeightError
from katolab.grid import band_limited_ensemble, divergence, inner, make_grid, norm
from katolab.nondiv_ops import (
    assemble_L,
    assemble_Lstar,
    assemble_Ltilde,
    assemble_tilde_div,
    divform_identity_residual,
    numerical_range_probe,
    quadratic_form_residual,
)


def smooth_2d(grid):
    x, y = grid.coordinates
    return np.sin(2 * np.pi * x) * np.cos(2 * np.pi * y) + 0.5 * np.cos(2 * np.pi * (x + 2 * y))


def test_identity_symbol():
    g = make_grid(2, 16)
    L = assemble_L(make_coefficients("identity", {}, g))
    x, y = g.coordinates
    k1, k2 = 2, 3
    u = np.cos(2 * np.pi * (k1 * x + k2 * y))
    sym = (np.sin(2 * np.pi * k1 * g.h) ** 2 + np.sin(2 * np.pi * k2 * g.h) ** 2) / g.h**2
    assert np.allclose(L @ u, sym * u, atol=1e-9)


def test_constant_four_symbol():
    g = make_grid(1, 64)
    L = assemble_L(make_coefficients("constant", {"A0": [[4.0]]}, g))
    k = 5
    u = np.sin(2 * np.pi * k * g.coordinates[0])
    assert np.allclose(L @ u, 4 * np.sin(2 * np.pi * k * g.h) ** 2 / g.h**2 * u, atol=1e-9)


@pytest.mark.parametrize("preset,dim", [("sin_1d", 1), ("anisotropic_2d", 2), ("random_smooth", 2)])
def test_row_sums_and_lstar_transpose(preset, dim, setup_cache, rng):
    grid, fld, L, W = setup_cache(preset, dim, 16 if dim == 2 else 64)
    one = np.ones(grid.size)
    assert np.abs(L @ one).max() <= 1e-12 * np.abs(L.dense()).max()
    Ls = assemble_Lstar(fld)
    assert np.abs(Ls.dense() - L.dense().T).max() <= 1e-14 * np.abs(L.dense()).max()
    u, v = rng.standard_normal((2, grid.size))
    assert inner(grid, Ls @ u, v) == pytest.approx(inner(grid, u, L @ v), rel=1e-12)
    Lt = assemble_Ltilde(L, W)
    assert np.abs(Lt @ one).max() <= 1e-8
    scale = norm(grid, u, W.values) * norm(grid, v, W.values) * np.abs(L.dense()).max()
    assert abs(inner(grid, L @ u, v, W.values) - inner(grid, u, Lt @ v, W.values)) <= 1e-12 * scale


def test_identity_ltilde_equals_l(setup_cache):
    grid, fld, L, W = setup_cache("identity", 2, 16)
    assert np.allclose(assemble_Ltilde(L, W).dense(), L.dense(), atol=1e-9)
    assert np.array_equal(assemble_Lstar(fld).dense(), L.dense())


def test_ltilde_dense_and_sparse_agree(setup_cache):
    grid, fld, L, W = setup_cache("sin_1d", 1, 64)
    from katolab.grid import DiscreteOperator

    dense = assemble_Ltilde(DiscreteOperator(L.dense(), "L", grid), W).dense()
    assert np.allclose(dense, assemble_Ltilde(L, W).dense(), rtol=0, atol=1e-10)


def test_ltilde_rejects_nonpositive_weight(setup_cache):
    grid, fld, L, W = setup_cache("sin_1d", 1, 64)
    bad = W.values.copy()
    bad[0] = 0.0
    with pytest.raises(WeightError):
        assemble_Ltilde(L, bad)


def test_tilde_div_duality_and_unit_weight(setup_cache, rng):
    grid, fld, L, W = setup_cache("anisotropic_2d", 2, 16)
    from katolab.grid import gradient

    v = rng.standard_normal(2 * grid.size)
    u = rng.standard_normal(grid.size)
    lhs = inner(grid, assemble_tilde_div(grid, W) @ v, u, W.values)
    rhs = -inner(grid, v, gradient(grid) @ u, W.values)
    assert lhs == pytest.approx(rhs, rel=1e-12)
    one = np.ones(grid.size)
    assert np.array_equal(assemble_tilde_div(grid, one).dense(), divergence(grid).dense())


def test_tilde_div_of_constant_vector_matches_log_derivative():
    errs = []
    for n in (64, 128):
        g = make_grid(1, n)
        x = g.coordinates[0]
        a = 2 + np.sin(2 * np.pi * x)
        W = np.sqrt(3) / a
        out = assemble_tilde_div(g, W) @ np.ones(n)
        exact = -2 * np.pi * np.cos(2 * np.pi * x) / a
        errs.append(np.abs(out - exact).max())
    assert errs[1] < errs[0] / 3.5  # second order


def test_constant_coefficient_identities_exact(rng):
    g = make_grid(2, 16)
    fld = make_coefficients("constant", {"A0": [[2, 1], [1, 2]]}, g)
    L = assemble_L(fld)
    one = np.ones(g.size)
    u = band_limited_ensemble(g, 1, 4, seed=3)[0]
    assert quadratic_form_residual(L, fld, one, u) <= 1e-12 * inner(g, L @ u, u)
    assert divform_identity_residual(fld, one, u) <= 1e-12
    assert quadratic_form_residual(L, fld, one, one) == 0.0
    assert divform_identity_residual(fld, one, one) == 0.0


def test_one_dimensional_identities_exact(setup_cache):
    # in 1-d the weight makes aW constant, so both identities hold discretely
    grid, fld, L, W = setup_cache("sin_1d", 1, 64)
    x = grid.coordinates[0]
    u = np.sin(2 * np.pi * x)
    assert quadratic_form_residual(L, fld, W, u) <= 1e-10 * inner(grid, L @ u, u, W.values)
    assert divform_identity_residual(fld, W, np.sin(4 * np.pi * x)) <= 1e-10


@pytest.mark.parametrize("preset", ["random_smooth", "anisotropic_2d"])
def test_identities_converge_in_2d(preset, setup_cache):
    res_q, res_d = [], []
    for n in (16, 32, 64):
        grid, fld, L, W = setup_cache(preset, 2, n)
        u = smooth_2d(grid)
        res_q.append(quadratic_form_residual(L, fld, W, u) / norm(grid, u, W.values) ** 2)
        res_d.append(divform_identity_residual(fld, W, u))
    assert res_q[0] > res_q[1] > res_q[2]
    assert res_d[0] > res_d[1] > res_d[2]
    assert res_q[1] / res_q[2] >= 2 and res_d[1] / res_d[2] >= 2


def test_numerical_range_identity(setup_cache):
    grid, fld, L, W = setup_cache("identity", 2, 16)
    probe = numerical_range_probe(L, W, n_samples=32, seed=1)
    assert probe["max_abs_arg"] <= 1e-10
    assert probe["min_real_part"] >= 0


@pytest.mark.parametrize("preset,dim,n", [("anisotropic_2d", 2, 16), ("random_smooth", 2, 32), ("sin_1d", 1, 256)])
def test_numerical_range_sector(preset, dim, n, setup_cache):
    grid, fld, L, W = setup_cache(preset, dim, n)
    for op in (L, assemble_Ltilde(L, W)):
        probe = numerical_range_probe(op, W, n_samples=32, seed=0)
        assert probe["min_real_part"] >= -1e-8
        assert probe["max_abs_arg"] < np.pi / 2 - 0.01
