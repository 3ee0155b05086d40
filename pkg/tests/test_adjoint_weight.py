import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from katolab.adjoint_weight import (
    all_cubes,
    doubling_constant,
    maximal_function,
    muckenhoupt_constant,
    reverse_holder_constant,
    solve_adjoint_weight,
    weighted_poincare_ratio,
)
from katolab.coefficients import make_coefficients
from katolab.errors import WeightError
from katolab.grid import DyadicCube, band_limited_ensemble, make_grid, norm
from katolab.nondiv_ops import assemble_L, assemble_Ltilde


def brute_force_a2(w, min_points=4):
    """Independent oracle: every wrapped interval with at least ``min_points`` points."""
    n = w.size
    ext = np.concatenate([w, w])
    best = 0.0
    for m in range(min_points, n + 1):
        for s in range(n):
            seg = ext[s:s + m]
            best = max(best, seg.mean() * (1 / seg).mean())
    return best


def closed_form(grid):
    return np.sqrt(3) / (2 + np.sin(2 * np.pi * grid.coordinates[0]))


def test_identity_weight_is_one(setup_cache):
    for dim, n in ((1, 64), (2, 16)):
        grid, fld, L, W = setup_cache("identity", dim, n)
        assert np.allclose(W.values, 1.0, atol=1e-12)


def test_constant_weight_is_one():
    g = make_grid(2, 16)
    W = solve_adjoint_weight(assemble_L(make_coefficients("constant", {"A0": [[2, 1], [1, 2]]}, g)))
    assert np.allclose(W.values, 1.0, atol=1e-10)


def test_sin_1d_closed_form(setup_cache):
    grid, fld, L, W = setup_cache("sin_1d", 1, 256)
    exact = closed_form(grid)
    assert np.max(np.abs(W.values - exact) / exact) <= 1e-3
    assert W.values[0] == pytest.approx(np.sqrt(3) / 2, rel=1e-3)
    assert W.residual <= 1e-8
    assert abs(W.values.mean() - 1) <= 1e-12


@pytest.mark.parametrize("c0,c1", [(3.0, 1.0), (1.5, -1.2)])
def test_analytic_family(c0, c1):
    g = make_grid(1, 256)
    x = g.coordinates[0]
    a = c0 + c1 * np.sin(2 * np.pi * x)
    from katolab.coefficients import CoefficientField

    fld = CoefficientField(g, a[:, None, None].copy(), float(min(a.min(), 1 / a.max())))
    W = solve_adjoint_weight(assemble_L(fld))
    exact = (1 / a) / np.mean(1 / a)
    assert np.max(np.abs(W.values - exact) / exact) <= 1e-3


@pytest.mark.parametrize("preset", ["anisotropic_2d", "random_smooth", "bmo_log"])
def test_2d_weight_invariants(preset, setup_cache):
    grid, fld, L, W = setup_cache(preset, 2, 16)
    assert W.values.min() > 0
    assert abs(W.values.mean() - 1) <= 1e-12
    assert W.residual <= 1e-8
    Lt = assemble_Ltilde(L, W)
    assert np.abs(Lt @ np.ones(grid.size)).max() <= 1e-8


def test_skip_parity_projection_is_degenerate():
    g = make_grid(2, 16)
    L = assemble_L(make_coefficients("anisotropic_2d", {}, g))
    with pytest.raises(WeightError, match="degenerate weight"):
        solve_adjoint_weight(L, project_parity=False)


def test_compact_stencil_has_simple_null_space():
    g = make_grid(1, 64)
    L = assemble_L(make_coefficients("sin_1d", {}, g), "compact")
    W = solve_adjoint_weight(L, project_parity=False)
    assert np.max(np.abs(W.values - closed_form(g)) / closed_form(g)) <= 1e-2


def test_wrong_tag_rejected(setup_cache):
    grid, fld, L, W = setup_cache("sin_1d", 1, 64)
    with pytest.raises(WeightError):
        solve_adjoint_weight(assemble_Ltilde(L, W))


def test_a2_of_one_and_scale_invariance(setup_cache):
    g = make_grid(1, 64)
    assert muckenhoupt_constant(g, np.ones(g.size)) == pytest.approx(1.0, abs=1e-10)
    grid, fld, L, W = setup_cache("sin_1d", 1, 64)
    a = muckenhoupt_constant(grid, W.values)
    assert a >= 1
    assert muckenhoupt_constant(grid, 7.5 * W.values) == pytest.approx(a, rel=1e-12)


def test_a2_matches_brute_force(setup_cache):
    grid, fld, L, W = setup_cache("sin_1d", 1, 256)
    measured = muckenhoupt_constant(grid, W.values)
    assert 1 <= measured <= 9
    assert measured == pytest.approx(brute_force_a2(W.values), abs=1e-10)


def test_checker_weight():
    g = make_grid(1, 32)
    w = np.where(g.coordinates[0] < 0.5, 0.5, 1.5)
    measured = muckenhoupt_constant(g, w)
    assert measured == pytest.approx(brute_force_a2(w), abs=1e-12)
    # the whole torus alone gives (1)(1/2 (2 + 2/3)) = 4/3
    assert measured >= 4 / 3


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_a2_random_weights_match_oracle(seed):
    g = make_grid(1, 16)
    w = np.exp(np.random.default_rng(seed).standard_normal(g.size))
    assert muckenhoupt_constant(g, w) == pytest.approx(brute_force_a2(w), rel=1e-12)


def test_reverse_holder_basic(setup_cache):
    g = make_grid(2, 16)
    one = np.ones(g.size)
    assert reverse_holder_constant(g, one, 2.0) == pytest.approx(1.0)
    assert reverse_holder_constant(g, one, np.inf) == pytest.approx(1.0)
    grid, fld, L, W = setup_cache("anisotropic_2d", 2, 16)
    assert reverse_holder_constant(grid, W.values, 2.0) >= 1.0
    with pytest.raises(ValueError):
        reverse_holder_constant(grid, W.values, 1.0)


def test_reverse_holder_refinement_stable(setup_cache):
    vals = [setup_cache("sin_1d", 1, n)[3].rh_constant for n in (128, 256, 512)]
    assert max(vals) / min(vals) - 1 <= 0.10


def test_doubling(setup_cache):
    for dim in (1, 2):
        g = make_grid(dim, 16)
        assert doubling_constant(g, np.ones(g.size)) == pytest.approx(2.0**dim)
    for preset, dim, n in (("sin_1d", 1, 64), ("anisotropic_2d", 2, 16), ("random_smooth", 2, 16), ("bmo_log", 2, 16)):
        grid, fld, L, W = setup_cache(preset, dim, n)
        assert 1 <= W.doubling_constant <= 4**dim * W.a2_constant
    vals = [setup_cache("sin_1d", 1, n)[3].doubling_constant for n in (128, 256)]
    assert max(vals) / min(vals) - 1 <= 0.10


def test_summary_keys(setup_cache):
    grid, fld, L, W = setup_cache("sin_1d", 1, 64)
    s = W.summary()
    assert set(s) == {"a2", "rh_q", "q", "doubling", "residual"}
    assert s["q"] == "inf"


def test_maximal_function(setup_cache, rng):
    g = make_grid(2, 16)
    assert np.allclose(maximal_function(g, np.full(g.size, 2.5)), 2.5)
    f = rng.standard_normal(g.size)
    assert np.all(maximal_function(g, f) >= np.abs(f))
    ratios = []
    for n in (64, 128):
        grid, fld, L, W = setup_cache("sin_1d", 1, n)
        ens = band_limited_ensemble(grid, 8, 8, seed=0)
        ratios.append(max(norm(grid, maximal_function(grid, f, W), W.values) / norm(grid, f, W.values) for f in ens))
    assert max(ratios) / min(ratios) - 1 <= 0.1


def test_poincare_ratio(setup_cache):
    g = make_grid(1, 64)
    one = np.ones(g.size)
    top = DyadicCube(g, 0, (0,))
    assert weighted_poincare_ratio(g, one * 3, one, top) == 0.0
    f = np.sin(2 * np.pi * g.coordinates[0])
    d = np.cos(2 * np.pi * g.coordinates[0]) * np.sin(2 * np.pi * g.h) / g.h
    expected = np.sqrt(np.mean(f**2)) / np.sqrt(np.mean(d**2))
    assert weighted_poincare_ratio(g, f, one, top) == pytest.approx(expected, rel=1e-12)
    sups = []
    for n in (64, 128):
        grid, fld, L, W = setup_cache("sin_1d", 1, n)
        ens = band_limited_ensemble(grid, 6, 4, seed=2)
        cubes = [c for c in all_cubes(grid) if c.level >= 1]
        sups.append(max(weighted_poincare_ratio(grid, f, W, c) for f in ens for c in cubes))
    assert max(sups) < 1.0
    assert max(sups) / min(sups) - 1 <= 0.1
