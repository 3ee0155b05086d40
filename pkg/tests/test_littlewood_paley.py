import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from katolab.adjoint_weight import maximal_function
from katolab.errors import GridError
from katolab.functional_calculus import OperatorFamilies, SemigroupCache
from katolab.grid import band_limited_ensemble, make_grid, norm
from katolab.littlewood_paley import (
    FACTORIZATION_CONSTANT,
    TGrid,
    almost_orthogonality_fit,
    averaging_decay_fit,
    calderon_normalizer,
    calderon_reproduce,
    difference_symbol,
    dyadic_average,
    factorization_product,
    mollifier,
    pt_derivative_factorization,
    pt_squared_log_derivative,
    qt,
    recover_factorization_constant,
    square_function,
)


@pytest.mark.parametrize("dim,n", [(1, 64), (2, 32)])
def test_mollifier_and_q_on_constants(dim, n):
    grid = make_grid(dim, n)
    one = np.ones(grid.size)
    for t in (4 * grid.h, grid.side / 8, grid.side / 4):
        P = mollifier(t, grid)
        assert np.max(np.abs(P.apply(one) - 1)) <= 1e-13
        for axis in range(dim):
            assert np.max(np.abs(qt(t, axis, grid).apply(one))) <= 1e-12


def test_mollifier_kernel_properties():
    grid = make_grid(1, 128)
    t = 8 * grid.h
    k = mollifier(t, grid).stencil()
    assert k.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.allclose(k, np.roll(k[::-1], 1), atol=1e-15)  # even
    offsets = np.minimum(np.arange(128), 128 - np.arange(128)) * grid.h
    assert np.all(np.abs(k[offsets >= t]) <= 1e-15)  # support radius t


def test_mollifier_rejects_scale_out_of_range():
    grid = make_grid(1, 64)
    with pytest.raises(GridError):
        mollifier(2 * grid.h, grid)
    with pytest.raises(GridError):
        mollifier(0.5, grid)
    with pytest.raises(GridError):
        qt(8 * grid.h, 1, grid)


def test_mollifier_taylor_bound():
    # even profile: P_t f - f ~ (m2 t^2 / 2) f'' with m2 = int x^2 phi / int phi = 1/11
    grid = make_grid(1, 256)
    x = grid.coordinates[0]
    t = 4 * grid.h
    for k in (1, 3, 5):
        f = np.sin(2 * np.pi * k * x)
        fpp = -((2 * np.pi * k) ** 2) * f
        err = norm(grid, mollifier(t, grid).apply(f) - f)
        assert err <= t * t / 11 * norm(grid, fpp)
        assert err == pytest.approx(t * t / 22 * norm(grid, fpp), rel=0.1)


def test_mollifier_dominated_by_maximal_function():
    grid = make_grid(1, 128)
    w = 2 + np.sin(2 * np.pi * grid.coordinates[0])
    ens = band_limited_ensemble(grid, 8, 6, seed=11)
    ts = TGrid(4 * grid.h, grid.side / 4, 2).ts
    ratios = []
    for f in ens:
        sup = np.max(np.abs([mollifier(t, grid).apply(f) for t in ts]), axis=0)
        ratios.append(norm(grid, sup, w) / norm(grid, maximal_function(grid, f, w), w))
    assert 0 < max(ratios) <= 2.0


def test_q_single_mode_fourier_oracle():
    grid = make_grid(1, 128)
    x = grid.coordinates[0]
    kmode = 5
    f = np.cos(2 * np.pi * kmode * x)
    tg = TGrid(8 * grid.h, grid.side / 8, 8)
    value = square_function(lambda t: qt(t, 0, grid), f, tg, grid=grid)
    theta = 2 * np.pi * kmode * grid.h
    expected = 0.0
    for t, wk in zip(tg.ts, tg.weights):
        p_hat = mollifier(t, grid).symbol[kmode].real
        expected += wk * (t * np.sin(theta) / grid.h * p_hat) ** 2
    expected *= norm(grid, f) ** 2
    assert value == pytest.approx(expected, rel=1e-10)


def _q_square_constant(n):
    grid = make_grid(1, n)
    w = 2 + np.sin(2 * np.pi * grid.coordinates[0])
    tg = TGrid(1 / 16, 1 / 4, 8)
    ens = band_limited_ensemble(grid, 12, 8, seed=3)
    return max(
        square_function(lambda t: qt(t, 0, grid), f, tg, W=w, grid=grid) / norm(grid, f, w) ** 2
        for f in ens
    )


def test_q_square_function_constant_refinement_stable():
    consts = [_q_square_constant(n) for n in (64, 128, 256)]
    assert all(0 < c < 10 for c in consts)
    assert max(consts) / min(consts) <= 1.2


def test_factorization_kernels_are_mean_zero():
    for dim, n in ((1, 128), (2, 32)):
        grid = make_grid(dim, n)
        one = np.ones(grid.size)
        q1, q2 = pt_derivative_factorization(8 * grid.h, grid)
        for a, b in zip(q1, q2):
            assert np.max(np.abs(a.apply(one))) <= 1e-13
            assert np.max(np.abs(b.apply(one))) <= 1e-12


@pytest.mark.parametrize("dim,n", [(1, 256), (2, 64)])
def test_factorization_finite_difference(dim, n):
    grid = make_grid(dim, n)
    t = 8 * grid.h
    lhs = pt_squared_log_derivative(t, grid, delta=1e-3)
    rhs = factorization_product(t, grid).scaled(FACTORIZATION_CONSTANT)
    scale = np.max(np.abs(lhs.symbol))
    assert np.max(np.abs(lhs.symbol - rhs.symbol)) / scale <= 0.05


def test_factorization_constant_scale_invariant():
    grid = make_grid(1, 512)
    c1 = recover_factorization_constant(8 * grid.h, grid)
    c2 = recover_factorization_constant(32 * grid.h, grid)
    assert c1 == pytest.approx(FACTORIZATION_CONSTANT, rel=0.05)
    assert c1 == pytest.approx(c2, rel=0.05)


@pytest.mark.parametrize("dim,n", [(1, 64), (2, 16)])
def test_dyadic_average_projection(dim, n):
    grid = make_grid(dim, n)
    for t in (2 * grid.h, 3 * grid.h, grid.side / 2, grid.side):
        A = dyadic_average(t, grid).dense()
        assert np.allclose(A @ A, A, atol=1e-14)
        assert np.allclose(A @ np.ones(grid.size), 1.0, atol=1e-14)


def test_dyadic_average_level():
    grid = make_grid(1, 64)
    # t = 3h: the level with side 2h satisfies t/2 < 2h <= t
    A = dyadic_average(3 * grid.h, grid).dense()
    assert np.count_nonzero(A[0]) == 2
    with pytest.raises(GridError):
        dyadic_average(grid.h, grid)


def test_averaging_decay_exponent_positive():
    grid = make_grid(1, 128)
    w = 2 + np.sin(2 * np.pi * grid.coordinates[0])
    t = grid.side / 4
    pairs = [(s, t) for s in (4 * grid.h, 8 * grid.h, 16 * grid.h, t)]
    fit = averaging_decay_fit(grid, pairs, W=w)
    assert fit["beta"] > 0
    with pytest.raises(ValueError):
        averaging_decay_fit(grid, [(t, 4 * grid.h)])


def test_almost_orthogonality_exponent():
    grid = make_grid(1, 256)
    ts = TGrid(4 * grid.h, grid.side / 4, 2).ts
    fit = almost_orthogonality_fit(grid, ts)
    assert fit["alpha"] >= 0.5
    w = 2 + np.sin(2 * np.pi * grid.coordinates[0])
    fit_w = almost_orthogonality_fit(make_grid(1, 64), TGrid(4 / 64, 1 / 4, 2).ts, W=w[::4])
    assert fit_w["alpha"] >= 0.5


def test_tgrid_weights_and_validation():
    tg = TGrid(1 / 32, 1 / 4, 8)
    assert tg.weights.sum() == pytest.approx(np.log(8))
    assert len(tg.ts) == 25
    assert tg.refined().q_sub == 16
    with pytest.raises(ValueError):
        TGrid(0.2, 0.1)
    with pytest.raises(GridError):
        TGrid.for_grid(make_grid(1, 64), t_min_factor=2)
    with pytest.raises(GridError):
        TGrid(1 / 16, 0.5).validate(make_grid(1, 64))


@settings(max_examples=20, deadline=None)
@given(lo=st.integers(2, 5), octaves=st.integers(1, 3), q=st.integers(1, 6))
def test_tgrid_weights_sum_to_log_ratio(lo, octaves, q):
    tg = TGrid(2.0**-(lo + octaves), 2.0**-lo, q)
    assert tg.weights.sum() == pytest.approx(octaves * np.log(2), rel=1e-12)


def test_square_function_zero_family():
    grid = make_grid(1, 64)
    f = np.sin(2 * np.pi * grid.coordinates[0])
    zero = np.zeros((grid.size, grid.size))
    assert square_function(lambda t: zero, f, TGrid(1 / 16, 1 / 4), grid=grid) == 0.0


def test_square_function_family_ii_scalar_oracle(setup_cache):
    grid, _, L, W = setup_cache("identity", 1, 128)
    tg = TGrid(8 * grid.h, grid.side / 8, 4)
    fam = OperatorFamilies(SemigroupCache.from_tgrid(L, tg), W)
    kmode = 3
    f = np.sin(2 * np.pi * kmode * grid.coordinates[0])
    value = square_function(lambda t: fam("ii", t), f, tg)
    mu = np.sin(2 * np.pi * kmode * grid.h) ** 2 / grid.h**2
    x = tg.ts**2 * mu
    expected = np.sum(tg.weights * (x * np.exp(-x)) ** 2) * norm(grid, f) ** 2
    assert value == pytest.approx(expected, rel=1e-10)


def test_square_function_reports_failing_t():
    grid = make_grid(1, 64)

    def bad(t):
        raise FloatingPointError("boom")

    with pytest.raises(RuntimeError, match="t = "):
        square_function(bad, np.ones(64), TGrid(1 / 16, 1 / 4), grid=grid)


def test_square_function_riemann_refinement():
    grid = make_grid(1, 128)
    f = band_limited_ensemble(grid, 1, 6, seed=2)[0]
    tg = TGrid(8 * grid.h, grid.side / 8, 8)
    coarse = square_function(lambda t: qt(t, 0, grid), f, tg, grid=grid)
    fine = square_function(lambda t: qt(t, 0, grid), f, tg.refined(), grid=grid)
    assert abs(coarse - fine) <= 0.01 * fine


def test_calderon_single_mode():
    grid = make_grid(1, 1024)
    f = np.cos(2 * np.pi * 32 * grid.coordinates[0])
    res = calderon_reproduce(f, TGrid(8 * grid.h, grid.side / 8, 8), grid)
    assert res["error"] <= 0.05
    assert not res["out_of_band"]
    assert res["normalizer"] == pytest.approx(calderon_normalizer(1))


def test_calderon_constant_is_out_of_band():
    grid = make_grid(1, 256)
    res = calderon_reproduce(np.ones(grid.size), TGrid(8 * grid.h, grid.side / 8, 8), grid)
    assert res["error"] == pytest.approx(1.0, abs=1e-12)
    assert res["out_of_band"]


def test_calderon_error_decreases_with_range():
    grid = make_grid(1, 1024)
    f = band_limited_ensemble(grid, 1, 40, seed=4)[0]
    errs = [
        calderon_reproduce(f, TGrid(t_min, grid.side / 4, 8), grid)["error"]
        for t_min in (64 * grid.h, 16 * grid.h, 4 * grid.h)
    ]
    assert errs[0] > errs[1] > errs[2]


def test_difference_symbol_matches_first_difference():
    from katolab.grid import first_difference

    grid = make_grid(1, 32)
    f = np.random.default_rng(0).standard_normal(32)
    via_fft = np.fft.ifft(difference_symbol(grid, 0) * np.fft.fft(f)).real
    assert np.allclose(via_fft, first_difference(grid, 0).matrix @ f, atol=1e-12)
