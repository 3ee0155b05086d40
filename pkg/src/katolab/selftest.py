"""Invariant suites behind ``katolab selftest``.

Each suite returns rows ``(module, invariant, measured, threshold, status)``.
The quick level uses grids with N <= 64; the full level adds refinement
suites up to N = 256.
"""

from __future__ import annotations

import time

import numpy as np

from .adjoint_weight import doubling_constant, muckenhoupt_constant, solve_adjoint_weight
from .coefficients import PRESETS, check_ellipticity, dyadic_bmo_norm, make_coefficients
from .estimates import (
    KatoOperators,
    carleson_functional,
    gaffney_fit,
    kato_sweep,
    tb_test_function,
    theta,
    theta_one,
    theta_tilde,
)
from .functional_calculus import (
    FAMILY_KINDS,
    GAFFNEY_KINDS,
    OperatorFamilies,
    SemigroupCache,
    geometric_ts,
    scalar_normalizer,
    sqrt_oracle,
    sqrt_quadrature,
)
from .grid import (
    band_limited_ensemble,
    divergence,
    dyadic_cubes,
    gradient,
    inner,
    integrate,
    make_grid,
    norm,
)
from .littlewood_paley import TGrid, mollifier, qt, recover_factorization_constant
from .nondiv_ops import (
    assemble_L,
    assemble_Ltilde,
    divform_identity_residual,
    numerical_range_probe,
    quadratic_form_residual,
)

FAULTS = ("skip_parity_projection",)


class _Suite:
    def __init__(self, module: str):
        self.module = module
        self.rows: list[dict] = []

    def le(self, name, value, threshold):
        self._add(name, value, threshold, value <= threshold)

    def ge(self, name, value, threshold):
        self._add(name, value, f">= {threshold}", value >= threshold)

    def _add(self, name, value, threshold, ok):
        self.rows.append({
            "module": self.module, "invariant": name, "measured": float(value),
            "threshold": threshold if isinstance(threshold, str) else float(threshold),
            "status": "PASS" if bool(ok) else "FAIL",
        })


class _Context:
    """Builds fields, weights and caches once per (preset, dim, N)."""

    def __init__(self, fault: str | None):
        if fault is not None and fault not in FAULTS:
            raise ValueError(f"unknown fault {fault!r}")
        self.project_parity = fault != "skip_parity_projection"
        self._store = {}

    def setup(self, preset, dim, n, params=None):
        key = (preset, dim, n, repr(sorted((params or {}).items())))
        if key not in self._store:
            grid = make_grid(dim, n)
            fld = make_coefficients(preset, params, grid)
            L = assemble_L(fld)
            W = solve_adjoint_weight(L, project_parity=self.project_parity)
            self._store[key] = (grid, fld, L, W)
        return self._store[key]


def _rel_drift(values) -> float:
    values = np.asarray(values, dtype=float)
    return float((values.max() - values.min()) / max(values.min(), 1e-300))


# ---- quick suites -------------------------------------------------------


def suite_grid(ctx):
    s = _Suite("grid")
    for dim, n in ((1, 64), (2, 16)):
        grid = make_grid(dim, n)
        u = band_limited_ensemble(grid, 1, 4, seed=1)[0]
        v = band_limited_ensemble(grid, dim, 4, seed=2).ravel()
        lhs = inner(grid, gradient(grid).matrix @ u, v)
        rhs = -inner(grid, u, divergence(grid).matrix @ v)
        s.le(f"grad_div_adjoint_{dim}d", abs(lhs - rhs), 1e-12)
        s.le(f"integrate_one_{dim}d", abs(integrate(grid, np.ones(grid.size)) - 1.0), 1e-14)
        s.le(f"gradient_of_constant_{dim}d", np.abs(gradient(grid).matrix @ np.ones(grid.size)).max(), 1e-14)
    return s.rows


def suite_coefficients(ctx):
    s = _Suite("coefficients")
    for preset in PRESETS:
        dim = 1 if preset == "sin_1d" else 2
        params = {"A0": [[2.0, 1.0], [1.0, 2.0]]} if preset == "constant" else {}
        fld = make_coefficients(preset, params, make_grid(dim, 16))
        s.ge(f"ellipticity_{preset}", check_ellipticity(fld), 1e-3)
    grid = make_grid(2, 16)
    s.le("bmo_of_constant", dyadic_bmo_norm(grid, np.full(grid.size, 3.0)), 1e-14)
    return s.rows


def suite_adjoint_weight(ctx):
    s = _Suite("adjoint_weight")
    grid, fld, L, W = ctx.setup("sin_1d", 1, 64)
    x = grid.coordinates[0]
    exact = np.sqrt(3) / (2 + np.sin(2 * np.pi * x))
    s.le("sin_1d_closed_form", np.max(np.abs(W.values - exact) / exact), 1e-3)
    s.le("residual", W.residual, 1e-8)
    s.le("mean_one", abs(W.values.mean() - 1), 1e-12)
    for preset in ("identity", "anisotropic_2d", "random_smooth"):
        grid, fld, L, W = ctx.setup(preset, 2, 16)
        s.ge(f"positive_{preset}", W.values.min(), 0.0)
        a2 = muckenhoupt_constant(grid, W.values)
        s.le(f"doubling_le_4d_a2_{preset}", doubling_constant(grid, W.values) - 4**grid.dim * a2, 0.0)
    grid = make_grid(1, 64)
    s.le("a2_of_one", abs(muckenhoupt_constant(grid, np.ones(grid.size)) - 1), 1e-10)
    return s.rows


def suite_nondiv_ops(ctx):
    s = _Suite("nondiv_ops")
    for preset, dim, n in (("sin_1d", 1, 64), ("anisotropic_2d", 2, 16)):
        grid, fld, L, W = ctx.setup(preset, dim, n)
        Lt = assemble_Ltilde(L, W.values)
        one = np.ones(grid.size)
        s.le(f"L_one_{preset}", np.abs(L.matrix @ one).max(), 1e-12)
        s.le(f"Ltilde_one_{preset}", np.abs(Lt.matrix @ one).max(), 1e-10)
        u, v = band_limited_ensemble(grid, 2, 4, seed=3)
        lhs = inner(grid, L.matrix @ u, v, W.values)
        rhs = inner(grid, u, Lt.matrix @ v, W.values)
        s.le(f"w_adjoint_{preset}", abs(lhs - rhs) / (abs(lhs) + 1e-300), 1e-10)
        probe = numerical_range_probe(L, W, n_samples=16, seed=0)
        s.ge(f"accretive_{preset}", probe["min_real_part"], -1e-10)
    # constant coefficients: both identities exact on the composed stencil
    grid = make_grid(2, 16)
    fld = make_coefficients("constant", {"A0": [[2.0, 1.0], [1.0, 2.0]]}, grid)
    L = assemble_L(fld)
    u = band_limited_ensemble(grid, 1, 4, seed=4)[0]
    scale = norm(grid, gradient(grid).matrix @ u) ** 2
    s.le("luu_constant_exact", quadratic_form_residual(L, fld, np.ones(grid.size), u) / scale, 1e-12)
    s.le("divform_constant_exact", divform_identity_residual(fld, np.ones(grid.size), u), 1e-10)
    return s.rows


def suite_functional_calculus(ctx):
    s = _Suite("functional_calculus")
    s.le("scalar_normalizer", abs(scalar_normalizer(1e-3, 128) - np.sqrt(np.pi / 128)), 1e-8)
    grid, fld, L, W = ctx.setup("sin_1d", 1, 64)
    R = sqrt_oracle(L).matrix
    s.le("oracle_square", np.abs(R @ R - L.dense()).max() / np.abs(L.dense()).max(), 1e-10)
    f = np.sin(2 * np.pi * grid.coordinates[0])
    exact = R @ f
    approx = sqrt_quadrature(L, f, 1e-3, 128, check=False)
    s.le("quadrature_vs_oracle_smooth", norm(grid, approx - exact, W.values) / norm(grid, exact, W.values), 1e-4)
    cache = SemigroupCache(L, 1 / 16, 1 / 8, 4)
    Wt = cache.adjoint(W)
    one = np.ones(grid.size)
    s.le("E_one", np.abs(cache.matrix(1 / 16) @ one - 1).max(), 1e-10)
    s.le("Etilde_one", np.abs(Wt.matrix(1 / 16) @ one - 1).max(), 1e-10)
    s.le("semigroup_property", np.abs(cache.matrix(1 / 16) @ cache.matrix(1 / 16) - cache(np.sqrt(2) / 16).matrix).max(), 1e-12)
    grid, fld, L, W = ctx.setup("identity", 1, 64)
    fam = OperatorFamilies(SemigroupCache(L, 1 / 8, 1 / 8, 1), W)
    s.le("identity_L_semigroup_sup", fam.norm("L_semigroup", 1 / 8), float(np.exp(-1)) + 1e-10)
    return s.rows


def suite_littlewood_paley(ctx):
    s = _Suite("littlewood_paley")
    grid = make_grid(1, 64)
    one = np.ones(grid.size)
    s.le("P_one", np.abs(mollifier(1 / 8, grid).apply(one) - 1).max(), 1e-13)
    s.le("Q_one", np.abs(qt(1 / 8, 0, grid).apply(one)).max(), 1e-13)
    s.le("factorization_constant", abs(recover_factorization_constant(1 / 8, grid) + 2), 5e-2)
    tg = TGrid(1 / 16, 1 / 4, 8)
    s.le("log_weights_sum", abs(tg.weights.sum() - np.log(4)), 1e-12)
    return s.rows


def suite_estimates(ctx):
    s = _Suite("estimates")
    grid, fld, L, W = ctx.setup("identity", 1, 64)
    ops = KatoOperators(fld, W)
    ratios = [ops.ratio(f) for f in band_limited_ensemble(grid, 8, 8, seed=0)]
    s.le("identity_kato_exact", np.max(np.abs(np.array(ratios) - 1)), 1e-8)
    grid, fld, L, W = ctx.setup("constant", 2, 16, {"A0": [[2.0, 1.0], [1.0, 2.0]]})
    tg = TGrid(1 / 8, 1 / 4, 4)
    s.le("carleson_constant_zero", carleson_functional(fld, W, tg, L_op=L).supremum, 1e-12)
    grid, fld, L, W = ctx.setup("anisotropic_2d", 2, 16)
    cache = SemigroupCache(L, 1 / 8, 1 / 8, 1)
    for k in range(2):
        e = np.zeros(2 * grid.size)
        e[k * grid.size:(k + 1) * grid.size] = 1.0
        d = np.abs(theta(1 / 8, W, fld, cache).matrix @ e - theta_tilde(1 / 8, W, fld, cache).matrix @ e).max()
        s.le(f"theta_tilde_one_e{k + 1}", d, 1e-12)
    th = theta_one(fld, W, [1 / 8], cache=cache)
    s.ge("theta_one_nonzero", np.abs(th).max(), 1e-8)
    return s.rows


QUICK = (
    suite_grid,
    suite_coefficients,
    suite_adjoint_weight,
    suite_nondiv_ops,
    suite_functional_calculus,
    suite_littlewood_paley,
    suite_estimates,
)


# ---- full (refinement) suites -------------------------------------------


def full_analytic_weight(ctx):
    s = _Suite("adjoint_weight")
    grid, fld, L, W = ctx.setup("sin_1d", 1, 256)
    x = grid.coordinates[0]
    exact = np.sqrt(3) / (2 + np.sin(2 * np.pi * x))
    s.le("sin_1d_closed_form_N256", np.max(np.abs(W.values - exact) / exact), 1e-3)
    s.le("residual_N256", W.residual, 1e-8)
    return s.rows


def full_sqrt_routes(ctx):
    s = _Suite("functional_calculus")
    for preset in ("identity", "sin_1d"):
        grid, fld, L, W = ctx.setup(preset, 1, 128)
        x = grid.coordinates[0]
        R = sqrt_oracle(L).matrix
        for name, f in (("sin", np.sin(2 * np.pi * x)), ("cos2", np.cos(4 * np.pi * x))):
            exact = R @ f
            approx = sqrt_quadrature(L, f, 1e-3, 128, check=False)
            err = norm(grid, approx - exact, W.values) / norm(grid, exact, W.values)
            s.le(f"quadrature_vs_oracle_{preset}_{name}", err, 1e-4)
    return s.rows


def full_kato(ctx):
    s = _Suite("estimates")
    rep = kato_sweep("identity", {}, 1, [256], 50)
    vals = np.concatenate(list(rep.ratios.values()))
    s.le("identity_kato_N256", np.max(np.abs(vals - 1)), 1e-8)
    rep = kato_sweep("sin_1d", {}, 1, [64, 128, 256], 50)
    for which, d in rep.drift.items():
        s.le(f"sin_1d_median_drift_{which}", d, 0.10)
    spread = max(r["max"] / r["min"] for r in rep.table)
    s.le("sin_1d_max_over_min", spread, 1 / (1 / 3) + 0.1)
    grid, fld, L, W = ctx.setup("sin_1d", 1, 128)
    ops = KatoOperators(fld, W, eps_trunc=1e-4)
    agree = max(
        abs(ops.ratio(f, "L", "quadrature") / ops.ratio(f, "L", "oracle") - 1)
        for f in band_limited_ensemble(grid, 8, 8, seed=0)
    )
    s.le("route_agreement", agree, 1e-4)
    return s.rows


def full_carleson(ctx):
    s = _Suite("estimates")
    sups = []
    for n in (32, 64):
        grid, fld, L, W = ctx.setup("anisotropic_2d", 2, n)
        sups.append(carleson_functional(fld, W, TGrid(1 / 16, 1 / 4, 8), L_op=L).supremum)
    s.ge("carleson_2d_positive", min(sups), 1e-8)
    s.le("carleson_2d_drift", _rel_drift(sups), 0.2)
    return s.rows


def full_gaffney(ctx):
    s = _Suite("estimates")
    grid, fld, L, W = ctx.setup("sin_1d", 1, 256)
    t_set = [8 * grid.h, 12 * grid.h, 16 * grid.h]
    seps = [j * grid.h for j in range(1, grid.n_points // 2 + 1)]
    fam = OperatorFamilies(SemigroupCache(L, t_set[0], t_set[-1], 8), W)
    for kind in GAFFNEY_KINDS:
        fit = gaffney_fit(fam, kind, t_set, seps)
        if fit.status == "ok":
            s.ge(f"gaffney_rate_{kind}", fit.decay_rate, 0.0)
            s.ge(f"gaffney_r2_{kind}", fit.r2, 0.9)
    return s.rows


def family_sups(ctx, preset, n, t_min, t_max):
    grid, fld, L, W = ctx.setup(preset, 1, n)
    ts = geometric_ts(t_min, t_max, 8)
    fam = OperatorFamilies(SemigroupCache(L, ts[0], ts[-1], 8), W)
    return {k: np.array([fam.norm(k, t) for t in ts]) for k in FAMILY_KINDS}


def full_uniform_bounds(ctx):
    s = _Suite("functional_calculus")
    coarse = family_sups(ctx, "sin_1d", 128, 1 / 16, 1 / 8)
    fine = family_sups(ctx, "sin_1d", 256, 1 / 32, 1 / 8)
    for k in FAMILY_KINDS:
        s.le(f"sup_drift_{k}", abs(fine[k].max() - coarse[k].max()) / coarse[k].max(), 0.2)
    return s.rows


def full_tb(ctx):
    s = _Suite("estimates")
    maxima = []
    for n in (128, 256):
        grid, fld, L, W = ctx.setup("sin_1d", 1, n)
        m = np.zeros(2)
        for lvl in grid.levels():
            if grid.side * 2.0**-lvl > grid.side / 8 + 1e-12:
                continue
            for cube in dyadic_cubes(grid, lvl):
                for v in (1.0, -1.0):
                    for eps in (0.2, 0.1, 0.05):
                        r = tb_test_function(cube, [v], eps, fld, W, L_op=L)
                        m = np.maximum(m, [r["res_52"], r["res_53"]])
        maxima.append(m)
    maxima = np.array(maxima)
    s.le("tb_res52_drift", _rel_drift(maxima[:, 0]), 0.2)
    s.le("tb_res53_drift", _rel_drift(maxima[:, 1]), 0.2)
    return s.rows


def full_refinement_identities(ctx):
    s = _Suite("nondiv_ops")
    res_q, res_d = [], []
    for n in (16, 32, 64):
        grid, fld, L, W = ctx.setup("random_smooth", 2, n)
        x, y = grid.coordinates
        u = np.sin(2 * np.pi * x) * np.cos(2 * np.pi * y) + 0.5 * np.cos(2 * np.pi * (x + 2 * y))
        res_q.append(quadratic_form_residual(L, fld, W, u) / norm(grid, u, W.values) ** 2)
        res_d.append(divform_identity_residual(fld, W, u))
    s.le("luu_monotone", float(np.max(np.diff(res_q))), 0.0)
    s.le("divform_monotone", float(np.max(np.diff(res_d))), 0.0)
    return s.rows


FULL = (
    full_analytic_weight,
    full_sqrt_routes,
    full_refinement_identities,
    full_kato,
    full_carleson,
    full_gaffney,
    full_uniform_bounds,
    full_tb,
)


def _module_of(suite) -> str:
    return {
        "suite_grid": "grid", "suite_coefficients": "coefficients",
        "suite_adjoint_weight": "adjoint_weight", "suite_nondiv_ops": "nondiv_ops",
        "suite_functional_calculus": "functional_calculus",
        "suite_littlewood_paley": "littlewood_paley", "suite_estimates": "estimates",
        "full_analytic_weight": "adjoint_weight", "full_sqrt_routes": "functional_calculus",
        "full_refinement_identities": "nondiv_ops", "full_uniform_bounds": "functional_calculus",
    }.get(suite.__name__, "estimates")


def run_selftest(level: str = "quick", fault: str | None = None, timings: bool = False):
    """Run the suites; return ``(rows, all_passed)``.

    An exception inside a suite becomes a single failing row carrying the
    error message.  With ``timings`` every suite adds a ``suite_seconds`` row.
    """
    if level not in ("quick", "full"):
        raise ValueError("level must be 'quick' or 'full'")
    ctx = _Context(fault)
    suites = QUICK + (FULL if level == "full" else ())
    rows = []
    for suite in suites:
        start = time.perf_counter()
        try:
            out = suite(ctx)
        except Exception as exc:  # reported, not raised: selftest must finish
            msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            out = [{"module": _module_of(suite), "invariant": suite.__name__,
                    "measured": msg, "threshold": "no error", "status": "FAIL"}]
        rows.extend(out)
        if timings:
            rows.append({"module": _module_of(suite), "invariant": f"{suite.__name__}_seconds",
                         "measured": round(time.perf_counter() - start, 3),
                         "threshold": None, "status": "TIME"})
    return rows, all(r["status"] != "FAIL" for r in rows)
