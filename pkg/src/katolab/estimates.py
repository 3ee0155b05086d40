"""Verification harness: Kato ratios, Carleson functional, Gaffney fits, T(b) test functions."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp

from .adjoint_weight import solve_adjoint_weight
from .coefficients import CoefficientField, _block_view, make_coefficients
from .errors import FitError, GridError
from .functional_calculus import (
    AdjointSemigroupCache,
    OperatorFamilies,
    SemigroupCache,
    resolve_kind,
    semigroup_actions,
    sqrt_oracle,
    sqrt_quadrature_matrix,
    w_operator_norm,
)
from .grid import (
    DiscreteOperator,
    DyadicCube,
    TorusGrid,
    band_limited_ensemble,
    gradient,
    make_grid,
    norm,
    offset_field,
)
from .littlewood_paley import TGrid, mollifier
from .nondiv_ops import (
    assemble_L,
    assemble_Ltilde,
    assemble_tilde_div,
    coefficient_multiplier,
    weight_values,
)


def _tilde(cache, W) -> AdjointSemigroupCache:
    if isinstance(cache, AdjointSemigroupCache):
        return cache
    return cache.adjoint(W)


def _divergence_part(fld: CoefficientField, w: np.ndarray) -> sp.csr_matrix:
    """``g -> div~(A g)`` as a sparse matrix on flat vector fields."""
    return (assemble_tilde_div(fld.grid, w).matrix @ coefficient_multiplier(fld)).tocsr()


def _correction_part(fld: CoefficientField) -> sp.csr_matrix:
    """``g -> sum_ij a_ij D_i g_j``."""
    grid = fld.grid
    n = grid.size
    grad = gradient(grid).matrix
    blocks = []
    for j in range(grid.dim):
        blk = sp.csr_matrix((n, n))
        for i in range(grid.dim):
            blk = blk + sp.diags(fld.entry(i, j)) @ grad[i * n:(i + 1) * n]
        blocks.append(blk)
    return sp.hstack(blocks, format="csr")


def theta(t: float, W, fld: CoefficientField, cache) -> DiscreteOperator:
    """``g -> t exp(-t^2 L~) div~(A g)`` from vector fields to scalars."""
    w = weight_values(W)
    E = _tilde(cache, w).matrix(t)
    mat = t * (E @ _divergence_part(fld, w).toarray())
    return DiscreteOperator(mat, "theta", fld.grid)


def theta_tilde(t: float, W, fld: CoefficientField, cache) -> DiscreteOperator:
    """``g -> t exp(-t^2 L~) (div~(A g) - 1/2 sum_ij a_ij D_i g_j)``."""
    w = weight_values(W)
    E = _tilde(cache, w).matrix(t)
    inner_op = _divergence_part(fld, w) - 0.5 * _correction_part(fld)
    return DiscreteOperator(t * (E @ inner_op.toarray()), "theta~", fld.grid)


def constant_sections(grid: TorusGrid) -> np.ndarray:
    """The constant vector fields ``e_k`` as columns of shape ``(dim * size, dim)``."""
    out = np.zeros((grid.dim * grid.size, grid.dim))
    for k in range(grid.dim):
        out[k * grid.size:(k + 1) * grid.size, k] = 1.0
    return out


def theta_one(fld: CoefficientField, W, ts, cache=None, L_op=None) -> np.ndarray:
    """``theta~_t 1`` for every ``t``: array of shape ``(len(ts), dim, size)``.

    Component ``k`` is ``t exp(-t^2 L~) div~(A e_k)``.  With a dense cache the
    stored exponentials are used; otherwise chained sparse Krylov actions.
    """
    w = weight_values(W)
    ts = np.asarray(ts, dtype=float)
    B = _divergence_part(fld, w) @ constant_sections(fld.grid)
    if cache is not None:
        tilde = _tilde(cache, w)
        vals = [t * (tilde.matrix(t) @ B) for t in ts]
    else:
        L_op = L_op if L_op is not None else assemble_L(fld)
        Lt = assemble_Ltilde(L_op, w)
        order = np.argsort(ts)
        acts = semigroup_actions(Lt, ts[order], B)
        vals = [None] * len(ts)
        for pos, k in enumerate(order):
            vals[k] = ts[k] * acts[pos]
    return np.array([v.T for v in vals])


@dataclass
class CarlesonReport:
    values: list = dc_field(default_factory=list)  # (level, corner, value)
    supremum: float = 0.0
    argmax: tuple | None = None
    level_max: dict = dc_field(default_factory=dict)

    def as_rows(self) -> list[dict]:
        return [
            {"level": lvl, "corner": " ".join(map(str, c)), "value": v}
            for lvl, c, v in self.values
        ]


def carleson_functional(
    fld: CoefficientField,
    W,
    tgrid: TGrid,
    cache=None,
    min_side: float | None = None,
    L_op=None,
) -> CarlesonReport:
    """``(1/W(Q)) sum_{t_k <= l(Q)} w_k int_Q |theta~_{t_k} 1|^2 W`` over dyadic cubes.

    Cubes have side at least ``min_side`` (default ``max(4h, t_min)``).
    """
    grid = fld.grid
    w = weight_values(W)
    ts, wts = tgrid.ts, tgrid.weights
    th = theta_one(fld, w, ts, cache=cache, L_op=L_op)
    density = np.sum(th**2, axis=1) * w[None, :] * grid.cell_volume
    min_side = max(4 * grid.h, tgrid.t_min) if min_side is None else min_side
    report = CarlesonReport()
    best = -1.0
    for level in grid.levels():
        side = grid.side * 2.0**-level
        if side < min_side * (1 - 1e-12):
            continue
        use = ts <= side * (1 + 1e-12)
        acc = np.sum(wts[use, None] * density[use], axis=0) if np.any(use) else np.zeros(grid.size)
        mass = _block_view(grid, w, level).sum(axis=1) * grid.cell_volume
        vals = _block_view(grid, acc, level).sum(axis=1) / mass
        k = 2**level
        corners = np.array(np.unravel_index(np.arange(vals.size), (k,) * grid.dim)).T
        for corner, v in zip(corners, vals):
            report.values.append((level, tuple(int(c) for c in corner), float(v)))
        i = int(np.argmax(vals))
        report.level_max[level] = float(vals[i])
        if vals[i] > best:
            best = float(vals[i])
            report.argmax = (level, tuple(int(c) for c in corners[i]))
    report.supremum = max(best, 0.0)
    return report


class KatoOperators:
    """Square roots of ``L`` and ``L~`` for one field and weight, built once."""

    def __init__(self, fld: CoefficientField, W, stencil: str = "composed",
                 eps_trunc: float = 1e-3, n_nodes: int = 128):
        self.fld = fld
        self.grid = fld.grid
        self.w = weight_values(W)
        self.L = assemble_L(fld, stencil)
        self.Lt = assemble_Ltilde(self.L, self.w)
        self.grad = gradient(self.grid).matrix
        self.eps_trunc = eps_trunc
        self.n_nodes = n_nodes
        self._root = None
        self._quad = {}

    def quadrature_root(self, which: str) -> np.ndarray:
        if which not in self._quad:
            op = self.L if which == "L" else self.Lt
            self._quad[which] = sqrt_quadrature_matrix(op, self.eps_trunc, self.n_nodes).matrix
        return self._quad[which]

    def root(self, which: str) -> np.ndarray:
        if self._root is None:
            self._root = sqrt_oracle(self.L).matrix
        if which == "L":
            return self._root
        # L~ = W^-1 L^T W, so its principal root is the same similarity of sqrt(L)^T
        return (self._root.T * self.w[None, :]) / self.w[:, None]

    def apply_root(self, f: np.ndarray, which: str, route: str) -> np.ndarray:
        if which not in ("L", "Ltilde"):
            raise ValueError(f"which must be 'L' or 'Ltilde', got {which!r}")
        if route == "oracle":
            return self.root(which) @ f
        if route == "quadrature":
            return self.quadrature_root(which) @ f
        raise ValueError(f"route must be 'oracle' or 'quadrature', got {route!r}")

    def ratio(self, f: np.ndarray, which: str = "L", route: str = "oracle") -> float:
        f = np.asarray(f, dtype=float)
        den = norm(self.grid, self.grad @ f, self.w)
        if den == 0:
            raise ValueError("grad f vanishes: ratio undefined")
        return norm(self.grid, self.apply_root(f, which, route), self.w) / den


def kato_ratio(fld: CoefficientField, W, f, which: str = "L", route: str = "oracle",
               ops: KatoOperators | None = None) -> float:
    """``||sqrt(L) f||_W / ||grad f||_W`` (or with ``L~``)."""
    ops = ops if ops is not None else KatoOperators(fld, W)
    return ops.ratio(f, which, route)


@dataclass
class KatoReport:
    field_id: str
    ensemble_size: int
    table: list = dc_field(default_factory=list)
    ratios: dict = dc_field(default_factory=dict)  # (n_points, which) -> array
    weights: dict = dc_field(default_factory=dict)  # n_points -> summary
    drift: dict = dc_field(default_factory=dict)  # which -> relative median drift


def kato_sweep(
    preset: str,
    params: dict | None,
    dim: int,
    refinements,
    ensemble_size: int,
    band: int = 8,
    seed: int = 0,
    route: str = "oracle",
    which=("L", "Ltilde"),
    weight_tol: float = 1e-8,
    stencil: str = "composed",
) -> KatoReport:
    """Kato ratios over a seeded ensemble at each grid size in ``refinements``.

    The ensemble describes the same continuum functions on every grid, so
    the median drift across refinements measures discretization effects.
    """
    if ensemble_size < 1:
        raise ValueError("ensemble must contain at least one function")
    report = KatoReport(f"{preset}:{sorted((params or {}).items())}", ensemble_size)
    for n in refinements:
        grid = make_grid(dim, n)
        fld = make_coefficients(preset, params, grid)
        W = solve_adjoint_weight(assemble_L(fld, stencil), tol=weight_tol)
        report.weights[n] = W.summary()
        ops = KatoOperators(fld, W, stencil)
        ens = band_limited_ensemble(grid, ensemble_size, band, seed)
        for wh in which:
            vals = []
            for idx, f in enumerate(ens):
                try:
                    vals.append(ops.ratio(f, wh, route))
                except Exception as exc:
                    raise RuntimeError(f"kato ratio failed for function {idx} at N = {n}: {exc}") from exc
            vals = np.array(vals)
            report.ratios[(n, wh)] = vals
            report.table.append({
                "n_points": n, "which": wh, "min": float(vals.min()),
                "max": float(vals.max()), "median": float(np.median(vals)),
            })
    for wh in which:
        meds = [row["median"] for row in report.table if row["which"] == wh]
        report.drift[wh] = float((max(meds) - min(meds)) / min(meds))
    return report


@dataclass
class GaffneyFit:
    kind: str
    decay_rate: float | None
    intercept: float | None
    r2: float | None
    points: list
    status: str


def _slab_masks(grid: TorusGrid, d: float):
    """``E`` = the hyperplane ``x_0 = 0``; ``F`` = points at wrapped distance ``>= d`` from it."""
    x0 = offset_field(grid, np.zeros(grid.dim))[0]
    E = np.abs(x0) < 0.5 * grid.h
    F = np.abs(x0) >= d - 1e-12
    return E, F


def gaffney_fit(
    families: OperatorFamilies,
    kind: str,
    t_set,
    separations,
    floor: float = 1e-12,
    min_ratio: float = 5.0,
) -> GaffneyFit:
    """Fit ``log ||1_F S_t 1_E||_W`` against ``(d/t)^2``; the slope is ``-c_fit``.

    Only pairs with ``d >= min_ratio * t`` enter.  Norms below ``floor``
    times ``||S_t||_W`` are at rounding level and dropped; if fewer than
    three points survive the status is ``"decay >= floor"``.
    """
    kind = resolve_kind(kind)
    grid = families.grid
    w = families.w
    pairs = [(d, t) for t in t_set for d in separations if d >= min_ratio * t * (1 - 1e-12)]
    if len(pairs) < 3:
        raise FitError(f"need at least 3 pairs with d >= {min_ratio} t, got {len(pairs)}")
    points = []
    for t in sorted(set(t for _, t in pairs)):
        S = families(kind, t).matrix
        reps_out, reps_in = S.shape[0] // grid.size, S.shape[1] // grid.size
        full = w_operator_norm(S, w)
        for d in sorted(d for d, tt in pairs if tt == t):
            E, F = _slab_masks(grid, d)
            rows = np.tile(F, reps_out)
            cols = np.tile(E, reps_in)
            block = S[np.ix_(rows, cols)]
            val = w_operator_norm_block(block, np.tile(w, reps_out)[rows], np.tile(w, reps_in)[cols])
            if val > floor * full:
                points.append(((d / t) ** 2, val, d, t))
    if len(points) < 3:
        return GaffneyFit(kind, None, None, None, points, "decay >= floor")
    x = np.array([p[0] for p in points])
    y = np.log([p[1] for p in points])
    slope, intercept = np.polyfit(x, y, 1)
    pred = intercept + slope * x
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum((y - pred) ** 2) / ss_tot if ss_tot > 0 else 1.0
    return GaffneyFit(kind, float(-slope), float(intercept), float(r2), points, "ok")


def w_operator_norm_block(block: np.ndarray, w_out: np.ndarray, w_in: np.ndarray) -> float:
    scaled = np.sqrt(w_out)[:, None] * block / np.sqrt(w_in)[None, :]
    return float(np.linalg.norm(scaled, 2))


def _cutoff(s: np.ndarray) -> np.ndarray:
    """``1`` on ``s <= 1``, ``0`` on ``s >= 2``, quintic smoothstep in between."""
    u = np.clip(s - 1.0, 0.0, 1.0)
    return 1.0 - u**3 * (10 - 15 * u + 6 * u * u)


def tb_test_function(
    cube: DyadicCube,
    v,
    eps: float,
    fld: CoefficientField,
    W,
    cache=None,
    L_op=None,
) -> dict:
    """``f = exp(-(eps l)^2 L~)(Phi_Q chi_Q . v)`` and its two normalized residuals.

    ``Phi_Q(x) = x - x_Q`` (wrapped); ``chi_Q`` is a product of smooth cutoffs,
    one on ``2Q`` and supported in ``4Q``.  Residuals are measured on ``5Q``.
    """
    grid = fld.grid
    ell = cube.sidelength
    if ell > grid.side / 8 * (1 + 1e-12):
        raise GridError(f"cube side {ell:g} too large: 4Q must fit the torus")
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.shape != (grid.dim,) or abs(np.linalg.norm(v) - 1) > 1e-12:
        raise ValueError("v must be a unit vector of length dim")
    w = weight_values(W)
    phi = offset_field(grid, cube.center)
    chi = np.prod(_cutoff(np.abs(phi) / ell), axis=0)
    g = (v @ phi) * chi
    t = eps * ell
    if cache is not None:
        f = _tilde(cache, w).matrix(t) @ g
    else:
        L_op = L_op if L_op is not None else assemble_L(fld)
        f = semigroup_actions(assemble_Ltilde(L_op, w), [t], g)[0]
    idx5 = cube.dilated(5)
    mass_q = grid.cell_volume * np.sum(w[cube.indices()])
    grad = gradient(grid).matrix

    def local_sq(u):
        u = u.reshape(-1, grid.size)
        return grid.cell_volume * float(np.sum(u[:, idx5] ** 2 * w[idx5]))

    diff = f - g
    res_52 = local_sq(diff) / (eps**2 * ell**2 * mass_q)
    res_53 = (local_sq(grad @ f) + local_sq(grad @ diff)) / mass_q
    return {"f": f, "g": g, "res_52": res_52, "res_53": res_53}


def u_transform(theta_mat: np.ndarray, P_dense: np.ndarray, g: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """``theta P^2 g - (theta 1) . P^2 g`` with ``P^2`` acting per component."""
    n = grid.size
    gv = g.reshape(grid.dim, n)
    p2g = (P_dense @ (P_dense @ gv.T)).T
    first = theta_mat @ p2g.ravel()
    second = np.zeros(n)
    for k in range(grid.dim):
        theta_k = theta_mat[:, k * n:(k + 1) * n].sum(axis=1)
        second += theta_k * p2g[k]
    return first - second


def decomposition_diagnostics(
    fld: CoefficientField, W, f: np.ndarray, tgrid: TGrid, cache: SemigroupCache
) -> dict:
    """Square functions of ``R_t f``, ``T_t f``, their ``L~`` analogues and ``U_t grad f``.

    ``V_t = t^2 L exp(-t^2 L)``, ``R_t = t^-1 V_t (I - P_t)``,
    ``T_t = t^-1 V_t P_t``; each value is divided by ``||grad f||^2_W``.
    """
    grid = fld.grid
    w = weight_values(W)
    tilde = _tilde(cache, w)
    L = cache.L_op.dense()
    Lt = tilde.L_op.dense()
    gvec = gradient(grid).matrix @ f
    gnorm2 = norm(grid, gvec, w) ** 2
    if gnorm2 == 0:
        raise ValueError("grad f vanishes")
    totals = dict.fromkeys(("R", "T", "R~", "T~", "U"), 0.0)
    for t, wk in zip(tgrid.ts, tgrid.weights):
        P = mollifier(t, grid)
        Pf = P.apply(f)
        for tag, Lmat, E in (("", L, cache.matrix(t)), ("~", Lt, tilde.matrix(t))):
            V = t * t * (Lmat @ E)
            totals["R" + tag] += wk * norm(grid, V @ (f - Pf) / t, w) ** 2
            totals["T" + tag] += wk * norm(grid, V @ Pf / t, w) ** 2
        th = theta(t, w, fld, tilde).matrix
        totals["U"] += wk * norm(grid, u_transform(th, P.dense(), gvec, grid), w) ** 2
    return {k: v / gnorm2 for k, v in totals.items()}
