"""Semigroups, heat kernels, the bounded operator families and two square-root routes."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .errors import QuadratureWarning, SquareRootError
from .grid import (
    DiscreteOperator,
    DyadicCube,
    TorusGrid,
    centered_box_sums,
    gradient,
    torus_distance,
    weighted_operator_norm,
)
from .nondiv_ops import assemble_Ltilde, assemble_tilde_div, weight_values

# sqrt(128 / pi): inverse of the integral of t^3 exp(-2 t^2) dt / t over (0, inf)
SQRT_NORMALIZER = np.sqrt(128.0 / np.pi)


def semigroup(L_op: DiscreteOperator, t: float) -> DiscreteOperator:
    """``exp(-t^2 L)`` by scaling and squaring."""
    if not t > 0:
        raise ValueError("t must be positive")
    E = sla.expm(-(t * t) * L_op.dense())
    if not np.all(np.isfinite(E)):
        raise FloatingPointError(f"semigroup overflow at t = {t:g}")
    return DiscreteOperator(E, "E", L_op.grid, L_op.stencil)


def geometric_ts(t_min: float, t_max: float, q_sub: int) -> np.ndarray:
    """Geometric grid from ``t_min`` to ``t_max`` with at least ``q_sub`` points per octave.

    When ``t_max / t_min`` is a power of two this is exactly
    ``t_min 2^(k/q_sub)``.
    """
    if not 0 < t_min <= t_max:
        raise ValueError("need 0 < t_min <= t_max")
    if q_sub < 1:
        raise ValueError("q_sub must be a positive integer")
    n_steps = int(np.ceil(q_sub * np.log2(t_max / t_min) - 1e-9))
    if n_steps == 0:
        return np.array([float(t_min)])
    return t_min * (t_max / t_min) ** (np.arange(n_steps + 1) / n_steps)


class SemigroupCache:
    """``E(t_k)`` on a geometric t-grid with ``E(2t) = E(t)^4`` reuse.

    Only the first octave is exponentiated; every later octave is obtained by
    squaring twice.  Values of ``t`` off the grid are computed on demand and
    memoized.
    """

    def __init__(self, L_op: DiscreteOperator, t_min: float, t_max: float, q_sub: int = 8):
        self.L_op = L_op
        self.grid = L_op.grid
        self.q_sub = q_sub
        self.ts = geometric_ts(t_min, t_max, q_sub)
        self._store: dict[float, np.ndarray] = {}
        for k, t in enumerate(self.ts):
            if k >= q_sub and abs(t - 2 * self.ts[k - q_sub]) <= 1e-12 * t:
                half = self._store[float(self.ts[k - q_sub])]
                sq = half @ half
                mat = sq @ sq
            else:
                mat = semigroup(L_op, t).matrix
            self._store[float(t)] = mat

    @classmethod
    def from_tgrid(cls, L_op: DiscreteOperator, tgrid) -> "SemigroupCache":
        return cls(L_op, tgrid.t_min, tgrid.t_max, tgrid.q_sub)

    def _lookup(self, t: float) -> np.ndarray:
        k = np.argmin(np.abs(self.ts - t))
        if abs(self.ts[k] - t) <= 1e-12 * t:
            return self._store[float(self.ts[k])]
        key = float(t)
        if key not in self._store:
            self._store[key] = semigroup(self.L_op, t).matrix
        return self._store[key]

    def matrix(self, t: float) -> np.ndarray:
        return self._lookup(t)

    def __call__(self, t: float) -> DiscreteOperator:
        return DiscreteOperator(self._lookup(t), "E", self.grid, self.L_op.stencil)

    def adjoint(self, W) -> "AdjointSemigroupCache":
        """Adjoint-semigroup view for weight ``W``, memoized per weight."""
        w = weight_values(W)
        key = w.tobytes()
        views = self.__dict__.setdefault("_adjoint_views", {})
        if key not in views:
            views[key] = AdjointSemigroupCache(self, w)
        return views[key]


class AdjointSemigroupCache:
    """``exp(-t^2 L~) = W^-1 exp(-t^2 L)^T W`` read off a :class:`SemigroupCache`."""

    def __init__(self, base: SemigroupCache, W):
        self.base = base
        self.grid = base.grid
        self.w = weight_values(W)
        self.ts = base.ts
        self.L_op = assemble_Ltilde(base.L_op, self.w)
        self._store: dict[float, np.ndarray] = {}

    def matrix(self, t: float) -> np.ndarray:
        key = float(t)
        if key not in self._store:
            E = self.base.matrix(t)
            self._store[key] = (E.T * self.w[None, :]) / self.w[:, None]
        return self._store[key]

    def __call__(self, t: float) -> DiscreteOperator:
        return DiscreteOperator(self.matrix(t), "Etilde", self.grid, self.base.L_op.stencil)


def semigroup_actions(L_op: DiscreteOperator, ts, v: np.ndarray) -> list[np.ndarray]:
    """``exp(-t^2 L) v`` for increasing ``ts`` by chained sparse Krylov steps.

    Used when dense exponentials are too large; ``v`` may hold several
    columns.
    """
    ts = np.asarray(ts, dtype=float)
    if np.any(np.diff(ts) < 0) or ts[0] <= 0:
        raise ValueError("ts must be positive and increasing")
    A = -L_op.sparse().tocsc()
    out = []
    cur = np.asarray(v, dtype=float)
    prev = 0.0
    for t in ts:
        step = t * t - prev
        if step > 0:
            cur = spla.expm_multiply(step * A, cur)
        prev = t * t
        out.append(cur)
    return out


def kernel(E_op: DiscreteOperator) -> np.ndarray:
    """Heat kernel ``Gamma(x, y) = E[x, y] / h^d``."""
    return E_op.dense() / E_op.grid.cell_volume


def pairwise_distance(grid: TorusGrid) -> np.ndarray:
    x = grid.coordinates.T
    return torus_distance(grid, x[:, None, :], x[None, :, :])


@dataclass
class GaussianFit:
    rows: list = dc_field(default_factory=list)
    pooled: dict = dc_field(default_factory=dict)


def _envelope_slope(s: np.ndarray, logr: np.ndarray, upper: bool, n_bins: int = 32) -> float:
    edges = np.linspace(s.min(), s.max(), n_bins + 1)
    which = np.clip(np.digitize(s, edges) - 1, 0, n_bins - 1)
    xs, ys = [], []
    for b in range(n_bins):
        sel = which == b
        if np.any(sel):
            xs.append(np.mean(s[sel]))
            ys.append(logr[sel].max() if upper else logr[sel].min())
    if len(xs) < 2:
        return 0.0
    return float(np.polyfit(xs, ys, 1)[0])


def _fit_constants(s, r, near):
    """Envelope fits for ``r <= C_up exp(-c_up s)`` and ``r >= C_low exp(-s / c_low)``."""
    logr = np.log(r)
    c_up = max(-_envelope_slope(s, logr, upper=True), 0.0)
    C_up = float(np.max(r * np.exp(c_up * s)))
    sn, rn = s[near], r[near]
    if sn.size == 0:
        return C_up, c_up, float("nan"), float("nan")
    slope = -_envelope_slope(sn, np.log(rn), upper=False)
    c_low = 1.0 / slope if slope > 0 else float("inf")
    C_low = float(np.min(rn * np.exp(sn / c_low))) if np.isfinite(c_low) else float(np.min(rn))
    return C_up, c_up, C_low, c_low


def gaussian_bound_fit(cache, W, t_set, floor: float = 1e-10) -> GaussianFit:
    """Fit Gaussian upper and lower bounds to the kernel, normalized by ``W``.

    The normalized ratio is ``Gamma(x, y) W(B_t(x)) / W(y)`` with ``W(B_t(x))``
    the W-mass of the wrapped box of radius ``t``.  Entries below ``floor``
    times the maximum are unresolved and ignored; non-positive entries are
    counted in ``n_excluded``.  The lower bound uses pairs with ``d <= 2t``.
    """
    grid = cache.grid
    w = weight_values(W)
    dist = pairwise_distance(grid)
    fit = GaussianFit()
    pooled_s, pooled_r, pooled_near = [], [], []
    for t in t_set:
        if not (8 * grid.h * (1 - 1e-12) <= t <= grid.side / 8 * (1 + 1e-12)):
            raise ValueError(f"t = {t:g} outside [8h, side/8]")
        gamma = kernel(cache(t))
        mass = grid.cell_volume * centered_box_sums(grid, w, t)
        r = gamma * mass[:, None] / w[None, :]
        s = (dist / t) ** 2
        positive = r > 0
        n_excluded = int(np.sum(~positive))
        valid = positive & (r > floor * r.max())
        near = (dist[valid] <= 2 * t)
        C_up, c_up, C_low, c_low = _fit_constants(s[valid], r[valid], near)
        fit.rows.append(
            {"t": float(t), "C_up": C_up, "c_up": c_up, "C_low": C_low,
             "c_low": c_low, "n_excluded": n_excluded}
        )
        pooled_s.append(s[valid])
        pooled_r.append(r[valid])
        pooled_near.append(near)
    C_up, c_up, C_low, c_low = _fit_constants(
        np.concatenate(pooled_s), np.concatenate(pooled_r), np.concatenate(pooled_near)
    )
    fit.pooled = {"C_up": C_up, "c_up": c_up, "C_low": C_low, "c_low": c_low,
                  "n_excluded": sum(row["n_excluded"] for row in fit.rows)}
    return fit


# The twelve families, listed in the conventional (i)-(xii) order.
FAMILY_KINDS = (
    "semigroup",
    "L_semigroup",
    "L2_semigroup",
    "gradient_semigroup",
    "semigroup_adj",
    "L_semigroup_adj",
    "L2_semigroup_adj",
    "gradient_semigroup_adj",
    "semigroup_div",
    "semigroup_adj_div",
    "L_semigroup_div",
    "L_semigroup_adj_div",
)
ROMAN = ("i", "ii", "iii", "iv", "v", "vi", "vii", "viii", "ix", "x", "xi", "xii")
KIND_BY_ROMAN = dict(zip(ROMAN, FAMILY_KINDS))
# families with off-diagonal decay (the last two carry an extra L factor)
GAFFNEY_KINDS = FAMILY_KINDS[:10]


def resolve_kind(kind: str) -> str:
    kind = KIND_BY_ROMAN.get(kind, kind)
    if kind not in FAMILY_KINDS:
        raise KeyError(f"unknown operator family {kind!r}")
    return kind


class OperatorFamilies:
    """Evaluates the twelve bounded families from one semigroup cache and ``W``."""

    def __init__(self, cache: SemigroupCache, W):
        self.cache = cache
        self.grid = cache.grid
        self.w = weight_values(W)
        self.tilde = cache.adjoint(self.w)
        self.L = cache.L_op.dense()
        self.Lt = self.tilde.L_op.dense()
        self.grad = gradient(self.grid).dense()
        self.div_t = assemble_tilde_div(self.grid, self.w).dense()

    def __call__(self, kind: str, t: float) -> DiscreteOperator:
        kind = resolve_kind(kind)
        adj = "adj" in kind
        E = self.tilde.matrix(t) if adj else self.cache.matrix(t)
        L = self.Lt if adj else self.L
        if kind in ("semigroup", "semigroup_adj"):
            mat = E
        elif kind in ("L_semigroup", "L_semigroup_adj"):
            mat = t**2 * (L @ E)
        elif kind in ("L2_semigroup", "L2_semigroup_adj"):
            mat = t**4 * (L @ (L @ E))
        elif kind in ("gradient_semigroup", "gradient_semigroup_adj"):
            mat = t * (self.grad @ E)
        elif kind in ("semigroup_div", "semigroup_adj_div"):
            mat = t * (E @ self.div_t)
        else:
            mat = t**3 * (L @ (E @ self.div_t))
        return DiscreteOperator(mat, kind, self.grid, self.cache.L_op.stencil)

    def norm(self, kind: str, t: float) -> float:
        return w_operator_norm(self(kind, t).matrix, self.w)


def family(kind: str, t: float, cache: SemigroupCache, W) -> DiscreteOperator:
    """One member of a bounded family; see :data:`FAMILY_KINDS`."""
    return OperatorFamilies(cache, W)(kind, t)


def w_operator_norm(matrix: np.ndarray, W) -> float:
    """``L^2_W`` operator norm; vector-valued sides use the tiled weight."""
    w = weight_values(W)
    n = w.size
    rows, cols = matrix.shape
    return weighted_operator_norm(matrix, np.tile(w, rows // n), np.tile(w, cols // n))


def w_adjoint(matrix: np.ndarray, W) -> np.ndarray:
    """Adjoint in ``L^2_W`` (tiled on vector-valued sides)."""
    w = weight_values(W)
    n = w.size
    rows, cols = matrix.shape
    w_out, w_in = np.tile(w, rows // n), np.tile(w, cols // n)
    return (matrix.T * w_out[None, :]) / w_in[:, None]


def log_gauss_legendre(eps: float, n_nodes: int, panel: int = 16):
    """Nodes and weights for ``int_eps^{1/eps} g(t) dt/t`` in the variable ``ln t``."""
    if not 0 < eps < 1:
        raise ValueError("eps_trunc must lie in (0, 1)")
    if n_nodes < panel or n_nodes % panel:
        raise ValueError(f"n_nodes must be a positive multiple of {panel}")
    x, wx = np.polynomial.legendre.leggauss(panel)
    edges = np.linspace(np.log(eps), -np.log(eps), n_nodes // panel + 1)
    u, wu = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        u.append(0.5 * (b - a) * x + 0.5 * (a + b))
        wu.append(0.5 * (b - a) * wx)
    return np.exp(np.concatenate(u)), np.concatenate(wu)


def scalar_normalizer(eps: float = 1e-3, n_nodes: int = 128) -> float:
    """Quadrature value of ``int t^3 exp(-2 t^2) dt / t``; exact value ``sqrt(pi/128)``."""
    t, w = log_gauss_legendre(eps, n_nodes)
    return float(np.sum(w * t**3 * np.exp(-2 * t**2)))


def _sqrt_rule(L: np.ndarray, f: np.ndarray, eps: float, n_nodes: int) -> np.ndarray:
    # t^3 L^2 e^{-2t^2 L} = t^-1 (t^2 L e^{-t^2 L})^2 keeps every factor bounded,
    # so rounding in the null directions is not amplified by t^3
    t, w = log_gauss_legendre(eps, n_nodes)
    out = np.zeros(np.shape(f))
    for tk, wk in zip(t, w):
        K = (tk * tk) * (L @ sla.expm(-(tk * tk) * L))
        out += (wk / tk) * (K @ (K @ f))
    return SQRT_NORMALIZER * out


def sqrt_quadrature(
    L_op: DiscreteOperator,
    f: np.ndarray,
    eps_trunc: float = 1e-3,
    n_nodes: int = 128,
    tol: float = 1e-8,
    check: bool = True,
) -> np.ndarray:
    """Square root applied to ``f`` through the heat-semigroup integral.

    ``sqrt(L) f = a int t^3 L^2 exp(-2 t^2 L) f dt/t`` truncated to
    ``[eps, 1/eps]``.  With ``check`` the rule is repeated with twice the
    nodes and a :class:`QuadratureWarning` is issued when the relative change
    exceeds ``tol``.
    """
    L = L_op.dense()
    f = np.asarray(f, dtype=float)
    out = _sqrt_rule(L, f, eps_trunc, n_nodes)
    if check:
        fine = _sqrt_rule(L, f, eps_trunc, 2 * n_nodes)
        scale = max(np.linalg.norm(fine), np.finfo(float).tiny)
        change = np.linalg.norm(fine - out) / scale
        if np.linalg.norm(fine) > 0 and change > tol:
            warnings.warn(
                f"quadrature not converged: doubling nodes changed result by {change:.2e}",
                QuadratureWarning,
                stacklevel=2,
            )
    return out


def sqrt_quadrature_matrix(L_op: DiscreteOperator, eps_trunc: float = 1e-3,
                           n_nodes: int = 128) -> DiscreteOperator:
    """Quadrature square root as a dense matrix (the rule applied to the identity)."""
    L = L_op.dense()
    mat = _sqrt_rule(L, np.eye(L.shape[0]), eps_trunc, n_nodes)
    return DiscreteOperator(mat, "sqrt" + L_op.tag, L_op.grid, L_op.stencil)


def _triangular_sqrt(T: np.ndarray, n_zero: int, zero_tol: float) -> np.ndarray:
    """Square root of an upper-triangular ``T`` whose first ``n_zero`` diagonal
    entries are treated as exact zeros."""
    n = T.shape[0]
    R = np.zeros_like(T)
    diag = np.sqrt(np.diag(T))
    diag[:n_zero] = 0.0
    R[np.arange(n), np.arange(n)] = diag
    for j in range(1, n):
        for i in range(j - 1, -1, -1):
            s = T[i, j] - R[i, i + 1:j] @ R[i + 1:j, j]
            denom = R[i, i] + R[j, j]
            if j < n_zero:
                if abs(s) > zero_tol:
                    raise SquareRootError("nilpotent part in the null block: no square root")
                continue
            R[i, j] = s / denom
    return R


def sqrt_oracle(L_op: DiscreteOperator) -> DiscreteOperator:
    """Principal square root by complex Schur form and the triangular recurrence.

    Eigenvalues within a small multiple of rounding of zero are placed first
    and treated as an exact null block.
    """
    L = L_op.dense()
    scale = np.linalg.norm(L, 1)
    zero_tol = max(1e-8, 1e3 * np.finfo(float).eps * scale)
    T, Z, n_zero = sla.schur(L.astype(complex), output="complex", sort=lambda z: abs(z) <= zero_tol)
    ev = np.diag(T)[n_zero:]
    if np.any(ev.real < -1e-8):
        raise SquareRootError(
            f"eigenvalue with negative real part {ev.real.min():.3g}: no principal square root"
        )
    R = _triangular_sqrt(T, n_zero, zero_tol)
    root = (Z @ R @ Z.conj().T).real
    return DiscreteOperator(root, "sqrt" + L_op.tag, L_op.grid, L_op.stencil)


def semigroup_difference_ratio(
    E_op: DiscreteOperator, f: np.ndarray, W, cube: DyadicCube, t: float
) -> float:
    """``||E f - f||^2_{L^2_W(Q)} / (t^2 ||grad f||_inf^2 W(Q))``."""
    grid = E_op.grid
    w = weight_values(W)
    idx = cube.indices()
    diff = E_op.matrix @ f - f
    lip = _lipschitz(grid, f)
    return float(np.sum(diff[idx] ** 2 * w[idx]) / (t * t * lip**2 * np.sum(w[idx])))


def gradient_semigroup_ratio(E_op: DiscreteOperator, f: np.ndarray, W, cube: DyadicCube) -> float:
    """``||grad E f||^2_{L^2_W(Q)} / (||grad f||_inf^2 W(Q))``."""
    grid = E_op.grid
    w = weight_values(W)
    idx = cube.indices()
    g = (gradient(grid).matrix @ (E_op.matrix @ f)).reshape(grid.dim, -1)
    lip = _lipschitz(grid, f)
    return float(np.sum(g[:, idx] ** 2 * w[idx]) / (lip**2 * np.sum(w[idx])))


def _lipschitz(grid: TorusGrid, f: np.ndarray) -> float:
    g = (gradient(grid).matrix @ f).reshape(grid.dim, -1)
    return float(np.max(np.sqrt(np.sum(g**2, axis=0))))
