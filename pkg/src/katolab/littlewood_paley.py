"""Convolution approximate identities, mean-zero families, dyadic averages and t-integrators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from .errors import GridError
from .functional_calculus import geometric_ts
from .grid import (
    DiscreteOperator,
    TorusGrid,
    block_average_matrix,
    norm,
    weighted_operator_norm,
)
from .nondiv_ops import weight_values


@dataclass(frozen=True, eq=False)
class ConvolutionOperator:
    """Circulant operator ``f -> sum_y c(x - y) f(y)`` stored by its DFT symbol."""

    grid: TorusGrid
    symbol: np.ndarray  # grid-shaped, complex
    t: float
    tag: str

    @classmethod
    def from_stencil(cls, grid: TorusGrid, stencil: np.ndarray, t: float, tag: str):
        return cls(grid, np.fft.fftn(stencil.reshape(grid.shape)), t, tag)

    def apply(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f)
        batch = f.shape[:-1]
        arr = f.reshape(batch + self.grid.shape)
        axes = tuple(range(-self.grid.dim, 0))
        out = np.fft.ifftn(self.symbol * np.fft.fftn(arr, axes=axes), axes=axes)
        if np.isrealobj(f):
            out = out.real
        return out.reshape(f.shape)

    __call__ = apply

    def __matmul__(self, other):
        if isinstance(other, ConvolutionOperator):
            return ConvolutionOperator(
                self.grid, self.symbol * other.symbol, self.t, f"{self.tag}*{other.tag}"
            )
        return self.apply(other)

    def __add__(self, other: "ConvolutionOperator") -> "ConvolutionOperator":
        return ConvolutionOperator(self.grid, self.symbol + other.symbol, self.t, self.tag)

    def __sub__(self, other: "ConvolutionOperator") -> "ConvolutionOperator":
        return ConvolutionOperator(self.grid, self.symbol - other.symbol, self.t, self.tag)

    def scaled(self, c: float) -> "ConvolutionOperator":
        return ConvolutionOperator(self.grid, c * self.symbol, self.t, self.tag)

    def stencil(self) -> np.ndarray:
        return np.fft.ifftn(self.symbol).real.ravel()

    def dense(self) -> np.ndarray:
        """Circulant matrix; column ``y`` is the response to a unit impulse at ``y``."""
        return self.apply(np.eye(self.grid.size)).T

    def as_operator(self) -> DiscreteOperator:
        return DiscreteOperator(self.dense(), self.tag, self.grid)


def _offsets(grid: TorusGrid) -> np.ndarray:
    """Signed wrapped offsets of every grid point from the origin, shape ``(dim, size)``."""
    k = np.arange(grid.n_points)
    k = np.where(k >= grid.n_points // 2, k - grid.n_points, k) * grid.h
    mesh = np.meshgrid(*[k] * grid.dim, indexing="ij")
    return np.array([m.ravel() for m in mesh])


def _check_scale(grid: TorusGrid, t: float) -> None:
    lo, hi = 4 * grid.h, grid.side / 4
    if not (lo * (1 - 1e-12) <= t <= hi * (1 + 1e-12)):
        raise GridError(f"t = {t:g} outside [4h, side/4] = [{lo:g}, {hi:g}]")


def _profile(grid: TorusGrid, t: float):
    """Scaled offsets ``x / t``, radius and the profile ``(1 - r^2)^4_+``."""
    _check_scale(grid, t)
    X = _offsets(grid) / t
    r2 = np.sum(X**2, axis=0)
    base = np.where(r2 < 1, 1 - r2, 0.0)
    return X, r2, base


def mollifier(t: float, grid: TorusGrid) -> ConvolutionOperator:
    """``P_t``: convolution with ``(1 - |x|^2)^4`` at radius ``t``, unit discrete mass."""
    _, _, base = _profile(grid, t)
    phi = base**4
    return ConvolutionOperator.from_stencil(grid, phi / phi.sum(), t, "P")


def difference_symbol(grid: TorusGrid, axis: int) -> np.ndarray:
    """DFT symbol of the centered difference ``D_axis``: ``i sin(theta) / h``."""
    theta = 2 * np.pi * np.fft.fftfreq(grid.n_points)
    shape = [1] * grid.dim
    shape[axis] = grid.n_points
    return np.broadcast_to(1j * np.sin(theta).reshape(shape) / grid.h, grid.shape)


def qt(t: float, axis: int, grid: TorusGrid) -> ConvolutionOperator:
    """``Q_t = t D_axis P_t``."""
    if not 0 <= axis < grid.dim:
        raise GridError(f"axis {axis} out of range for dim {grid.dim}")
    P = mollifier(t, grid)
    return ConvolutionOperator(grid, t * difference_symbol(grid, axis) * P.symbol, t, "Q")


def pt_derivative_factorization(t: float, grid: TorusGrid):
    """Kernels of ``t d/dt P_t^2 = c sum_k Q1_k Q2_k`` with ``c = -2``.

    ``Q1_k`` convolves with ``(x_k phi)_t`` and ``Q2_k`` with ``(d_k phi)_t``;
    both use the discrete normalizer of ``P_t``.  Returns two lists indexed by
    axis.
    """
    X, _, base = _profile(grid, t)
    mass = np.sum(base**4)
    q1 = [ConvolutionOperator.from_stencil(grid, X[k] * base**4 / mass, t, "Q1") for k in range(grid.dim)]
    q2 = [
        ConvolutionOperator.from_stencil(grid, -8 * X[k] * base**3 / mass, t, "Q2")
        for k in range(grid.dim)
    ]
    return q1, q2


FACTORIZATION_CONSTANT = -2.0


def factorization_product(t: float, grid: TorusGrid) -> ConvolutionOperator:
    """``sum_k Q1_k Q2_k`` at scale ``t``."""
    q1, q2 = pt_derivative_factorization(t, grid)
    out = q1[0] @ q2[0]
    for a, b in zip(q1[1:], q2[1:]):
        out = out + (a @ b)
    return out


def pt_squared_log_derivative(t: float, grid: TorusGrid, delta: float = 1e-3) -> ConvolutionOperator:
    """Central difference of ``P_t^2`` in ``log t``."""
    hi = mollifier(t * (1 + delta), grid)
    lo = mollifier(t * (1 - delta), grid)
    return ((hi @ hi) - (lo @ lo)).scaled(1.0 / (2 * delta))


def recover_factorization_constant(t: float, grid: TorusGrid, delta: float = 1e-3) -> float:
    """Least-squares ``c`` in ``t d/dt P_t^2 ~ c sum_k Q1_k Q2_k``."""
    lhs = pt_squared_log_derivative(t, grid, delta).symbol
    rhs = factorization_product(t, grid).symbol
    return float(np.real(np.vdot(rhs, lhs)) / np.real(np.vdot(rhs, rhs)))


def dyadic_level(t: float, grid: TorusGrid) -> int:
    """Level ``j`` whose side ``l`` satisfies ``t/2 < l <= t``."""
    if not (2 * grid.h * (1 - 1e-12) <= t <= grid.side * (1 + 1e-12)):
        raise GridError(f"t = {t:g} outside [2h, side]")
    j = int(np.ceil(np.log2(grid.side / t) - 1e-12))
    return min(max(j, 0), int(np.log2(grid.n_points)))


def dyadic_average(t: float, grid: TorusGrid) -> DiscreteOperator:
    """``A_t``: unweighted cell averages on the dyadic level with ``t/2 < l <= t``."""
    return DiscreteOperator(block_average_matrix(grid, dyadic_level(t, grid)), "A", grid)


@dataclass(frozen=True)
class TGrid:
    """Geometric grid for ``int dt/t`` with log-trapezoid weights."""

    t_min: float
    t_max: float
    q_sub: int = 8

    def __post_init__(self):
        if not 0 < self.t_min < self.t_max:
            raise ValueError("need 0 < t_min < t_max")
        if self.q_sub < 1:
            raise ValueError("q_sub must be a positive integer")

    @classmethod
    def for_grid(cls, grid: TorusGrid, t_min_factor: float = 8.0,
                 t_max_factor: float = 0.125, q_sub: int = 8) -> "TGrid":
        """``t_min = t_min_factor h`` and ``t_max = t_max_factor side``."""
        tg = cls(t_min_factor * grid.h, t_max_factor * grid.side, q_sub)
        tg.validate(grid)
        return tg

    def validate(self, grid: TorusGrid) -> None:
        if self.t_min < 4 * grid.h * (1 - 1e-12):
            raise GridError(f"t_min = {self.t_min:g} below 4h")
        if self.t_max > grid.side / 4 * (1 + 1e-12):
            raise GridError(f"t_max = {self.t_max:g} above side/4")

    @property
    def ts(self) -> np.ndarray:
        return geometric_ts(self.t_min, self.t_max, self.q_sub)

    @property
    def weights(self) -> np.ndarray:
        u = np.log(self.ts)
        du = np.diff(u)
        w = np.zeros_like(u)
        w[:-1] += du / 2
        w[1:] += du / 2
        return w

    def refined(self) -> "TGrid":
        return TGrid(self.t_min, self.t_max, 2 * self.q_sub)


def _apply(op, f: np.ndarray) -> np.ndarray:
    if isinstance(op, ConvolutionOperator):
        return op.apply(f)
    if isinstance(op, DiscreteOperator):
        return op.matrix @ f
    if callable(op):
        return op(f)
    return np.asarray(op) @ f


def square_function(family_evaluator, f: np.ndarray, tgrid: TGrid, W=None,
                    grid: TorusGrid | None = None) -> float:
    """``sum_k w_k ||F(t_k) f||^2_W`` for an evaluator ``t -> operator``.

    The cell volume comes from ``grid`` or, failing that, from the grid the
    evaluated operator carries.
    """
    total = 0.0
    w = None if W is None else weight_values(W)
    f = np.asarray(f)
    for t, wk in zip(tgrid.ts, tgrid.weights):
        try:
            op = family_evaluator(t)
            g = _apply(op, f)
        except Exception as exc:
            raise RuntimeError(f"family evaluation failed at t = {t:g}: {exc}") from exc
        cell = (grid or getattr(op, "grid", None))
        vol = 1.0 if cell is None else cell.cell_volume
        weight = 1.0 if w is None else np.tile(w, g.shape[-1] // w.size)
        total += wk * vol * float(np.sum(np.abs(g) ** 2 * weight))
    return total


# Radial mean-zero profile for the reproducing formula: psi = -Laplacian(phi).
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(512)
_R = 0.5 * (_GL_NODES + 1)
_WR = 0.5 * _GL_WEIGHTS


def _psi_radial(r: np.ndarray, dim: int) -> np.ndarray:
    r2 = r * r
    base = np.where(r2 < 1, 1 - r2, 0.0)
    return -(base**2) * (-8 * dim * base + 48 * r2)


def _phi_mass(dim: int) -> float:
    prof = (1 - _R**2) ** 4
    if dim == 1:
        return float(2 * np.sum(_WR * prof))
    return float(2 * np.pi * np.sum(_WR * prof * _R))


def psi_hat(s, dim: int) -> np.ndarray:
    """Fourier transform of ``psi / int(phi)`` at radial frequency ``s``."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    prof = _psi_radial(_R, dim)
    arg = 2 * np.pi * np.outer(s, _R)
    if dim == 1:
        vals = 2 * (np.cos(arg) @ (_WR * prof))
    else:
        vals = 2 * np.pi * (special.j0(arg) @ (_WR * prof * _R))
    return vals / _phi_mass(dim)


def calderon_normalizer(dim: int) -> float:
    """``int_0^inf psi_hat(s)^2 ds / s``."""
    val, _ = integrate.quad(lambda s: psi_hat(s, dim)[0] ** 2 / s, 0.0, 60.0, limit=400)
    return float(val)


def calderon_profile(t: float, grid: TorusGrid) -> ConvolutionOperator:
    """Mean-zero radial ``Q_t`` with kernel ``psi_t``, same discrete normalizer as ``P_t``."""
    X, r2, base = _profile(grid, t)
    phi = base**4
    psi = _psi_radial(np.sqrt(r2), grid.dim)
    psi = psi - phi * (psi.sum() / phi.sum())
    return ConvolutionOperator.from_stencil(grid, psi / phi.sum(), t, "Qc")


def _radial_frequencies(grid: TorusGrid) -> np.ndarray:
    k = np.fft.fftfreq(grid.n_points) * grid.n_points / grid.side
    mesh = np.meshgrid(*[k] * grid.dim, indexing="ij")
    return np.sqrt(sum(m**2 for m in mesh))


def calderon_reproduce(f: np.ndarray, tgrid: TGrid, grid: TorusGrid, W=None,
                       coverage_tol: float = 0.95) -> dict:
    """Relative error of ``c^-1 sum_k w_k Q_{t_k}^2 f`` against ``f``.

    ``c`` is the continuum normalizer.  ``coverage`` is the energy-weighted
    share of ``c`` that the t-range captures at the frequencies present in
    ``f``; ``out_of_band`` is set when it falls below ``coverage_tol``.
    """
    c_hat = calderon_normalizer(grid.dim)
    if c_hat < 1e-6:
        raise ValueError("degenerate reproducing profile on this band")
    f = np.asarray(f, dtype=float)
    out = np.zeros_like(f)
    for t, wk in zip(tgrid.ts, tgrid.weights):
        Q = calderon_profile(t, grid)
        out += wk * Q.apply(Q.apply(f))
    out /= c_hat
    w = None if W is None else weight_values(W)
    size = norm(grid, f, w)
    err = norm(grid, out - f, w) / size if size > 0 else float("inf")
    fhat2 = np.abs(np.fft.fftn(f.reshape(grid.shape))) ** 2
    xi = _radial_frequencies(grid)
    present = fhat2 > 1e-24 * fhat2.max() if fhat2.max() > 0 else fhat2 > 0
    cover = np.zeros(grid.shape)
    if np.any(present):
        cover_vals = np.zeros(np.count_nonzero(present))
        for t, wk in zip(tgrid.ts, tgrid.weights):
            cover_vals += wk * psi_hat(t * xi[present], grid.dim) ** 2
        cover[present] = cover_vals / c_hat
    total = fhat2.sum()
    coverage = float(np.sum(fhat2 * cover) / total) if total > 0 else 0.0
    return {
        "error": float(err),
        "normalizer": c_hat,
        "coverage": coverage,
        "out_of_band": bool(coverage < coverage_tol),
    }


def power_law_fit(x, y) -> dict:
    """Least-squares fit ``log y = log C + beta log x``; reports ``R^2``."""
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    beta, logc = np.polyfit(lx, ly, 1)
    pred = logc + beta * lx
    ss_res = np.sum((ly - pred) ** 2)
    ss_tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {"exponent": float(beta), "prefactor": float(np.exp(logc)), "r2": float(r2)}


def almost_orthogonality_fit(grid: TorusGrid, ts, axis: int = 0, W=None) -> dict:
    """Fit ``||Q_t Q_s|| ~ C min(t/s, s/t)^alpha`` over all pairs ``t != s``.

    Unweighted norms come straight from the symbol; with ``W`` the dense
    weighted operator norm is used.
    """
    ops = [qt(t, axis, grid) for t in ts]
    w = None if W is None else weight_values(W)
    ratios, norms = [], []
    for i, (t, Qt) in enumerate(zip(ts, ops)):
        for s, Qs in zip(ts[i + 1:], ops[i + 1:]):
            prod = Qt @ Qs
            if w is None:
                val = float(np.max(np.abs(prod.symbol)))
            else:
                val = weighted_operator_norm(prod.dense(), w, w)
            ratios.append(min(t / s, s / t))
            norms.append(val)
    fit = power_law_fit(ratios, norms)
    return {"alpha": fit["exponent"], "C": fit["prefactor"], "r2": fit["r2"],
            "pairs": list(zip(ratios, norms))}


def averaging_decay_fit(grid: TorusGrid, pairs, W=None, axis: int = 0) -> dict:
    """Fit ``||A_t Q_s||_W ~ C (s/t)^beta`` over the given ``(s, t)`` pairs with ``s <= t``."""
    w = np.ones(grid.size) if W is None else weight_values(W)
    xs, ys = [], []
    for s, t in pairs:
        if s > t:
            raise ValueError("pairs must satisfy s <= t")
        A = dyadic_average(t, grid).dense()
        Q = qt(s, axis, grid).dense()
        xs.append(s / t)
        ys.append(weighted_operator_norm(A @ Q, w, w))
    fit = power_law_fit(xs, ys)
    return {"beta": fit["exponent"], "C": fit["prefactor"], "r2": fit["r2"],
            "values": list(zip(xs, ys))}
