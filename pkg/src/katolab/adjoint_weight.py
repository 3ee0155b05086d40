"""The global non-negative adjoint solution W and its weight-class constants."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import WeightError
from .grid import (
    DiscreteOperator,
    DyadicCube,
    TorusGrid,
    box_sums,
    dyadic_cubes_any,
    gradient,
)
from .nondiv_ops import weight_values

# Share of high-band energy below which a null vector counts as smooth.
BAND_TOL = 1e-2


@dataclass(frozen=True, eq=False)
class AdjointWeight:
    grid: TorusGrid
    values: np.ndarray
    residual: float

    @property
    def rh_exponent(self) -> float:
        d = self.grid.dim
        return np.inf if d == 1 else d / (d - 1)

    @cached_property
    def a2_constant(self) -> float:
        return muckenhoupt_constant(self.grid, self.values, 2.0)

    @cached_property
    def rh_constant(self) -> float:
        return reverse_holder_constant(self.grid, self.values, self.rh_exponent)

    @cached_property
    def doubling_constant(self) -> float:
        return doubling_constant(self.grid, self.values)

    def mass(self, indices: np.ndarray) -> float:
        return float(self.grid.cell_volume * np.sum(self.values[indices]))

    def summary(self) -> dict:
        q = self.rh_exponent
        return {
            "a2": self.a2_constant,
            "rh_q": self.rh_constant,
            "q": "inf" if np.isinf(q) else q,
            "doubling": self.doubling_constant,
            "residual": self.residual,
        }


def _null_basis(LT: sp.csr_matrix, block: int, seed: int) -> np.ndarray:
    """Orthonormal basis of the numerical null space of ``LT``.

    Block inverse iteration with a tiny positive shift, followed by a
    Rayleigh-Ritz step on the singular values of ``LT X``.
    """
    n = LT.shape[0]
    scale = spla.norm(LT, 1)
    shifted = (LT + 1e-12 * scale * sp.identity(n)).tocsc()
    lu = spla.splu(shifted)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, min(block, n)))
    for _ in range(3):
        X, _ = np.linalg.qr(lu.solve(X))
    _, s, vt = np.linalg.svd(LT @ X, full_matrices=False)
    keep = s <= 1e-7 * scale
    return X @ vt[keep].T


def _high_band_gram(grid: TorusGrid, V: np.ndarray) -> np.ndarray:
    """Gram matrix of the components of ``V`` with some ``|k_i| > N/4``."""
    m = V.shape[1]
    axes = tuple(range(1, grid.dim + 1))
    F = np.fft.fftn(V.T.reshape((m,) + grid.shape), axes=axes)
    k = np.abs(np.fft.fftfreq(grid.n_points) * grid.n_points)
    mask = np.zeros(grid.shape, dtype=bool)
    for axis in range(grid.dim):
        shape = [1] * grid.dim
        shape[axis] = grid.n_points
        mask |= (k > grid.n_points // 4).reshape(shape)
    H = (F * mask).reshape(m, -1)
    return np.real(H.conj() @ H.T) / grid.size


def solve_adjoint_weight(
    L_op: DiscreteOperator,
    tol: float = 1e-8,
    project_parity: bool = True,
    seed: int = 0,
) -> AdjointWeight:
    """Positive solution of ``L^T w = 0`` normalized to mean one.

    The composed stencil leaves ``2^dim`` null vectors; all but one oscillate
    at the alternating-parity frequencies.  The smooth one is selected as the
    null-space element with the least energy above ``|k| = N/4``.
    """
    if L_op.tag != "L":
        raise WeightError(f"expected an operator tagged 'L', got {L_op.tag!r}")
    grid = L_op.grid
    LT = L_op.sparse().T.tocsr()
    V = _null_basis(LT, 2**grid.dim + 2, seed)
    if V.shape[1] == 0:
        raise WeightError("degenerate weight: L^T has no numerical null space")
    if project_parity:
        evals, evecs = np.linalg.eigh(_high_band_gram(grid, V))
        n_smooth = int(np.sum(evals < BAND_TOL))
        if n_smooth != 1:
            raise WeightError(
                f"degenerate weight: {n_smooth} smooth null vectors after parity projection"
            )
        w = V @ evecs[:, 0]
    else:
        if V.shape[1] != 1:
            raise WeightError(
                f"degenerate weight: null space has dimension {V.shape[1]} (expected 1)"
            )
        w = V[:, 0]
    if w.sum() < 0:
        w = -w
    w = w / w.mean()
    if np.min(w) <= 0:
        raise WeightError(
            f"non-positive weight: min W = {np.min(w):.3g} (try refining or another stencil)"
        )
    residual = float(np.linalg.norm(LT @ w) / np.linalg.norm(w))
    if residual > tol:
        raise WeightError(f"weight residual {residual:.3g} exceeds tolerance {tol:.3g}")
    return AdjointWeight(grid, w, residual)


def _box_sizes(grid: TorusGrid, min_cube_points: int, dyadic_only: bool):
    sizes = range(1, grid.n_points + 1)
    if dyadic_only:
        sizes = [2**j for j in range(int(np.log2(grid.n_points)) + 1)]
    return [m for m in sizes if m**grid.dim >= min_cube_points]


def muckenhoupt_constant(
    grid: TorusGrid,
    W,
    p: float = 2.0,
    min_cube_points: int = 4,
    dyadic_only: bool = False,
) -> float:
    """``sup (avg w)(avg w^(1-p'))^(p-1)`` over wrapped boxes at every translate.

    Boxes of every side length are used unless ``dyadic_only`` is set.
    """
    if not p > 1:
        raise ValueError("p must exceed 1")
    w = weight_values(W)
    dual = w ** (-1.0 / (p - 1.0))
    best = 0.0
    for m in _box_sizes(grid, min_cube_points, dyadic_only):
        vol = m**grid.dim
        prod = (box_sums(grid, w, m) / vol) * (box_sums(grid, dual, m) / vol) ** (p - 1.0)
        best = max(best, float(prod.max()))
    return best


def box_max(grid: TorusGrid, values: np.ndarray, width: int) -> np.ndarray:
    """Maximum over every wrapped box of ``width`` points, indexed by lowest corner."""
    arr = np.asarray(values, dtype=float).reshape(grid.shape)
    for axis in range(grid.dim):
        span = 1
        table = arr
        while 2 * span <= width:
            table = np.maximum(table, np.roll(table, -span, axis=axis))
            span *= 2
        arr = np.maximum(table, np.roll(table, -(width - span), axis=axis))
    return arr.ravel()


def reverse_holder_constant(
    grid: TorusGrid,
    W,
    q: float,
    min_cube_points: int = 4,
    dyadic_only: bool = False,
) -> float:
    """Smallest ``C`` with ``(avg w^q)^(1/q) <= C avg w`` over the box family.

    ``q = inf`` compares the box maximum with the box average.
    """
    if not q > 1:
        raise ValueError("q must exceed 1")
    w = weight_values(W)
    best = 0.0
    for m in _box_sizes(grid, min_cube_points, dyadic_only):
        vol = m**grid.dim
        mean = box_sums(grid, w, m) / vol
        if np.isinf(q):
            top = box_max(grid, w, m)
        else:
            top = (box_sums(grid, w**q, m) / vol) ** (1.0 / q)
        best = max(best, float(np.max(top / mean)))
    return best


def doubling_constant(grid: TorusGrid, W) -> float:
    """``max W(2Q) / W(Q)`` over dyadic cubes with ``2Q`` inside the torus."""
    w = weight_values(W)
    best = 0.0
    n = grid.n_points
    for level in range(1, grid.max_level + 1):
        m = n >> level
        inner_sums = box_sums(grid, w, m).reshape(grid.shape)
        outer_sums = box_sums(grid, w, 2 * m).reshape(grid.shape)
        corners = np.arange(0, n, m)
        starts = (corners - m // 2) % n
        q_mass = inner_sums[np.ix_(*[corners] * grid.dim)]
        d_mass = outer_sums[np.ix_(*[starts] * grid.dim)]
        best = max(best, float(np.max(d_mass / q_mass)))
    return best


def _block_means(grid: TorusGrid, values: np.ndarray, weights: np.ndarray, level: int):
    k = 2**level
    m = grid.n_points // k
    shape = (k, m) * grid.dim if grid.dim == 1 else (k, m, k, m)
    num = (values * weights).reshape(shape)
    den = weights.reshape(shape)
    axes = (1,) if grid.dim == 1 else (1, 3)
    means = num.sum(axis=axes, keepdims=True) / den.sum(axis=axes, keepdims=True)
    return np.broadcast_to(means, shape).reshape(-1)


def maximal_function(grid: TorusGrid, f: np.ndarray, W=None) -> np.ndarray:
    """Dyadic maximal function of ``|f|``, with ``W``-averages when ``W`` is given.

    Every dyadic level is used, down to single cells.
    """
    absf = np.abs(np.asarray(f, dtype=float))
    weights = np.ones(grid.size) if W is None else weight_values(W)
    out = absf.copy()
    for level in range(int(np.log2(grid.n_points)) + 1):
        out = np.maximum(out, _block_means(grid, absf, weights, level))
    return out


def weighted_poincare_ratio(grid: TorusGrid, f: np.ndarray, W, cube: DyadicCube) -> float:
    """``||f - [f]_Q||_{L^2_W(Q)} / (l(Q) ||grad f||_{L^2_W(2Q)})``."""
    w = weight_values(W)
    f = np.asarray(f, dtype=float)
    q_idx = cube.indices()
    avg = np.sum(f[q_idx] * w[q_idx]) / np.sum(w[q_idx])
    num = np.sqrt(grid.cell_volume * np.sum((f[q_idx] - avg) ** 2 * w[q_idx]))
    if num == 0:
        return 0.0
    g = (gradient(grid).matrix @ f).reshape(grid.dim, -1)
    d_idx = cube.dilated(2)
    den = cube.sidelength * np.sqrt(grid.cell_volume * np.sum(g[:, d_idx] ** 2 * w[d_idx]))
    if den == 0:
        return float("inf")
    return float(num / den)


def all_cubes(grid: TorusGrid):
    """Dyadic cubes at every level with side >= 2h."""
    out = []
    for level in grid.levels():
        out.extend(c for c in dyadic_cubes_any(grid, level))
    return out
