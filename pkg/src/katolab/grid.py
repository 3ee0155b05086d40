"""Periodic torus grids, centered finite differences and dyadic cube bookkeeping.

Grid functions are flat arrays of length ``grid.size`` in C order (axis 0
slowest).  Vector fields are flat arrays of length ``dim * grid.size`` laid
out component by component.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterator

import numpy as np
import scipy.sparse as sp

from .errors import GridError

STENCILS = ("composed", "compact")


@dataclass(frozen=True)
class TorusGrid:
    """Uniform grid on the torus ``[0, side)^dim``."""

    dim: int
    n_points: int
    side: float = 1.0

    @property
    def h(self) -> float:
        return self.side / self.n_points

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_points,) * self.dim

    @property
    def size(self) -> int:
        return self.n_points**self.dim

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    @property
    def max_level(self) -> int:
        """Deepest dyadic level whose cubes still have side ``>= 2h``."""
        return int(np.log2(self.n_points)) - 1

    def levels(self) -> range:
        return range(self.max_level + 1)

    def axis_coordinates(self) -> np.ndarray:
        return np.arange(self.n_points) * self.h

    @cached_property
    def coordinates(self) -> np.ndarray:
        """Point coordinates, shape ``(dim, size)``."""
        axes = [self.axis_coordinates()] * self.dim
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh])

    def level_for_sidelength(self, length: float) -> int:
        j = np.log2(self.side / length)
        if abs(j - round(j)) > 1e-9:
            raise GridError(f"sidelength {length} is not dyadic for side {self.side}")
        return int(round(j))


def make_grid(dim: int, n_points: int, side: float = 1.0) -> TorusGrid:
    if dim not in (1, 2):
        raise GridError(f"dim must be 1 or 2, got {dim}")
    if n_points < 16 or n_points & (n_points - 1):
        raise GridError(f"n_points must be a power of two >= 16, got {n_points}")
    if not side > 0:
        raise GridError(f"side must be positive, got {side}")
    return TorusGrid(int(dim), int(n_points), float(side))


@dataclass(frozen=True, eq=False)
class DiscreteOperator:
    """A linear map on grid functions together with the symbol it realizes.

    ``matrix`` is either a dense ``ndarray`` or a scipy sparse matrix; use
    :meth:`dense` when a dense realization is needed.
    """

    matrix: object
    tag: str
    grid: TorusGrid
    stencil: str = "composed"

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.matrix)

    @cached_property
    def _dense(self) -> np.ndarray:
        if self.is_sparse:
            return self.matrix.toarray()
        return np.asarray(self.matrix)

    def dense(self) -> np.ndarray:
        return self._dense

    def sparse(self) -> sp.csr_matrix:
        if self.is_sparse:
            return self.matrix.tocsr()
        return sp.csr_matrix(self.matrix)

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return self.matrix @ u

    def __matmul__(self, u: np.ndarray) -> np.ndarray:
        return self.matrix @ u


def _shift(n: int, k: int) -> sp.csr_matrix:
    """Periodic shift ``(S u)[i] = u[i + k]``."""
    rows = np.arange(n)
    return sp.csr_matrix((np.ones(n), (rows, (rows + k) % n)), shape=(n, n))


def _lift(grid: TorusGrid, op1d: sp.spmatrix, axis: int) -> sp.csr_matrix:
    if grid.dim == 1:
        return sp.csr_matrix(op1d)
    eye = sp.identity(grid.n_points, format="csr")
    factors = [eye] * grid.dim
    factors[axis] = op1d
    out = factors[0]
    for f in factors[1:]:
        out = sp.kron(out, f, format="csr")
    return out


def _check_axis(grid: TorusGrid, axis: int) -> None:
    if not 0 <= axis < grid.dim:
        raise GridError(f"axis {axis} out of range for dim {grid.dim}")


def first_difference(grid: TorusGrid, axis: int) -> DiscreteOperator:
    """Centered periodic difference ``(u(x + h e_i) - u(x - h e_i)) / 2h``."""
    _check_axis(grid, axis)
    n = grid.n_points
    d1 = (_shift(n, 1) - _shift(n, -1)) / (2 * grid.h)
    return DiscreteOperator(_lift(grid, d1, axis), f"D{axis}", grid)


def second_difference(
    grid: TorusGrid, axis_i: int, axis_j: int, stencil: str = "composed"
) -> DiscreteOperator:
    """``D_i D_j`` either as a composition of centered differences or, on the
    diagonal only, as the compact three-point stencil."""
    _check_axis(grid, axis_i)
    _check_axis(grid, axis_j)
    if stencil not in STENCILS:
        raise GridError(f"unknown stencil {stencil!r}")
    if stencil == "compact":
        if axis_i != axis_j:
            raise GridError("compact stencil is only defined for i == j")
        n = grid.n_points
        d2 = (_shift(n, 1) - 2 * sp.identity(n) + _shift(n, -1)) / grid.h**2
        mat = _lift(grid, d2, axis_i)
    else:
        mat = first_difference(grid, axis_i).matrix @ first_difference(grid, axis_j).matrix
    return DiscreteOperator(sp.csr_matrix(mat), f"D{axis_i}D{axis_j}", grid, stencil)


def gradient(grid: TorusGrid) -> DiscreteOperator:
    """Stacked centered differences: scalar field -> vector field."""
    blocks = [first_difference(grid, a).matrix for a in range(grid.dim)]
    return DiscreteOperator(sp.vstack(blocks, format="csr"), "grad", grid)


def divergence(grid: TorusGrid) -> DiscreteOperator:
    blocks = [first_difference(grid, a).matrix for a in range(grid.dim)]
    return DiscreteOperator(sp.hstack(blocks, format="csr"), "div", grid)


def _tile_weight(grid: TorusGrid, f: np.ndarray, weight: np.ndarray | None) -> np.ndarray:
    if weight is None:
        return np.ones(f.shape[-1])
    weight = np.asarray(weight, dtype=float)
    reps = f.shape[-1] // weight.shape[-1]
    return np.tile(weight, reps) if reps > 1 else weight


def integrate(grid: TorusGrid, f: np.ndarray, weight: np.ndarray | None = None) -> float:
    """``h^dim * sum(f * weight)``; vector fields are summed over components."""
    f = np.asarray(f)
    return grid.cell_volume * np.sum(f * _tile_weight(grid, f, weight), axis=-1)


def inner(grid: TorusGrid, u: np.ndarray, v: np.ndarray, weight: np.ndarray | None = None):
    """Weighted inner product ``<u, v>_W = h^d sum u conj(v) W``."""
    return integrate(grid, np.asarray(u) * np.conj(v), weight)


def norm(grid: TorusGrid, u: np.ndarray, weight: np.ndarray | None = None) -> float:
    return float(np.sqrt(np.real(inner(grid, u, u, weight))))


def weighted_operator_norm(
    matrix: np.ndarray, w_out: np.ndarray, w_in: np.ndarray
) -> float:
    """Operator norm of ``matrix`` from ``L^2_{w_in}`` to ``L^2_{w_out}``.

    The weights must already be tiled to the row/column dimension.
    """
    scaled = np.sqrt(w_out)[:, None] * np.asarray(matrix) / np.sqrt(w_in)[None, :]
    return float(np.linalg.norm(scaled, 2))


def torus_distance(grid: TorusGrid, p, q) -> np.ndarray:
    """Euclidean distance on the torus with per-axis wrap-around.

    ``p`` and ``q`` are coordinates with the axis in the last dimension
    (a scalar is accepted in 1-d).
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if grid.dim == 1 and p.ndim == 0:
        p = p[..., None]
    if grid.dim == 1 and q.ndim == 0:
        q = q[..., None]
    delta = np.abs(p - q) % grid.side
    delta = np.minimum(delta, grid.side - delta)
    return np.sqrt(np.sum(delta**2, axis=-1))


def axis_offsets(grid: TorusGrid) -> np.ndarray:
    """Signed wrapped offsets ``x_i - x_0`` per axis, values in ``[-side/2, side/2)``."""
    k = np.arange(grid.n_points)
    k = np.where(k >= grid.n_points // 2, k - grid.n_points, k)
    return k * grid.h


def offset_field(grid: TorusGrid, center) -> np.ndarray:
    """Wrapped displacement ``x - center`` for every point, shape ``(dim, size)``."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    disp = grid.coordinates - center[:, None]
    return (disp + grid.side / 2) % grid.side - grid.side / 2


@dataclass(frozen=True)
class DyadicCube:
    grid: TorusGrid
    level: int
    corner: tuple[int, ...]

    @property
    def sidelength(self) -> float:
        return self.grid.side * 2.0**-self.level

    @property
    def points_per_axis(self) -> int:
        return self.grid.n_points >> self.level

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.corner) + 0.5) * self.sidelength

    def indices(self) -> np.ndarray:
        return cube_indices(self)

    def dilated(self, factor: int) -> np.ndarray:
        return dilated_indices(self, factor)


def _check_level(grid: TorusGrid, level: int) -> None:
    if level < 0 or level > grid.max_level:
        raise GridError(
            f"level {level} outside 0..{grid.max_level} (cube side must be >= 2h)"
        )


def dyadic_cubes(grid: TorusGrid, level: int) -> list[DyadicCube]:
    _check_level(grid, level)
    per_axis = range(2**level)
    corners = np.array(np.meshgrid(*[per_axis] * grid.dim, indexing="ij")).reshape(grid.dim, -1).T
    return [DyadicCube(grid, level, tuple(int(c) for c in corner)) for corner in corners]


def iter_cubes(grid: TorusGrid, levels=None) -> Iterator[DyadicCube]:
    for level in grid.levels() if levels is None else levels:
        yield from dyadic_cubes(grid, level)


def _box_indices(grid: TorusGrid, starts: tuple[int, ...], width: int) -> np.ndarray:
    n = grid.n_points
    ranges = [(s + np.arange(width)) % n for s in starts]
    mesh = np.meshgrid(*ranges, indexing="ij")
    return np.ravel_multi_index([m.ravel() for m in mesh], grid.shape)


def cube_indices(cube: DyadicCube) -> np.ndarray:
    m = cube.points_per_axis
    return _box_indices(cube.grid, tuple(c * m for c in cube.corner), m)


def dilated_indices(cube: DyadicCube, factor: int) -> np.ndarray:
    """Indices of the concentric cube ``factor * Q`` (wrapped).

    A dilation reaching the whole torus is clipped to the torus.
    """
    grid = cube.grid
    m = cube.points_per_axis
    width = factor * m
    if width >= grid.n_points:
        return np.arange(grid.size)
    pad = (factor - 1) * m
    if pad % 2:
        raise GridError(f"dilation {factor} of a {m}-point cube is not grid aligned")
    starts = tuple(c * m - pad // 2 for c in cube.corner)
    return _box_indices(grid, starts, width)


def block_average_matrix(grid: TorusGrid, level: int) -> sp.csr_matrix:
    """Projection onto unweighted cell averages at one dyadic level."""
    if level < 0 or (grid.n_points >> level) < 1:
        raise GridError(f"level {level} too deep")
    rows, cols, vals = [], [], []
    for cube in dyadic_cubes_any(grid, level):
        idx = cube_indices(cube)
        rr, cc = np.meshgrid(idx, idx, indexing="ij")
        rows.append(rr.ravel())
        cols.append(cc.ravel())
        vals.append(np.full(rr.size, 1.0 / idx.size))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.size, grid.size),
    )


def dyadic_cubes_any(grid: TorusGrid, level: int) -> list[DyadicCube]:
    """Dyadic cubes down to single cells (``side h``), used by maximal functions."""
    if level < 0 or level > int(np.log2(grid.n_points)):
        raise GridError(f"level {level} too deep")
    per_axis = range(2**level)
    corners = np.array(np.meshgrid(*[per_axis] * grid.dim, indexing="ij")).reshape(grid.dim, -1).T
    return [DyadicCube(grid, level, tuple(int(c) for c in corner)) for corner in corners]


def box_sums(grid: TorusGrid, values: np.ndarray, width: int) -> np.ndarray:
    """Sums of ``values`` over every wrapped box of ``width`` points per axis.

    Entry ``s`` of the result is the sum over the box whose lowest corner is
    point ``s``.
    """
    arr = np.asarray(values, dtype=float).reshape(grid.shape)
    for axis in range(grid.dim):
        ext = np.concatenate([arr, np.take(arr, range(width - 1), axis=axis)], axis=axis)
        csum = np.cumsum(ext, axis=axis)
        zero = np.zeros_like(np.take(csum, [0], axis=axis))
        csum = np.concatenate([zero, csum], axis=axis)
        upper = np.take(csum, range(width, width + grid.n_points), axis=axis)
        lower = np.take(csum, range(0, grid.n_points), axis=axis)
        arr = upper - lower
    return arr.ravel()


def centered_box_sums(grid: TorusGrid, values: np.ndarray, radius: float) -> np.ndarray:
    """Sum over the wrapped box ``{y : |y_i - x_i| < radius}`` around each point ``x``."""
    half = int(np.ceil(radius / grid.h - 1e-12)) - 1
    half = max(half, 0)
    width = min(2 * half + 1, grid.n_points)
    sums = box_sums(grid, values, width).reshape(grid.shape)
    shift = half if width < grid.n_points else 0
    return np.roll(sums, shift=(shift,) * grid.dim, axis=tuple(range(grid.dim))).ravel()


def band_limited_ensemble(
    grid: TorusGrid, size: int, band: int, seed: int, include_mean: bool = False
) -> np.ndarray:
    """Seeded random real trigonometric polynomials with ``|k_i| <= band``.

    Returns an array of shape ``(size, grid.size)``.  The same seed and band
    produce the same continuum functions on every grid, so ensembles can be
    compared across refinements.
    """
    if size < 1:
        raise GridError("ensemble must contain at least one function")
    if band < 1 or band > grid.n_points // 4:
        raise GridError(f"band {band} must lie in 1..n_points/4 = {grid.n_points // 4}")
    rng = np.random.default_rng(seed)
    ks = np.arange(-band, band + 1)
    modes = np.array(np.meshgrid(*[ks] * grid.dim, indexing="ij")).reshape(grid.dim, -1).T
    # half-space representatives so each real mode appears once
    keep = [m for m in modes if tuple(m) > (0,) * grid.dim]
    modes = np.array(keep)
    x = grid.coordinates
    phases = 2 * np.pi * modes @ x / grid.side
    cos_b, sin_b = np.cos(phases), np.sin(phases)
    out = np.empty((size, grid.size))
    for s in range(size):
        a = rng.standard_normal(len(modes))
        b = rng.standard_normal(len(modes))
        c0 = rng.standard_normal()
        out[s] = a @ cos_b + b @ sin_b + (c0 if include_mean else 0.0)
    return out


def lipschitz_normalize(grid: TorusGrid, f: np.ndarray) -> np.ndarray:
    """Scale ``f`` so that the sup of its discrete gradient magnitude is one."""
    g = (gradient(grid).matrix @ f).reshape(grid.dim, -1)
    lip = np.max(np.sqrt(np.sum(g**2, axis=0)))
    if lip == 0:
        raise GridError("cannot normalize a function with zero gradient")
    return f / lip
