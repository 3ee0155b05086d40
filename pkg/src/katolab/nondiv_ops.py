"""Non-divergence operators L, L*, the W-adjoint L~ and the normalized divergence."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .coefficients import CoefficientField
from .errors import WeightError
from .grid import (
    DiscreteOperator,
    TorusGrid,
    band_limited_ensemble,
    gradient,
    inner,
    norm,
    second_difference,
)

__all__ = [
    "DiscreteOperator",
    "assemble_L",
    "assemble_Lstar",
    "assemble_Ltilde",
    "assemble_tilde_div",
    "coefficient_multiplier",
    "quadratic_form_residual",
    "divform_identity_residual",
    "numerical_range_probe",
]


def weight_values(W) -> np.ndarray:
    """Accept either an ``AdjointWeight`` or a plain positive array."""
    values = np.asarray(getattr(W, "values", W), dtype=float)
    if np.any(values <= 0) or not np.all(np.isfinite(values)):
        raise WeightError("weight must be finite and strictly positive")
    return values


def _second(grid: TorusGrid, i: int, j: int, stencil: str) -> sp.csr_matrix:
    if stencil == "compact" and i != j:
        stencil = "composed"
    return second_difference(grid, i, j, stencil).matrix


def assemble_L(fld: CoefficientField, stencil: str = "composed") -> DiscreteOperator:
    """``L = -sum_ij diag(a_ij) D_i D_j``; row sums vanish."""
    grid = fld.grid
    mat = sp.csr_matrix((grid.size, grid.size))
    for i in range(grid.dim):
        for j in range(grid.dim):
            mat = mat - sp.diags(fld.entry(i, j)) @ _second(grid, i, j, stencil)
    return DiscreteOperator(mat.tocsr(), "L", grid, stencil)


def assemble_Lstar(fld: CoefficientField, stencil: str = "composed") -> DiscreteOperator:
    """``L* u = -sum_ij D_i D_j (a_ij u)``."""
    grid = fld.grid
    mat = sp.csr_matrix((grid.size, grid.size))
    for i in range(grid.dim):
        for j in range(grid.dim):
            mat = mat - _second(grid, i, j, stencil) @ sp.diags(fld.entry(i, j))
    return DiscreteOperator(mat.tocsr(), "Lstar", grid, stencil)


def assemble_Ltilde(L_op: DiscreteOperator, W) -> DiscreteOperator:
    """Exact adjoint of ``L`` in ``L^2_W``: ``diag(W)^-1 L^T diag(W)``."""
    w = weight_values(W)
    if L_op.is_sparse:
        mat = sp.diags(1.0 / w) @ L_op.matrix.T @ sp.diags(w)
        mat = mat.tocsr()
    else:
        mat = (L_op.matrix.T * w[None, :]) / w[:, None]
    return DiscreteOperator(mat, "Ltilde", L_op.grid, L_op.stencil)


def assemble_tilde_div(grid: TorusGrid, W) -> DiscreteOperator:
    """Normalized divergence ``v -> W^-1 div(W v)`` acting on flat vector fields."""
    w = weight_values(W)
    dw = sp.diags(w)
    dinv = sp.diags(1.0 / w)
    grad = gradient(grid).matrix
    n = grid.size
    blocks = [dinv @ grad[a * n:(a + 1) * n] @ dw for a in range(grid.dim)]
    return DiscreteOperator(sp.hstack(blocks, format="csr"), "div~", grid)


def coefficient_multiplier(fld: CoefficientField) -> sp.csr_matrix:
    """Sparse matrix of ``g -> A(x) g(x)`` on flat vector fields."""
    rows = []
    for i in range(fld.grid.dim):
        rows.append([sp.diags(fld.entry(i, j)) for j in range(fld.grid.dim)])
    return sp.bmat(rows, format="csr")


def quadratic_form_residual(L_op: DiscreteOperator, fld: CoefficientField, W, u) -> float:
    """``|<Lu, u>_W - int A grad u . grad u W|`` with centered gradients."""
    grid = fld.grid
    w = weight_values(W)
    grad_u = gradient(grid).matrix @ u
    lhs = inner(grid, L_op.matrix @ u, u, w)
    energy = np.sum(grad_u * (coefficient_multiplier(fld) @ grad_u) * np.tile(w, grid.dim))
    return float(abs(lhs - grid.cell_volume * energy))


def divform_identity_residual(
    fld: CoefficientField, W, u, stencil: str = "composed"
) -> float:
    """Relative W-norm of ``Lu + L~u + 2 div~(A grad u)``."""
    grid = fld.grid
    w = weight_values(W)
    L_op = assemble_L(fld, stencil)
    Lt = assemble_Ltilde(L_op, w)
    div_t = assemble_tilde_div(grid, w)
    grad_u = gradient(grid).matrix @ u
    res = L_op.matrix @ u + Lt.matrix @ u + 2 * (div_t.matrix @ (coefficient_multiplier(fld) @ grad_u))
    size = norm(grid, u, w)
    if size == 0:
        return 0.0
    return norm(grid, res, w) / size


def numerical_range_probe(
    op: DiscreteOperator, W, n_samples: int = 64, seed: int = 0, band: int | None = None
) -> dict:
    """Sample ``<op u, u>_W`` over random complex band-limited unit vectors.

    Returns ``max_abs_arg`` and ``min_real_part`` over the sample.
    """
    grid = op.grid
    w = weight_values(W)
    band = band or grid.n_points // 4
    re = band_limited_ensemble(grid, n_samples, band, seed, include_mean=True)
    im = band_limited_ensemble(grid, n_samples, band, seed + 7919, include_mean=True)
    samples = re + 1j * im
    max_arg = 0.0
    min_re = np.inf
    for u in samples:
        u = u / norm(grid, u, w)
        z = inner(grid, op.matrix @ u, u, w)
        max_arg = max(max_arg, float(abs(np.angle(z))))
        min_re = min(min_re, float(np.real(z)))
    return {"max_abs_arg": max_arg, "min_real_part": min_re}
