"""Symmetric elliptic coefficient fields A(x) on a torus grid."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import EllipticityError, GridError
from .grid import TorusGrid, band_limited_ensemble

PRESETS = ("identity", "constant", "sin_1d", "anisotropic_2d", "bmo_log", "random_smooth")


@dataclass(frozen=True, eq=False)
class CoefficientField:
    grid: TorusGrid
    entries: np.ndarray  # (size, dim, dim)
    lam: float
    preset: str = "custom"
    params: dict = dc_field(default_factory=dict)

    def entry(self, i: int, j: int) -> np.ndarray:
        return self.entries[:, i, j]

    @property
    def is_constant(self) -> bool:
        return bool(np.all(self.entries == self.entries[0]))

    def apply(self, g: np.ndarray) -> np.ndarray:
        """Pointwise ``A(x) g(x)`` for a flat vector field ``g``."""
        gv = np.asarray(g).reshape(self.grid.dim, -1)
        return np.einsum("xij,jx->ix", self.entries, gv).ravel()

    def describe(self) -> dict:
        return {"preset": self.preset, "params": dict(self.params), "lambda": self.lam}


def _from_entries(grid, entries, preset, params) -> CoefficientField:
    entries = np.ascontiguousarray(entries, dtype=float)
    # exact symmetry: copy the upper triangle onto the lower one
    iu = np.triu_indices(grid.dim, 1)
    entries[:, iu[1], iu[0]] = entries[:, iu[0], iu[1]]
    fld = CoefficientField(grid, entries, np.nan, preset, dict(params))
    lam = check_ellipticity(fld)
    return CoefficientField(grid, entries, lam, preset, dict(params))


def _scalar_times_identity(grid: TorusGrid, a: np.ndarray) -> np.ndarray:
    return a[:, None, None] * np.eye(grid.dim)[None, :, :]


def _unit_trig(grid: TorusGrid, band: int, seed: int, count: int = 1) -> np.ndarray:
    band = min(band, grid.n_points // 4)
    g = band_limited_ensemble(grid, count, band, seed)
    return g / np.max(np.abs(g), axis=1, keepdims=True)


def make_coefficients(preset: str, params: dict | None, grid: TorusGrid) -> CoefficientField:
    """Build a coefficient field from a named preset.

    Presets: ``identity``; ``constant(A0)``; ``sin_1d(amplitude)`` giving
    ``(2 + amplitude sin 2 pi x_1) Id``; ``anisotropic_2d(ratio, angle)``;
    ``bmo_log(target_norm, seed)``; ``random_smooth(band, seed)``.
    """
    params = dict(params or {})
    n = grid.size
    d = grid.dim
    if preset == "identity":
        entries = np.broadcast_to(np.eye(d), (n, d, d)).copy()
    elif preset == "constant":
        a0 = np.asarray(params.get("A0"), dtype=float)
        if a0.shape != (d, d):
            raise EllipticityError(f"A0 must be {d}x{d}, got shape {a0.shape}")
        if not np.array_equal(a0, a0.T):
            raise EllipticityError("A0 must be symmetric")
        if np.min(np.linalg.eigvalsh(a0)) <= 0:
            raise EllipticityError("A0 must be positive definite")
        entries = np.broadcast_to(a0, (n, d, d)).copy()
    elif preset == "sin_1d":
        amp = float(params.get("amplitude", 1.0))
        if abs(amp) >= 2:
            raise EllipticityError("sin_1d amplitude must satisfy |amplitude| < 2")
        x0 = grid.coordinates[0]
        a = 2.0 + amp * np.sin(2 * np.pi * x0 / grid.side)
        entries = _scalar_times_identity(grid, a)
    elif preset == "anisotropic_2d":
        if d != 2:
            raise GridError("anisotropic_2d requires a 2-d grid")
        ratio = float(params.get("ratio", 2.0))
        angle = float(params.get("angle", 0.0))
        if ratio <= 0:
            raise EllipticityError("ratio must be positive")
        x, y = grid.coordinates / grid.side
        phi = angle + 0.25 * np.pi * np.sin(2 * np.pi * x) * np.cos(2 * np.pi * y)
        c, s = np.cos(phi), np.sin(phi)
        entries = np.empty((n, 2, 2))
        entries[:, 0, 0] = c * c + ratio * s * s
        entries[:, 1, 1] = s * s + ratio * c * c
        entries[:, 0, 1] = entries[:, 1, 0] = (1.0 - ratio) * c * s
    elif preset == "bmo_log":
        target = float(params.get("target_norm", 0.1))
        seed = int(params.get("seed", 0))
        entries = _bmo_log_entries(grid, target, seed)
    elif preset == "random_smooth":
        band = int(params.get("band", 2))
        seed = int(params.get("seed", 0))
        g = _unit_trig(grid, band, seed, count=d * (d + 1) // 2)
        entries = np.broadcast_to(1.5 * np.eye(d), (n, d, d)).copy()
        iu = np.triu_indices(d)
        # Gershgorin keeps every eigenvalue in [1, 2]
        for k, (i, j) in enumerate(zip(*iu)):
            entries[:, i, j] += 0.5 * g[k] / d
    else:
        raise EllipticityError(f"unknown coefficient preset {preset!r}")
    return _from_entries(grid, entries, preset, params)


def _bmo_log_entries(grid: TorusGrid, target: float, seed: int) -> np.ndarray:
    # diagonal entries exp(amp * g_k) with amp chosen so the dyadic BMO norm hits target
    d = grid.dim
    g = _unit_trig(grid, 4, seed, count=d)

    def build(amp):
        diag = np.exp(amp * g)
        entries = np.zeros((grid.size, d, d))
        for k in range(d):
            entries[:, k, k] = diag[k]
        return entries

    def bmo(amp):
        return max(dyadic_bmo_norm(grid, np.exp(amp * g[k])) for k in range(d))

    lo, hi = 0.0, 1.0
    while bmo(hi) < target:
        hi *= 2
        if hi > 64:
            raise EllipticityError(f"cannot reach BMO target {target}")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if bmo(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-6 * hi:
            break
    return build(0.5 * (lo + hi))


def check_ellipticity(fld: CoefficientField) -> float:
    """Largest ``lam`` with every eigenvalue of ``A(x)`` inside ``[lam, 1/lam]``."""
    entries = fld.entries
    if not np.array_equal(entries, np.swapaxes(entries, 1, 2)):
        raise EllipticityError("coefficient field is not symmetric")
    eig = np.linalg.eigvalsh(entries)
    lo = float(np.min(eig))
    hi = float(np.max(eig))
    if lo <= 0:
        raise EllipticityError(f"degenerate coefficient field: min eigenvalue {lo:.3g}")
    return min(lo, 1.0 / hi)


def _block_view(grid: TorusGrid, f: np.ndarray, level: int) -> np.ndarray:
    """Reshape ``f`` to ``(n_cubes, points_per_cube)`` for one dyadic level."""
    k = 2**level
    m = grid.n_points // k
    arr = np.asarray(f, dtype=float).reshape(grid.shape)
    if grid.dim == 1:
        return arr.reshape(k, m)
    return arr.reshape(k, m, k, m).transpose(0, 2, 1, 3).reshape(k * k, m * m)


def dyadic_bmo_norm(grid: TorusGrid, f: np.ndarray) -> float:
    """``sup_Q avg_Q |f - avg_Q f|`` over dyadic cubes with side ``>= 2h``."""
    best = 0.0
    for level in grid.levels():
        blocks = _block_view(grid, f, level)
        osc = np.mean(np.abs(blocks - blocks.mean(axis=1, keepdims=True)), axis=1)
        best = max(best, float(osc.max()))
    return best
