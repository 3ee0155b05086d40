"""Command-line experiment runner producing CSV/JSON reports."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time

import numpy as np

from . import __version__
from .adjoint_weight import solve_adjoint_weight
from .coefficients import make_coefficients
from .config import ExperimentConfig
from .errors import ConfigError, KatolabError
from .estimates import (
    carleson_functional,
    decomposition_diagnostics,
    gaffney_fit,
    kato_sweep,
    tb_test_function,
)
from .functional_calculus import (
    GAFFNEY_KINDS,
    OperatorFamilies,
    SemigroupCache,
    gaussian_bound_fit,
)
from .grid import band_limited_ensemble, dyadic_cubes, make_grid, norm
from .littlewood_paley import TGrid, qt, square_function
from .nondiv_ops import assemble_L
from .parallel import ordered_map, thread_count

SCHEMA_VERSION = 1

COMMANDS = {
    "weight": "Adjoint weight W. CSV columns: x_index[, y_index], W_value.",
    "kato": "Kato ratios over the ensemble. CSV columns: n_points, which, function_id, ratio.",
    "carleson": "Carleson functional per dyadic cube. CSV columns: n_points, level, corner, value.",
    "gaffney": "Off-diagonal decay fits. CSV columns: kind, c_fit, r2, n_fit_points, status.",
    "sqfun": "Square-function diagnostics. CSV columns: function_id, quantity, value.",
    "gaussianfit": "Gaussian kernel bounds. CSV columns: t, C_up, c_up, C_low, c_low, n_excluded.",
    "tb": "T(b) test-function residuals. CSV columns: level, corner, v, eps, res_52, res_53.",
    "selftest": "Run the invariant suites (quick or full). CSV columns: module, invariant, measured, threshold, status[, seconds].",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _clean(obj):
    """Convert numpy scalars and non-finite floats into JSON-safe values."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    return obj


def _check(name, value, threshold, passed) -> dict:
    return {"name": name, "value": value, "threshold": threshold, "passed": bool(passed)}


def _setup(cfg: ExperimentConfig, n_points: int | None = None):
    g = cfg["grid"]
    grid = make_grid(g["dim"], n_points or g["n_points"], g["side"])
    c = cfg["coefficients"]
    fld = make_coefficients(c["preset"], c["params"], grid)
    L = assemble_L(fld, c["stencil"])
    W = solve_adjoint_weight(L, tol=cfg["weight"]["tol"])
    return grid, fld, L, W


def _tgrid(cfg: ExperimentConfig, grid, h: float | None = None) -> TGrid:
    t = cfg["tgrid"]
    h = grid.h if h is None else h
    if t["t_min_factor"] * h >= t["t_max_factor"] * grid.side:
        raise ConfigError(f"tgrid range is empty at n_points = {grid.n_points}")
    tg = TGrid(t["t_min_factor"] * h, t["t_max_factor"] * grid.side, t["q_sub"])
    tg.validate(grid)
    return tg


def _refinements(cfg: ExperimentConfig) -> list[int]:
    return list(cfg.options.get("refinements", [cfg["grid"]["n_points"]]))


def _drift(values) -> float:
    values = [float(v) for v in values]
    lo = max(min(values), 1e-12)
    return (max(values) - min(values)) / lo


def cmd_weight(cfg):
    grid, fld, L, W = _setup(cfg)
    rows = []
    idx = np.array(np.unravel_index(np.arange(grid.size), grid.shape)).T
    for ij, w in zip(idx, W.values):
        row = {"x_index": int(ij[0])}
        if grid.dim == 2:
            row["y_index"] = int(ij[1])
        row["W_value"] = float(w)
        rows.append(row)
    summary = W.summary()
    checks = [
        _check("residual", W.residual, cfg["weight"]["tol"], W.residual <= cfg["weight"]["tol"]),
        _check("min_W", float(W.values.min()), 0.0, W.values.min() > 0),
        _check("mean_minus_one", abs(float(W.values.mean()) - 1), 1e-12, abs(W.values.mean() - 1) <= 1e-12),
    ]
    return rows, summary, checks


def cmd_kato(cfg):
    c, e = cfg["coefficients"], cfg["ensemble"]
    opts = cfg.options
    refinements = _refinements(cfg)
    rep = kato_sweep(
        c["preset"], c["params"], cfg["grid"]["dim"], refinements, e["size"], e["band"], e["seed"],
        route=opts.get("route", "oracle"), weight_tol=cfg["weight"]["tol"], stencil=c["stencil"],
    )
    rows = []
    for (n, which), vals in rep.ratios.items():
        for i, v in enumerate(vals):
            rows.append({"n_points": n, "which": which, "function_id": i, "ratio": float(v)})
    all_vals = np.concatenate(list(rep.ratios.values()))
    checks = [_check("finite_positive", float(all_vals.min()), 0.0,
                     np.all(np.isfinite(all_vals)) and all_vals.min() > 0)]
    grid = make_grid(cfg["grid"]["dim"], refinements[0], cfg["grid"]["side"])
    fld = make_coefficients(c["preset"], c["params"], grid)
    if fld.is_constant:
        lo, hi = math.sqrt(fld.lam) * (1 - 1e-8), math.sqrt(1 / fld.lam) * (1 + 1e-8)
        checks.append(_check("ellipticity_sandwich_min", float(all_vals.min()), lo, all_vals.min() >= lo))
        checks.append(_check("ellipticity_sandwich_max", float(all_vals.max()), hi, all_vals.max() <= hi))
    if len(refinements) > 1:
        limit = opts.get("max_drift", 0.1)
        for which, d in rep.drift.items():
            checks.append(_check(f"median_drift_{which}", d, limit, d <= limit))
    summary = {"table": rep.table, "drift": rep.drift, "weights": rep.weights}
    return rows, summary, checks


def cmd_carleson(cfg):
    refinements = _refinements(cfg)
    coarse_h = cfg["grid"]["side"] / min(refinements)
    rows, sups = [], {}
    summary = {"per_grid": []}
    constant = False
    for n in refinements:
        grid, fld, L, W = _setup(cfg, n)
        constant = fld.is_constant
        rep = carleson_functional(fld, W, _tgrid(cfg, grid, coarse_h), L_op=L)
        for r in rep.as_rows():
            rows.append({"n_points": n, **r})
        sups[n] = rep.supremum
        summary["per_grid"].append({
            "n_points": n, "supremum": rep.supremum,
            "argmax_level": rep.argmax[0], "argmax_corner": list(rep.argmax[1]),
            "level_max": rep.level_max,
        })
    summary["supremum"] = max(sups.values())
    checks = [_check("finite", max(sups.values()), "finite", all(map(math.isfinite, sups.values())))]
    if constant:
        checks.append(_check("constant_zero", max(sups.values()), 1e-12, max(sups.values()) <= 1e-12))
    if len(refinements) > 1:
        d = _drift(sups.values())
        limit = cfg.options.get("max_drift", 0.2)
        summary["drift"] = d
        checks.append(_check("supremum_drift", d, limit, d <= limit))
    return rows, summary, checks


def cmd_gaffney(cfg):
    grid, fld, L, W = _setup(cfg)
    opts = cfg.options
    t_set = [f * grid.side for f in opts.get("t_fractions", [1 / 32, 3 / 64, 1 / 16])]
    if min(t_set) < 2 * grid.h:
        raise ConfigError("gaffney t values must be at least 2h; refine the grid")
    kinds = opts.get("kinds", list(GAFFNEY_KINDS))
    min_r2 = opts.get("min_r2", 0.9)
    separations = [j * grid.h for j in range(1, grid.n_points // 2)]
    cache = SemigroupCache(L, min(t_set), max(t_set), cfg["tgrid"]["q_sub"])
    fam = OperatorFamilies(cache, W)
    for t in t_set:
        fam(kinds[0], t)  # warm the cache before threads read it
    fits = ordered_map(lambda k: gaffney_fit(fam, k, t_set, separations), kinds)
    rows, checks = [], []
    for fit in fits:
        rows.append({"kind": fit.kind, "c_fit": fit.decay_rate, "r2": fit.r2,
                     "n_fit_points": len(fit.points), "status": fit.status})
        if fit.status == "ok":
            ok = fit.decay_rate > 0 and fit.r2 >= min_r2
            checks.append(_check(f"decay_{fit.kind}", fit.decay_rate, f"c>0, R2>={min_r2}", ok))
        else:
            checks.append(_check(f"decay_{fit.kind}", None, "floor", True))
    return rows, {"t_set": t_set}, checks


def cmd_sqfun(cfg):
    grid, fld, L, W = _setup(cfg)
    e = cfg["ensemble"]
    tg = _tgrid(cfg, grid)
    cache = SemigroupCache.from_tgrid(L, tg)
    fam = OperatorFamilies(cache, W)
    ens = band_limited_ensemble(grid, e["size"], e["band"], e["seed"])
    rows = []
    for i, f in enumerate(ens):
        f_norm2 = norm(grid, f, W.values) ** 2
        q_val = sum(
            square_function(lambda t, a=a: qt(t, a, grid), f, tg, W.values) for a in range(grid.dim)
        )
        ii_val = square_function(lambda t: fam("L_semigroup", t), f, tg, W.values)
        rows.append({"function_id": i, "quantity": "Q", "value": q_val / f_norm2})
        rows.append({"function_id": i, "quantity": "L_semigroup", "value": ii_val / f_norm2})
        for key, val in decomposition_diagnostics(fld, W, f, tg, cache).items():
            rows.append({"function_id": i, "quantity": key, "value": float(val)})
    vals = np.array([r["value"] for r in rows])
    summary = {}
    for r in rows:
        summary[r["quantity"]] = max(summary.get(r["quantity"], 0.0), r["value"])
    checks = [_check("finite", float(vals.max()), "finite", np.all(np.isfinite(vals)))]
    return rows, summary, checks


def cmd_gaussianfit(cfg):
    grid, fld, L, W = _setup(cfg)
    factors = cfg.options.get("t_factors")
    if factors is None:
        t_set = [8 * grid.h * 2**k for k in range(8) if 8 * grid.h * 2**k <= grid.side / 8 + 1e-12]
    else:
        t_set = [f * grid.h for f in factors]
    cache = SemigroupCache(L, min(t_set), max(t_set), 1)
    fit = gaussian_bound_fit(cache, W, t_set)
    rows = fit.rows
    checks = [
        _check("c_up_positive", fit.pooled["c_up"], 0.0, fit.pooled["c_up"] > 0),
        _check("C_up_finite", fit.pooled["C_up"], "finite", math.isfinite(fit.pooled["C_up"])),
    ]
    return rows, fit.pooled, checks


def cmd_tb(cfg):
    grid, fld, L, W = _setup(cfg)
    eps_list = cfg.options.get("eps", [0.2, 0.1, 0.05])
    levels = [j for j in grid.levels() if grid.side * 2.0**-j <= grid.side / 8 + 1e-12]
    vs = []
    for k in range(grid.dim):
        for sgn in (1.0, -1.0):
            v = np.zeros(grid.dim)
            v[k] = sgn
            vs.append(v)
    jobs = [(c, v, eps) for lvl in levels for c in dyadic_cubes(grid, lvl) for v in vs for eps in eps_list]

    def run(job):
        cube, v, eps = job
        r = tb_test_function(cube, v, eps, fld, W, L_op=L)
        return {"level": cube.level, "corner": " ".join(map(str, cube.corner)),
                "v": " ".join(f"{x:g}" for x in v), "eps": eps,
                "res_52": r["res_52"], "res_53": r["res_53"]}

    rows = ordered_map(run, jobs)
    summary = {}
    for eps in eps_list:
        sel = [r for r in rows if r["eps"] == eps]
        summary[str(eps)] = {"max_res_52": max(r["res_52"] for r in sel),
                             "max_res_53": max(r["res_53"] for r in sel)}
    vals = np.array([[r["res_52"], r["res_53"]] for r in rows])
    checks = [_check("finite", float(vals.max()), "finite", np.all(np.isfinite(vals)))]
    return rows, summary, checks


HANDLERS = {
    "weight": cmd_weight,
    "kato": cmd_kato,
    "carleson": cmd_carleson,
    "gaffney": cmd_gaffney,
    "sqfun": cmd_sqfun,
    "gaussianfit": cmd_gaussianfit,
    "tb": cmd_tb,
}


def render_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                             for k, v in _clean(r).items()})
    return buf.getvalue()


def render_json(report: dict) -> str:
    return json.dumps(_clean(report), indent=2, sort_keys=False) + "\n"


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="katolab", description="Non-divergence elliptic operator laboratory.")
    parser.add_argument("--version", action="version", version=f"katolab {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--out", help="output path (default: stdout)")
        p.add_argument("--format", choices=("csv", "json"), default="json")
        p.add_argument("--timings", action="store_true",
                       help="include wall-clock timings (output is then not byte-stable)")
        if name == "selftest":
            p.add_argument("--level", choices=("quick", "full"), default="quick")
            p.add_argument("--inject-fault", choices=("skip_parity_projection",), default=None,
                           help="deliberately corrupt a component to exercise failure reporting")
        else:
            p.add_argument("--config", help="JSON experiment configuration")
    return parser


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and not argv[0].startswith("-") and argv[0] not in COMMANDS:
        print(f"katolab: error: unknown subcommand {argv[0]!r}", file=sys.stderr)
        return 2
    try:
        thread_count()
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise ConfigError("missing subcommand")
        if args.command == "selftest":
            from .selftest import run_selftest

            rows, ok = run_selftest(args.level, fault=args.inject_fault, timings=args.level == "full" or args.timings)
            report = {"schema_version": SCHEMA_VERSION, "artifact_version": __version__,
                      "command": "selftest", "level": args.level, "rows": rows, "passed": ok}
            _emit(render_csv(rows) if args.format == "csv" else render_json(report), args.out)
            if not ok:
                failed = next(r for r in rows if r["status"] == "FAIL")
                print(f"katolab: selftest failed in {failed['module']}: {failed['invariant']} "
                      f"measured {failed['measured']} vs threshold {failed['threshold']}", file=sys.stderr)
            return 0 if ok else 1
        cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig.from_dict({})
        start = time.perf_counter()
        rows, summary, checks = HANDLERS[args.command](cfg)
        elapsed = time.perf_counter() - start
    except (KatolabError, ValueError, KeyError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"katolab: error: {msg}", file=sys.stderr)
        return 2
    passed = all(c["passed"] for c in checks)
    report = {
        "schema_version": SCHEMA_VERSION,
        "artifact_version": __version__,
        "command": args.command,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash,
        "summary": summary,
        "checks": checks,
        "passed": passed,
        "rows": rows,
    }
    if args.timings:
        report["timings"] = {"total_seconds": elapsed}
    _emit(render_csv(rows) if args.format == "csv" else render_json(report), args.out)
    for c in checks:
        if not c["passed"]:
            print(f"katolab: check failed: {c['name']} = {c['value']} (threshold {c['threshold']})",
                  file=sys.stderr)
    return 0 if passed else 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
