"""Experiment configuration: JSON parsing, defaults, validation and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass

from .coefficients import PRESETS
from .errors import ConfigError

DEFAULTS = {
    "grid": {"dim": 1, "n_points": 128, "side": 1.0},
    "coefficients": {"preset": "identity", "params": {}, "stencil": "composed"},
    "weight": {"tol": 1e-8},
    "tgrid": {"t_min_factor": 8.0, "t_max_factor": 0.125, "q_sub": 8},
    "quadrature": {"eps_trunc": 1e-3, "n_nodes": 128},
    "ensemble": {"size": 16, "band": 8, "seed": 0},
    "options": {},
}


def _merge(base: dict, override: dict, path: str) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path}{key!r}")
        if isinstance(base[key], dict) and key not in ("params", "options"):
            if not isinstance(val, dict):
                raise ConfigError(f"config section {path}{key!r} must be an object")
            out[key] = _merge(base[key], val, f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _is_pow2(n) -> bool:
    return isinstance(n, int) and n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class ExperimentConfig:
    data: dict

    @classmethod
    def from_dict(cls, raw: dict | None) -> "ExperimentConfig":
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        cfg = cls(_merge(DEFAULTS, raw, ""))
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc.msg} (line {exc.lineno})") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls.from_dict(raw)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def options(self) -> dict:
        return self.data["options"]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def canonical_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def validate(self) -> None:
        g = self.data["grid"]
        if g["dim"] not in (1, 2):
            raise ConfigError("grid.dim must be 1 or 2")
        if not _is_pow2(g["n_points"]) or g["n_points"] < 16:
            raise ConfigError("grid.n_points must be a power of two >= 16")
        if not isinstance(g["side"], (int, float)) or g["side"] <= 0:
            raise ConfigError("grid.side must be positive")
        c = self.data["coefficients"]
        if c["preset"] not in PRESETS:
            raise ConfigError(f"unknown coefficient preset {c['preset']!r}")
        if not isinstance(c["params"], dict):
            raise ConfigError("coefficients.params must be an object")
        if c["stencil"] not in ("composed", "compact"):
            raise ConfigError("coefficients.stencil must be 'composed' or 'compact'")
        if not 0 < self.data["weight"]["tol"] < 1:
            raise ConfigError("weight.tol must lie in (0, 1)")
        t = self.data["tgrid"]
        if t["t_min_factor"] < 4:
            raise ConfigError("tgrid.t_min_factor must be >= 4 (t_min >= 4h)")
        if not 0 < t["t_max_factor"] <= 0.25:
            raise ConfigError("tgrid.t_max_factor must lie in (0, 1/4]")
        if not isinstance(t["q_sub"], int) or t["q_sub"] < 1:
            raise ConfigError("tgrid.q_sub must be a positive integer")
        q = self.data["quadrature"]
        if not 0 < q["eps_trunc"] < 1:
            raise ConfigError("quadrature.eps_trunc must lie in (0, 1)")
        if not isinstance(q["n_nodes"], int) or q["n_nodes"] < 16 or q["n_nodes"] % 16:
            raise ConfigError("quadrature.n_nodes must be a multiple of 16")
        e = self.data["ensemble"]
        if not isinstance(e["size"], int) or e["size"] < 1:
            raise ConfigError("ensemble.size must be a positive integer")
        if not isinstance(e["band"], int) or not 1 <= e["band"] <= g["n_points"] // 4:
            raise ConfigError("ensemble.band must lie in 1..n_points/4")
        if not isinstance(e["seed"], int):
            raise ConfigError("ensemble.seed must be an integer")
        refinements = self.options.get("refinements")
        if refinements is not None:
            if not isinstance(refinements, list) or not all(
                _is_pow2(n) and n >= 16 and e["band"] <= n // 4 for n in refinements
            ):
                raise ConfigError("options.refinements must list powers of two >= max(16, 4*band)")
