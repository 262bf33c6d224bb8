"""Experiment configuration: a sectioned key = value file (INI syntax).

Every key has a default; the file only overrides.  Unknown sections or keys
are rejected.  Endpoint densities are written as

    gaussian: <mean>[, <mean_y>]; <var>
    gibbs
    onehot: <cell index>
    file: <path to cell,x[,y],mass CSV>
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from . import defaults
from .errors import ConfigError
from .grid import (
    Grid,
    GridDensity,
    Potential,
    double_well_potential,
    gaussian_density,
    gibbs_density,
    one_hot_density,
    quadratic_potential,
    read_density_csv,
    zero_potential,
)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, default text)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "testcase": (str, "ou_gaussian"),
        "seed": (int, "0"),
        "record_seconds": (_bool, "false"),
    },
    "potential": {
        "kind": (str, "quadratic"),
        "lam": (float, "1.0"),
        "center": (_floats, "0.0"),
        "a": (float, "0.25"),
        "b": (float, "0.5"),
    },
    "grid": {
        "lower": (_floats, "-6.0"),
        "upper": (_floats, "6.0"),
        "cells": (_ints, "256"),
    },
    "endpoints": {
        "rho0": (str, "gaussian: 0.0; 0.5"),
        "rho1": (str, "gaussian: 0.5; 0.3"),
    },
    "semigroup": {
        "dt_max": (float, repr(defaults.DT_MAX)),
        "t": (float, "0.5"),
    },
    "sweep": {
        "taus": (_floats, ", ".join(repr(t) for t in defaults.TAU_SWEEP)),
        "k_per_segment": (int, "64"),
    },
    "rate": {
        "tau": (float, "0.1"),
    },
    "tolerances": {
        "c_chain": (float, repr(defaults.C_CHAIN)),
        "duality_rel": (float, "1e-8"),
        "err_noise_band": (float, "0.1"),
    },
    "jko": {
        "t": (float, "0.5"),
        "ns": (_ints, "2, 4, 8, 16"),
        "cells": (int, "128"),
    },
    "particles": {
        "t": (float, "0.5"),
        "dt": (float, "0.01"),
        "ns": (_ints, "100, 1000, 10000"),
        "n_seeds": (int, "20"),
    },
    "norm_check": {
        "instances": (int, "200"),
        "max_cells": (int, "64"),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict
    source: str | None = None

    def __getitem__(self, key: str):
        section, name = key.split(".")
        return self.values[section][name]

    def echo(self) -> dict:
        """Every resolved setting, as text, for the run manifest."""
        out = {}
        for section, keys in SCHEMA.items():
            out[section] = {k: _render(self.values[section][k]) for k in keys}
        return out

    # builders --------------------------------------------------------------

    def grid(self) -> Grid:
        lower, upper, cells = self["grid.lower"], self["grid.upper"], self["grid.cells"]
        if len(lower) != len(upper) or len(cells) not in (1, len(lower)):
            raise ConfigError("grid.lower/upper/cells have inconsistent lengths")
        try:
            return Grid.regular(lower, upper, cells)
        except ValueError as exc:
            raise ConfigError(f"grid: {exc}") from exc

    def potential(self, grid: Grid | None = None) -> Potential:
        grid = grid or self.grid()
        kind = self["potential.kind"]
        if kind == "quadratic":
            return quadratic_potential(grid, self["potential.lam"], self["potential.center"])
        if kind == "double_well":
            return double_well_potential(grid, self["potential.a"], self["potential.b"])
        if kind == "zero":
            return zero_potential(grid)
        raise ConfigError(f"potential.kind: unknown potential {kind!r}")

    def endpoint(self, name: str, grid: Grid | None = None, pot: Potential | None = None
                 ) -> GridDensity:
        grid = grid or self.grid()
        return parse_density(self[f"endpoints.{name}"], grid,
                             pot or self.potential(grid), f"endpoints.{name}")


def _render(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def parse_density(spec: str, grid: Grid, pot: Potential, where: str = "density") -> GridDensity:
    kind, _, rest = spec.partition(":")
    kind = kind.strip().lower()
    try:
        if kind == "gaussian":
            mean_txt, _, var_txt = rest.partition(";")
            return gaussian_density(grid, _floats(mean_txt), float(var_txt))
        if kind == "gibbs":
            return gibbs_density(pot)
        if kind == "onehot":
            return one_hot_density(grid, int(rest))
        if kind == "file":
            return read_density_csv(Path(rest.strip()), grid)
    except (ValueError, OSError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    raise ConfigError(f"{where}: unknown density {spec!r}")


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read ``path`` (or defaults only) and validate every key."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
    raw = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, text in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            raw[section][key] = text
    for dotted, text in (overrides or {}).items():
        section, key = dotted.split(".")
        raw[section][key] = text
    values = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (parse, _) in keys.items():
            try:
                values[section][key] = parse(raw[section][key])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {section}.{key}: {exc}") from exc
    return ExperimentConfig(values, None if path is None else str(path))
