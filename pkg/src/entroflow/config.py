"""Flat `key = value` run configuration.

One assignment per line, '#' starts a comment, unknown keys are
rejected.  A RunConfig resolves the textual keys into the library
objects (grid, energy model, potential, initial measure) and carries
the numeric step parameters.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, fields

import numpy as np

from .energy import EnergyModel, PotentialField
from .grid import DiscreteMeasure, build_grid
from .reference import Barenblatt, GaussianHeat

__all__ = ["ConfigError", "RunConfig", "parse_kv_text", "load_config"]


class ConfigError(ValueError):
    """Malformed configuration text or values; maps to CLI exit code 1."""


def parse_kv_text(text):
    """Parse `key = value` lines into an ordered dict of strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = line.split("=", 1)
        key = key.strip()
        val = val.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def _as_int(key, val):
    try:
        f = float(val)
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {val!r}") from None
    if f != int(f):
        raise ConfigError(f"{key} must be an integer, got {val!r}")
    return int(f)


def _as_float(key, val):
    try:
        return float(val)
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {val!r}") from None


def _as_float_list(key, val):
    try:
        return tuple(float(v) for v in val.split(","))
    except ValueError:
        raise ConfigError(f"{key} must be comma-separated numbers, got {val!r}") from None


def _as_switch(key, val):
    low = val.lower()
    if low in ("on", "true", "yes", "1"):
        return True
    if low in ("off", "false", "no", "0"):
        return False
    raise ConfigError(f"{key} must be on or off, got {val!r}")


_CALL_RE = re.compile(r"^([a-z_]+)\((.*)\)$")


def _parse_call(key, val):
    """Split 'name(a,b,...)' into (name, [args]); bare names get no args."""
    m = _CALL_RE.match(val.strip())
    if m:
        name = m.group(1)
        body = m.group(2).strip()
        args = [a.strip() for a in body.split(",")] if body else []
        return name, args
    return val.strip(), []


@dataclass
class RunConfig:
    """Resolved run parameters; build_* methods produce library objects."""

    dim: int = 1
    points: int = 256
    extent_min: tuple = (0.0,)
    extent_max: tuple = (1.0,)
    energy: str = "heat"
    porous_m: float = 2.0
    potential: str = "none"
    initial: str = "uniform"
    eps: float = 1e-4
    tau: float = 1e-3
    steps: int = 11
    step_tol: float = 1e-9
    max_iter: int = 50_000
    save_every: int = 1
    diagnostics: bool = True
    schedule_constant: float = 1000.0
    t0: float = 1e-3
    x0: float = 0.5

    @classmethod
    def keys(cls):
        return tuple(f.name for f in fields(cls))

    @classmethod
    def from_mapping(cls, mapping):
        cfg = cls()
        known = set(cls.keys())
        for key, val in mapping.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if key in ("dim", "points", "steps", "max_iter", "save_every"):
                setattr(cfg, key, _as_int(key, val))
            elif key in ("extent_min", "extent_max"):
                setattr(cfg, key, _as_float_list(key, val))
            elif key in ("porous_m", "eps", "tau", "step_tol", "schedule_constant", "t0", "x0"):
                setattr(cfg, key, _as_float(key, val))
            elif key == "diagnostics":
                cfg.diagnostics = _as_switch(key, val)
            else:
                setattr(cfg, key, val)
        cfg.validate()
        return cfg

    def validate(self):
        if self.dim not in (1, 2):
            raise ConfigError(f"dim must be 1 or 2, got {self.dim}")
        if self.points < 1:
            raise ConfigError(f"points must be >= 1, got {self.points}")
        for name in ("eps", "tau", "step_tol", "schedule_constant", "t0"):
            v = getattr(self, name)
            if not (isinstance(v, float) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a positive number, got {v!r}")
        for name in ("steps", "max_iter", "save_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if len(self.extent_min) not in (1, self.dim) or len(self.extent_max) not in (1, self.dim):
            raise ConfigError("extent_min/extent_max need one value per axis")
        if self.energy not in ("heat", "porous", "congestion"):
            raise ConfigError(f"energy must be heat, porous or congestion, got {self.energy!r}")
        if self.energy == "porous" and not self.porous_m > 1:
            raise ConfigError(f"porous_m must be > 1, got {self.porous_m}")

    # ----- builders -------------------------------------------------------

    def extent(self):
        lo = self.extent_min if len(self.extent_min) == self.dim else self.extent_min * self.dim
        hi = self.extent_max if len(self.extent_max) == self.dim else self.extent_max * self.dim
        ext = tuple((a, b) for a, b in zip(lo, hi))
        for a, b in ext:
            if not b > a:
                raise ConfigError(f"empty extent ({a}, {b})")
        return ext

    def build_grid(self):
        return build_grid(self.dim, self.points, self.extent())

    def build_model(self):
        if self.energy == "heat":
            return EnergyModel.heat()
        if self.energy == "porous":
            return EnergyModel.porous_media(self.porous_m)
        return EnergyModel.congestion()

    def build_potential(self, grid):
        name, args = _parse_call("potential", self.potential)
        if name == "none":
            if args:
                raise ConfigError("potential none takes no arguments")
            return PotentialField.zero(grid)
        if name == "quadratic_well":
            if len(args) != grid.dim + 1:
                raise ConfigError(
                    f"quadratic_well needs {grid.dim + 1} arguments (center..., strength)"
                )
            nums = [_as_float("potential", a) for a in args]
            center = tuple(nums[:-1]) if grid.dim == 2 else nums[0]
            return PotentialField.quadratic_well(grid, center, nums[-1])
        if name == "ramp":
            if len(args) not in (2, 3):
                raise ConfigError("ramp needs (threshold, slope[, axis])")
            threshold = _as_float("potential", args[0])
            slope = _as_float("potential", args[1])
            axis = _as_int("potential", args[2]) if len(args) == 3 else 0
            return PotentialField.ramp(grid, threshold, slope, axis=axis)
        if name == "file":
            if len(args) != 1:
                raise ConfigError("potential file(...) needs a path")
            return _potential_from_file(grid, args[0])
        raise ConfigError(f"unknown potential {self.potential!r}")

    def build_initial(self, grid):
        from .io import read_measure

        name, args = _parse_call("initial", self.initial)
        if name == "uniform":
            if args:
                raise ConfigError("initial uniform takes no arguments")
            return DiscreteMeasure.uniform(grid)
        if name == "file":
            if len(args) != 1:
                raise ConfigError("initial file(...) needs a path")
            try:
                return read_measure(args[0], grid=grid)
            except OSError as exc:
                raise ConfigError(f"cannot read initial measure: {exc}") from None
        if name == "gaussian":
            if len(args) != grid.dim + 1:
                raise ConfigError(f"gaussian needs {grid.dim + 1} arguments (center..., t0)")
            nums = [_as_float("initial", a) for a in args]
            center, t0 = nums[:-1], nums[-1]
            pts = grid.points()
            sq = np.zeros(grid.n_points)
            for d in range(grid.dim):
                sq += (pts[:, d] - center[d]) ** 2
            dens = np.exp(-sq / (4.0 * t0))
            return DiscreteMeasure.from_density(grid, dens)
        if name == "barenblatt":
            if grid.dim != 1:
                raise ConfigError("barenblatt initial data is 1-D")
            if len(args) != 2:
                raise ConfigError("barenblatt needs (center, t0)")
            x0 = _as_float("initial", args[0])
            t0 = _as_float("initial", args[1])
            m = self.porous_m if self.energy == "porous" else 2.0
            prof = Barenblatt(m, t0, x0)
            return DiscreteMeasure.from_density(grid, prof.density(0.0, grid.axis_points(0)))
        raise ConfigError(f"unknown initial condition {self.initial!r}")

    def reference_params(self):
        """(x0, t0) of the matching closed-form profile.

        When the initial condition is itself one of the closed-form
        profiles its (center, t0) arguments win; otherwise the explicit
        x0/t0 keys apply.
        """
        try:
            name, args = _parse_call("initial", self.initial)
        except ConfigError:
            return self.x0, self.t0
        if name in ("gaussian", "barenblatt") and len(args) >= 2:
            try:
                nums = [float(a) for a in args]
            except ValueError:
                return self.x0, self.t0
            return nums[0], nums[-1]
        return self.x0, self.t0

    def resolved_entries(self):
        """Flat mapping for the run manifest."""
        ext = self.extent()
        entries = {
            "dim": self.dim,
            "points": self.points,
            "extent_min": ",".join(repr(a) for a, _ in ext),
            "extent_max": ",".join(repr(b) for _, b in ext),
            "energy": self.energy,
            "potential": self.potential,
            "initial": self.initial,
            "eps": self.eps,
            "tau": self.tau,
            "steps": self.steps,
            "step_tol": self.step_tol,
            "max_iter": self.max_iter,
            "save_every": self.save_every,
            "diagnostics": "on" if self.diagnostics else "off",
            "schedule_constant": self.schedule_constant,
            "t0": self.t0,
            "x0": self.x0,
        }
        if self.energy == "porous":
            entries["porous_m"] = self.porous_m
        return entries


def _potential_from_file(grid, path):
    import csv as _csv

    try:
        with open(path) as fh:
            rows = list(_csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read potential file: {exc}") from None
    if not rows or rows[0][-1].strip() not in ("v", "value"):
        raise ConfigError("potential CSV needs a header ending in 'v'")
    dim = len(rows[0]) - 1
    if dim != grid.dim:
        raise ConfigError(f"potential CSV is {dim}-D but the grid is {grid.dim}-D")
    try:
        data = np.array([[float(c) for c in r] for r in rows[1:] if r])
    except ValueError as exc:
        raise ConfigError(f"non-numeric cell in potential CSV: {exc}") from None
    if data.shape[0] != grid.n_points:
        raise ConfigError(f"potential CSV has {data.shape[0]} rows, expected {grid.n_points}")
    pts = grid.points()
    order = np.lexsort(tuple(data[:, d] for d in reversed(range(dim))))
    canon = np.lexsort(tuple(pts[:, d] for d in reversed(range(dim))))
    vals = np.empty(grid.n_points)
    vals[canon] = data[order, dim]
    if not np.allclose(pts[canon], data[order, :dim], rtol=1e-9, atol=1e-12):
        raise ConfigError("potential CSV coordinates do not match the grid")
    return PotentialField(grid, vals)


def load_config(path, overrides=None):
    """Read a config file; overrides is an extra mapping applied on top."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    mapping = parse_kv_text(text)
    if overrides:
        mapping.update(overrides)
    return RunConfig.from_mapping(mapping)
