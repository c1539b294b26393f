"""Internal energies, pressures, and the pointwise KL proximal maps.

A free energy on the grid is

    F(rho) = sum_i v(x_i) w_i + sum_i u(w_i / l) l,

with v >= 0 an external potential, u a convex internal energy density and
l the cell volume (so u acts on Lebesgue densities).  Supported laws:

    heat          u(s) = s log s - s           pressure p(s) = s
    porous (m>1)  u(s) = s^m / (m - 1)         pressure p(s) = s^m
    congestion    u(s) = 0 on [0, 1], +inf     no pressure
    custom        tabulated u with a numeric prox lookup table

The diffusion pressure is p(s) = s u'(s) - u(s).

The proximal map of kappa * u-term in the cellwise KL geometry,

    prox(s) = argmin_{w >= 0}  w log(w/s) - w + s + kappa u(w/l) l,

has closed forms: heat  s^{1/(1+kappa)} l^{kappa/(1+kappa)}; porous media
l (W(m kappa (s/l)^{m-1}) / (m kappa))^{1/(m-1)} with W the Lambert
function; congestion clamps to the cell capacity, min(s, l).  The first
order condition log(w/s) + kappa u'(w/l) = 0 is the independent check.
"""

from __future__ import annotations

import numpy as np

from .grid import Grid

__all__ = [
    "EnergyModel",
    "PotentialField",
    "pressure",
    "free_energy",
    "lambert_w",
    "pointwise_prox",
    "prox_g",
    "first_variation",
]


# ---------------------------------------------------------------------------
# Lambert W (principal branch, x >= 0)


def lambert_w(x, *, tol=1e-14, max_iter=50):
    """Solve w e^w = x for x >= 0 by Halley iteration.

    Starts from log(1 + x) near the origin and from the asymptotic
    expansion L1 - L2 + L2/L1 (L1 = log x, L2 = log L1) for x > e, so a
    handful of cubically convergent steps reach full precision.  For very
    large x the iteration runs on the equivalent equation
    w + log w = log x, which cannot overflow.  Residual |w e^w - x| is
    driven below tol * max(1, x) or to the evaluation floor of w e^w
    (about |w| ulps of x), whichever is reached first.
    """
    x_arr = np.asarray(x, dtype=float)
    scalar = x_arr.ndim == 0
    x_arr = np.atleast_1d(x_arr)
    if np.any(x_arr < 0) or np.any(np.isnan(x_arr)):
        raise ValueError("lambert_w is defined for x >= 0")
    w = np.log1p(x_arr)
    big = x_arr > 1e250
    if np.any(big):
        w[big] = _lambert_w_log_arg(np.log(x_arr[big]))
    small = ~big
    if np.any(small):
        ws = w[small]
        xs = x_arr[small]
        far = xs > np.e
        if np.any(far):
            l1 = np.log(xs[far])
            l2 = np.log(l1)
            ws[far] = l1 - l2 + l2 / l1
        for _ in range(max_iter):
            e = np.exp(ws)
            f = ws * e - xs
            wp1 = ws + 1.0
            # Halley step: f / (e (w+1) - (w+2) f / (2 (w+1)))
            step = f / (e * wp1 - (ws + 2.0) * f / (2.0 * wp1))
            ws -= step
            # the residual of w e^w bottoms out around |w| ulps of x, so
            # also stop once the update is at machine precision
            done = np.abs(f) <= tol * np.maximum(1.0, xs)
            done |= np.abs(step) <= 1e-15 * (1.0 + np.abs(ws))
            if np.all(done):
                break
        w[small] = ws
    return float(w[0]) if scalar else w


def _lambert_w_log_arg(t, *, max_iter=50):
    """W(e^t) via Newton on w + log w = t; valid for t >= ~2, vectorized."""
    t = np.asarray(t, dtype=float)
    w = np.maximum(t - np.log(np.maximum(t, 2.0)), 1.0)
    for _ in range(max_iter):
        g = w + np.log(w) - t
        w = w - g * w / (w + 1.0)
        if np.all(np.abs(g) <= 1e-15 * np.maximum(1.0, np.abs(t))):
            break
    return w


def _log_lambert_w_of_exp(t):
    """log W(e^t) for real t (elementwise); t = -inf maps to -inf."""
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    lo = t <= 700.0
    if np.any(lo):
        with np.errstate(divide="ignore"):
            out[lo] = np.log(lambert_w(np.exp(t[lo])))
    hi = ~lo
    if np.any(hi):
        out[hi] = np.log(_lambert_w_log_arg(t[hi]))
    return out


# ---------------------------------------------------------------------------
# Energy models


class EnergyModel:
    """A convex internal energy law u acting on Lebesgue densities."""

    HEAT = "heat"
    POROUS = "porous"
    CONGESTION = "congestion"
    CUSTOM = "custom"

    def __init__(self, kind, *, m=None, u_fn=None, du_fn=None, name=None, prox_knots=4096):
        self.kind = kind
        self.m = m
        self._u_fn = u_fn
        self._du_fn = du_fn
        self.name = name or kind
        self.prox_knots = int(prox_knots)
        self._prox_tables = {}

    @classmethod
    def heat(cls):
        return cls(cls.HEAT)

    @classmethod
    def porous_media(cls, m):
        m = float(m)
        if not m > 1:
            raise ValueError(f"porous media exponent must exceed 1, got {m}")
        return cls(cls.POROUS, m=m, name=f"porous[m={m:g}]")

    @classmethod
    def congestion(cls):
        return cls(cls.CONGESTION)

    @classmethod
    def custom(cls, u, u_prime, *, name="custom", prox_knots=4096):
        return cls(cls.CUSTOM, u_fn=u, du_fn=u_prime, name=name, prox_knots=prox_knots)

    @property
    def has_pressure(self):
        return self.kind != self.CONGESTION

    def u(self, s):
        s = np.asarray(s, dtype=float)
        if np.any(s < 0):
            raise ValueError("densities must be nonnegative")
        if self.kind == self.HEAT:
            with np.errstate(divide="ignore", invalid="ignore"):
                out = np.where(s > 0, s * np.log(s) - s, 0.0)
            return out
        if self.kind == self.POROUS:
            return s**self.m / (self.m - 1.0)
        if self.kind == self.CONGESTION:
            return np.where(s <= 1.0, 0.0, np.inf)
        return np.asarray(self._u_fn(s), dtype=float)

    def u_prime(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == self.HEAT:
            with np.errstate(divide="ignore"):
                return np.log(s)
        if self.kind == self.POROUS:
            return self.m / (self.m - 1.0) * s ** (self.m - 1.0)
        if self.kind == self.CONGESTION:
            raise ValueError("congestion energy is not differentiable")
        return np.asarray(self._du_fn(s), dtype=float)

    def __repr__(self):
        return f"EnergyModel({self.name})"


def pressure(model, s):
    """Diffusion pressure p(s) = s u'(s) - u(s)."""
    if not model.has_pressure:
        raise ValueError("congestion model has no pressure function")
    s = np.asarray(s, dtype=float)
    if model.kind == EnergyModel.HEAT:
        return s.copy()
    if model.kind == EnergyModel.POROUS:
        return s**model.m
    return s * model.u_prime(s) - model.u(s)


class PotentialField:
    """A nonnegative external potential sampled on the grid, with gradient."""

    def __init__(self, grid, values, gradient=None):
        v = np.asarray(values, dtype=float).reshape(-1)
        if v.shape[0] != grid.n_points:
            raise ValueError(f"expected {grid.n_points} potential values, got {v.shape[0]}")
        if np.any(~np.isfinite(v)):
            raise ValueError("potential values must be finite")
        if v.min() < 0:
            raise ValueError(f"potential must be nonnegative, min {v.min()}")
        self.grid = grid
        self.values = v
        if gradient is None:
            gradient = _grid_gradient(grid, v)
        g = np.asarray(gradient, dtype=float).reshape(grid.n_points, grid.dim)
        self.gradient = g
        self.lipschitz = float(np.abs(g).max()) if g.size else 0.0

    @classmethod
    def zero(cls, grid):
        return cls(grid, np.zeros(grid.n_points), np.zeros((grid.n_points, grid.dim)))

    @classmethod
    def from_callable(cls, grid, fn, grad=None):
        pts = grid.points()
        vals = np.asarray([fn(x) for x in pts], dtype=float)
        gradient = None
        if grad is not None:
            gradient = np.asarray([grad(x) for x in pts], dtype=float).reshape(grid.n_points, grid.dim)
        return cls(grid, vals, gradient)

    @classmethod
    def quadratic_well(cls, grid, center, strength):
        center = np.atleast_1d(np.asarray(center, dtype=float))
        if center.shape[0] != grid.dim:
            raise ValueError(f"center must have {grid.dim} coordinates")
        if strength < 0:
            raise ValueError("strength must be nonnegative")
        pts = grid.points()
        diff = pts - center[None, :]
        vals = strength * (diff * diff).sum(axis=1)
        grad = 2.0 * strength * diff
        return cls(grid, vals, grad)

    @classmethod
    def ramp(cls, grid, threshold, slope, axis=0):
        """v(x) = slope * max(0, x_axis - threshold); one-sided linear drift."""
        if slope < 0:
            raise ValueError("slope must be nonnegative")
        pts = grid.points()
        gap = pts[:, axis] - threshold
        vals = slope * np.maximum(0.0, gap)
        grad = np.zeros((grid.n_points, grid.dim))
        grad[:, axis] = np.where(gap > 0, slope, 0.0)
        return cls(grid, vals, grad)


def _grid_gradient(grid, values):
    """Centered differences per axis, one-sided at the boundary."""
    p = grid.points_per_axis
    if grid.dim == 1:
        return np.gradient(values, grid.spacing[0]).reshape(-1, 1)
    field = values.reshape(p, p)
    g0 = np.gradient(field, grid.spacing[0], axis=0)
    g1 = np.gradient(field, grid.spacing[1], axis=1)
    return np.column_stack([g0.ravel(), g1.ravel()])


def _grid_divergence(grid, w):
    """Discrete divergence of a vector field sampled at cell centers."""
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    if w.shape != (grid.n_points, grid.dim):
        raise ValueError(f"vector field must be {(grid.n_points, grid.dim)}, got {w.shape}")
    p = grid.points_per_axis
    if grid.dim == 1:
        return np.gradient(w[:, 0], grid.spacing[0])
    f0 = w[:, 0].reshape(p, p)
    f1 = w[:, 1].reshape(p, p)
    d0 = np.gradient(f0, grid.spacing[0], axis=0)
    d1 = np.gradient(f1, grid.spacing[1], axis=1)
    return (d0 + d1).ravel()


# slack on the congestion capacity indicator: solver output is renormalized
# to unit mass, which can graze the bound by a few ulp without the
# constraint being meaningfully violated
CAPACITY_SLACK = 1e-9


def free_energy(model, pot, rho):
    """F(rho) = sum v_i w_i + sum u(w_i/l) l; +inf is a valid value (congestion)."""
    w = rho.weights
    l = rho.grid.cell_volume
    dens = w / l
    if model.kind == EnergyModel.CONGESTION:
        if np.any(dens > 1.0 + CAPACITY_SLACK):
            return np.inf
        internal = 0.0
    else:
        internal = float(np.sum(model.u(dens)) * l)
    drift = float(pot.values @ w) if pot is not None else 0.0
    return drift + internal


# ---------------------------------------------------------------------------
# Proximal maps


def pointwise_prox(model, kappa, l, s):
    """The cellwise KL prox of kappa times the internal energy at volume l.

    Solves argmin_{w>=0} w log(w/s) - w + s + kappa u(w/l) l for each
    entry of s (elementwise); kappa = 0 is the identity.
    """
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    if not l > 0:
        raise ValueError("cell volume must be positive")
    s_arr = np.asarray(s, dtype=float)
    scalar = s_arr.ndim == 0
    s_arr = np.atleast_1d(s_arr).astype(float)
    if np.any(s_arr < 0):
        raise ValueError("prox input must be nonnegative")
    if kappa == 0:
        out = s_arr.copy()
    elif model.kind == EnergyModel.HEAT:
        out = s_arr ** (1.0 / (1.0 + kappa)) * l ** (kappa / (1.0 + kappa))
    elif model.kind == EnergyModel.POROUS:
        m = model.m
        arg = m * kappa * (s_arr / l) ** (m - 1.0)
        out = l * (lambert_w(arg) / (m * kappa)) ** (1.0 / (m - 1.0))
    elif model.kind == EnergyModel.CONGESTION:
        out = np.clip(s_arr, 0.0, l)
    else:
        out = np.exp(_custom_log_prox(model, kappa, l, _safe_log(s_arr)))
    return float(out[0]) if scalar else out


def _safe_log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def _log_pointwise_prox(model, kappa, l, log_s):
    """log of pointwise_prox evaluated on log inputs; the flow's stable path."""
    log_s = np.asarray(log_s, dtype=float)
    if kappa == 0:
        return log_s.copy()
    log_l = np.log(l)
    if model.kind == EnergyModel.HEAT:
        return (log_s + kappa * log_l) / (1.0 + kappa)
    if model.kind == EnergyModel.POROUS:
        m = model.m
        log_mk = np.log(m * kappa)
        t = log_mk + (m - 1.0) * (log_s - log_l)
        return log_l + (_log_lambert_w_of_exp(t) - log_mk) / (m - 1.0)
    if model.kind == EnergyModel.CONGESTION:
        return np.minimum(log_s, log_l)
    return _custom_log_prox(model, kappa, l, log_s)


def _custom_log_prox(model, kappa, l, log_s):
    """Monotone log-spaced prox lookup for custom laws, bisection off-table."""
    key = (float(kappa), float(l))
    table = model._prox_tables.get(key)
    if table is None:
        knots = model.prox_knots
        log_grid = np.log(l) + np.linspace(-28.0, 14.0, knots)
        table = (log_grid, _prox_bisect(model, kappa, l, log_grid))
        model._prox_tables[key] = table
    log_grid, log_w = table
    log_s = np.asarray(log_s, dtype=float)
    out = np.interp(log_s, log_grid, log_w)
    oob = (log_s < log_grid[0]) | (log_s > log_grid[-1])
    if np.any(oob):
        out[oob] = _prox_bisect(model, kappa, l, np.atleast_1d(log_s[oob]))
    out = np.where(np.isneginf(log_s), -np.inf, out)
    return out


def _prox_bisect(model, kappa, l, log_s, *, iters=200):
    """Solve log(w/s) + kappa u'(w/l) = 0 for log w, elementwise bisection."""
    log_s = np.asarray(log_s, dtype=float)
    finite = np.isfinite(log_s)
    ls = log_s[finite]

    def g(lw):
        return (lw - ls) + kappa * np.asarray(model.u_prime(np.exp(lw) / l), dtype=float)

    lo = ls.copy()
    step = 1.0
    while True:
        high = g(lo) > 0
        if not np.any(high):
            break
        lo[high] -= step
        step *= 2.0
    hi = ls.copy()
    step = 1.0
    while True:
        low = g(hi) < 0
        if not np.any(low):
            break
        hi[low] += step
        step *= 2.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        pos = g(mid) > 0
        hi = np.where(pos, mid, hi)
        lo = np.where(pos, lo, mid)
        if np.max(hi - lo) < 1e-15:
            break
    out = np.full(log_s.shape, -np.inf)
    out[finite] = 0.5 * (lo + hi)
    return out


def prox_g(model, pot, kappa, U):
    """Prox of kappa * (potential + internal energy): cellwise prox at s = U e^{-kappa v}."""
    U = np.asarray(U, dtype=float)
    shifted = U * np.exp(-kappa * pot.values)
    return pointwise_prox(model, kappa, pot.grid.cell_volume, shifted)


def first_variation(model, pot, rho, w):
    """Directional derivative of the free energy along a velocity field w.

    Evaluates -sum_i p(rho_i/l) div w(x_i) l + sum_i <grad v(x_i), w(x_i)> w_i
    with centered differences for the divergence (one-sided at the
    boundary).  Requires a model with a pressure function.
    """
    if not model.has_pressure:
        raise ValueError("first variation needs a pressure function; congestion has none")
    grid = rho.grid
    w_field = np.asarray(w, dtype=float)
    if w_field.ndim == 1:
        w_field = w_field[:, None]
    div = _grid_divergence(grid, w_field)
    l = grid.cell_volume
    p_vals = pressure(model, rho.weights / l)
    total = -float(np.sum(p_vals * div) * l)
    if pot is not None:
        total += float(np.sum((pot.gradient * w_field).sum(axis=1) * rho.weights))
    return total
