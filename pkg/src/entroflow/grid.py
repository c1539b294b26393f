"""Cell-centered tensor grids, discrete measures, and Gibbs kernel application.

The domain is an axis-aligned box split into p uniform cells per axis
(dim 1 or 2).  Grid points sit at cell centers, x = lo + (i + 1/2) h, so
weights on points are exactly cell masses and w/l is a Lebesgue density,
with l the cell volume.

The Gibbs kernel for squared-distance cost c_ij = |x_i - x_j|^2 at
regularization eps is

    K_ij = exp(-c_ij / eps) * l^2,

the l^2 factor making K the kernel density against the product reference
measure.  Because c separates across axes, K factorizes as a tensor
product of per-axis kernels and applying it costs O(p^(dim+1)) instead of
O(p^(2 dim)).  The production path works in log space (max-shifted
log-sum-exp), so arbitrarily small eps cannot underflow; the dense kernel
matrix exists only as a size-capped oracle path.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Grid",
    "DiscreteMeasure",
    "CostOracle",
    "build_grid",
    "gibbs_apply",
    "dense_kernel",
    "DEFAULT_DENSE_CAP",
]

DEFAULT_DENSE_CAP = 4096

# mass bookkeeping tolerance for probability vectors
MASS_TOL = 1e-12


class Grid:
    """Uniform cell-centered discretization of a box in dimension 1 or 2."""

    def __init__(self, dim, points_per_axis, extent=None):
        if dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {dim}")
        p = int(points_per_axis)
        if p < 1 or p != points_per_axis:
            raise ValueError(f"points_per_axis must be a positive integer, got {points_per_axis}")
        if extent is None:
            extent = ((0.0, 1.0),) * dim
        extent = tuple((float(lo), float(hi)) for lo, hi in np.reshape(extent, (-1, 2)))
        if len(extent) == 1 and dim == 2:
            extent = extent * 2
        if len(extent) != dim:
            raise ValueError(f"extent must give (lo, hi) per axis, got {extent}")
        for lo, hi in extent:
            if not hi > lo:
                raise ValueError(f"empty extent ({lo}, {hi})")
        self.dim = dim
        self.points_per_axis = p
        self.extent = extent
        self.spacing = tuple((hi - lo) / p for lo, hi in extent)
        self.cell_volume = float(np.prod(self.spacing))
        axes = []
        for (lo, _), h in zip(extent, self.spacing):
            ax = lo + (np.arange(p) + 0.5) * h
            ax.setflags(write=False)
            axes.append(ax)
        self._axes = tuple(axes)
        self._points = None

    @property
    def n_points(self):
        return self.points_per_axis**self.dim

    def axis_points(self, axis=0):
        """Cell-center coordinates along one axis, shape (p,)."""
        return self._axes[axis]

    def points(self):
        """All cell centers in row-major order, shape (n_points, dim)."""
        if self._points is None:
            if self.dim == 1:
                pts = self._axes[0][:, None].copy()
            else:
                a0, a1 = np.meshgrid(self._axes[0], self._axes[1], indexing="ij")
                pts = np.column_stack([a0.ravel(), a1.ravel()])
            pts.setflags(write=False)
            self._points = pts
        return self._points

    def key(self):
        """Hashable identity used for kernel caching."""
        return (self.dim, self.points_per_axis, self.extent)

    def __eq__(self, other):
        return isinstance(other, Grid) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def __repr__(self):
        return f"Grid(dim={self.dim}, points_per_axis={self.points_per_axis}, extent={self.extent})"


def build_grid(dim, points_per_axis, extent=None):
    """Construct a cell-centered grid; extent defaults to the unit box."""
    return Grid(dim, points_per_axis, extent)


class DiscreteMeasure:
    """Probability weights on the cells of a grid.

    Weights are nonnegative and sum to one within 1e-12; w/l is the
    piecewise-constant Lebesgue density.
    """

    def __init__(self, grid, weights):
        w = np.array(weights, dtype=float).reshape(-1)
        if w.shape[0] != grid.n_points:
            raise ValueError(f"expected {grid.n_points} weights, got {w.shape[0]}")
        if np.any(~np.isfinite(w)):
            raise ValueError("weights must be finite")
        lowest = w.min() if w.size else 0.0
        if lowest < -1e-13:
            raise ValueError(f"negative weight {lowest}")
        np.clip(w, 0.0, None, out=w)
        total = w.sum()
        if abs(total - 1.0) > MASS_TOL:
            raise ValueError(f"weights sum to {total!r}, not 1 within {MASS_TOL}")
        w.setflags(write=False)
        self.grid = grid
        self.weights = w

    @classmethod
    def from_unnormalized(cls, grid, weights):
        w = np.asarray(weights, dtype=float).reshape(-1)
        total = w.sum()
        if not np.isfinite(total) or total <= 0:
            raise ValueError(f"cannot normalize mass {total!r}")
        return cls(grid, w / total)

    @classmethod
    def from_density(cls, grid, density_values):
        return cls.from_unnormalized(grid, np.asarray(density_values, float) * grid.cell_volume)

    @classmethod
    def uniform(cls, grid):
        n = grid.n_points
        return cls(grid, np.full(n, 1.0 / n))

    @classmethod
    def point_mass(cls, grid, index):
        w = np.zeros(grid.n_points)
        w[index] = 1.0
        return cls(grid, w)

    @property
    def densities(self):
        return self.weights / self.grid.cell_volume

    def second_moment(self):
        """Sum of w_i |x_i|^2 (moment about the coordinate origin)."""
        pts = self.grid.points()
        return float(self.weights @ (pts * pts).sum(axis=1))

    def l1_distance(self, other):
        return float(np.abs(self.weights - other.weights).sum())

    def __repr__(self):
        return f"DiscreteMeasure(n={self.grid.n_points}, mass={self.weights.sum():.17g})"


class CostOracle:
    """Pairwise squared Euclidean distance between grid points (capped dense)."""

    def __init__(self, grid, dense_cap=DEFAULT_DENSE_CAP):
        self.grid = grid
        self.dense_cap = int(dense_cap)
        self._matrix = None

    def matrix(self):
        n = self.grid.n_points
        if n > self.dense_cap:
            raise ValueError(f"dense cost matrix for {n} points exceeds cap {self.dense_cap}")
        if self._matrix is None:
            pts = self.grid.points()
            diff = pts[:, None, :] - pts[None, :, :]
            c = np.einsum("ijk,ijk->ij", diff, diff)
            c.setflags(write=False)
            self._matrix = c
        return self._matrix


# ---------------------------------------------------------------------------
# Gibbs kernel application


def _logsumexp(a, axis):
    """Max-shifted log-sum-exp; rows of all -inf stay -inf without warnings."""
    m = np.max(a, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(a - shift).sum(axis=axis))
    return out + np.squeeze(shift, axis=axis)


# kernel cache: one entry per (grid key, eps, flavor); small FIFO so eps
# sweeps do not hoard memory
_KERNEL_CACHE = {}
_KERNEL_CACHE_LIMIT = 16


def _cached(key, builder):
    hit = _KERNEL_CACHE.get(key)
    if hit is None:
        if len(_KERNEL_CACHE) >= _KERNEL_CACHE_LIMIT:
            _KERNEL_CACHE.pop(next(iter(_KERNEL_CACHE)))
        hit = _KERNEL_CACHE[key] = builder()
    return hit


def _axis_log_kernels(grid, eps):
    """Per-axis matrices -(x_i - x_j)^2 / eps, without the volume factor."""

    def build():
        mats = []
        for d in range(grid.dim):
            ax = grid.axis_points(d)
            diff = ax[:, None] - ax[None, :]
            mats.append(-(diff * diff) / eps)
        return tuple(mats)

    return _cached((grid.key(), float(eps), "log"), build)


def _axis_linear_kernels(grid, eps):
    def build():
        return tuple(np.exp(m) for m in _axis_log_kernels(grid, eps))

    return _cached((grid.key(), float(eps), "lin"), build)


def _lse_matmul(rows, logmat, expmat):
    """out[r, i] = logsumexp_j(logmat[i, j] + rows[r, j]).

    Computed as a max-shifted matrix product against expmat = exp(logmat)
    (entries in [0, 1], so only the rows need shifting).  Entries close
    to the exponent underflow floor -- including the regime where scaling
    potentials compensate a near-diagonal kernel, so that single factors
    underflow while their product is representable -- are recomputed in
    the log domain, keeping every entry identical to direct evaluation.
    Small problems take the direct route outright: per-call overhead
    beats the flop savings there.
    """
    if rows.size * logmat.shape[0] <= (1 << 17):
        block = logmat[None, :, :] + rows[:, None, :]
        m = np.max(block, axis=2)
        shift = np.where(np.isfinite(m), m, 0.0)
        block -= shift[:, :, None]
        np.exp(block, out=block)
        s = block.sum(axis=2)
        with np.errstate(divide="ignore"):
            out = np.log(s)
        out += shift
        return out
    m = np.max(rows, axis=1)
    shift = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(rows - shift[:, None]) @ expmat.T
    with np.errstate(divide="ignore"):
        out = np.log(s)
    out += shift[:, None]
    # The product form loses terms where exp(logmat) underflows even
    # though logmat + rows is representable, and those terms sum to at
    # most e^(shift - 738).  Entries safely above that floor keep full
    # precision; the rest are recomputed directly.
    bad = out < shift[:, None] - 645.0
    if np.any(bad):
        # rows with no finite entry are legitimately -inf and stay so
        bad &= np.isfinite(rows).any(axis=1)[:, None]
        br, bi = np.nonzero(bad)
        nj = rows.shape[1]
        step = max(1, (1 << 22) // max(1, nj))
        for k0 in range(0, br.size, step):
            r = br[k0:k0 + step]
            i = bi[k0:k0 + step]
            block = logmat[i] + rows[r]
            mb = np.max(block, axis=1)
            sb = np.where(np.isfinite(mb), mb, 0.0)
            block -= sb[:, None]
            np.exp(block, out=block)
            with np.errstate(divide="ignore"):
                out[r, i] = np.log(block.sum(axis=1)) + sb
    return out


def _lse_vecmat(v, logmat, expmat):
    """out[i] = logsumexp_j(logmat[i, j] + v[j])."""
    return _lse_matmul(v[None, :], logmat, expmat)[0]


def _log_gibbs_apply(grid, eps, log_vec, transpose=False):
    """log(K exp(log_vec)) including the l^2 volume factor."""
    p = grid.points_per_axis
    log_l2 = 2.0 * np.log(grid.cell_volume)
    if grid.dim == 1:
        (L,) = _axis_log_kernels(grid, eps)
        (E,) = _axis_linear_kernels(grid, eps)
        if transpose:
            L, E = L.T, E.T
        return _lse_vecmat(log_vec, L, E) + log_l2
    L0, L1 = _axis_log_kernels(grid, eps)
    E0, E1 = _axis_linear_kernels(grid, eps)
    if transpose:
        L0, L1, E0, E1 = L0.T, L1.T, E0.T, E1.T
    S = log_vec.reshape(p, p)
    # contract axis 1 then axis 0; each stage is a batched log-sum-exp
    T = _lse_matmul(S, L1, E1)      # T[j0, i1]
    U = _lse_matmul(T.T, L0, E0)    # U[i1, i0]
    return U.T.reshape(-1) + log_l2


def _linear_gibbs_apply(grid, eps, vec, transpose=False):
    """K @ vec in plain arithmetic (naive path; can under/overflow)."""
    p = grid.points_per_axis
    l2 = grid.cell_volume**2
    if grid.dim == 1:
        (K,) = _axis_linear_kernels(grid, eps)
        if transpose:
            K = K.T
        return (K @ vec) * l2
    K0, K1 = _axis_linear_kernels(grid, eps)
    if transpose:
        K0, K1 = K0.T, K1.T
    V = vec.reshape(p, p)
    return (K0 @ V @ K1.T).reshape(-1) * l2


def gibbs_apply(grid, eps, vec=None, *, transpose=False, log_domain=False, shift=None):
    """Apply the Gibbs kernel K (or K^T) to a vector.

    Linear mode returns K @ vec.  Log mode returns

        log sum_j exp(-c_ij/eps + s_j) + 2 log l,

    with the shift s_j = log(vec_j) + shift_j (vec defaults to ones,
    shift to zero), i.e. log(K @ (vec * exp(shift))) evaluated stably.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    n = grid.n_points
    if vec is not None:
        vec = np.asarray(vec, dtype=float).reshape(-1)
        if vec.shape[0] != n:
            raise ValueError(f"expected vector of length {n}, got {vec.shape[0]}")
    if not log_domain:
        if shift is not None:
            raise ValueError("shift is only meaningful in log_domain mode")
        if vec is None:
            raise ValueError("linear mode needs vec")
        if np.any(vec < 0):
            raise ValueError("linear mode expects nonnegative vec")
        return _linear_gibbs_apply(grid, eps, vec, transpose=transpose)
    if vec is None and shift is None:
        raise ValueError("log mode needs vec or shift")
    if vec is not None:
        with np.errstate(divide="ignore"):
            s = np.log(vec)
    else:
        s = np.zeros(n)
    if shift is not None:
        shift = np.asarray(shift, dtype=float).reshape(-1)
        if shift.shape[0] != n:
            raise ValueError(f"expected shift of length {n}, got {shift.shape[0]}")
        s = s + shift
    return _log_gibbs_apply(grid, eps, s, transpose=transpose)


def dense_kernel(grid, eps, *, dense_cap=DEFAULT_DENSE_CAP):
    """Dense Gibbs kernel matrix exp(-c/eps) l^2; oracle path, size-capped."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    c = CostOracle(grid, dense_cap=dense_cap).matrix()
    return np.exp(-c / eps) * grid.cell_volume**2
