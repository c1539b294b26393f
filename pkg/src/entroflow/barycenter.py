"""Entropic barycenters: couplings to a shared, free second marginal.

Given measures mu_1..mu_N on a common grid, minimize

    sum_i lambda_i ( <c, gamma_i> + eps H2(gamma_i) )

over couplings gamma_i whose first marginals are the mu_i and whose
second marginals all agree; the common marginal rho is the barycenter.
Alternating KL projections give, per sweep,

    a_i <- mu_i / (K b_i),
    rho <- exp( sum_i lambda_i log(K^T a_i) )     (weighted geometric mean),
    b_i <- rho / (K^T a_i),

run here in log space.  Weights default to uniform, matching the plain
unweighted sum objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import DiscreteMeasure, Grid, _log_gibbs_apply
from .transport import NonConvergenceError, TransportPlan

__all__ = ["BarycenterProblem", "BarycenterDiagnostics", "barycenter_solve", "barycenter_objective"]


@dataclass
class BarycenterProblem:
    measures: list
    eps: float
    weights: list | None = None
    tol: float = 1e-7
    max_iter: int = 50_000

    def __post_init__(self):
        if not self.measures:
            raise ValueError("need at least one input measure")
        key = self.measures[0].grid.key()
        if any(m.grid.key() != key for m in self.measures):
            raise ValueError("all inputs must live on the same grid")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        n = len(self.measures)
        if self.weights is None:
            self.weights = [1.0 / n] * n
        else:
            w = [float(x) for x in self.weights]
            if len(w) != n or any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-12:
                raise ValueError("weights must be nonnegative and sum to one")
            self.weights = w

    @property
    def grid(self) -> Grid:
        return self.measures[0].grid


@dataclass
class BarycenterDiagnostics:
    iterations: int
    marginal_residuals: list
    rho_change: float
    converged: bool
    plans: list = field(default_factory=list)


def barycenter_solve(prob, *, check_every=5):
    """Iterate to the shared marginal; returns (DiscreteMeasure, diagnostics).

    Converged means the barycenter moved less than tol in L1 between
    sweeps and every coupling matches its input marginal within tol.
    """
    grid = prob.grid
    eps = prob.eps
    n_inputs = len(prob.measures)
    lam = np.asarray(prob.weights, dtype=float)
    with np.errstate(divide="ignore"):
        log_mu = [np.log(m.weights) for m in prob.measures]
    log_b = [np.zeros(grid.n_points) for _ in range(n_inputs)]
    log_rho = np.full(grid.n_points, -np.log(grid.n_points))
    prev_rho = np.exp(log_rho)

    iterations = 0
    converged = False
    residuals = [np.inf] * n_inputs
    change = np.inf
    log_a = [None] * n_inputs
    log_Ka = [None] * n_inputs
    while iterations < prob.max_iter:
        iterations += 1
        for i in range(n_inputs):
            log_Kb = _log_gibbs_apply(grid, eps, log_b[i])
            log_a[i] = log_mu[i] - log_Kb
            log_Ka[i] = _log_gibbs_apply(grid, eps, log_a[i], transpose=True)
        stack = np.stack([lam[i] * log_Ka[i] for i in range(n_inputs)])
        log_rho = stack.sum(axis=0)
        for i in range(n_inputs):
            log_b[i] = log_rho - log_Ka[i]
        rho = np.exp(log_rho)
        if np.any(np.isnan(rho)):
            raise NonConvergenceError(f"barycenter iteration produced NaN at eps={eps!r}")
        if iterations % check_every == 0 or iterations == prob.max_iter:
            change = float(np.abs(rho - prev_rho).sum())
            if change <= prob.tol:
                residuals = []
                for i in range(n_inputs):
                    m1 = np.exp(log_a[i] + _log_gibbs_apply(grid, eps, log_b[i]))
                    residuals.append(float(np.abs(m1 - prob.measures[i].weights).sum()))
                if max(residuals) <= prob.tol:
                    converged = True
                    break
        prev_rho = rho

    plans = [
        TransportPlan(grid, eps=eps, log_a=log_a[i], log_b=log_b[i]) for i in range(n_inputs)
    ]
    diag = BarycenterDiagnostics(
        iterations=iterations,
        marginal_residuals=residuals if isinstance(residuals, list) else list(residuals),
        rho_change=change,
        converged=converged,
        plans=plans,
    )
    if not converged:
        raise NonConvergenceError(
            f"barycenter stopped after {iterations} sweeps (rho change {change!r})"
        )
    measure = DiscreteMeasure.from_unnormalized(grid, rho)
    return measure, diag


def barycenter_objective(prob, couplings, *, feasibility_tol=1e-7):
    """sum_i <c, gamma_i> + eps H2(gamma_i) over the supplied couplings.

    Flags infeasibility: each first marginal must match its input and all
    second marginals must agree, within feasibility_tol in L1.
    """
    if len(couplings) != len(prob.measures):
        raise ValueError(f"expected {len(prob.measures)} couplings, got {len(couplings)}")
    seconds = []
    for i, plan in enumerate(couplings):
        m1 = plan.first_marginal()
        gap = float(np.abs(m1 - prob.measures[i].weights).sum())
        if gap > feasibility_tol:
            raise ValueError(f"coupling {i} misses its first marginal by {gap:.3e}")
        seconds.append(plan.second_marginal())
    for i in range(1, len(seconds)):
        gap = float(np.abs(seconds[i] - seconds[0]).sum())
        if gap > feasibility_tol:
            raise ValueError(f"couplings 0 and {i} disagree on the shared marginal by {gap:.3e}")
    total = 0.0
    for plan in couplings:
        total += plan.cost() + prob.eps * plan.entropy()
    return total
