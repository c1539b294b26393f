"""Entropic minimizing-movement (JKO) time stepping for diffusion flows.

One implicit step of size tau from rho_k minimizes

    J(rho_k, rho) = (1/2 tau) W2_eps(rho_k, rho) + F(rho)

over probability vectors rho.  In Kullback-Leibler form this is

    min_gamma  KL(gamma | K) + f(gamma 1) + g(gamma^T 1),

with f the indicator pinning the first marginal to rho_k and
g = kappa F, kappa = 2 tau / eps.  Alternating KL projections give the
scaling iteration

    a <- rho_k / (K b),      b <- Prox_g(K^T a) / (K^T a),

run here entirely in log space; the new iterate is the second marginal,
rho_{k+1} = Prox_g(K^T a) evaluated after the final update.  Each step
warm-starts from the previous step's b scaling.

The regularization must shrink faster than the step: the flow records
whether eps |log eps| <= C tau^2 holds and warns when it does not.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .energy import (
    EnergyModel,
    PotentialField,
    _grid_divergence,
    _log_pointwise_prox,
    first_variation,
    free_energy,
)
from .grid import DiscreteMeasure, Grid, _log_gibbs_apply
from .transport import (
    NonConvergenceError,
    TransportPlan,
    _AndersonAccelerator,
    _exp_capped,
    self_transport,
)

__all__ = [
    "FlowParams",
    "StepDiagnostics",
    "FlowTrajectory",
    "schedule_check",
    "jko_step",
    "run_flow",
    "interpolate",
    "el_residual",
]


def schedule_check(eps, tau, c=1000.0):
    """Whether eps |log eps| <= c tau^2; requires eps in (0, 1)."""
    if not 0 < eps < 1:
        raise ValueError(f"schedule check needs eps in (0, 1), got {eps}")
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return bool(eps * abs(math.log(eps)) <= c * tau * tau)


@dataclass(frozen=True)
class FlowParams:
    """Step size, regularization, frame count, and schedule constant.

    n_steps counts frames: the trajectory holds measures rho^0 ...
    rho^(n_steps - 1), i.e. n_steps - 1 implicit updates, covering the
    window [0, n_steps * tau) under piecewise-constant interpolation.
    """

    eps: float
    tau: float
    n_steps: int
    schedule_constant: float = 1000.0

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def kappa(self):
        return 2.0 * self.tau / self.eps

    @property
    def horizon(self):
        return self.n_steps * self.tau

    @property
    def schedule_ok(self):
        if not self.eps < 1:
            return False
        return schedule_check(self.eps, self.tau, self.schedule_constant)


@dataclass
class StepDiagnostics:
    k: int
    t: float
    free_energy: float
    transport_cost: float
    iterations: int
    marginal_residual: float
    renorm_drift: float
    converged: bool
    step_objective: float | None = None
    stay_objective: float | None = None


@dataclass
class FlowTrajectory:
    """Piecewise-constant-in-time output of a flow run."""

    grid: Grid
    params: FlowParams
    measures: list
    diagnostics: list = field(default_factory=list)
    aborted: bool = False
    error: str | None = None

    def measure_at(self, t):
        return interpolate(self, t)

    @property
    def times(self):
        return [k * self.params.tau for k in range(len(self.measures))]


def interpolate(traj, t):
    """rho-bar(t) = rho^k for t in [k tau, (k+1) tau); left-closed frames."""
    tau = traj.params.tau
    n = len(traj.measures)
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    # nudge by a relative epsilon so t = k tau lands on frame k despite rounding
    k = int(math.floor(t / tau + 1e-9))
    if k >= n:
        raise ValueError(f"t={t!r} beyond the trajectory window [0, {n * tau!r})")
    return traj.measures[k]


class _StepResult:
    def __init__(self, measure, diagnostics, log_b, plan, stay_log_g=None):
        self.measure = measure
        self.diagnostics = diagnostics
        self.log_b = log_b
        self.plan = plan
        self.stay_log_g = stay_log_g


RENORM_DRIFT_BOUND = 1e-10


def jko_step(
    rho_k,
    model,
    pot,
    params,
    *,
    step_tol=1e-9,
    max_iter=50_000,
    warm_log_b=None,
    k=0,
    compute_objectives=False,
    stay_tol=None,
    stay_init_log_g=None,
):
    """One implicit step; returns (measure, StepDiagnostics).

    Stops when the L1 change of the rho_{k+1} estimate between outer
    iterations and the first-marginal residual both fall below step_tol.
    Non-convergence raises NonConvergenceError.  With
    compute_objectives=True the diagnostics carry the step objective
    J(rho_k, rho_{k+1}) and the stay-put objective J(rho_k, rho_k), the
    latter via an auxiliary self-transport solve; a failed stay solve
    leaves stay_objective as NaN rather than failing the step.
    """
    res = _jko_step_impl(
        rho_k,
        model,
        pot,
        params,
        step_tol=step_tol,
        max_iter=max_iter,
        warm_log_b=warm_log_b,
        k=k,
        compute_objectives=compute_objectives,
        stay_tol=stay_tol,
        stay_init_log_g=stay_init_log_g,
    )
    return res.measure, res.diagnostics


_STAGE_TOL = 1e-5  # inner tolerance while walking the continuation ladder
_STAGE_ITER_CAP = 1_000  # sweep cap per continuation stage
_WARM_ITER_CAP = 500  # warm-start attempt cap before falling back
_STALL_CHECK_EVERY = 50  # unconditional residual checks this often
_STALL_COOLOFF = 100  # unmixed sweeps after a stagnant residual
_EXPLORE_FRACTION = 0.01  # of h^2: below this the sweeps walk kinks (see _scaling_loop)
_MIX_DEPTHS = (5, 10, 20)  # mixing depths cycled across stall restarts
_LADDER_RATIOS = (2.0, 4.0, 3.0)  # continuation schedules tried in turn
_ATTEMPT_ITER_CAP = 15_000  # final-stage cap per non-last ladder attempt
_WINDOW_GAIN = 0.98  # a window must shrink the residual by 2% to count


class _ScalingState:
    def __init__(self, log_a, log_b, log_w, iterations, residual, converged):
        self.log_a = log_a
        self.log_b = log_b
        self.log_w = log_w
        self.iterations = iterations
        self.residual = residual
        self.converged = converged


def _eps_ladder(grid, eps, ratio=2.0):
    """Continuation ladder from the kernel-resolving scale down to eps.

    Far below h^2 the Gibbs kernel is numerically near-diagonal and a
    fresh solve must grow dual scalings of size O(h^2/eps) one capacity
    kink at a time, which can take millions of sweeps.  Solving a
    geometric sequence of easier problems and rescaling the log scalings
    between stages (the potentials eps*log b vary slowly with eps)
    reaches the same unique fixed point in far fewer sweeps.  Returns
    [eps] when no continuation is needed.
    """
    h2 = max(s * s for s in grid.spacing)
    if eps >= h2:
        return [eps]
    # gentle ratios keep the rescaled scalings close enough to the next
    # stage's fixed point that the sweeps stay connected across the active
    # set.  Too-aggressive jumps (or overconverging the intermediate
    # stages) can land the iterate on a spurious machine fixed point of
    # the next stage's sweep map -- a frozen state whose plain update is
    # an exact no-op while still infeasible -- from which no number of
    # sweeps recovers.  Which schedule avoids that is instance-dependent,
    # so the step driver retries failed solves across several ratios.
    ladder = []
    e = h2
    while e > 2.0 * eps:
        ladder.append(e)
        e /= ratio
    ladder.append(eps)
    return ladder


def _scaling_loop(
    grid, eps, kappa, model, pot, rho_weights, log_rho, log_b, *, tol, iter_cap, k, explore=False
):
    """Prox-scaling sweeps at one eps until tol or iter_cap; never raises
    for plain non-convergence (the caller decides), only for NaN.

    Stall handling must serve two opposite regimes, chosen by `explore`.

    Deep below the kernel-resolving scale (eps << h^2, explore=True) the
    fixed point is reached by walking capacity kinks one at a time:
    progress is non-monotone in the marginal residual, the plain sweep
    does the productive walking, and the mixing only helps in short
    bursts between plateaus.  Worse, the sweep map there has spurious
    machine fixed points (exact no-ops while still infeasible), and the
    mixing history is the only remaining source of motion.  So in this
    regime the accelerator is benched whenever a check fails to improve
    on the best residual seen, uphill moves are never reverted, and no
    grace period protects a refilling history.

    In the kink-limited slow mode (moderate eps with a saturated block,
    explore=False) the plain sweep crawls at rate 1 - O(e^{-h^2/eps}) and
    sustained mixing is the only thing that converges in reasonable time;
    but after a transient bounce the plain sweep may be unable to re-reach
    the best mark for thousands of sweeps, so judging against an all-time
    best would keep the accelerator permanently reset.  Here progress is
    judged window over window, judgment pauses during a cooloff plus one
    grace window, the best iterate is checkpointed, and a stalled or
    wandering mixing phase is restored to that frontier so it can only
    help, never durably harm.
    """
    import os as _os

    _dbg = bool(_os.environ.get("ENTROFLOW_TRACE"))
    l = grid.cell_volume
    kv = kappa * pot.values

    # the sweep contracts like kappa/(1+kappa), which is slow for
    # kappa = 2 tau / eps >> 1; Anderson mixing on log_b removes the slow
    # modes, with a cooloff when it locks onto a spurious kink point
    accel = _AndersonAccelerator()
    prev = None
    log_a = None
    log_w = None
    residual = math.inf
    converged = False
    iterations = 0
    hold = 0
    freeze_ref = None
    freeze_it = 0
    window_ref = None
    best_residual = math.inf
    best_log_b = None
    depth_idx = 0
    fire_ref = math.inf
    while iterations < iter_cap:
        iterations += 1
        accel.start(log_b)
        log_Kb = _log_gibbs_apply(grid, eps, log_b)
        log_a = log_rho - log_Kb
        log_Ka = _log_gibbs_apply(grid, eps, log_a, transpose=True)
        log_w = _log_pointwise_prox(model, kappa, l, log_Ka - kv)
        log_b = log_w - log_Ka
        rho_next = np.exp(log_w)
        if np.any(np.isnan(rho_next)):
            raise NonConvergenceError(f"step {k}: scaling iteration produced NaN at eps={eps!r}")
        if hold > 0:
            hold -= 1
        drift_small = prev is not None and float(np.abs(rho_next - prev).sum()) <= tol
        spaced = iterations % _STALL_CHECK_EVERY == 0
        if drift_small or spaced:
            m1 = _exp_capped(log_a + _log_gibbs_apply(grid, eps, log_b))
            residual = float(np.abs(m1 - rho_weights).sum())
            if _dbg and spaced:
                print(
                    f"TRACE it={iterations} res={residual:.3e} best={best_residual:.3e} "
                    f"hold={hold} depth={accel.depth}",
                    flush=True,
                )
            if drift_small and residual <= tol:
                converged = True
                break
            if explore:
                if residual > best_residual * (1.0 - 1e-6):
                    accel.cooloff(_STALL_COOLOFF)
                best_residual = min(best_residual, residual)
            else:
                if residual < best_residual:
                    best_residual = residual
                    best_log_b = log_b.copy()
                if hold == 0:
                    frozen = (
                        drift_small
                        and freeze_ref is not None
                        and iterations == freeze_it + 1
                        and abs(residual - freeze_ref) <= 1e-9 * residual
                    )
                    # a mixing phase well above the frontier is wandering,
                    # not converging non-monotonically; judge it against
                    # the checkpoint directly, since rebaselining the
                    # window on wandered values would read fluctuation as
                    # progress and let the phase run unjudged indefinitely
                    # a healthy mixing phase collapses the slow modes by
                    # orders of magnitude in a few hundred sweeps, while
                    # the plain-rate crawl gains ~1e-5 per window: demand
                    # a material per-window gain, or the crawl would pass
                    # for progress until the budget ran out
                    wandered = spaced and residual > 1.5 * best_residual
                    window_stalled = (
                        spaced
                        and window_ref is not None
                        and residual > window_ref * _WINDOW_GAIN
                    )
                    if frozen or wandered or window_stalled:
                        if _dbg:
                            print(
                                f"TRACE FIRE it={iterations} frozen={frozen} "
                                f"wandered={wandered} window={window_stalled} "
                                f"res={residual:.3e} best={best_residual:.3e} "
                                f"restore={best_log_b is not None and best_residual < residual}",
                                flush=True,
                            )
                        # a stall can mean the history span did not cover
                        # the problem's slow modes (a saturated block
                        # contributes one per cell, so the covering depth
                        # is instance-dependent): advance to the next
                        # depth, but keep one that moved the frontier
                        # since the previous restart -- its stall is just
                        # a bounce, not a verdict on the depth
                        if best_residual >= fire_ref * _WINDOW_GAIN:
                            depth_idx = (depth_idx + 1) % len(_MIX_DEPTHS)
                        fire_ref = best_residual
                        accel.cooloff(_STALL_COOLOFF, depth=_MIX_DEPTHS[depth_idx])
                        hold = _STALL_COOLOFF + _STALL_CHECK_EVERY
                        window_ref = None
                        freeze_ref = None
                        if best_log_b is not None and best_residual < residual:
                            log_b = best_log_b.copy()
                            prev = None
                            continue
                if drift_small:
                    freeze_ref = residual
                    freeze_it = iterations
                if spaced and hold == 0:
                    window_ref = residual
        prev = rho_next
        log_b = accel.push(log_b)
    return _ScalingState(log_a, log_b, log_w, iterations, residual, converged)


def _jko_step_impl(
    rho_k,
    model,
    pot,
    params,
    *,
    step_tol,
    max_iter,
    warm_log_b,
    k,
    compute_objectives,
    stay_tol,
    stay_init_log_g=None,
):
    grid = rho_k.grid
    eps = params.eps
    if pot is None:
        pot = PotentialField.zero(grid)
    with np.errstate(divide="ignore"):
        log_rho = np.log(rho_k.weights)

    h2 = max(s * s for s in grid.spacing)
    iterations = 0
    state = None
    if warm_log_b is not None:
        # a carried-over scaling usually converges in a few sweeps; cap the
        # attempt so a stale one (whose iterates sit in a bad basin for the
        # mixed sweeps) falls through to a fresh solve instead of burning
        # the whole budget
        cap = min(max_iter, _WARM_ITER_CAP)
        state = _scaling_loop(
            grid,
            eps,
            params.kappa,
            model,
            pot,
            rho_k.weights,
            log_rho,
            warm_log_b.copy(),
            tol=step_tol,
            iter_cap=cap,
            k=k,
            explore=eps < _EXPLORE_FRACTION * h2,
        )
        iterations += state.iterations
    if state is None or not state.converged:
        # fresh solves walk an eps-continuation ladder.  Deep below the
        # kernel scale the outcome is path-dependent -- a given schedule
        # can land a stage on a frozen machine fixed point -- so a failed
        # attempt is retried along a genuinely different path (another
        # stage ratio) under the same shared iteration budget.  Every
        # attempt but the last caps its final stage so one frozen attempt
        # cannot starve the rest of the portfolio.
        for ai, ratio in enumerate(_LADDER_RATIOS):
            ladder = _eps_ladder(grid, eps, ratio)
            log_b = np.zeros(grid.n_points)
            for si, eps_s in enumerate(ladder):
                final = si == len(ladder) - 1
                budget = max(max_iter - iterations, 1)
                if final and ai < len(_LADDER_RATIOS) - 1:
                    budget = min(budget, _ATTEMPT_ITER_CAP)
                state = _scaling_loop(
                    grid,
                    eps_s,
                    2.0 * params.tau / eps_s,
                    model,
                    pot,
                    rho_k.weights,
                    log_rho,
                    log_b,
                    tol=step_tol if final else max(step_tol, _STAGE_TOL),
                    iter_cap=budget if final else min(_STAGE_ITER_CAP, budget),
                    k=k,
                    explore=eps_s < _EXPLORE_FRACTION * h2,
                )
                iterations += state.iterations
                log_b = state.log_b
                if not final:
                    log_b = log_b * (eps_s / ladder[si + 1])
            if state.converged or iterations >= max_iter or len(ladder) == 1:
                break
        if not state.converged:
            raise NonConvergenceError(
                f"step {k}: no convergence in {max_iter} iterations "
                f"(residual {state.residual!r})"
            )

    log_a = state.log_a
    log_b = state.log_b
    rho_next = np.exp(state.log_w)
    residual = state.residual

    total = float(rho_next.sum())
    drift = abs(total - 1.0)
    measure = DiscreteMeasure(grid, rho_next / total)
    plan = TransportPlan(grid, eps=eps, log_a=log_a, log_b=log_b)

    step_obj = None
    stay_obj = None
    stay_log_g = None
    if compute_objectives:
        # the converged coupling is optimal for its own marginals, so its
        # value is W2_eps(rho_k, rho_{k+1}) up to solver slack
        w2_step = plan.cost() + eps * plan.entropy()
        step_obj = w2_step / (2.0 * params.tau) + free_energy(model, pot, measure)
        tol = stay_tol if stay_tol is not None else max(step_tol, 1e-10)
        stay_plan, stay_state = self_transport(
            rho_k, eps, tol=tol, max_iter=max_iter, init_log_g=stay_init_log_g
        )
        stay_log_g = stay_state.log_a
        if stay_state.converged:
            stay_obj = stay_plan.value() / (2.0 * params.tau) + free_energy(model, pot, rho_k)
        else:
            stay_obj = math.nan

    diag = StepDiagnostics(
        k=k,
        t=k * params.tau,
        free_energy=free_energy(model, pot, measure),
        transport_cost=plan.cost(),
        iterations=iterations,
        marginal_residual=residual,
        renorm_drift=drift,
        converged=state.converged,
        step_objective=step_obj,
        stay_objective=stay_obj,
    )
    return _StepResult(measure, diag, log_b, plan, stay_log_g=stay_log_g)


def run_flow(
    rho0,
    model,
    pot,
    params,
    *,
    step_tol=1e-9,
    max_iter=50_000,
    diagnostics=True,
    keep_last_plan=False,
):
    """Run n_steps - 1 implicit updates from rho0.

    Warm-starts each step's scaling from the previous step.  A step
    failure aborts and returns the partial trajectory with the error
    recorded.  For the congestion model the box must have capacity >= 1
    (n_points * cell_volume >= total mass), else the flow is infeasible.
    """
    grid = rho0.grid
    if pot is None:
        pot = PotentialField.zero(grid)
    if pot.grid.key() != grid.key():
        raise ValueError("potential and initial measure live on different grids")
    if model.kind == EnergyModel.CONGESTION:
        capacity = grid.n_points * grid.cell_volume
        if capacity < 1.0 - 1e-12:
            raise ValueError(f"congestion flow infeasible: box capacity {capacity} < total mass 1")
        if np.any(rho0.densities > 1.0 + 1e-12):
            raise ValueError("initial density exceeds the congestion capacity")
    if params.eps < 1 and not params.schedule_ok:
        warnings.warn(
            f"schedule violated: eps|log eps| = {params.eps * abs(math.log(params.eps)):.3e} "
            f"> {params.schedule_constant:g} * tau^2 = {params.schedule_constant * params.tau**2:.3e}",
            RuntimeWarning,
            stacklevel=2,
        )

    traj = FlowTrajectory(grid=grid, params=params, measures=[rho0])
    start = StepDiagnostics(
        k=0,
        t=0.0,
        free_energy=free_energy(model, pot, rho0),
        transport_cost=0.0,
        iterations=0,
        marginal_residual=0.0,
        renorm_drift=0.0,
        converged=True,
    )
    traj.diagnostics.append(start)

    log_b = None
    rho = rho0
    last_plan = None
    for k in range(1, params.n_steps):
        # The stay-put solve is cheap from a fresh start (the damped
        # symmetric sweep contracts at a fixed rate) but can crawl from a
        # stale carried-over scaling, so it is never warm-started.
        try:
            res = _jko_step_impl(
                rho,
                model,
                pot,
                params,
                step_tol=step_tol,
                max_iter=max_iter,
                warm_log_b=log_b,
                k=k,
                compute_objectives=diagnostics,
                stay_tol=None,
            )
        except NonConvergenceError as exc:
            # A stale warm start can pin the scalings when the support moves
            # into cells whose carried-over potential is far off; at small eps
            # the iteration cannot unwind it.  Retry the step once from a
            # fresh initialization before giving up.
            res = None
            if log_b is not None:
                try:
                    res = _jko_step_impl(
                        rho,
                        model,
                        pot,
                        params,
                        step_tol=step_tol,
                        max_iter=max_iter,
                        warm_log_b=None,
                        k=k,
                        compute_objectives=diagnostics,
                        stay_tol=None,
                    )
                except NonConvergenceError:
                    res = None
            if res is None:
                traj.aborted = True
                traj.error = str(exc)
                return traj
        rho = res.measure
        log_b = res.log_b
        last_plan = res.plan
        traj.measures.append(rho)
        traj.diagnostics.append(res.diagnostics)
    if keep_last_plan:
        traj.last_plan = last_plan
    return traj


def el_residual(rho_k, rho_next, plan, model, pot, params, w):
    """Optimality residual of a converged step against a smooth velocity field.

    Evaluates

        -(1/tau) sum_ij <w(x_j), x_i - x_j> gamma_ij
        - (eps/2 tau) sum_j rho_{k+1,j} div w(x_j)
        + dF(rho_{k+1}; w),

    which tends to zero with the grid, the step tolerance, and eps.  The
    plan is densified, so the grid must be within the dense cap.
    """
    grid = rho_k.grid
    if pot is None:
        pot = PotentialField.zero(grid)
    w_field = np.asarray(w, dtype=float)
    if w_field.ndim == 1:
        w_field = w_field[:, None]
    if w_field.shape != (grid.n_points, grid.dim):
        raise ValueError(f"velocity field must be {(grid.n_points, grid.dim)}, got {w_field.shape}")
    gamma = plan.to_dense()
    pts = grid.points()
    # sum_ij <w_j, x_i - x_j> gamma_ij = sum_d [ (x_d gamma)_j . w_dj - x_dj nu_j w_dj ]
    nu = gamma.sum(axis=0)
    term1 = 0.0
    for d in range(grid.dim):
        col = gamma.T @ pts[:, d]
        term1 += float(np.sum(w_field[:, d] * (col - pts[:, d] * nu)))
    div = _grid_divergence(grid, w_field)
    term2 = float(np.sum(rho_next.weights * div))
    tau = params.tau
    return (
        -term1 / tau
        - params.eps / (2.0 * tau) * term2
        + first_variation(model, pot, rho_next, w_field)
    )
