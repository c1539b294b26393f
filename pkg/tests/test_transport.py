"""Entropic transport: entropies, Sinkhorn, exact 1-D oracle, blocks, sweeps."""

import math

import numpy as np
import pytest

import oracles
from entroflow import (
    DiscreteMeasure,
    NumericalBlowupError,
    TransportPlan,
    block_approximation,
    build_grid,
    exact_w2_1d,
    gamma_sweep,
    relative_entropy_measure,
    relative_entropy_plan,
    sinkhorn,
    transport_cost,
    w2_eps,
)

# Closed-form off-diagonal mass of the symmetric two-point instance,
# t(eps) = (1/2) e^{-1/eps} / (1 + e^{-1/eps}); the frozen digits were
# produced by oracles.two_point_best_t (bounded scalar minimization).
TWO_POINT_T = {0.25: 0.008993104981, 1.0: 0.134470710685, 4.0: 0.218911749557}


def closed_form_t(eps):
    q = math.exp(-1.0 / eps)
    return 0.5 * q / (1.0 + q)


def two_point_grid():
    # p=2 with unit spacing: points at 0 and 1, cell volume 1
    return build_grid(1, 2, extent=(-0.5, 1.5))


def smooth_bumps(p=64, seed=5):
    """Two well-separated smooth random mixture marginals on [0,1]."""
    rng = np.random.default_rng(seed)
    grid = build_grid(1, p)
    x = grid.axis_points(0)

    def bump(centers, widths, heights):
        d = np.zeros_like(x)
        for c, w, h in zip(centers, widths, heights):
            d += h * np.exp(-((x - c) ** 2) / (2 * w**2))
        return d + 1e-9

    mu = DiscreteMeasure.from_density(
        grid, bump(rng.uniform(0.1, 0.35, 2), rng.uniform(0.03, 0.08, 2), rng.uniform(0.5, 1.5, 2))
    )
    nu = DiscreteMeasure.from_density(
        grid, bump(rng.uniform(0.65, 0.9, 2), rng.uniform(0.03, 0.08, 2), rng.uniform(0.5, 1.5, 2))
    )
    return grid, mu, nu


# ---------------------------------------------------------------------------
# entropies


def test_measure_entropy_uniform_is_zero():
    grid = build_grid(1, 32)
    assert relative_entropy_measure(DiscreteMeasure.uniform(grid)) == pytest.approx(0.0, abs=1e-13)


def test_measure_entropy_point_mass():
    grid = build_grid(1, 16)
    h1 = relative_entropy_measure(DiscreteMeasure.point_mass(grid, 3))
    assert h1 == pytest.approx(math.log(16), rel=1e-14)


def test_measure_entropy_arithmetic_example():
    grid = build_grid(1, 2)
    mu = DiscreteMeasure(grid, [0.75, 0.25])
    want = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    assert relative_entropy_measure(mu) == pytest.approx(want, rel=1e-14)
    assert want == pytest.approx(0.1308120359, abs=1e-10)


def test_measure_entropy_ignores_zero_weights():
    grid = build_grid(1, 4)
    mu = DiscreteMeasure(grid, [0.5, 0.5, 0.0, 0.0])
    assert np.isfinite(relative_entropy_measure(mu))


def test_plan_entropy_product_of_uniforms():
    grid = build_grid(1, 8)
    u = DiscreteMeasure.uniform(grid).weights
    plan = TransportPlan.from_dense(grid, np.outer(u, u))
    assert relative_entropy_plan(plan) == pytest.approx(0.0, abs=1e-13)


def test_plan_entropy_one_cell():
    grid = build_grid(1, 2)  # l = 1/2
    m = np.zeros((2, 2))
    m[0, 1] = 1.0
    plan = TransportPlan.from_dense(grid, m)
    assert relative_entropy_plan(plan) == pytest.approx(math.log(4.0), rel=1e-14)


def test_plan_entropy_additivity_on_products():
    grid = build_grid(1, 16)
    rng = np.random.default_rng(2)
    mu = DiscreteMeasure.from_unnormalized(grid, rng.random(16) + 0.05)
    nu = DiscreteMeasure.from_unnormalized(grid, rng.random(16) + 0.05)
    plan = TransportPlan.from_dense(grid, np.outer(mu.weights, nu.weights))
    want = relative_entropy_measure(mu) + relative_entropy_measure(nu)
    assert relative_entropy_plan(plan) == pytest.approx(want, rel=1e-12)


# ---------------------------------------------------------------------------
# sinkhorn and values


def test_sinkhorn_two_point_closed_form():
    grid = two_point_grid()
    mu = DiscreteMeasure(grid, [0.5, 0.5])
    for eps, frozen in TWO_POINT_T.items():
        # the closed form itself agrees with direct numerical minimization
        assert closed_form_t(eps) == pytest.approx(frozen, abs=1e-9)
        assert oracles.two_point_best_t(eps) == pytest.approx(closed_form_t(eps), abs=1e-7)
        plan, state = sinkhorn(mu, mu, eps, tol=1e-13)
        assert state.converged
        g = plan.to_dense()
        assert g[0, 1] == pytest.approx(closed_form_t(eps), abs=1e-10)
        assert g[1, 0] == pytest.approx(closed_form_t(eps), abs=1e-10)
        assert transport_cost(plan) == pytest.approx(2 * closed_form_t(eps), abs=2e-10)


def test_sinkhorn_singleton_feasible_instance():
    grid = two_point_grid()
    mu = DiscreteMeasure(grid, [1.0, 0.0])
    nu = DiscreteMeasure(grid, [0.0, 1.0])
    for eps in (0.5, 2.0):
        plan, state = sinkhorn(mu, nu, eps, tol=1e-12)
        g = plan.to_dense()
        assert g[0, 1] == pytest.approx(1.0, abs=1e-12)
        assert transport_cost(plan) == pytest.approx(1.0, abs=1e-12)
        # value = cost + eps * log(1/l^2) with l = 1
        assert plan.value() == pytest.approx(1.0, abs=1e-10)


def test_w2_eps_singleton_value_with_small_cells():
    grid = build_grid(1, 2)  # points 0.25/0.75, l = 1/2, cost 0.25
    mu = DiscreteMeasure(grid, [1.0, 0.0])
    nu = DiscreteMeasure(grid, [0.0, 1.0])
    for eps in (0.1, 1.0):
        val = w2_eps(mu, nu, eps, tol=1e-12)
        assert val == pytest.approx(0.25 + eps * math.log(4.0), rel=1e-10)


def test_sinkhorn_product_limit_at_large_eps():
    grid = build_grid(1, 8)
    rng = np.random.default_rng(9)
    mu = DiscreteMeasure.from_unnormalized(grid, rng.random(8) + 0.1)
    nu = DiscreteMeasure.from_unnormalized(grid, rng.random(8) + 0.1)
    plan, _ = sinkhorn(mu, nu, 1e3, tol=1e-12)
    gap = np.max(np.abs(plan.to_dense() - np.outer(mu.weights, nu.weights)))
    assert gap <= 1e-3


def test_w2_eps_product_limit_value():
    grid = build_grid(1, 8)
    mu = DiscreteMeasure.uniform(grid)
    eps = 1e3
    val = w2_eps(mu, mu, eps, tol=1e-12)
    prod = TransportPlan.from_dense(grid, np.outer(mu.weights, mu.weights))
    want = transport_cost(prod) + eps * 2 * relative_entropy_measure(mu)
    # the optimizer sits O(1/eps) below the product-plan value
    assert want - 1e-4 <= val <= want + 1e-12


def test_two_point_value_matches_substituted_closed_form():
    grid = two_point_grid()
    mu = DiscreteMeasure(grid, [0.5, 0.5])
    t = closed_form_t(1.0)
    want = oracles.two_point_value(t, 1.0)
    assert w2_eps(mu, mu, 1.0, tol=1e-13) == pytest.approx(want, abs=1e-10)


def test_w2_eps_symmetry():
    grid, mu, nu = smooth_bumps(48, seed=13)
    for eps in (1e-1, 1e-2):
        a = w2_eps(mu, nu, eps, tol=1e-11)
        b = w2_eps(nu, mu, eps, tol=1e-11)
        assert a == pytest.approx(b, abs=1e-10)


def test_sinkhorn_marginal_feasibility_seeded():
    rng = np.random.default_rng(31)
    for trial in range(4):
        p = int(rng.integers(8, 48))
        grid = build_grid(1, p)
        mu = DiscreteMeasure.from_unnormalized(grid, rng.random(p) + 0.02)
        nu = DiscreteMeasure.from_unnormalized(grid, rng.random(p) + 0.02)
        eps = float(10 ** rng.uniform(-3, -1))
        plan, state = sinkhorn(mu, nu, eps, tol=1e-8)
        assert state.converged
        g = plan.to_dense()
        assert np.abs(g.sum(axis=1) - mu.weights).sum() <= 1e-8
        assert np.abs(g.sum(axis=0) - nu.weights).sum() <= 1e-8
        assert g.sum() == pytest.approx(1.0, abs=1e-10)
        assert np.all(g >= 0)


def test_sinkhorn_zero_marginal_rows_stay_zero():
    grid = build_grid(1, 8)
    mu = DiscreteMeasure(grid, [0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0])
    nu = DiscreteMeasure(grid, [0.0, 0.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25])
    plan, _ = sinkhorn(mu, nu, 0.05, tol=1e-10)
    g = plan.to_dense()
    assert np.all(g[mu.weights == 0.0, :] == 0.0)
    assert np.all(g[:, nu.weights == 0.0] == 0.0)


def test_stabilized_matches_naive_where_naive_survives():
    grid, mu, nu = smooth_bumps(32, seed=17)
    for eps in (1e-1, 3e-2, 1e-2):
        ps, _ = sinkhorn(mu, nu, eps, tol=1e-11, stabilized=True)
        pn, _ = sinkhorn(mu, nu, eps, tol=1e-11, stabilized=False)
        assert np.max(np.abs(ps.to_dense() - pn.to_dense())) <= 1e-8


def test_naive_mode_reports_blowup_at_tiny_eps():
    grid, mu, nu = smooth_bumps(32, seed=17)
    with pytest.raises(NumericalBlowupError):
        sinkhorn(mu, nu, 1e-6, stabilized=False)


def test_entropy_superadditive_on_solver_outputs_and_mixtures():
    grid, mu, nu = smooth_bumps(32, seed=21)
    h1_sum = relative_entropy_measure(mu) + relative_entropy_measure(nu)

    for eps in (1e-1, 1e-2, 1e-3):
        plan, _ = sinkhorn(mu, nu, eps, tol=1e-10)
        assert relative_entropy_plan(plan) >= h1_sum - 1e-12

    # equality exactly at the product plan
    product = np.outer(mu.weights, nu.weights)
    h_prod = relative_entropy_plan(TransportPlan.from_dense(grid, product))
    assert h_prod == pytest.approx(h1_sum, abs=1e-12)

    # random feasible plans: convex mixtures of the product plan with the
    # cost-minimizing and cost-maximizing vertices (both marginal-feasible)
    c = oracles.dense_cost(grid)
    _, lo_plan = oracles.lp_transport(mu.weights, nu.weights, c)
    _, hi_plan = oracles.lp_transport(mu.weights, nu.weights, -c)
    rng = np.random.default_rng(100)
    for _ in range(100):
        w = rng.dirichlet((1.0, 1.0, 1.0))
        gamma = w[0] * product + w[1] * lo_plan + w[2] * hi_plan
        h2 = relative_entropy_plan(TransportPlan.from_dense(grid, gamma))
        assert h2 >= h1_sum - 1e-12
        if w[0] < 0.98:  # visibly away from the product plan
            assert h2 > h1_sum + 1e-6


def test_moment_bound_on_random_instances():
    rng = np.random.default_rng(41)
    for _ in range(6):
        p = int(rng.integers(8, 40))
        grid = build_grid(1, p, extent=(-1.0, 2.0))
        mu = DiscreteMeasure.from_unnormalized(grid, rng.random(p) + 0.01)
        nu = DiscreteMeasure.from_unnormalized(grid, rng.random(p) + 0.01)
        w2, _ = exact_w2_1d(mu, nu)
        assert nu.second_moment() <= 2.0 * mu.second_moment() + 2.0 * w2 + 1e-12


# ---------------------------------------------------------------------------
# exact 1-D oracle


def test_exact_w2_identical_marginals():
    grid = build_grid(1, 12)
    rng = np.random.default_rng(1)
    mu = DiscreteMeasure.from_unnormalized(grid, rng.random(12) + 0.1)
    val, plan = exact_w2_1d(mu, mu)
    assert val == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(plan, np.diag(mu.weights))


def test_exact_w2_two_point_masses():
    grid = build_grid(1, 8)
    x = grid.axis_points(0)
    mu = DiscreteMeasure.point_mass(grid, 1)
    nu = DiscreteMeasure.point_mass(grid, 6)
    val, plan = exact_w2_1d(mu, nu)
    assert val == pytest.approx((x[6] - x[1]) ** 2, rel=1e-14)
    assert plan[1, 6] == pytest.approx(1.0)


def test_exact_w2_matches_lp_oracle():
    rng = np.random.default_rng(77)
    for p in (4, 9, 16):
        grid = build_grid(1, p)
        mu = DiscreteMeasure.from_unnormalized(grid, rng.random(p) + 0.01)
        nu = DiscreteMeasure.from_unnormalized(grid, rng.random(p) + 0.01)
        val, plan = exact_w2_1d(mu, nu)
        lp_val, _ = oracles.lp_transport(mu.weights, nu.weights, oracles.dense_cost(grid))
        assert val == pytest.approx(lp_val, abs=1e-12)
        # the monotone plan is feasible
        assert np.abs(plan.sum(axis=1) - mu.weights).max() <= 1e-14
        assert np.abs(plan.sum(axis=0) - nu.weights).max() <= 1e-14


def test_exact_w2_rejects_2d():
    grid = build_grid(2, 4)
    mu = DiscreteMeasure.uniform(grid)
    with pytest.raises(ValueError):
        exact_w2_1d(mu, mu)


# ---------------------------------------------------------------------------
# block approximation


def random_feasible_plan(p, seed):
    rng = np.random.default_rng(seed)
    grid = build_grid(1, p)
    gamma = rng.random((p, p)) + 0.01
    gamma /= gamma.sum()
    mu = DiscreteMeasure(grid, gamma.sum(axis=1))
    nu = DiscreteMeasure(grid, gamma.sum(axis=0))
    return grid, gamma, mu, nu


def test_block_single_cell_identity():
    grid, gamma, mu, nu = random_feasible_plan(8, 3)
    h = grid.cell_volume
    out = block_approximation(gamma, mu, nu, h).to_dense()
    assert np.array_equal(out, gamma)


def test_block_full_domain_gives_product():
    grid, gamma, mu, nu = random_feasible_plan(8, 4)
    out = block_approximation(gamma, mu, nu, 1.0).to_dense()
    assert np.allclose(out, np.outer(mu.weights, nu.weights), atol=1e-15)


def test_block_preserves_marginals_and_block_masses():
    grid, gamma, mu, nu = random_feasible_plan(8, 5)
    h = grid.cell_volume
    out = block_approximation(gamma, mu, nu, 2 * h).to_dense()
    assert np.abs(out.sum(axis=1) - mu.weights).max() <= 1e-12
    assert np.abs(out.sum(axis=0) - nu.weights).max() <= 1e-12
    # mass of every 2x2-cell block pair is untouched
    for bi in range(4):
        for bj in range(4):
            s = np.s_[2 * bi : 2 * bi + 2, 2 * bj : 2 * bj + 2]
            assert out[s].sum() == pytest.approx(gamma[s].sum(), abs=1e-15)


def test_block_cost_converges_as_scale_halves():
    grid, gamma, mu, nu = random_feasible_plan(16, 6)
    h = grid.cell_volume
    c = oracles.dense_cost(grid)
    base = float((gamma * c).sum())
    gaps = []
    for cells in (8, 4, 2, 1):
        out = block_approximation(gamma, mu, nu, cells * h).to_dense()
        gaps.append(abs(float((out * c).sum()) - base))
    assert all(gaps[i + 1] <= gaps[i] + 1e-15 for i in range(len(gaps) - 1))
    assert gaps[-1] == pytest.approx(0.0, abs=1e-15)


def test_block_rejects_bad_scales():
    grid, gamma, mu, nu = random_feasible_plan(8, 7)
    h = grid.cell_volume
    with pytest.raises(ValueError):
        block_approximation(gamma, mu, nu, 1.5 * h)
    with pytest.raises(ValueError):
        block_approximation(gamma, mu, nu, 3 * h)  # 3 does not divide 8


def test_block_2d_marginals():
    rng = np.random.default_rng(8)
    grid = build_grid(2, 4)
    gamma = rng.random((16, 16)) + 0.01
    gamma /= gamma.sum()
    mu = DiscreteMeasure(grid, gamma.sum(axis=1))
    nu = DiscreteMeasure(grid, gamma.sum(axis=0))
    out = block_approximation(gamma, mu, nu, 2 * grid.spacing[0]).to_dense()
    assert np.abs(out.sum(axis=1) - mu.weights).max() <= 1e-12
    assert np.abs(out.sum(axis=0) - nu.weights).max() <= 1e-12


# ---------------------------------------------------------------------------
# gamma sweep


def test_gamma_sweep_requires_decreasing_eps():
    grid, mu, nu = smooth_bumps(16, seed=2)
    with pytest.raises(ValueError):
        gamma_sweep(mu, nu, [1e-2, 1e-1])


def test_gamma_sweep_self_transport_cost_vanishes():
    grid = build_grid(1, 24)
    x = grid.axis_points(0)
    mu = DiscreteMeasure.from_density(grid, np.exp(-30 * (x - 0.5) ** 2))
    report = gamma_sweep(mu, mu, [1e-1, 1e-2, 1e-3], tol=1e-10)
    assert report.exact_value == pytest.approx(0.0, abs=1e-15)
    costs = report.costs
    assert all(costs[i + 1] < costs[i] for i in range(len(costs) - 1))
    assert costs[-1] < 1e-3


def test_gamma_sweep_shifted_gaussians():
    grid, mu, nu = smooth_bumps(48, seed=33)
    report = gamma_sweep(mu, nu, [1e-1, 1e-2, 1e-3], tol=1e-10)
    gaps = report.value_gap
    assert all(gaps[i + 1] < gaps[i] for i in range(len(gaps) - 1))
    l1 = report.plan_l1_to_exact
    assert all(l1[i + 1] < l1[i] for i in range(len(l1) - 1))
    assert all(report.bracket_cost_ok)
    assert all(report.bracket_value_ok)
    rows = list(report.rows())
    assert len(rows) == 3 and rows[0]["eps"] == 1e-1
