"""Energy models, pressure, Lambert W, pointwise proximal maps, first variation."""

import math

import numpy as np
import pytest
import scipy.special

import oracles
from entroflow import (
    DiscreteMeasure,
    EnergyModel,
    PotentialField,
    build_grid,
    first_variation,
    free_energy,
    lambert_w,
    pointwise_prox,
    pressure,
    prox_g,
)

HEAT = EnergyModel.heat()
POROUS2 = EnergyModel.porous_media(2.0)
CONGESTION = EnergyModel.congestion()


# ---------------------------------------------------------------------------
# pressure and energy densities


def test_pressure_values():
    assert pressure(HEAT, 2.0) == pytest.approx(2.0)
    assert pressure(POROUS2, 3.0) == pytest.approx(9.0)
    assert pressure(HEAT, 0.0) == 0.0
    assert pressure(POROUS2, 0.0) == 0.0
    assert pressure(EnergyModel.porous_media(10.0), 0.0) == 0.0


def test_pressure_rejects_congestion():
    with pytest.raises(ValueError):
        pressure(CONGESTION, 1.0)


def test_pressure_identity_with_energy_density():
    # p(s) = s u'(s) - u(s), checked by sampling
    s = np.geomspace(1e-4, 1e3, 60)
    for model in (HEAT, POROUS2, EnergyModel.porous_media(3.0), EnergyModel.porous_media(10.0)):
        lhs = pressure(model, s)
        rhs = s * model.u_prime(s) - model.u(s)
        assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-300)
        assert np.all(np.diff(lhs) >= 0)
        assert np.all(lhs >= 0)


def test_energy_density_conventions():
    assert HEAT.u(0.0) == 0.0
    assert POROUS2.u(0.0) == 0.0
    assert CONGESTION.u(0.5) == 0.0 and CONGESTION.u(1.0) == 0.0
    assert CONGESTION.u(1.1) == math.inf
    with pytest.raises(ValueError):
        HEAT.u(-1.0)
    with pytest.raises(ValueError):
        CONGESTION.u_prime(0.5)
    with pytest.raises(ValueError):
        EnergyModel.porous_media(1.0)


def test_free_energy_uniform_values():
    grid = build_grid(1, 32)
    rho = DiscreteMeasure.uniform(grid)
    zero = PotentialField.zero(grid)
    assert free_energy(HEAT, zero, rho) == pytest.approx(-1.0, rel=1e-12)
    assert free_energy(POROUS2, zero, rho) == pytest.approx(1.0, rel=1e-12)
    assert free_energy(CONGESTION, zero, rho) == 0.0


def test_free_energy_congestion_capacity_flag():
    grid = build_grid(1, 8)
    rho = DiscreteMeasure.from_unnormalized(grid, [3.0, 1, 1, 1, 1, 1, 1, 1])  # density 2.4 > 1
    assert free_energy(CONGESTION, PotentialField.zero(grid), rho) == math.inf


def test_free_energy_includes_potential_term():
    grid = build_grid(1, 16)
    rho = DiscreteMeasure.uniform(grid)
    pot = PotentialField.quadratic_well(grid, (0.5,), 100.0)
    level = free_energy(HEAT, pot, rho)
    want = float(np.sum(pot.values * rho.weights)) - 1.0
    assert level == pytest.approx(want, rel=1e-12)


# ---------------------------------------------------------------------------
# Lambert W


def test_lambert_w_fixed_values():
    assert lambert_w(0.0) == 0.0
    assert lambert_w(math.e) == pytest.approx(1.0, abs=1e-15)
    assert lambert_w(2.0) == pytest.approx(0.8526055020, abs=1e-10)


def test_lambert_w_residual_bound():
    x = np.geomspace(1e-8, 1e15, 400)
    w = lambert_w(x)
    assert np.all(w >= 0)
    resid = np.abs(w * np.exp(w) - x)
    assert np.all(resid <= 1e-14 * np.maximum(1.0, x))


def test_lambert_w_matches_scipy_oracle():
    x = np.concatenate([[0.0], np.geomspace(1e-300, 1e300, 600)])
    mine = lambert_w(x)
    ref = scipy.special.lambertw(x).real
    assert np.allclose(mine, ref, rtol=5e-15, atol=5e-16)


def test_lambert_w_rejects_negative():
    with pytest.raises(ValueError):
        lambert_w(-0.5)


# ---------------------------------------------------------------------------
# pointwise prox


def test_prox_heat_fixed_point():
    for kappa in (0.0, 0.5, 7.0):
        for l in (1.0, 0.25, 1e-3):
            assert pointwise_prox(HEAT, kappa, l, l) == pytest.approx(l, rel=1e-14)


def test_prox_porous_small_kappa_identity():
    s = 0.7
    for kappa in (1e-10, 1e-12):
        w = pointwise_prox(POROUS2, kappa, 1.0, s)
        assert w == pytest.approx(s, rel=1e-8)


def test_prox_porous_lambert_example():
    w = pointwise_prox(POROUS2, 1.0, 1.0, 1.0)
    assert w == pytest.approx(0.4263027510, abs=1e-10)
    assert w == pytest.approx(lambert_w(2.0) / 2.0, rel=1e-14)


def test_prox_congestion_clamps():
    assert pointwise_prox(CONGESTION, 1.0, 1.0, 2.0) == 1.0
    assert pointwise_prox(CONGESTION, 1.0, 1.0, 0.5) == 0.5
    assert pointwise_prox(CONGESTION, 3.0, 0.25, 2.0) == 0.25
    assert pointwise_prox(CONGESTION, 3.0, 0.25, 0.0) == 0.0


def test_prox_first_order_condition_lattice():
    s_vals = np.geomspace(1e-4, 1e2, 8)
    kappa_vals = np.geomspace(1e-3, 1e3, 8)
    l_vals = (1.0, 0.1, 1e-3)
    models = (HEAT, POROUS2, EnergyModel.porous_media(3.0), EnergyModel.porous_media(10.0))
    for model in models:
        for s in s_vals:
            for kappa in kappa_vals:
                for l in l_vals:
                    w = pointwise_prox(model, kappa, l, s)
                    resid = math.log(w / s) + kappa * model.u_prime(w / l)
                    assert abs(resid) <= 1e-10, (model.name, s, kappa, l, resid)


def test_prox_monotone_in_s():
    rng = np.random.default_rng(19)
    s = np.sort(rng.uniform(1e-4, 50.0, 64))
    for model in (HEAT, POROUS2, CONGESTION):
        for kappa in (0.1, 2.0):
            w = np.array([pointwise_prox(model, kappa, 0.5, si) for si in s])
            assert np.all(np.diff(w) >= -1e-14)


def test_prox_heat_contracts_toward_cell_volume():
    l = 0.3
    for kappa in (0.5, 2.0, 10.0):
        for s in (0.01, 0.1, 1.0, 5.0):
            w = pointwise_prox(HEAT, kappa, l, s)
            assert abs(math.log(w / l)) == pytest.approx(
                abs(math.log(s / l)) / (1.0 + kappa), rel=1e-12
            )


def test_prox_custom_model_matches_closed_forms():
    # a custom model cloning the heat law must reproduce the closed form;
    # a porous clone goes through the lookup table (measured ~2e-6 worst)
    heat_clone = EnergyModel.custom(
        lambda s: np.where(s > 0, s * np.log(np.maximum(s, 1e-300)) - s, 0.0),
        lambda s: np.log(np.maximum(s, 1e-300)),
        name="heat-clone",
    )
    porous_clone = EnergyModel.custom(lambda s: s**2, lambda s: 2.0 * s, name="porous2-clone")
    for kappa in (0.1, 1.0, 10.0):
        for l in (1.0, 0.01):
            for s in np.geomspace(1e-5, 1e2, 12):
                a = pointwise_prox(HEAT, kappa, l, s)
                b = pointwise_prox(heat_clone, kappa, l, s)
                assert b == pytest.approx(a, rel=1e-10)
                a2 = pointwise_prox(POROUS2, kappa, l, s)
                b2 = pointwise_prox(porous_clone, kappa, l, s)
                assert b2 == pytest.approx(a2, rel=1e-5)


def test_prox_argument_validation():
    with pytest.raises(ValueError):
        pointwise_prox(HEAT, -1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        pointwise_prox(HEAT, 1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        pointwise_prox(HEAT, 1.0, 1.0, -1.0)


# ---------------------------------------------------------------------------
# prox_g


def test_prox_g_reduces_to_pointwise_without_potential():
    grid = build_grid(1, 8)
    U = np.geomspace(0.1, 2.0, 8)
    out = prox_g(HEAT, PotentialField.zero(grid), 0.7, U)
    want = [pointwise_prox(HEAT, 0.7, grid.cell_volume, u) for u in U]
    assert np.allclose(out, want, rtol=1e-14)


def test_prox_g_kappa_zero_is_identity():
    grid = build_grid(1, 8)
    U = np.geomspace(0.1, 2.0, 8)
    pot = PotentialField.quadratic_well(grid, (0.5,), 10.0)
    assert np.allclose(prox_g(HEAT, pot, 0.0, U), U, rtol=1e-14)


def test_prox_g_constant_potential_example():
    # unit potential, kappa = 1, l = 1, U = 1: prox of e^{-1} is e^{-1/2}
    grid = build_grid(1, 4, extent=(0.0, 4.0))
    assert grid.cell_volume == 1.0
    pot = PotentialField(grid, np.ones(4))
    out = prox_g(HEAT, pot, 1.0, np.ones(4))
    assert np.allclose(out, math.exp(-0.5), rtol=1e-14)


# ---------------------------------------------------------------------------
# first variation


def smooth_bump_field(grid, center=0.5, width=0.12):
    # compactly supported smooth field, zero near the boundary
    x = grid.axis_points(0)
    u = (x - center) / width
    w = np.where(np.abs(u) < 1.0, np.exp(-1.0 / np.maximum(1e-12, 1.0 - u**2)), 0.0)
    return w[:, None]


def test_first_variation_zero_field():
    grid = build_grid(1, 64)
    rho = DiscreteMeasure.uniform(grid)
    out = first_variation(HEAT, PotentialField.zero(grid), rho, np.zeros((64, 1)))
    assert out == 0.0


def test_first_variation_uniform_density_zero_mean_divergence():
    grid = build_grid(1, 128)
    rho = DiscreteMeasure.uniform(grid)
    w = smooth_bump_field(grid)
    out = first_variation(HEAT, PotentialField.zero(grid), rho, w)
    # constant pressure multiplies a zero-sum divergence
    assert abs(out) <= 1e-10


def test_first_variation_matches_finite_difference_oracle():
    grid = build_grid(1, 256)
    x = grid.axis_points(0)
    rho = DiscreteMeasure.from_density(grid, np.exp(-40 * (x - 0.5) ** 2) + 0.05)
    w = smooth_bump_field(grid, center=0.45, width=0.2)
    for model in (HEAT, POROUS2):
        got = first_variation(model, PotentialField.zero(grid), rho, w)
        want = oracles.fd_free_energy_variation(model, None, rho, w)
        assert got == pytest.approx(want, rel=1e-3)
        assert abs(got) > 1e-6  # the comparison is non-vacuous


def test_first_variation_with_potential_term():
    grid = build_grid(1, 256)
    x = grid.axis_points(0)
    rho = DiscreteMeasure.from_density(grid, np.exp(-40 * (x - 0.5) ** 2) + 0.05)
    w = smooth_bump_field(grid, center=0.55, width=0.18)
    pot = PotentialField.quadratic_well(grid, (0.3,), 50.0)

    def v_fn(pts):
        return 50.0 * np.sum((pts - 0.3) ** 2, axis=1)

    got = first_variation(HEAT, pot, rho, w)
    want = oracles.fd_free_energy_variation(HEAT, v_fn, rho, w)
    assert got == pytest.approx(want, rel=1e-3)


def test_first_variation_rejects_congestion():
    grid = build_grid(1, 32)
    rho = DiscreteMeasure.uniform(grid)
    with pytest.raises(ValueError):
        first_variation(CONGESTION, PotentialField.zero(grid), rho, np.zeros((32, 1)))


# ---------------------------------------------------------------------------
# potential fields


def test_potential_constructors():
    grid = build_grid(1, 8)
    x = grid.axis_points(0)
    well = PotentialField.quadratic_well(grid, (0.25,), 1000.0)
    assert np.allclose(well.values, 1000.0 * (x - 0.25) ** 2)
    ramp = PotentialField.ramp(grid, 0.5, 100.0)
    assert np.allclose(ramp.values, 100.0 * np.maximum(0.0, x - 0.5))
    zero = PotentialField.zero(grid)
    assert np.all(zero.values == 0.0)
    with pytest.raises(ValueError):
        PotentialField(grid, -np.ones(8))
    with pytest.raises(ValueError):
        PotentialField(grid, np.ones(5))


def test_potential_2d_well():
    grid = build_grid(2, 8)
    pts = grid.points()
    well = PotentialField.quadratic_well(grid, (0.5, 0.5), 1000.0)
    want = 1000.0 * np.sum((pts - 0.5) ** 2, axis=1)
    assert np.allclose(well.values, want)
