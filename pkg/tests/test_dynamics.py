import numpy as np
import pytest

from rdmm.dynamics import (
    GeodesicState,
    IntegratorConfig,
    current_weights,
    energy,
    epdiff_rhs,
    integrate_geodesic,
    rdmm_rhs,
    shoot,
    source_term,
)
from rdmm.exceptions import IntegrationBlowupError, InvalidParameterError
from rdmm.fields import GridSpec, identity_map, jacobian_determinant
from rdmm.kernels import MultiGaussianKernel, constant_preweights, kernel_apply

import oracles
from conftest import bump, compact_momentum, nonuniform_preweights, smooth_field

KERNEL = MultiGaussianKernel((0.02, 0.04, 0.06, 0.08), 0.05)
REFERENCE_SQ = (0.1, 0.3, 0.3, 0.3)


def scaled_momentum(rng, grid, h0, kernel=KERNEL, vmax=0.15):
    """Compact smooth momentum rescaled so that the initial velocity peaks at ``vmax``."""
    m0 = compact_momentum(rng, grid, 1.0, 0.06)
    w = current_weights(GeodesicState.initial(m0, h0), kernel).w
    return m0 * vmax / np.max(np.abs(kernel_apply(m0, w, kernel)))


def relative_drift(m0, h0, n_steps, kernel=KERNEL):
    E0 = energy(GeodesicState.initial(m0, h0), kernel)
    m, phi = shoot(m0, h0, kernel, n_steps)[-1]
    return abs(energy(GeodesicState(m, phi, h0, 1.0), kernel) - E0) / E0


def test_integrator_config_validation():
    with pytest.raises(InvalidParameterError):
        IntegratorConfig(n_steps=0)
    with pytest.raises(InvalidParameterError):
        IntegratorConfig(scheme="euler")
    assert IntegratorConfig().n_steps == 20


def test_current_weights_identity_and_constant(rng, grid33):
    h0 = nonuniform_preweights(rng, grid33)
    cw = current_weights(GeodesicState.initial(np.zeros((2,) + grid33.dims), h0), KERNEL)
    np.testing.assert_allclose(cw.h, h0, rtol=1e-15, atol=0)
    const = constant_preweights(REFERENCE_SQ, grid33.dims)
    warped = np.clip(identity_map(grid33) + 0.05 * rng.standard_normal((2,) + grid33.dims), 0, 1)
    cw = current_weights(GeodesicState(np.zeros((2,) + grid33.dims), warped, const), KERNEL)
    np.testing.assert_allclose(cw.h, const, atol=1e-15)
    np.testing.assert_allclose(cw.w, const, atol=1e-14)


def test_current_weights_translation_oracle():
    g = GridSpec((65, 65))
    x = g.coordinates()
    kernel = MultiGaussianKernel((0.05, 0.1), 0.05)

    def angle(p):
        return np.pi / 4 + 0.3 * np.sin(2 * np.pi * p[0]) * np.cos(2 * np.pi * p[1])

    h0 = np.stack([np.cos(angle(x)), np.sin(angle(x))])
    shift = np.array([0.1, -0.05]).reshape(2, 1, 1)
    state = GeodesicState(np.zeros_like(x), x - shift, h0, 0.5)
    h = current_weights(state, kernel).h
    expected = np.stack([np.cos(angle(x - shift)), np.sin(angle(x - shift))])
    inner = (slice(None), slice(8, 64), slice(0, 58))
    assert np.max(np.abs(h[inner] - expected[inner])) < 1e-3


def test_zero_momentum_is_fixed_point(rng, grid33):
    h0 = nonuniform_preweights(rng, grid33)
    state = GeodesicState.initial(np.zeros((2,) + grid33.dims), h0)
    dm, dphi = rdmm_rhs(state, KERNEL)
    assert np.all(dm == 0) and np.all(dphi == 0)
    final = integrate_geodesic(state, KERNEL, IntegratorConfig(5))[-1]
    assert np.array_equal(final.phi_inv, identity_map(grid33))
    assert energy(state, KERNEL) == 0.0


def test_constant_weights_source_vanishes_and_rhs_is_epdiff(rng, grid33):
    h0 = constant_preweights(REFERENCE_SQ, grid33.dims)
    m = compact_momentum(rng, grid33)
    phi = np.clip(identity_map(grid33) + 0.02 * rng.standard_normal((2,) + grid33.dims), 0, 1)
    state = GeodesicState(m, phi, h0, 0.3)
    assert np.linalg.norm(source_term(state, KERNEL)) < 1e-12
    dm, _ = rdmm_rhs(state, KERNEL)
    w = current_weights(state, KERNEL).w
    assert np.max(np.abs(dm - epdiff_rhs(m, w, KERNEL))) <= 1e-12 * np.max(np.abs(dm))


def test_trajectory_matches_independent_epdiff(rng, grid33):
    h0 = constant_preweights(REFERENCE_SQ, grid33.dims)
    m0 = scaled_momentum(rng, grid33, h0)
    ops = oracles.Operators2D(grid33.dims)
    sig, gs = KERNEL.sigmas, KERNEL.preweight_sigma
    ref = oracles.rk4(lambda m, p: oracles.rdmm_rhs_flux(m, p, h0, sig, gs, ops), m0, 10)
    ours = shoot(m0, h0, KERNEL, 10)
    for (m_a, p_a), (m_b, p_b) in zip(ours, ref):
        assert np.max(np.abs(p_a - p_b)) / np.max(np.abs(p_b)) < 1e-6
        assert np.max(np.abs(m_a - m_b)) / np.max(np.abs(m_b)) < 1e-6


def test_rhs_matches_independent_implementation_nonuniform(rng, grid33):
    h0 = nonuniform_preweights(rng, grid33)
    m = compact_momentum(rng, grid33)
    phi = np.clip(identity_map(grid33) + 0.01 * rng.standard_normal((2,) + grid33.dims), 0, 1)
    dm, dphi = rdmm_rhs(GeodesicState(m, phi, h0, 0.5), KERNEL)
    ops = oracles.Operators2D(grid33.dims)
    dm_ref, dphi_ref = oracles.rdmm_rhs_flux(m, phi, h0, KERNEL.sigmas, KERNEL.preweight_sigma, ops)
    assert np.max(np.abs(dm - dm_ref)) / np.max(np.abs(dm_ref)) < 1e-10
    assert np.max(np.abs(dphi - dphi_ref)) / np.max(np.abs(dphi_ref)) < 1e-10


def _expanded_gap(n):
    """Max relative gap between the library RHS and the product-expanded oracle, analytic data."""
    g = GridSpec((n, n))
    x = g.coordinates()
    kernel = MultiGaussianKernel((0.04, 0.08), 0.05)
    angle = np.pi / 4 + 0.3 * np.sin(2 * np.pi * x[0]) * np.cos(2 * np.pi * x[1])
    h0 = np.stack([np.cos(angle), np.sin(angle)])
    m = 0.05 * np.stack([np.sin(2 * np.pi * x[1]), np.cos(2 * np.pi * x[0])])
    m *= np.exp(-np.sum((x - 0.5) ** 2, axis=0) / (2 * 0.12**2))
    dm, _ = rdmm_rhs(GeodesicState.initial(m, h0), kernel)
    dm_ref, _ = oracles.rdmm_rhs_expanded(m, identity_map(g), h0, kernel.sigmas,
                                          kernel.preweight_sigma)
    return np.max(np.abs(dm - dm_ref)) / np.max(np.abs(dm_ref))


@pytest.mark.xfail(strict=True, reason="flux-form and product-expanded discretizations differ "
                   "by O(h^2); 1e-6 is below that gap on a 33x33 grid")
def test_rhs_matches_expanded_product_oracle_at_1e6():
    assert _expanded_gap(33) < 1e-6


def test_expanded_product_oracle_gap_converges():
    gaps = [_expanded_gap(n) for n in (33, 65, 129)]
    orders = np.log2(np.array(gaps[:-1]) / np.array(gaps[1:]))
    assert gaps[-1] < gaps[0]
    assert np.all(orders > 1.5), (gaps, orders)


def test_self_convergence_fourth_order(rng, grid33):
    h0 = constant_preweights(REFERENCE_SQ, grid33.dims)
    m0 = scaled_momentum(rng, grid33, h0)
    maps = {n: shoot(m0, h0, KERNEL, n)[-1][1] for n in (10, 20, 40)}
    e1 = np.max(np.abs(maps[10] - maps[20]))
    e2 = np.max(np.abs(maps[20] - maps[40]))
    assert e2 / np.max(np.abs(maps[40])) < 1e-4
    assert np.log2(e1 / e2) > 3.5


def test_energy_conserved_along_trajectory():
    g = GridSpec((65, 65))
    rng = np.random.default_rng(3)
    h0 = constant_preweights(REFERENCE_SQ, g.dims)
    m0 = scaled_momentum(rng, g, h0)
    traj = integrate_geodesic(GeodesicState.initial(m0, h0), KERNEL, IntegratorConfig(20))
    E = [energy(traj[k], KERNEL) for k in (0, 10, 20)]
    assert traj[10].t == 0.5 and traj[20].t == 1.0
    assert all(abs(e / E[0] - 1) < 0.01 for e in E)


def test_energy_drift_order_constant_weights():
    g = GridSpec((65, 65))
    rng = np.random.default_rng(11)
    h0 = constant_preweights(REFERENCE_SQ, g.dims)
    for _ in range(3):
        m0 = scaled_momentum(rng, g, h0)
        d20, d40 = relative_drift(m0, h0, 20), relative_drift(m0, h0, 40)
        assert d20 < 0.01
        assert np.log2(d20 / d40) >= 3


def test_energy_drift_small_with_nonuniform_weights():
    g = GridSpec((65, 65))
    rng = np.random.default_rng(5)
    for _ in range(2):
        h0 = nonuniform_preweights(rng, g)
        m0 = scaled_momentum(rng, g, h0)
        assert relative_drift(m0, h0, 20) < 0.01


def test_energy_is_quadratic(rng, grid33):
    h0 = nonuniform_preweights(rng, grid33)
    m0 = compact_momentum(rng, grid33)
    e1 = energy(GeodesicState.initial(m0, h0), KERNEL)
    e2 = energy(GeodesicState.initial(2 * m0, h0), KERNEL)
    assert e2 == pytest.approx(4 * e1, rel=1e-12)


def test_small_flows_stay_diffeomorphic():
    # velocity gradients scale like vmax / sigma_min, so the bank starts at 0.04 here
    g = GridSpec((65, 65))
    kernel = MultiGaussianKernel((0.04, 0.08, 0.12, 0.16), 0.05)
    rng = np.random.default_rng(0)
    for trial in range(12):
        h0 = nonuniform_preweights(rng, g) if trial % 2 else constant_preweights(REFERENCE_SQ, g.dims)
        m0 = smooth_field(rng, (2,) + g.dims, 0.15) * bump(g, (0.5, 0.5), 0.15)
        w = current_weights(GeodesicState.initial(m0, h0), kernel).w
        m0 *= 0.2 / np.max(np.abs(kernel_apply(m0, w, kernel)))
        phi = shoot(m0, h0, kernel, 20)[-1][1]
        assert np.all(jacobian_determinant(phi)[1:-1, 1:-1] > 0)


def test_blowup_reports_step(grid33):
    h0 = constant_preweights(REFERENCE_SQ, grid33.dims)
    m0 = np.zeros((2,) + grid33.dims)
    m0[:, 16, 16] = np.nan
    with pytest.raises(IntegrationBlowupError) as info:
        shoot(m0, h0, KERNEL, 4)
    assert info.value.step == 0
    with np.errstate(over="ignore", invalid="ignore"):
        huge = np.zeros((2,) + grid33.dims)
        huge[0, 10:20, 10:20] = 1e150
        with pytest.raises(IntegrationBlowupError) as info:
            shoot(huge, h0, KERNEL, 8)
    assert info.value.step is not None and 0 <= info.value.step < 8
