"""Conformal-change quantities: curvature, energies, alpha, quotients."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crflow.basis import apply_sublaplacian
from crflow.conformal import (
    ConformalState,
    alpha,
    background_curvature,
    conformal_sublaplacian,
    energy,
    normalized_energy,
    renormalize_volume,
    volume_theta,
    webster_curvature,
    yamabe_invariant,
    yamabe_quotient,
)
from crflow.errors import ArgumentError, PositivityError
from crflow.mobius import HeisenbergPoint, MoebiusParams, bubble, pullback

from conftest import smooth_positive_field


def small_bubble(basis, r=1.1):
    params = MoebiusParams(HeisenbergPoint(np.array([0.1 + 0.05j] * basis.n), 0.1), r)
    return bubble(params, basis)


# ----------------------------------------------------------------- curvature


def test_webster_round(basis_n1, basis_n2):
    for basis in (basis_n1, basis_n2):
        s = ConformalState(basis.constant_field(1.0))
        R = webster_curvature(s)
        assert np.max(np.abs(R - background_curvature(basis.n))) < 1e-12


def test_webster_moebius_covariance(basis_n1_deg8):
    # pullback of the round form has the same constant curvature
    s = ConformalState(small_bubble(basis_n1_deg8))
    assert np.max(np.abs(s.R_grid - 1.0)) < 1e-6


def test_webster_linearization(basis_n1):
    # R(1 + eps psi) = R0 + eps (-(2+2/n) Delta + R0 - (1+2/n) R0) psi + O(eps^2)
    basis = basis_n1
    eps = 0.01
    psi = basis.coordinate_field(0, "re")
    u = basis.field(basis.constant_field(1.0).coeffs + eps * psi.coeffs)
    R = webster_curvature(ConformalState(u))
    lin = -4.0 * apply_sublaplacian(psi).grid + 1.0 * psi.grid - 3.0 * psi.grid
    assert np.max(np.abs(R - 1.0 - eps * lin)) < 5e-4  # O(eps^2)


def test_webster_positivity_error(basis_n1):
    u = basis_n1.field(basis_n1.coordinate_field(0, "re").coeffs)  # changes sign
    with pytest.raises(PositivityError) as err:
        webster_curvature(ConformalState(u))
    assert err.value.node_index >= 0


# ---------------------------------------------------- conformal sub-Laplacian


def test_conformal_sublaplacian_round(basis_n1):
    s = ConformalState(basis_n1.constant_field(1.0))
    phi = basis_n1.coordinate_field(1, "im")
    out = conformal_sublaplacian(s, phi)
    assert np.max(np.abs(out - apply_sublaplacian(phi).grid)) < 1e-12


def test_conformal_sublaplacian_constant_phi(basis_n1):
    s = ConformalState(smooth_positive_field(basis_n1, 4))
    out = conformal_sublaplacian(s, basis_n1.constant_field(5.0))
    assert np.max(np.abs(out)) < 1e-10


@given(st.integers(0, 10**5))
def test_conformal_sublaplacian_self_adjoint(basis_n1, seed):
    basis = basis_n1
    s = ConformalState(smooth_positive_field(basis, 17))
    rng = np.random.default_rng(seed)
    mask = np.array([i.p + i.q <= basis.N // 2 for i in basis.indices], dtype=float)
    a = basis.field(rng.normal(size=basis.size) * mask)
    b = basis.field(rng.normal(size=basis.size) * mask)
    dV = basis.weights * s.volume_density
    lhs = float(dV @ (conformal_sublaplacian(s, a) * b.grid))
    rhs = float(dV @ (a.grid * conformal_sublaplacian(s, b)))
    assert abs(lhs - rhs) < 1e-8 * max(1.0, abs(lhs))


# --------------------------------------------------------------------- volume


def test_volume_constant(basis_n1):
    assert volume_theta(ConformalState(basis_n1.constant_field(1.0))) == pytest.approx(basis_n1.volume)
    assert volume_theta(ConformalState(basis_n1.constant_field(2.0))) == pytest.approx(
        2.0**4 * basis_n1.volume
    )


def test_volume_preserved_by_pullback(basis_n1_deg8):
    basis = basis_n1_deg8
    params = MoebiusParams(HeisenbergPoint(np.array([0.2 + 0.1j]), -0.2), 1.3)
    v = pullback(basis.constant_field(1.0), params)
    assert abs(volume_theta(ConformalState(v)) - basis.volume) < 1e-8 * basis.volume


# -------------------------------------------------------------------- energy


def test_energy_constant(basis_n1, basis_n2):
    for basis in (basis_n1, basis_n2):
        s = ConformalState(basis.constant_field(1.0))
        assert energy(s) == pytest.approx(background_curvature(basis.n) * basis.volume)


def test_energy_homogeneity(basis_n1):
    u = smooth_positive_field(basis_n1, 8)
    e1 = energy(ConformalState(u))
    e2 = energy(ConformalState(3.0 * u))
    assert e2 == pytest.approx(9.0 * e1)


def test_energy_moebius_invariance(basis_n1_deg8):
    basis = basis_n1_deg8
    e0 = background_curvature(1) * basis.volume
    e = energy(ConformalState(small_bubble(basis)))
    assert abs(e - e0) < 1e-6 * e0


def test_energy_dual_form(basis_n1):
    # gradient form vs quadrature of R dV_theta, recomputed by hand
    basis = basis_n1
    s = ConformalState(smooth_positive_field(basis, 12))
    e = energy(s)
    grid_form = float(basis.weights @ (s.R_grid * s.volume_density))
    assert abs(e - grid_form) < 1e-8 * max(1.0, abs(e))


# ------------------------------------------------------------------------ E_f


def test_normalized_energy_constant_is_yamabe(basis_n1):
    basis = basis_n1
    s = ConformalState(basis.constant_field(1.0))
    f = basis.constant_field(1.0)
    assert normalized_energy(s, f) == pytest.approx(yamabe_invariant(basis))


@given(st.floats(0.25, 4.0))
def test_normalized_energy_scale_invariant(basis_n1, c):
    # the c-powers cancel exactly: exponent 2 - (2+2/n) n/(n+1) = 0
    basis = basis_n1
    u = smooth_positive_field(basis, 23)
    f = basis.field(basis.constant_field(1.0).coeffs + 0.1 * basis.coordinate_field(0, "re").coeffs)
    a = normalized_energy(ConformalState(u), f)
    b = normalized_energy(ConformalState(c * u), f)
    assert b == pytest.approx(a, rel=1e-12)


def test_normalized_energy_decreases_along_flow(basis_n1_deg8):
    from crflow.flow import step

    basis = basis_n1_deg8
    f = basis.constant_field(1.0)
    u = renormalize_volume(
        basis.field(basis.constant_field(1.0).coeffs + 0.1 * basis.coordinate_field(0, "re").coeffs)
    )
    s = ConformalState(u)
    prev = normalized_energy(s, f)
    for _ in range(20):
        s = step(s, f, 0.02)
        cur = normalized_energy(s, f)
        assert cur <= prev + 1e-9 * abs(prev)
        prev = cur


def test_normalized_energy_denominator_check(basis_n1):
    s = ConformalState(basis_n1.constant_field(1.0))
    f = basis_n1.constant_field(-1.0)
    with pytest.raises(ArgumentError):
        normalized_energy(s, f)


# --------------------------------------------------------------------- alpha


def test_alpha_constant_f(basis_n1):
    s = ConformalState(basis_n1.constant_field(1.0))
    for c in (1.0, 2.5):
        f = basis_n1.constant_field(c)
        assert alpha(s, f) == pytest.approx(1.0 / c)


def test_alpha_is_mean_curvature_for_unit_f(basis_n1):
    basis = basis_n1
    s = ConformalState(smooth_positive_field(basis, 31))
    f = basis.constant_field(1.0)
    a = alpha(s, f)
    mean_R = float(basis.weights @ (s.R_grid * s.volume_density)) / s.vol
    assert a == pytest.approx(mean_R, rel=1e-10)


# --------------------------------------------------------------- renormalize


def test_renormalize_examples(basis_n1):
    two = basis_n1.constant_field(2.0)
    out = renormalize_volume(two)
    assert np.max(np.abs(out.grid - 1.0)) < 1e-12
    one = basis_n1.constant_field(1.0)
    assert np.max(np.abs(renormalize_volume(one).coeffs - one.coeffs)) < 1e-14


@given(st.integers(0, 10**6))
def test_renormalize_constraint(basis_n1, seed):
    u = smooth_positive_field(basis_n1, seed, amp=0.3)
    out = renormalize_volume(u)
    vol = basis_n1.integrate(out.grid**4)
    assert abs(vol - basis_n1.volume) < 1e-10 * basis_n1.volume


# ------------------------------------------------------------ yamabe quotient


def test_yamabe_quotient_constant(basis_n1):
    Y = yamabe_invariant(basis_n1)
    for c in (1.0, 0.3, 7.0):
        assert yamabe_quotient(basis_n1.constant_field(c)) == pytest.approx(Y)


def test_yamabe_quotient_bubble(basis_n1_deg8):
    Y = yamabe_invariant(basis_n1_deg8)
    q = yamabe_quotient(small_bubble(basis_n1_deg8))
    assert abs(q - Y) < 1e-6 * Y


def test_yamabe_quotient_floor_sweep(basis_n1):
    Y = yamabe_invariant(basis_n1)
    rng = np.random.default_rng(2)
    for _ in range(100):
        c = rng.normal(size=basis_n1.size) * np.exp(
            -rng.uniform(0.3, 2.0) * np.array([i.p + i.q for i in basis_n1.indices])
        )
        u = basis_n1.field(np.abs(c[0]) * basis_n1.constant_field(1.0).coeffs + c)
        u = basis_n1.field(np.where(np.arange(basis_n1.size) == 0, np.abs(u.coeffs) + 1.0, u.coeffs))
        if np.min(u.grid) < 0:
            u = basis_n1.field_from_grid(np.abs(u.grid))
        assert yamabe_quotient(u) >= Y - 1e-8


def test_yamabe_quotient_zero_field(basis_n1):
    with pytest.raises(ArgumentError):
        yamabe_quotient(basis_n1.field(np.zeros(basis_n1.size)))
