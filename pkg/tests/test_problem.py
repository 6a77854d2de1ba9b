import numpy as np
import pytest

from degma.errors import InconsistentOrderError, RegimeError
from degma.geometry import CurveSpec
from degma.grids import GridField, Rectangle
from degma.problem import MAProblemSpec, ScaledProblem, Unknown, linearize, phi, scale


def _reference_problem():
    """a_ij = 0, K = v^3, f = 1, curve {v = 0}, n = 2."""
    return MAProblemSpec(0.0, 0.0, 0.0, 1.0, "v^3", CurveSpec("v"), 2)


def _general_problem():
    return MAProblemSpec(
        "v^2*u", "v^2/10", "v^2*(1+u)", "1+u^2", "v^3", CurveSpec("v"), 2
    )


def test_regime_check():
    _reference_problem().require_regime()
    with pytest.raises(RegimeError):
        MAProblemSpec(0, 0, 0, 1, "v^2", CurveSpec("v"), 1).require_regime()
    with pytest.raises(RegimeError):
        MAProblemSpec(0, 0, 0, 1, "v", CurveSpec("v"), 0).require_regime()


def test_reference_residual_at_zero():
    # Phi(0) = -K f evaluated at (u, v) = (eps^2 x, eps^2 y), so -eps^6 y^3
    eps = 0.1
    sp = scale(_reference_problem(), eps, 0.5, 0.5)
    w = GridField.constant(0.0, sp.rect, 65, 65)
    out = phi(sp, w)
    _, Y = w.meshgrid()
    assert np.max(np.abs(out.values + eps**6 * Y**3)) < 1e-16


def test_reference_residual_quadratic_w():
    # w = (x^2 + y^2)/2 has unit Hessian diagonal, so
    # Phi(w) = (1 + eps)(eps) - eps^6 y^3 exactly
    eps = 0.1
    sp = scale(_reference_problem(), eps, 0.5, 0.5)
    w = GridField.from_function(lambda X, Y: (X**2 + Y**2) / 2, sp.rect, 33, 33)
    out = phi(sp, w)
    _, Y = w.meshgrid()
    expected = (1 + eps) * eps - eps**6 * Y**3
    assert np.max(np.abs(out.values - expected)) < 1e-11


def test_residual_matches_closed_form_general_data():
    eps = 0.2
    sp = scale(_general_problem(), eps, 0.5, 0.5)
    w = GridField.constant(0.0, sp.rect, 49, 49)
    out = phi(sp, w)
    X, Y = w.meshgrid()
    U, V = eps**2 * X, eps**2 * Y
    A11, A12, A22 = V**2 * U, V**2 / 10, V**2 * (1 + U)
    expected = (1 + A11) * A22 - A12**2 - V**3 * (1 + U**2)
    assert np.max(np.abs(out.values - expected)) < 1e-15


def test_residual_polynomial_oracle():
    # closed-form Phi for a polynomial w whose grid derivatives are exact
    eps = 0.15
    sp = scale(_general_problem(), eps, 0.5, 0.5)
    w = GridField.from_function(
        lambda X, Y: X**3 * Y / 6 + X * Y**2 / 4 - X**2 / 10, sp.rect, 41, 41
    )
    out = phi(sp, w)
    X, Y = w.meshgrid()
    U, V = eps**2 * X, eps**2 * Y
    A11, A12, A22 = V**2 * U, V**2 / 10, V**2 * (1 + U)
    wxx = X * Y - 1 / 5.0
    wxy = X**2 / 2 + Y / 2
    wyy = X / 2.0
    expected = (
        (1 + eps * wxx + A11) * (eps * wyy + A22)
        - (eps * wxy + A12) ** 2
        - V**3 * (1 + U**2)
    )
    assert np.max(np.abs(out.values - expected)) < 1e-12


def test_linearization_at_zero_reference():
    eps = 0.1
    sp = scale(_reference_problem(), eps, 0.5, 0.5)
    w = GridField.constant(0.0, sp.rect, 33, 33)
    L = linearize(sp, w)
    assert L.stage == "L1" and L.frame == "xy"
    assert np.max(np.abs(L.b11.values)) == 0.0
    assert np.max(np.abs(L.b12.values)) == 0.0
    assert np.max(np.abs(L.b22.values - eps)) < 1e-16
    # data does not reference p, q1 or q2: low-order coefficients exactly zero
    assert np.all(L.b1.values == 0.0)
    assert np.all(L.b2.values == 0.0)
    assert np.all(L.b0.values == 0.0)


def test_linearization_exact_for_quadratic_residual():
    # with gradient-independent data Phi is quadratic in the Hessian of w,
    # so the remainder Phi(w + t s) - Phi(w) - t L1 s is exactly O(t^2):
    # halving t divides the remainder by exactly 4
    eps = 0.2
    sp = scale(_general_problem(), eps, 0.5, 0.5)
    w = GridField.from_function(lambda X, Y: 0.3 * np.sin(X) * np.cos(Y), sp.rect, 49, 49)
    s = GridField.from_function(lambda X, Y: np.cos(2 * X) * np.sin(1.5 * Y), sp.rect, 49, 49)
    L = linearize(sp, w)
    base = phi(sp, w)

    def remainder(t):
        pert = phi(sp, w + s * t)
        return np.max(np.abs(pert.values - base.values - t * L.apply(s).values))

    r1, r2 = remainder(1e-2), remainder(5e-3)
    assert r1 / r2 == pytest.approx(4.0, rel=1e-6)


def test_linearization_order_with_gradient_dependent_data():
    spec = MAProblemSpec(
        "v^2*u/4",
        "v^2*(u + q2)/8",
        "v^2*(1 + q1/5)",
        "1 + p/10 + q1/20",
        "v^3",
        CurveSpec("v"),
        2,
    )
    eps = 0.2
    sp = scale(spec, eps, 0.5, 0.5)
    w = GridField.from_function(lambda X, Y: 0.2 * np.sin(X + Y), sp.rect, 49, 49)
    s = GridField.from_function(lambda X, Y: np.cos(X) * np.sin(Y), sp.rect, 49, 49)
    L = linearize(sp, w)
    assert np.max(np.abs(L.b1.values)) > 0.0
    base = phi(sp, w)

    def remainder(t):
        pert = phi(sp, w + s * t)
        return np.max(np.abs(pert.values - base.values - t * L.apply(s).values))

    r1, r2 = remainder(1e-2), remainder(5e-3)
    order = np.log2(r1 / r2)
    assert order > 1.9


def test_factor_fields_closed_forms():
    # K f = v^3 (1 + u^2) deflates to P = 1 + eps^4 x^2,
    # a11 = v^2 u deflates to P11 = eps^2 x
    eps = 0.3
    sp = scale(_general_problem(), eps, 0.5, 0.5)
    P11, P12, P22, P = sp.factor_fields(sp.rect, 81, 81)
    X, Y = P.meshgrid()
    assert np.max(np.abs(P.values - (1 + eps**4 * X**2))) < 1e-10
    assert np.max(np.abs(P11.values - eps**2 * X)) < 1e-10
    assert np.max(np.abs(P12.values - 0.1)) < 1e-10
    assert sp.M2 == pytest.approx(1.0, abs=1e-12)


def test_wrong_order_detected():
    # K vanishes only to second order but n = 2 demands third
    bad = MAProblemSpec(0.0, 0.0, 0.0, 1.0, "v^2", CurveSpec("v"), 2)
    with pytest.raises(InconsistentOrderError):
        scale(bad, 0.1, 0.5, 0.5)


def test_wrong_order_in_a11_detected():
    bad = MAProblemSpec("v*u", 0.0, 0.0, 1.0, "v^3", CurveSpec("v"), 2)
    with pytest.raises(InconsistentOrderError):
        scale(bad, 0.1, 0.5, 0.5)


def test_epsilon_validated():
    with pytest.raises(ValueError):
        scale(_reference_problem(), 1.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        scale(_reference_problem(), 0.0, 0.5, 0.5)


def test_unknown_bound_enforced():
    rect = Rectangle.centered(0.5, 0.5)
    w = GridField.from_function(lambda X, Y: np.sin(4 * X), rect, 65, 65)
    Unknown(w, bound=300.0, surrogate_order=3)  # |d^3 sin(4x)| = 64
    with pytest.raises(ValueError):
        Unknown(w, bound=10.0, surrogate_order=3)


def test_h_field_reference():
    # sigma = {v = 0} gives H(x, y) = y in scaled coordinates
    sp = scale(_reference_problem(), 0.1, 0.5, 0.5)
    H = sp.H_field(sp.rect, 33, 33)
    _, Y = H.meshgrid()
    assert np.max(np.abs(H.values - Y)) < 1e-14
