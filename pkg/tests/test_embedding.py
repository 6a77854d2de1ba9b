"""Embedding post-processing: z reconstruction, flatness, flat coordinates,
isometry defects, the prescribed-curvature graph instance, and the covariant
curvature/divergence identities."""

import numpy as np
import pytest

from degma.embedding import (
    assemble_embedding,
    covariant_identity_check,
    deficit_metric,
    flat_coordinates,
    flatness_residual,
    graph_curvature,
    isometry_residual,
    prescribed_curvature,
    reconstruct_z,
    _integrate_form,
)
from degma.errors import (
    GradientTooLargeError,
    IdentityViolationError,
    NotFlatEnoughError,
    RegimeError,
    SignatureError,
)
from degma.geometry import CurveSpec, MetricPatch
from degma.grids import GridField, Rectangle
from degma.iteration import Schedule, run
from degma.problem import MAProblemSpec, scale

SPEC = MAProblemSpec(0.0, 0.0, 0.0, 1.0, "v^3", CurveSpec("v"), 2)


@pytest.fixture(scope="module")
def sp():
    return scale(SPEC, 0.05, 0.5, 0.5)


@pytest.fixture(scope="module")
def converged(sp):
    w, report = run(sp, Schedule(0.05, 2), nx=129, ny=129, n_modes=24)
    return w, report


def flat_patch(rect, n):
    return MetricPatch(
        rect,
        E=GridField.constant(1.0, rect, n, n),
        F=GridField.constant(0.0, rect, n, n),
        G=GridField.constant(1.0, rect, n, n),
    )


def sphere_patch(rect, n):
    return MetricPatch(
        rect,
        E=GridField.constant(1.0, rect, n, n),
        F=GridField.constant(0.0, rect, n, n),
        G=GridField.from_function(lambda U, V: np.cos(U) ** 2, rect, n, n),
    )


# -- reconstruct_z --------------------------------------------------------


def test_zero_w_gives_parabolic_cylinder(sp):
    w = GridField.constant(0.0, sp.rect, 65, 65)
    z = reconstruct_z(w, sp)
    U, _ = z.meshgrid()
    assert np.max(np.abs(z.values - U * U / 2.0)) < 1e-16


def test_chain_rule_gradient(sp):
    w = GridField.from_function(
        lambda X, Y: np.sin(2 * X) * np.cos(2 * Y), sp.rect, 65, 65
    )
    z = reconstruct_z(w, sp)
    e = sp.epsilon
    U, V = z.meshgrid()
    exact = U + e**3 * w.dx().at(U / e**2, V / e**2)
    assert np.max(np.abs(z.dx().values - exact)) < 1e-8


def test_small_epsilon_limit():
    for eps, bound in ((0.2, None), (0.1, None)):
        spx = scale(SPEC, eps, 0.5, 0.5)
        w = GridField.from_function(lambda X, Y: np.cos(X + Y), spx.rect, 33, 33)
        z = reconstruct_z(w, spx)
        U, _ = z.meshgrid()
        assert np.max(np.abs(z.values - U * U / 2.0)) <= eps**5 * w.sup_norm() + 1e-15


def test_large_gradient_raises():
    spx = scale(SPEC, 0.3, 0.5, 0.5)
    c = 1.1 / spx.epsilon**3
    w = GridField.from_function(lambda X, Y: c * X, spx.rect, 33, 33)
    with pytest.raises(GradientTooLargeError):
        reconstruct_z(w, spx)


# -- flatness of ds^2 - dz^2 ----------------------------------------------


def test_flat_metric_zero_z_residual():
    rect = Rectangle.centered(1.0, 1.0)
    m = flat_patch(rect, 65)
    z = GridField.constant(0.0, rect, 65, 65)
    # the only content is stencil rounding noise on constant fields
    assert flatness_residual(m, z).sup_norm() < 1e-10


def test_parabolic_deficit_matches_symbolic_oracle():
    # ds^2 = du^2 + dv^2, z = u^2/2 gives the metric (1 - u^2) du^2 + dv^2
    import sympy

    u, v = sympy.symbols("u v")
    E, F, G = 1 - u**2, sympy.Integer(0), sympy.Integer(1)
    # Gaussian curvature of an orthogonal metric
    W = sympy.sqrt(E * G)
    K_sym = sympy.simplify(
        -(sympy.diff(sympy.diff(E, v) / W, v) + sympy.diff(sympy.diff(G, u) / W, u))
        / (2 * W)
    )
    rect = Rectangle.centered(0.5, 0.5)
    n = 129
    m = flat_patch(rect, n)
    z = GridField.from_function(lambda U, V: U * U / 2.0, rect, n, n)
    res = flatness_residual(m, z)
    K_fn = sympy.lambdify((u, v), K_sym, "numpy")
    U, V = res.meshgrid()
    oracle = np.broadcast_to(np.asarray(K_fn(U, V), float), U.shape)
    assert np.max(np.abs(res.values - oracle)) < 1e-6


def test_signature_error():
    rect = Rectangle.centered(1.0, 1.0)
    m = flat_patch(rect, 33)
    z = GridField.from_function(lambda U, V: 1.2 * U, rect, 33, 33)
    with pytest.raises(SignatureError):
        flatness_residual(m, z)


def test_converged_flatness_tracks_residual(sp, converged):
    w, report = converged
    result = assemble_embedding(w, sp)
    factor = result.norms["flatness_sup"] / max(report["final_residual"], 1e-300)
    assert np.isfinite(factor)
    assert result.norms["flatness_sup"] <= factor * report["final_residual"] + 1e-300
    assert result.norms["flatness_sup"] < 1e-4


# -- flat coordinates -----------------------------------------------------


def test_flat_coordinates_identity():
    rect = Rectangle.centered(1.0, 1.0)
    x, y = flat_coordinates(flat_patch(rect, 65))
    U, V = x.meshgrid()
    assert np.max(np.abs(x.values - U)) < 1e-14
    assert np.max(np.abs(y.values - V)) < 1e-14


def polar_patch(n):
    rect = Rectangle(1.0, 2.0, -0.3, 0.3)
    return MetricPatch(
        rect,
        E=GridField.constant(1.0, rect, n, n),
        F=GridField.constant(0.0, rect, n, n),
        G=GridField.from_function(lambda U, V: U * U, rect, n, n),
    )


def test_polar_recovers_cartesian():
    m = polar_patch(257)
    x, y = flat_coordinates(m)
    U, V = x.meshgrid()
    i0, j0 = x.nx // 2, x.ny // 2
    Xa = U * np.cos(V)
    Ya = U * np.sin(V)
    # base point sits at v = 0 where the radial direction is the +x axis,
    # so the stated rotation convention aligns the frames exactly
    assert np.max(np.abs(x.values - (Xa - Xa[i0, j0]))) < 1e-6
    assert np.max(np.abs(y.values - (Ya - Ya[i0, j0]))) < 1e-6
    z0 = x.like(np.zeros_like(x.values))
    assert isometry_residual(m, x, y, z0)["max_rel"] < 1e-5


def test_path_independence():
    m = polar_patch(129)
    E, F, G = m.components()
    a11 = np.sqrt(E.values)
    a22 = np.sqrt((E.values * G.values - F.values**2) / E.values)
    c1 = E.like(F.values / a11).dx().values - E.like(a11).dy().values
    c2 = E.like(a22).dx().values
    p = a11 * c1 / (a11 * a22)
    q = (F.values / a11 * c1 + a22 * c2) / (a11 * a22)
    one = _integrate_form(p, q, E.hx, E.hy, 10, 7, u_first=True)
    other = _integrate_form(p, q, E.hx, E.hy, 10, 7, u_first=False)
    assert np.max(np.abs(one - other)) < 1e-6


def test_curved_metric_raises_not_flat():
    with pytest.raises(NotFlatEnoughError):
        flat_coordinates(sphere_patch(Rectangle.centered(0.5, 0.5), 65))


# -- isometry residual ----------------------------------------------------


def test_plane_isometry_exact():
    rect = Rectangle.centered(1.0, 1.0)
    m = flat_patch(rect, 33)
    x = GridField.from_function(lambda U, V: U, rect, 33, 33)
    y = GridField.from_function(lambda U, V: V, rect, 33, 33)
    z = GridField.constant(0.0, rect, 33, 33)
    assert isometry_residual(m, x, y, z)["max_rel"] < 1e-12


def test_cylinder_isometry():
    rect = Rectangle.centered(1.0, 1.0)
    n = 129
    m = flat_patch(rect, n)
    x = GridField.from_function(lambda U, V: np.cos(U), rect, n, n)
    y = GridField.from_function(lambda U, V: np.sin(U), rect, n, n)
    z = GridField.from_function(lambda U, V: V, rect, n, n)
    assert isometry_residual(m, x, y, z)["max_rel"] < 1e-6


def test_converged_isometry_residual(sp, converged):
    w, _ = converged
    result = assemble_embedding(w, sp)
    assert result.norms["max_rel"] <= 1e-3
    assert result.norms["grad_z_sup"] < 1.0


# -- prescribed curvature -------------------------------------------------


def test_flat_curvature_flat_seed():
    sch = Schedule(0.05, 2)
    res = prescribed_curvature(0.0, Rectangle.centered(0.5, 0.5), sch, nx=33, ny=33)
    assert res.curvature.sup_norm() < 1e-8
    U, _ = res.z.meshgrid()
    assert np.max(np.abs(res.z.values - U * U / 2.0)) < 1e-15


def test_cubic_curvature_graph():
    sch = Schedule(0.05, 2)
    res = prescribed_curvature(
        "v^3", Rectangle.centered(0.5, 0.5), sch, nx=129, ny=129, n_modes=24
    )
    assert res.run_report["stopped_on"] in ("tolerance", "noise_floor")
    assert res.norms["curvature_rel"] <= 1e-2
    # sign of the output curvature flips across {v = 0} with the data
    Kg, Kt = res.curvature, res.curvature_target
    off = np.abs(Kg.meshgrid()[1]) > 2 * Kg.hy
    agree = np.mean(np.sign(Kg.values[off]) == np.sign(Kt.values[off]))
    assert agree >= 0.99


def test_odd_order_out_of_regime():
    sch = Schedule(0.05, 2)
    with pytest.raises(RegimeError):
        prescribed_curvature("v^2", Rectangle.centered(0.5, 0.5), sch, nx=33, ny=33)


# -- covariant identities -------------------------------------------------


def test_flat_metric_omega_zero():
    rep = covariant_identity_check(flat_patch(Rectangle.centered(1.0, 1.0), 65))
    assert max(f.sup_norm() for f in rep.omega) < 1e-12


def test_sphere_identity_converges():
    rect = Rectangle.centered(0.5, 0.5)
    rep1 = covariant_identity_check(sphere_patch(rect, 129), tol=1e-3)
    rep2 = covariant_identity_check(sphere_patch(rect, 257), tol=1e-3)
    assert rep2.norms["omega_rel_mismatch"] <= 1e-4
    gain = rep1.norms["omega_rel_mismatch"] / rep2.norms["omega_rel_mismatch"]
    assert gain >= 8.0
    # stencil-order fit over a doubling pair
    assert np.log2(gain) >= 3.5


def random_patch(n):
    rect = Rectangle(-0.4, 0.4, -0.3, 0.3)
    return MetricPatch(
        rect,
        E=GridField.from_function(
            lambda U, V: 1 + np.sin(U) * np.cos(2 * V) / 3 + U * U / 5, rect, n, n
        ),
        F=GridField.from_function(lambda U, V: np.sin(U + V) / 7, rect, n, n),
        G=GridField.from_function(
            lambda U, V: 1 + np.cos(U) * V / 4 + V * V / 6, rect, n, n
        ),
    )


def test_random_metric_identity_at_nodes():
    m = random_patch(129)
    rep = covariant_identity_check(m, tol=1e-6)
    rng = np.random.default_rng(7)
    om = np.stack([f.values for f in rep.omega])
    sd = np.stack([f.values for f in rep.curvature_side])
    scale_ = np.max(np.abs(sd))
    for _ in range(10):
        i = int(rng.integers(6, 123))
        j = int(rng.integers(6, 123))
        assert np.max(np.abs(om[:, i, j] - sd[:, i, j])) <= 1e-6 * scale_


def test_divergence_identity_with_z():
    m = random_patch(129)
    z = GridField.from_function(
        lambda U, V: np.sin(U) * np.cos(V) + U * U / 2 + U * V * V / 3,
        m.rect, 129, 129,
    )
    rep = covariant_identity_check(m, z, tol=1e-6)
    assert rep.norms["divergence_rel_mismatch"] <= 1e-6
    b11, b12, b22 = rep.cofactor
    assert b11.values.shape == z.values.shape
    assert rep.divergence_defect is not None


def test_identity_violation_on_kinked_metric():
    rect = Rectangle.centered(0.5, 0.5)
    n = 129
    m = MetricPatch(
        rect,
        E=GridField.constant(1.0, rect, n, n),
        F=GridField.constant(0.0, rect, n, n),
        G=GridField.from_function(lambda U, V: 1 + 0.3 * np.abs(U), rect, n, n),
    )
    with pytest.raises(IdentityViolationError):
        covariant_identity_check(m, tol=1e-3)


def test_epsilon_scaling_of_identity():
    rect = Rectangle.centered(0.5, 0.5)
    rep1 = covariant_identity_check(sphere_patch(rect, 65), epsilon=1.0, tol=1e-3)
    rep2 = covariant_identity_check(sphere_patch(rect, 65), epsilon=0.5, tol=1e-3)
    r = rep1.omega[0].sup_norm() / rep2.omega[0].sup_norm()
    assert abs(r - 16.0) < 1e-9


# -- graph curvature helper ----------------------------------------------


def test_graph_curvature_of_seed(sp):
    w = GridField.constant(0.0, sp.rect, 65, 65)
    assert graph_curvature(w, sp).sup_norm() == 0.0


def test_deficit_metric_components(sp):
    rect = Rectangle.centered(0.5, 0.5)
    n = 65
    m = flat_patch(rect, n)
    z = GridField.from_function(lambda U, V: U * U / 2.0, rect, n, n)
    g = deficit_metric(m, z)
    U, _ = g.E.meshgrid()
    assert np.max(np.abs(g.E.values - (1 - U * U))) < 1e-10
    assert g.F.sup_norm() < 1e-12
    assert np.max(np.abs(g.G.values - 1.0)) < 1e-12
