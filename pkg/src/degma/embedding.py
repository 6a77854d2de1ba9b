"""Geometric post-processing of a converged scaled solution.

Reconstructs the height function z on the original (u, v) patch, checks that
ds^2 - dz^2 is flat, builds flat coordinates by integrating the connection
form of an orthonormal coframe, and measures how well (x, y, z) realizes
ds^2 = dx^2 + dy^2 + dz^2.  Also hosts the prescribed-curvature instance
z_11 z_22 - z_12^2 = K (1 + |grad z|^2)^2 and the covariant cofactor and
curvature identity checks.
"""

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .expr import as_callable
from .errors import (
    GradientTooLargeError,
    IdentityViolationError,
    NotFlatEnoughError,
    RegimeError,
    SignatureError,
)
from .geometry import CurveSpec, MetricPatch, christoffel, gauss_curvature, vanishing_order
from .grids import GridField, Rectangle
from .iteration import run
from .problem import MAProblemSpec, scale


class EmbeddingResult:
    """Embedding components on the (u, v) patch plus residual fields.

    x, y, z are the embedding coordinate functions, `flatness` the Gaussian
    curvature of ds^2 - dz^2, `mismatch` the three first-fundamental-form
    defect fields, and `norms` a flat dictionary of summary numbers.
    """

    def __init__(self, x, y, z, flatness, mismatch, norms):
        self.x = x
        self.y = y
        self.z = z
        self.flatness = flatness
        self.mismatch = mismatch
        self.norms = norms


class CovariantLinearization:
    """Cofactor fields of the covariant Hessian and the curvature identity.

    cofactor holds b^11 = nabla_22 z, b^12 = -nabla_12 z, b^22 = nabla_11 z,
    first_order the contractions -b^lk Gamma^i_lk, omega the fields
    Omega^i = Gamma^i_12,2 - Gamma^i_22,1 + Gamma^j_12 Gamma^i_j2
    - Gamma^j_22 Gamma^i_j1, and curvature_side the closed forms
    -eps^4 g^i1 |g| K they must equal.
    """

    def __init__(self, cofactor, first_order, omega, curvature_side,
                 divergence_defect, norms):
        self.cofactor = cofactor
        self.first_order = first_order
        self.omega = omega
        self.curvature_side = curvature_side
        self.divergence_defect = divergence_defect
        self.norms = norms


def reconstruct_z(w, sp, nu=None, nv=None):
    """Height function z(u, v) = u^2/2 + eps^5 w(u/eps^2, v/eps^2).

    The scaled solution w lives on the working rectangle X; z is resampled
    onto the original patch (the eps^2 image of X) by cubic interpolation.
    Raises GradientTooLargeError if |grad z| reaches 1 anywhere, since
    ds^2 - dz^2 must stay a metric.
    """
    e = sp.epsilon
    e2 = e * e
    nu = nu or w.nx
    nv = nv or w.ny
    urect = Rectangle(e2 * w.rect.x0, e2 * w.rect.x1,
                      e2 * w.rect.y0, e2 * w.rect.y1)
    zf = GridField.constant(0.0, urect, nu, nv)
    U, V = zf.meshgrid()
    X, Y = U / e2, V / e2
    z = zf.like(U * U / 2.0 + e**5 * w.at(X, Y))
    # chain rule: z_u = u + eps^3 w_x, z_v = eps^3 w_y
    zu = U + e**3 * w.dx().at(X, Y)
    zv = e**3 * w.dy().at(X, Y)
    gmax = float(np.max(np.hypot(zu, zv)))
    if gmax >= 1.0:
        raise GradientTooLargeError(
            f"|grad z| reaches {gmax:.3g}; ds^2 - dz^2 degenerates"
        )
    return z


def deficit_metric(metric, z):
    """The difference form g~ = ds^2 - dz^2 as a general MetricPatch."""
    E, F, G = metric.components()
    if E.values.shape != z.values.shape or metric.rect != z.rect:
        E = z.like(E.at(*z.meshgrid()))
        F = z.like(F.at(*z.meshgrid()))
        G = z.like(G.at(*z.meshgrid()))
    zu = z.dx().values
    zv = z.dy().values
    Et = E.like(E.values - zu * zu)
    Ft = F.like(F.values - zu * zv)
    Gt = G.like(G.values - zv * zv)
    if np.min(Et.values) <= 0.0 or np.min(Et.values * Gt.values - Ft.values**2) <= 0.0:
        raise SignatureError("ds^2 - dz^2 is not positive definite")
    return MetricPatch(z.rect, E=Et, F=Ft, G=Gt)


def flatness_residual(metric, z):
    """Gaussian curvature of ds^2 - dz^2; identically zero iff the form
    is flat, and bounded by the Monge-Ampere residual times a conditioning
    factor that must be measured per problem."""
    return gauss_curvature(deficit_metric(metric, z))


def _origin_index(field):
    """Grid index of the integration base point: the node nearest (0, 0)
    if the rectangle contains the origin, else the center node."""
    rect = field.rect
    if rect.contains(0.0, 0.0):
        i = int(round((0.0 - rect.x0) / field.hx))
        j = int(round((0.0 - rect.y0) / field.hy))
    else:
        i = field.nx // 2
        j = field.ny // 2
    return i, j


def _integrate_form(P, Q, hx, hy, i0, j0, u_first=True):
    """Potential of the (assumed closed) form P du + Q dv, zero at (i0, j0).

    u_first integrates along the base row v = v0 and then up each column;
    the other order serves as the path-independence cross-check.
    """

    def cum(vals, h, axis, k0):
        c = np.zeros_like(vals)
        idx = [slice(None)] * vals.ndim
        fwd = cumulative_trapezoid(np.take(vals, range(k0, vals.shape[axis]), axis),
                                   dx=h, axis=axis, initial=0.0)
        bwd = cumulative_trapezoid(np.take(vals, range(k0, -1, -1), axis),
                                   dx=h, axis=axis, initial=0.0)
        idx[axis] = slice(k0, None)
        c[tuple(idx)] = fwd
        idx[axis] = slice(k0, None, -1)
        c[tuple(idx)] = -bwd
        return c

    if u_first:
        base = cum(P[:, j0:j0 + 1], hx, 0, i0)  # along u at v = v0
        return base + cum(Q, hy, 1, j0)
    base = cum(Q[i0:i0 + 1, :], hy, 1, j0)  # along v at u = u0
    return base + cum(P, hx, 0, i0)


def _boundary_circulation(P, Q, hx, hy):
    """Trapezoid line integral of P du + Q dv around the grid boundary,
    counterclockwise."""
    bottom = np.trapezoid(P[:, 0], dx=hx)
    top = np.trapezoid(P[:, -1], dx=hx)
    left = np.trapezoid(Q[0, :], dx=hy)
    right = np.trapezoid(Q[-1, :], dx=hy)
    return bottom + right - top - left


def flat_coordinates(gt, holonomy_tol=1e-4):
    """Flat coordinates (x, y) of a flat metric g~, with x(0) = y(0) = 0.

    Builds the orthonormal coframe theta^1 = sqrt(E) du + F/sqrt(E) dv,
    theta^2 = sqrt((EG - F^2)/E) dv, solves the structure equations for the
    connection form, integrates it to a rotation angle from the origin, and
    integrates the rotated (now closed) coframe to coordinate functions.
    The convention dx(d_u) > 0 at the origin fixes the rotation.
    """
    E, F, G = gt.components()
    Ev, Fv, Gv = E.values, F.values, G.values
    if np.min(Ev) <= 0.0 or np.min(Ev * Gv - Fv * Fv) <= 0.0:
        raise SignatureError("metric is not positive definite")
    a11 = E.like(np.sqrt(Ev))
    a12 = E.like(Fv / a11.values)
    a22 = E.like(np.sqrt((Ev * Gv - Fv * Fv) / Ev))
    det = a11.values * a22.values

    # connection form w = p du + q dv from d(theta^1) = w ^ theta^2,
    # d(theta^2) = -w ^ theta^1
    c1 = a12.dx().values - a11.dy().values
    c2 = a22.dx().values
    p = (a11.values * c1) / det
    q = (a12.values * c1 + a22.values * c2) / det

    hx, hy = E.hx, E.hy
    holonomy = abs(_boundary_circulation(p, q, hx, hy))
    if holonomy > holonomy_tol:
        raise NotFlatEnoughError(
            f"connection-form holonomy {holonomy:.3g} exceeds {holonomy_tol:.3g}"
        )

    i0, j0 = _origin_index(E)
    phi = -_integrate_form(p, q, hx, hy, i0, j0)
    c, s = np.cos(phi), np.sin(phi)

    # rotated coframe components; both forms are closed up to the holonomy
    Xu = c * a11.values
    Xv = c * a12.values + s * a22.values
    Yu = -s * a11.values
    Yv = -s * a12.values + c * a22.values
    x = E.like(_integrate_form(Xu, Xv, hx, hy, i0, j0))
    y = E.like(_integrate_form(Yu, Yv, hx, hy, i0, j0))
    return x, y


def isometry_residual(metric, x, y, z):
    """Max and L2 defects of x_u^2 + y_u^2 + z_u^2 = E and friends."""
    E, F, G = metric.components()
    if E.values.shape != x.values.shape or metric.rect != x.rect:
        E = x.like(E.at(*x.meshgrid()))
        F = x.like(F.at(*x.meshgrid()))
        G = x.like(G.at(*x.meshgrid()))
    xu, xv = x.dx().values, x.dy().values
    yu, yv = y.dx().values, y.dy().values
    zu, zv = z.dx().values, z.dy().values
    dE = x.like(xu * xu + yu * yu + zu * zu - E.values)
    dF = x.like(xu * xv + yu * yv + zu * zv - F.values)
    dG = x.like(xv * xv + yv * yv + zv * zv - G.values)
    scale_ = max(float(np.max(np.abs(E.values))), float(np.max(np.abs(G.values))))
    out = {"scale": scale_}
    worst = 0.0
    for name, d in (("E", dE), ("F", dF), ("G", dG)):
        out[name + "_max"] = d.sup_norm()
        out[name + "_l2"] = d.l2_norm()
        worst = max(worst, d.sup_norm())
    out["max_rel"] = worst / scale_
    out["l2_rel"] = float(np.sqrt(dE.l2_norm() ** 2 + dF.l2_norm() ** 2
                                  + dG.l2_norm() ** 2)) / scale_
    out["fields"] = (dE, dF, dG)
    return out


def _inner_half(field):
    return field.restrict(field.rect.scaled(0.5))


def assemble_embedding(w, sp, holonomy_tol=1e-4):
    """Full post-processing of a converged w: reconstruct z, take the
    induced graph metric as ds^2, verify ds^2 - dz^2 is flat, build flat
    coordinates, and measure the isometry defect.

    All outputs are restricted to the inner half-rectangle to keep
    boundary stencils out of the reported numbers.
    """
    z_full = reconstruct_z(w, sp)
    z = _inner_half(z_full)
    e = sp.epsilon
    U, V = z.meshgrid()
    X, Y = U / (e * e), V / (e * e)
    # induced metric of the graph via the chain rule (spline-accurate)
    zu = U + e**3 * w.dx().at(X, Y)
    zv = e**3 * w.dy().at(X, Y)
    metric = MetricPatch(z.rect,
                         E=z.like(1.0 + zu * zu),
                         F=z.like(zu * zv),
                         G=z.like(1.0 + zv * zv))
    flat = flatness_residual(metric, z)
    x, y = flat_coordinates(deficit_metric(metric, z), holonomy_tol)
    summary = isometry_residual(metric, x, y, z)
    dE, dF, dG = summary.pop("fields")
    norms = dict(summary)
    norms["flatness_sup"] = flat.sup_norm()
    norms["grad_z_sup"] = float(np.max(np.hypot(zu, zv)))
    return EmbeddingResult(x, y, z, flat, (dE, dF, dG), norms)


def graph_curvature(w, sp, rect=None, nx=None, ny=None):
    """Gaussian curvature of the graph z = u^2/2 + eps^5 w, evaluated on
    the scaled grid through the chain rule (no raw differences of z)."""
    if rect is None:
        rect, nx, ny = w.rect, w.nx, w.ny
    if (rect, nx, ny) != (w.rect, w.nx, w.ny):
        w = w.resample(rect, nx, ny)
    e = sp.epsilon
    X, Y = w.meshgrid()
    zuu = 1.0 + e * w.dxx().values
    zvv = e * w.dyy().values
    zuv = e * w.dxy().values
    zu = e * e * X + e**3 * w.dx().values
    zv = e**3 * w.dy().values
    return w.like((zuu * zvv - zuv * zuv) / (1.0 + zu * zu + zv * zv) ** 2)


def prescribed_curvature(K, domain, schedule, nx=129, ny=129, n_modes=24,
                         sigma=None):
    """Solve z_11 z_22 - z_12^2 = K (1 + |grad z|^2)^2 for a graph surface.

    K is a function of (u, v) vanishing to finite order on the curve sigma
    (default {v = 0}); domain is the working rectangle in scaled
    coordinates.  The vanishing order is estimated from K itself and must
    give an even positive n.  Returns the embedded graph together with the
    curvature-of-graph residual field in norms and result fields.
    """
    sigma = sigma or CurveSpec("v")
    e = schedule.epsilon
    e2 = e * e
    urect = Rectangle(e2 * domain.x0, e2 * domain.x1,
                      e2 * domain.y0, e2 * domain.y1)
    Kfn = as_callable(K, ("u", "v"))
    Kf = GridField.from_function(
        lambda U, V: np.broadcast_to(np.asarray(Kfn(u=U, v=V), float),
                                     U.shape).copy(),
        urect, 129, 129)

    if float(np.max(np.abs(Kf.values))) == 0.0:
        # flat curvature: the seed z = u^2/2 already solves the equation
        spec = MAProblemSpec(0.0, 0.0, 0.0, "(1+q1^2+q2^2)^2", 0.0, sigma, 2)
        sp = _scale_flat(spec, e, domain)
        w = GridField.constant(0.0, domain, nx, ny)
        report = {"iterations": 0, "converged": True, "flat": True}
    else:
        report_vo = vanishing_order(Kf, sigma)
        if not report_vo.in_regime:
            raise RegimeError(
                f"curvature vanishes to order {report_vo.order} on sigma; "
                "n must be a positive even integer"
            )
        spec = MAProblemSpec(0.0, 0.0, 0.0, "(1+q1^2+q2^2)^2", K, sigma,
                             report_vo.n)
        sp = scale(spec, e, domain.x1, domain.y1)
        w, report = run(sp, schedule, nx=nx, ny=ny, n_modes=n_modes)

    result = assemble_embedding(w, sp)
    Kg = graph_curvature(w, sp)
    Ktarget = Kg.like(np.broadcast_to(
        np.asarray(spec.K(u=e2 * Kg.meshgrid()[0], v=e2 * Kg.meshgrid()[1]),
                   float), Kg.values.shape).copy())
    resid = Kg - Ktarget
    inner = _inner_half(resid)
    kscale = max(Ktarget.sup_norm(), 1e-300)
    result.norms["curvature_sup"] = resid.sup_norm()
    result.norms["curvature_rel"] = inner.sup_norm() / kscale
    result.norms["iterations"] = report.get("iterations")
    result.curvature_residual = resid
    result.curvature_target = Ktarget
    result.curvature = Kg
    result.run_report = report
    result.w = w
    result.sp = sp
    return result


def _scale_flat(spec, epsilon, domain):
    """ScaledProblem for identically flat curvature, bypassing the
    factorization audit (which has nothing to divide)."""
    from .problem import ScaledProblem

    sp = ScaledProblem(spec, epsilon, domain.x1, domain.y1, M1=spec.sigma.M1)
    sp.M2 = 0.0
    return sp


def covariant_identity_check(metric, z=None, epsilon=1.0, tol=1e-3):
    """Curvature identity and cofactor divergence identity of the covariant
    linearization.

    Checks Omega^i = Gamma^i_12,2 - Gamma^i_22,1 + Gamma^j_12 Gamma^i_j2
    - Gamma^j_22 Gamma^i_j1 against -eps^4 g^i1 |g| K nodewise, and (when z
    is given) the divergence identity

      d_1 b^11 + d_2 b^12 + b^lk Gamma^1_lk
        = Gamma^j_j2 b^12 + Gamma^j_j1 b^11 + Omega^i z_i

    for the cofactor fields b^11 = nabla_22 z, b^12 = -nabla_12 z,
    b^22 = nabla_11 z of the covariant Hessian.  A relative mismatch above
    tol (outside the boundary-stencil frame) raises IdentityViolationError.
    """
    E, F, G = metric.components()
    gam = christoffel(metric)
    probe = E
    shape = probe.values.shape

    dgam = np.empty((2, 2, 2, 2) + shape)  # dgam[i, j, k, m] = d_m Gamma^i_jk
    for i in range(2):
        for j in range(2):
            for k in range(2):
                f = probe.like(gam[i, j, k].copy())
                dgam[i, j, k, 0] = f.dx().values
                dgam[i, j, k, 1] = f.dy().values

    omega = np.empty((2,) + shape)
    for i in range(2):
        quad = np.zeros(shape)
        for j in range(2):
            quad += gam[j, 0, 1] * gam[i, j, 1] - gam[j, 1, 1] * gam[i, j, 0]
        omega[i] = dgam[i, 0, 1, 1] - dgam[i, 1, 1, 0] + quad

    g11, g12, g22 = E.values, F.values, G.values
    detg = g11 * g22 - g12 * g12
    Kv = gauss_curvature(metric).values
    ginv_i1 = np.stack([g22 / detg, -g12 / detg])  # g^{11}, g^{21}
    e4 = epsilon**4
    side = np.empty_like(omega)
    for i in range(2):
        side[i] = -e4 * ginv_i1[i] * detg * Kv
    omega *= e4

    # compare away from the boundary frame where the stencils are one-sided
    # (differences of differences feel the edge stencils 6 nodes deep)
    core = (slice(6, -6), slice(6, -6))
    scale_ = max(float(np.max(np.abs(side))), 1e-300)
    mismatch = float(np.max(np.abs((omega - side)[(slice(None),) + core]))) / scale_

    norms = {"omega_scale": scale_, "omega_rel_mismatch": mismatch}
    omega_fields = tuple(probe.like(omega[i].copy()) for i in range(2))
    side_fields = tuple(probe.like(side[i].copy()) for i in range(2))

    cof = first = None
    div_defect = None
    if z is not None:
        if z.values.shape != shape or z.rect != metric.rect:
            raise ValueError("z must live on the metric's grid")
        zd = np.stack([z.dx().values, z.dy().values])
        zdd = np.empty((2, 2) + shape)
        zdd[0, 0] = z.dxx().values
        zdd[0, 1] = zdd[1, 0] = z.dxy().values
        zdd[1, 1] = z.dyy().values
        nab = np.empty((2, 2) + shape)
        for i in range(2):
            for j in range(2):
                nab[i, j] = zdd[i, j] - sum(gam[k, i, j] * zd[k] for k in range(2))
        b11 = probe.like(nab[1, 1].copy())
        b12 = probe.like(-nab[0, 1])
        b22 = probe.like(nab[0, 0].copy())
        cof = (b11, b12, b22)
        first = tuple(
            probe.like(-(b11.values * gam[i, 0, 0] + 2 * b12.values * gam[i, 0, 1]
                         + b22.values * gam[i, 1, 1]))
            for i in range(2)
        )
        tr1 = gam[0, 0, 0] + gam[1, 0, 1]  # Gamma^j_j1
        tr2 = gam[0, 0, 1] + gam[1, 1, 1]  # Gamma^j_j2
        lhs = b11.dx().values + b12.dy().values - first[0].values
        rhs = tr2 * b12.values + tr1 * b11.values \
            + (omega[0] * zd[0] + omega[1] * zd[1]) / e4
        div_defect = probe.like(lhs - rhs)
        dscale = max(float(np.max(np.abs(rhs))), 1e-300)
        norms["divergence_rel_mismatch"] = (
            float(np.max(np.abs(div_defect.values[core]))) / dscale)

    worst = max(mismatch, norms.get("divergence_rel_mismatch", 0.0))
    if worst > tol:
        raise IdentityViolationError(
            f"covariant identity mismatch {worst:.3g} exceeds {tol:.3g}; "
            "Christoffel or curvature fields are inconsistent"
        )
    return CovariantLinearization(cof, first, omega_fields, side_fields,
                                  div_defect, norms)
