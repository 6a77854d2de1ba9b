"""Metric patches, curvature, geodesic parallel coordinates, vanishing order.

Metrics live on a coordinate rectangle either in general form (E, F, G) or in
geodesic parallel form ds^2 = du^2 + h^2 dv^2 with h(0, v) = 1, h_u(0, v) = 0.
"""

import numpy as np

from .errors import (
    DegenerateMetricError,
    DomainTooSmallError,
    InfiniteOrderError,
    NotAGeodesicError,
    TransversalityError,
)
from .expr import as_callable
from .grids import GridField, Rectangle


class MetricPatch:
    """First fundamental form over a rectangle, general or geodesic-parallel."""

    def __init__(self, rect, E=None, F=None, G=None, h=None):
        self.rect = rect
        if h is not None:
            if E is not None or F is not None or G is not None:
                raise ValueError("give either (E, F, G) or h, not both")
            self.h = h
            self.E = self.F = self.G = None
        else:
            if E is None or F is None or G is None:
                raise ValueError("general form needs all of E, F, G")
            self.E, self.F, self.G = E, F, G
            self.h = None

    @property
    def is_geodesic_parallel(self):
        return self.h is not None

    @property
    def nu(self):
        f = self.h if self.h is not None else self.E
        return f.nx

    @property
    def nv(self):
        f = self.h if self.h is not None else self.E
        return f.ny

    @classmethod
    def general(cls, rect, E, F, G, nu, nv):
        fE = as_callable(E)
        fF = as_callable(F)
        fG = as_callable(G)
        return cls(
            rect,
            E=GridField.from_function(lambda U, V: fE(u=U, v=V), rect, nu, nv),
            F=GridField.from_function(lambda U, V: fF(u=U, v=V), rect, nu, nv),
            G=GridField.from_function(lambda U, V: fG(u=U, v=V), rect, nu, nv),
        )

    @classmethod
    def geodesic_parallel(cls, rect, h, nu, nv):
        fh = as_callable(h)
        return cls(rect, h=GridField.from_function(lambda U, V: fh(u=U, v=V), rect, nu, nv))

    def components(self):
        """Return (E, F, G) as GridFields for either representation."""
        if self.is_geodesic_parallel:
            one = self.h.like(np.ones_like(self.h.values))
            zero = self.h.like(np.zeros_like(self.h.values))
            return one, zero, self.h * self.h
        return self.E, self.F, self.G

    def validate(self, tol=1e-9):
        if self.is_geodesic_parallel:
            if np.min(self.h.values) <= 0.0:
                raise DegenerateMetricError("h must be positive")
            # locate the u = 0 column if the rectangle contains it
            if self.rect.x0 <= 0.0 <= self.rect.x1:
                j = int(round((0.0 - self.rect.x0) / self.h.hx))
                if abs(self.h.x[j]) < 0.5 * self.h.hx:
                    col = self.h.values[j]
                    if np.max(np.abs(col - 1.0)) > 1e-6:
                        raise DegenerateMetricError("h(0, v) must equal 1")
                    hu = self.h.dx().values[j]
                    if np.max(np.abs(hu)) > 1e-4:
                        raise DegenerateMetricError("h_u(0, v) must vanish")
        else:
            E, F, G = self.E.values, self.F.values, self.G.values
            if np.min(E) <= 0 or np.min(G) <= 0 or np.min(E * G - F * F) <= 0:
                raise DegenerateMetricError("E, G, EG - F^2 must be positive")
        return self


class CurveSpec:
    """Zero set of a defining function, with a transversality bound."""

    def __init__(self, defining, M1=1.0, variables=("u", "v")):
        self.defining = as_callable(defining, variables)
        self.M1 = float(M1)

    def field(self, rect, nu, nv):
        f = self.defining
        return GridField.from_function(lambda U, V: f(u=U, v=V), rect, nu, nv)

    def check_transversality(self, rect, nu=64, nv=64):
        """min |grad Htilde| over nodes adjacent to the zero set must be >= M1."""
        H = self.field(rect, nu, nv)
        vals = H.values
        near = np.abs(vals) <= 2.0 * (np.max(np.abs(vals)) / max(nu, nv) + 1e-30)
        if not near.any():
            sx = np.sign(vals)
            near = np.zeros_like(vals, dtype=bool)
            near[:, :-1] |= sx[:, :-1] != sx[:, 1:]
            near[:-1, :] |= sx[:-1, :] != sx[1:, :]
        if not near.any():
            raise TransversalityError("zero set not found in rectangle")
        grad = np.hypot(H.dx().values, H.dy().values)
        margin = float(np.min(grad[near]))
        if margin < self.M1 - 1e-9:
            raise TransversalityError(
                f"transversality margin {margin:.3g} below M1={self.M1:.3g}"
            )
        return margin


def christoffel(metric, node=None):
    """Christoffel symbols Gamma^i_jk from the metric by 4th-order differences.

    Returns the full (2, 2, 2, nu, nv) array, or the (2, 2, 2) values at
    `node` if a grid index pair is given.  Symmetric in the lower indices by
    construction.
    """
    E, F, G = metric.components()
    g = np.empty((2, 2) + E.values.shape)
    g[0, 0] = E.values
    g[0, 1] = g[1, 0] = F.values
    g[1, 1] = G.values
    dg = np.empty((2, 2, 2) + E.values.shape)  # dg[l, j, k] = d_k g_{lj}
    for (l, j), f in (((0, 0), E), ((0, 1), F), ((1, 1), G)):
        dg[l, j, 0] = f.dx().values
        dg[l, j, 1] = f.dy().values
    dg[1, 0] = dg[0, 1]

    det = g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0]
    ginv = np.empty_like(g)
    ginv[0, 0] = g[1, 1] / det
    ginv[1, 1] = g[0, 0] / det
    ginv[0, 1] = ginv[1, 0] = -g[0, 1] / det

    gamma = np.zeros((2, 2, 2) + E.values.shape)
    for i in range(2):
        for j in range(2):
            for k in range(j, 2):
                s = 0.0
                for l in range(2):
                    s = s + ginv[i, l] * (dg[l, j, k] + dg[l, k, j] - dg[j, k, l])
                gamma[i, j, k] = 0.5 * s
                gamma[i, k, j] = gamma[i, j, k]
    if node is not None:
        return gamma[:, :, :, node[0], node[1]]
    return gamma


def gauss_curvature(metric):
    """Gaussian curvature field: -h_uu/h in parallel form, Brioschi otherwise."""
    if metric.is_geodesic_parallel:
        if np.min(metric.h.values) <= 0:
            raise DegenerateMetricError("h must be positive")
        return metric.h.like(-metric.h.dxx().values / metric.h.values)
    metric.validate()
    E, F, G = metric.components()
    Ev, Eu = E.dy().values, E.dx().values
    Fu, Fv = F.dx().values, F.dy().values
    Gu, Gv = G.dx().values, G.dy().values
    Evv = E.dyy().values
    Guu = G.dxx().values
    Fuv = F.dxy().values
    e, f, gg = E.values, F.values, G.values
    det1 = _det3(
        -0.5 * Evv + Fuv - 0.5 * Guu, 0.5 * Eu, Fu - 0.5 * Ev,
        Fv - 0.5 * Gu, e, f,
        0.5 * Gv, f, gg,
    )
    det2 = _det3(
        np.zeros_like(e), 0.5 * Ev, 0.5 * Gu,
        0.5 * Ev, e, f,
        0.5 * Gu, f, gg,
    )
    denom = (e * gg - f * f) ** 2
    return E.like((det1 - det2) / denom)


def _det3(a11, a12, a13, a21, a22, a23, a31, a32, a33):
    return (
        a11 * (a22 * a33 - a23 * a32)
        - a12 * (a21 * a33 - a23 * a31)
        + a13 * (a21 * a32 - a22 * a31)
    )


def _metric_eval(metric, u, v):
    """(E, F, G) and inverse at arbitrary points, via splines."""
    E, F, G = metric.components()
    return E.at(u, v), F.at(u, v), G.at(u, v)


def _christoffel_at(gamma_splines, u, v):
    out = np.zeros((2, 2, 2) + np.shape(u))
    for i in range(2):
        for j in range(2):
            for k in range(2):
                out[i, j, k] = gamma_splines[i][j][k].ev(u, v)
    return out


def _geodesic_rhs(state, gamma_splines):
    u, v, du, dv = state
    gam = _christoffel_at(gamma_splines, u, v)
    acc_u = -(gam[0, 0, 0] * du * du + 2 * gam[0, 0, 1] * du * dv + gam[0, 1, 1] * dv * dv)
    acc_v = -(gam[1, 0, 0] * du * du + 2 * gam[1, 0, 1] * du * dv + gam[1, 1, 1] * dv * dv)
    return np.array([du, dv, acc_u, acc_v])


def _rk4(rhs, state, t0, t1, nsteps):
    h = (t1 - t0) / nsteps
    s = state
    for _ in range(nsteps):
        k1 = rhs(s)
        k2 = rhs(s + 0.5 * h * k1)
        k3 = rhs(s + 0.5 * h * k2)
        k4 = rhs(s + h * (k3))
        s = s + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return s


def _curve_points(metric, sigma, nv):
    """Sample the zero curve of sigma as a graph over whichever axis works."""
    rect = metric.rect
    H = sigma.field(rect, 4 * nv, 4 * nv)
    # try graph over v (curve points (u0(v), v)), else over u
    from scipy.optimize import brentq

    f = sigma.defining
    pts = []
    vs = np.linspace(rect.y0, rect.y1, nv)
    ok = True
    for v in vs:
        vals = np.array([f(u=u, v=v) for u in np.linspace(rect.x0, rect.x1, 65)])
        sgn = np.sign(vals)
        idx = np.nonzero(sgn[:-1] * sgn[1:] <= 0)[0]
        if len(idx) == 0:
            ok = False
            break
        us = np.linspace(rect.x0, rect.x1, 65)
        i = idx[0]
        if vals[i] == 0.0:
            root = us[i]
        else:
            root = brentq(lambda uu: f(u=uu, v=v), us[i], us[i + 1])
        pts.append((root, v))
    if ok:
        return np.array(pts)
    us = np.linspace(rect.x0, rect.x1, nv)
    pts = []
    for u in us:
        vals = np.array([f(u=u, v=v) for v in np.linspace(rect.y0, rect.y1, 65)])
        sgn = np.sign(vals)
        idx = np.nonzero(sgn[:-1] * sgn[1:] <= 0)[0]
        if len(idx) == 0:
            raise TransversalityError("zero set of sigma not found in rectangle")
        vsamp = np.linspace(rect.y0, rect.y1, 65)
        i = idx[0]
        if vals[i] == 0.0:
            root = vsamp[i]
        else:
            root = brentq(lambda vv: f(u=u, v=vv), vsamp[i], vsamp[i + 1])
        pts.append((u, root))
    return np.array(pts)


def _min_exit_distance(rect, cu, cv, nu_vec, nv_vec):
    """Shortest ray distance from the curve to the rectangle edge along
    either normal direction (arc-length units, straight-ray estimate)."""
    best = np.inf
    for s in (+1.0, -1.0):
        dx = s * nu_vec
        dy = s * nv_vec
        with np.errstate(divide="ignore", invalid="ignore"):
            tx = np.where(dx > 0, (rect.x1 - cu) / dx,
                          np.where(dx < 0, (rect.x0 - cu) / dx, np.inf))
            ty = np.where(dy > 0, (rect.y1 - cv) / dy,
                          np.where(dy < 0, (rect.y0 - cv) / dy, np.inf))
        best = min(best, float(np.min(np.minimum(tx, ty))))
    return best


def to_geodesic_parallel(metric, sigma, geodesic_tol=1e-4):
    """Build geodesic parallel coordinates about the (geodesic) curve sigma.

    Arc-length reparameterizes sigma, verifies the geodesic-equation residual,
    flows unit-speed geodesics orthogonally off the curve with a fixed-step
    4th-order integrator (step = half the grid spacing), and reads off
    ds^2 = du^2 + h^2 dv^2 on the fan.
    """
    metric.validate()
    nu, nv = metric.nu, metric.nv
    E, F, G = metric.components()
    gamma = christoffel(metric)
    from scipy.interpolate import RectBivariateSpline

    xs = E.x
    ys = E.y
    gamma_splines = [
        [
            [RectBivariateSpline(xs, ys, gamma[i, j, k], kx=3, ky=3) for k in range(2)]
            for j in range(2)
        ]
        for i in range(2)
    ]

    pts = _curve_points(metric, sigma, nv)
    # arc length along the curve
    du_ = np.gradient(pts[:, 0])
    dv_ = np.gradient(pts[:, 1])
    Ee, Fe, Ge = _metric_eval(metric, pts[:, 0], pts[:, 1])
    seg = np.sqrt(Ee * du_ * du_ + 2 * Fe * du_ * dv_ + Ge * dv_ * dv_)
    s = np.concatenate([[0.0], np.cumsum(0.5 * (seg[1:] + seg[:-1]) * 1.0)])
    # re-sample to uniform arc length with the same number of nodes
    s_uniform = np.linspace(s[0], s[-1], nv)
    cu = np.interp(s_uniform, s, pts[:, 0])
    cv = np.interp(s_uniform, s, pts[:, 1])
    ds = s_uniform[1] - s_uniform[0]
    tu = np.gradient(cu, ds)
    tv = np.gradient(cv, ds)

    # geodesic residual of the base curve (normal component of acceleration)
    Ee, Fe, Ge = _metric_eval(metric, cu, cv)
    speed = np.sqrt(Ee * tu * tu + 2 * Fe * tu * tv + Ge * tv * tv)
    tu, tv = tu / speed, tv / speed
    au = np.gradient(tu, ds)
    av = np.gradient(tv, ds)
    gam = _christoffel_at(gamma_splines, cu, cv)
    ru = au + gam[0, 0, 0] * tu * tu + 2 * gam[0, 0, 1] * tu * tv + gam[0, 1, 1] * tv * tv
    rv = av + gam[1, 0, 0] * tu * tu + 2 * gam[1, 0, 1] * tu * tv + gam[1, 1, 1] * tv * tv
    res = np.sqrt(Ee * ru * ru + 2 * Fe * ru * rv + Ge * rv * rv)
    interior = slice(2, -2)
    if np.max(res[interior]) > geodesic_tol:
        raise NotAGeodesicError(
            f"geodesic residual {np.max(res[interior]):.3g} exceeds {geodesic_tol:.3g}"
        )

    # unit normal (rotate tangent by 90 degrees in the metric)
    det = np.sqrt(Ee * Ge - Fe * Fe)
    # normal n with g(n, t) = 0, g(n, n) = 1:  n = (-(F tu + G tv), E tu + F tv)/det
    nu_vec = -(Fe * tu + Ge * tv) / det
    nv_vec = (Ee * tu + Fe * tv) / det
    # orientation convention: du(n) > 0 (fall back to dv(n) > 0 on the curve)
    flip = np.where(np.abs(nu_vec) > 1e-12, np.sign(nu_vec), np.sign(nv_vec))
    flip = float(np.sign(np.sum(flip)) or 1.0)
    nu_vec *= flip
    nv_vec *= flip

    # keep the largest contiguous stretch of the curve whose normal rays
    # stay inside the rectangle for a useful distance
    exits = np.array(
        [
            _min_exit_distance(
                metric.rect,
                np.array([cu[j]]),
                np.array([cv[j]]),
                np.array([nu_vec[j]]),
                np.array([nv_vec[j]]),
            )
            for j in range(nv)
        ]
    )
    floor = 0.5 * float(np.median(exits))
    ok = exits >= floor
    runs = []
    start = None
    for j, flag in enumerate(ok):
        if flag and start is None:
            start = j
        if (not flag or j == nv - 1) and start is not None:
            end = j + 1 if flag else j
            runs.append((start, end))
            start = None
    if not runs:
        raise DomainTooSmallError("curve touches the rectangle boundary")
    start, end = max(runs, key=lambda r: r[1] - r[0])
    if end - start < 8:
        raise DomainTooSmallError("too little of the curve clears the boundary")
    cu, cv = cu[start:end], cv[start:end]
    nu_vec, nv_vec = nu_vec[start:end], nv_vec[start:end]
    s_uniform = s_uniform[start:end]
    nv = end - start

    half_u = 0.8 * float(np.min(exits[start:end]))
    if half_u <= 0:
        raise DomainTooSmallError("curve touches the rectangle boundary")
    u_nodes = np.linspace(-half_u, half_u, nu)
    h_step = 0.5 * min(E.hx, E.hy)

    U = np.zeros((nu, nv))
    V = np.zeros((nu, nv))
    rhs = lambda st: _geodesic_rhs(st, gamma_splines)
    for j in range(nv):
        # integrate outward in both directions from the curve point
        for sign_dir in (+1.0, -1.0):
            state = np.array([cu[j], cv[j], sign_dir * nu_vec[j], sign_dir * nv_vec[j]])
            targets = u_nodes[u_nodes * sign_dir > 0] * sign_dir
            order = np.argsort(targets)
            t_prev = 0.0
            st = state
            for t in targets[order]:
                nsteps = max(1, int(np.ceil((t - t_prev) / h_step)))
                st = _rk4(rhs, st, t_prev, t, nsteps)
                t_prev = t
                i = int(np.argmin(np.abs(u_nodes - sign_dir * t)))
                U[i, j] = st[0]
                V[i, j] = st[1]
        on_curve = np.abs(u_nodes) < 1e-14
        U[on_curve, j] = cu[j]
        V[on_curve, j] = cv[j]

    pad = 1e-9 * (1 + np.max(np.abs(metric.rect.width)))
    if (
        U.min() < metric.rect.x0 - pad
        or U.max() > metric.rect.x1 + pad
        or V.min() < metric.rect.y0 - pad
        or V.max() > metric.rect.y1 + pad
    ):
        raise DomainTooSmallError("geodesic fan left the metric's rectangle")

    # h = metric norm of d(position)/dv along the fan
    dUv = np.gradient(U, ds, axis=1)
    dVv = np.gradient(V, ds, axis=1)
    Ee, Fe, Ge = _metric_eval(metric, U, V)
    h_vals = np.sqrt(Ee * dUv * dUv + 2 * Fe * dUv * dVv + Ge * dVv * dVv)
    rect_new = Rectangle(-half_u, half_u, 0.0, s_uniform[-1] - s_uniform[0])
    return MetricPatch(rect_new, h=GridField(rect_new, h_vals))


class VanishingOrderReport:
    def __init__(self, order, n, in_regime, slope, band):
        self.order = order  # least q with nonzero q-th transverse derivative
        self.n = n  # order - 1
        self.in_regime = in_regime  # n positive and even
        self.slope = slope  # raw fitted slope before rounding
        self.band = band

    def __repr__(self):
        return (
            f"VanishingOrderReport(order={self.order}, n={self.n}, "
            f"in_regime={self.in_regime}, slope={self.slope:.3f})"
        )


def vanishing_order(K, sigma, band=(0.01, 0.1), max_order=12):
    """Estimate the order of vanishing of K along sigma's zero set.

    Fits log|K| against log|signed distance| over a band of distances
    (fractions of the domain width) and rounds the slope to the nearest
    integer.  Returns order q = n + 1 together with the regime flag.
    """
    H = sigma.field(K.rect, K.nx, K.ny)
    grad = np.hypot(H.dx().values, H.dy().values)
    grad = np.where(grad < 1e-30, 1e-30, grad)
    dist = np.abs(H.values) / grad

    width = min(K.rect.width, K.rect.height)
    lo, hi = band[0] * width, band[1] * width
    mask = (dist >= lo) & (dist <= hi)
    if not mask.any():
        raise InfiniteOrderError("no nodes in the fitting band")

    kv = np.abs(K.values[mask])
    scale = np.max(np.abs(K.values))
    good = kv > 1e-13 * max(scale, 1e-300)
    if scale == 0.0 or np.count_nonzero(good) < 8:
        raise InfiniteOrderError(
            f"K indistinguishable from 0 near sigma up to order {max_order}"
        )
    lx = np.log(dist[mask][good])
    ly = np.log(kv[good])
    slope, _ = np.polyfit(lx, ly, 1)
    order = int(round(slope))
    if order < 0:
        order = 0
    if order > max_order:
        raise InfiniteOrderError(f"fitted order {order} beyond max_order={max_order}")
    n = order - 1
    in_regime = n > 0 and n % 2 == 0
    return VanishingOrderReport(order, n, in_regime, float(slope), (lo, hi))
