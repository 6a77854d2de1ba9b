"""The scaled Monge-Ampere problem and its linearization.

Raw data det(z_ij + a_ij) = K f on a (u, v) patch is rescaled through
u = eps^2 x, v = eps^2 y, z = u^2/2 + eps^5 w into

  Phi(w) = (1 + eps w_xx + A11)(eps w_yy + A22) - (eps w_xy + A12)^2 - R,

where A_ij = eps^(2n) H^n P_ij and R = eps^(2(n+1)) H^(n+1) P carry the
declared vanishing order of a_ij and K f on the curve {Htilde = 0}, with
H(x, y) = eps^-2 Htilde(eps^2 x, eps^2 y).
"""

import numpy as np

from .errors import InconsistentOrderError, RegimeError
from .expr import Expression, as_callable
from .geometry import CurveSpec
from .grids import GridField, Rectangle, c_surrogate_norm
from .operators import LinearOperatorField

_PQ_VARS = ("u", "v", "p", "q1", "q2")


def _wrap(spec):
    return as_callable(spec, _PQ_VARS)


def _uses_pq(spec):
    if isinstance(spec, Expression):
        text = spec.text
    elif isinstance(spec, str):
        text = spec
    else:
        return callable(spec) and getattr(spec, "uses_pq", False)
    import re

    return bool(re.search(r"\b(p|q1|q2)\b", text))


class MAProblemSpec:
    """Raw Monge-Ampere data: a_ij, f, K, the curve sigma, and the order n."""

    def __init__(self, a11, a12, a22, f, K, sigma, n):
        self.a11 = _wrap(a11)
        self.a12 = _wrap(a12)
        self.a22 = _wrap(a22)
        self.f = _wrap(f)
        self.K = as_callable(K, ("u", "v"))
        self.sigma = sigma
        self.n = int(n)
        self._pq_dependent = any(_uses_pq(s) for s in (a11, a12, a22, f))

    def require_regime(self):
        if self.n <= 0 or self.n % 2 != 0:
            raise RegimeError(f"n={self.n} outside the implemented regime (even n > 0)")


class Unknown:
    """The scaled unknown w on a rectangle, with its working-norm surrogate."""

    def __init__(self, w, bound=None, surrogate_order=6):
        self.w = w
        self.surrogate_order = surrogate_order
        if not np.all(np.isfinite(w.values)):
            raise ValueError("w must be finite")
        if bound is not None:
            norm = c_surrogate_norm(w, surrogate_order)
            if norm > bound:
                raise ValueError(
                    f"surrogate C-norm {norm:.3g} exceeds working bound {bound:.3g}"
                )


def _deflate_columns(num, hvals, power, transverse_axis=1, rel_floor=1e-3):
    """num / hvals^power with the singular band filled by interpolation.

    Works column-by-column along the transverse axis; nodes where |hvals| is
    below rel_floor * scale are replaced by 1D interpolation from the good
    nodes of the same column (direct division is singular on the curve).
    """
    scale = np.max(np.abs(hvals))
    if scale == 0.0:
        raise InconsistentOrderError("defining function vanishes identically")
    bad = np.abs(hvals) < rel_floor * scale
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = num / hvals**power
    if not bad.any():
        return ratio
    out = np.array(ratio)
    moved = np.moveaxis(out, transverse_axis, 0)
    badm = np.moveaxis(bad, transverse_axis, 0)
    t = np.arange(moved.shape[0], dtype=float)
    for j in range(moved.shape[1]):
        col_bad = badm[:, j]
        if not col_bad.any():
            continue
        if col_bad.all():
            raise InconsistentOrderError("entire column inside singular band")
        good = ~col_bad
        moved[col_bad, j] = np.interp(t[col_bad], t[good], moved[good, j])
    return out


def _order_slope(vals, hvals):
    """Log-log slope of |vals| against |hvals| away from the curve.

    A factor field obtained by deflating a numerator of the wrong vanishing
    order blows up like a negative power of the defining function; its slope
    is near -1 or below, while a genuine smooth factor fits a slope near 0.
    """
    h = np.abs(np.asarray(hvals, float)).ravel()
    p = np.abs(np.asarray(vals, float)).ravel()
    scale = np.max(h)
    pmax = max(float(np.max(p)), 1e-300)
    keep = (h > 0.02 * scale) & (h < 0.5 * scale) & (p > 1e-12 * pmax)
    if keep.sum() < 10:
        return 0.0
    lh = np.log(h[keep])
    lp = np.log(p[keep])
    design = np.vstack([lh, np.ones_like(lh)]).T
    coef = np.linalg.lstsq(design, lp, rcond=None)[0]
    return float(coef[0])


class ScaledProblem:
    """Eq.-(6)-form problem data, evaluable on arbitrary (x, y) grids."""

    def __init__(self, spec, epsilon, x0, y0, M1=1.0, M2=None):
        self.spec = spec
        self.epsilon = float(epsilon)
        self.x0 = float(x0)
        self.y0 = float(y0)
        self.n = spec.n
        self.M1 = float(M1)
        self.M2 = M2
        self.rect = Rectangle.centered(x0, y0)

    # -- pointwise data in scaled coordinates -----------------------------
    def _uv(self, field_like):
        X, Y = field_like.meshgrid()
        e2 = self.epsilon**2
        return e2 * X, e2 * Y

    def _pq(self, field_like, w):
        """z and grad z in (u, v) variables for the current w."""
        U, V = self._uv(field_like)
        e = self.epsilon
        if w is None:
            Z = U * U / 2.0
            Q1 = U
            Q2 = np.zeros_like(U)
        else:
            Z = U * U / 2.0 + e**5 * w.values
            Q1 = U + e**3 * w.dx().values
            Q2 = e**3 * w.dy().values
        return Z, Q1, Q2

    def H_field(self, rect, nx, ny):
        e2 = self.epsilon**2
        f = self.spec.sigma.defining
        return GridField.from_function(
            lambda X, Y: f(u=e2 * X, v=e2 * Y) / e2, rect, nx, ny
        )

    def htilde_values(self, field_like):
        U, V = self._uv(field_like)
        return self.spec.sigma.defining(u=U, v=V)

    def perturbation_fields(self, rect, nx, ny, w=None):
        """A_ij = eps^(2n) H^n P_ij and R = eps^(2(n+1)) H^(n+1) P.

        These equal a_ij and K f evaluated in the original variables, which
        is how they are computed (exact, no singular division).
        """
        probe = GridField.constant(0.0, rect, nx, ny)
        U, V = self._uv(probe)
        Z, Q1, Q2 = self._pq(probe, w)
        env = {"u": U, "v": V, "p": Z, "q1": Q1, "q2": Q2}
        A11 = np.broadcast_to(np.asarray(self.spec.a11(**env), float), U.shape)
        A12 = np.broadcast_to(np.asarray(self.spec.a12(**env), float), U.shape)
        A22 = np.broadcast_to(np.asarray(self.spec.a22(**env), float), U.shape)
        K = np.broadcast_to(np.asarray(self.spec.K(u=U, v=V), float), U.shape)
        f = np.broadcast_to(np.asarray(self.spec.f(**env), float), U.shape)
        return (
            probe.like(A11.copy()),
            probe.like(A12.copy()),
            probe.like(A22.copy()),
            probe.like((K * f).copy()),
        )

    def factor_fields(self, rect, nx, ny, w=None):
        """P_11, P_12, P_22, P by deflating the declared vanishing orders."""
        A11, A12, A22, Kf = self.perturbation_fields(rect, nx, ny, w)
        probe = A11
        Ht = np.asarray(self.htilde_values(probe), float)
        Ht = np.broadcast_to(Ht, probe.values.shape)
        n = self.n
        P11 = probe.like(_deflate_columns(A11.values, Ht, n))
        P12 = probe.like(_deflate_columns(A12.values, Ht, n))
        P22 = probe.like(_deflate_columns(A22.values, Ht, n))
        P = probe.like(_deflate_columns(Kf.values, Ht, n + 1))
        return P11, P12, P22, P

    def verify_factorization(self, rng=None, samples=100, tol=1e-8):
        """Reconstruction identity eps^(2(n+1)) H^(n+1) P = K f at random points."""
        rng = np.random.default_rng(0) if rng is None else rng
        nx = ny = 81
        P11, P12, P22, P = self.factor_fields(self.rect, nx, ny)
        _, _, _, Kf = self.perturbation_fields(self.rect, nx, ny)
        probe = GridField.constant(0.0, self.rect, nx, ny)
        Ht = np.broadcast_to(np.asarray(self.htilde_values(probe), float), probe.values.shape)
        recon = Ht ** (self.n + 1) * P.values
        scale = max(np.max(np.abs(Kf.values)), 1e-300)
        idx = rng.integers(0, nx * ny, size=samples)
        resid = np.abs((recon - Kf.values).ravel()[idx]) / scale
        worst = float(np.max(resid))
        if worst > tol:
            raise InconsistentOrderError(
                f"factorization residual {worst:.3g} above {tol:.3g}; "
                "a_ij or K does not vanish to the declared order"
            )
        # the deflated factors must stay bounded toward the curve
        A11, A12, A22, _ = self.perturbation_fields(self.rect, nx, ny)
        checks = (
            ("a11", A11, P11), ("a12", A12, P12), ("a22", A22, P22), ("K f", Kf, P),
        )
        for name, num, fac in checks:
            if np.max(np.abs(num.values)) == 0.0:
                continue
            slope = _order_slope(fac.values, Ht)
            if slope < -0.5:
                raise InconsistentOrderError(
                    f"{name} factor blows up toward the curve "
                    f"(transverse slope {slope:.2f}); declared order too high"
                )
        return worst


def scale(problem, epsilon, x0, y0):
    """Build the eps-scaled problem on X = [-x0, x0] x [-y0, y0]."""
    if not (0.0 < epsilon < 1.0):
        raise ValueError("epsilon must lie in (0, 1)")
    sp = ScaledProblem(problem, epsilon, x0, y0, M1=problem.sigma.M1)
    sp.verify_factorization()
    # positivity floor for P (f >= M2 > 0 and transverse derivative bound)
    P11, P12, P22, P = sp.factor_fields(sp.rect, 81, 81)
    sp.M2 = float(np.min(P.values))
    return sp


def phi(sp, w, rect=None, nx=None, ny=None):
    """The scaled Monge-Ampere residual Phi(w) as a GridField."""
    if isinstance(w, Unknown):
        w = w.w
    rect = rect or w.rect
    nx = nx or w.nx
    ny = ny or w.ny
    if (rect, nx, ny) != (w.rect, w.nx, w.ny):
        w = w.resample(rect, nx, ny)
    e = sp.epsilon
    A11, A12, A22, Kf = sp.perturbation_fields(rect, nx, ny, w)
    out = (
        (1.0 + e * w.dxx().values + A11.values) * (e * w.dyy().values + A22.values)
        - (e * w.dxy().values + A12.values) ** 2
        - Kf.values
    )
    return w.like(out)


def _pq_derivative_fields(sp, w, rect, nx, ny):
    """d Phi / d(p, q1, q2) by central differences on the closed forms.

    Only evaluated when the raw data actually references p, q1 or q2;
    otherwise the first- and zeroth-order linearization coefficients vanish
    identically and this is skipped.
    """
    e = sp.epsilon
    probe = GridField.constant(0.0, rect, nx, ny)
    U, V = sp._uv(probe)
    Z, Q1, Q2 = sp._pq(probe, w)
    wxx = w.dxx().values if w is not None else 0.0
    wyy = w.dyy().values if w is not None else 0.0
    wxy = w.dxy().values if w is not None else 0.0

    def phi_at(Zv, Q1v, Q2v):
        env = {"u": U, "v": V, "p": Zv, "q1": Q1v, "q2": Q2v}
        A11 = np.asarray(sp.spec.a11(**env), float)
        A12 = np.asarray(sp.spec.a12(**env), float)
        A22 = np.asarray(sp.spec.a22(**env), float)
        K = np.asarray(sp.spec.K(u=U, v=V), float)
        f = np.asarray(sp.spec.f(**env), float)
        return (
            (1.0 + e * wxx + A11) * (e * wyy + A22)
            - (e * wxy + A12) ** 2
            - K * f
        )

    step = 1e-6
    dP = (phi_at(Z + step, Q1, Q2) - phi_at(Z - step, Q1, Q2)) / (2 * step)
    dQ1 = (phi_at(Z, Q1 + step, Q2) - phi_at(Z, Q1 - step, Q2)) / (2 * step)
    dQ2 = (phi_at(Z, Q1, Q2 + step) - phi_at(Z, Q1, Q2 - step)) / (2 * step)
    return probe.like(dP), probe.like(dQ1), probe.like(dQ2)


def linearize(sp, w, rect=None, nx=None, ny=None):
    """Linearization L1 of Phi at w (stage-L1 LinearOperatorField)."""
    if isinstance(w, Unknown):
        w = w.w
    rect = rect or w.rect
    nx = nx or w.nx
    ny = ny or w.ny
    if (rect, nx, ny) != (w.rect, w.nx, w.ny):
        w = w.resample(rect, nx, ny)
    e = sp.epsilon
    A11, A12, A22, _ = sp.perturbation_fields(rect, nx, ny, w)
    b11 = w.like(e * (e * w.dyy().values + A22.values))
    b12 = w.like(-e * (e * w.dxy().values + A12.values))
    b22 = w.like(e * (1.0 + e * w.dxx().values + A11.values))
    zero = w.like(np.zeros_like(w.values))
    if sp.spec._pq_dependent:
        dP, dQ1, dQ2 = _pq_derivative_fields(sp, w, rect, nx, ny)
        # z = u^2/2 + eps^5 w, u = eps^2 x:  dq1 = eps^3 v_x, dq2 = eps^3 v_y,
        # dp = eps^5 v
        b1 = w.like(e**3 * dQ1.values)
        b2 = w.like(e**3 * dQ2.values)
        b0 = w.like(e**5 * dP.values)
    else:
        b1, b2, b0 = zero, zero.copy(), zero.copy()
    return LinearOperatorField("L1", "xy", b11, b12, b22, b1, b2, b0)
