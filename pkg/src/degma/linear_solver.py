"""Galerkin solver for the extended linear equation and the energy
certificate that underwrites its solvability.

The extended operator has the form

    L u = A u_xx + u_yy + D u_x + E u_y + F u

on a computational rectangle standing in for the whole plane.  The solver
expands u in x-modes, u^N = sum_l d_l(y) phi_l(x), projects the equation onto
the modes in a weighted discrete inner product, and solves the resulting
coupled second-order ODE system in y with far-field Dirichlet conditions.
The certificate evaluates the multiplier integrands I1..I4 whose positivity
gives coercivity of the quadratic form (a u + b u_y, L u).
"""

import numpy as np
from math import comb
from scipy.sparse import bsr_matrix, eye
from scipy.sparse.linalg import splu

from .errors import CertificateFailureError, SolverFailureError, StencilError
from .grids import GridField

MAX_DERIV_ORDER = 6


# ---------------------------------------------------------------------------
# weighted norms
# ---------------------------------------------------------------------------

class WeightedNormSpec:
    """Anisotropic weighted Sobolev norm

        ||u||_(m,l) = (sum_{s<=m, t<=l} theta^s ||dx^s dy^t u||^2)^(1/2)

    with a small weight theta damping the x-derivatives."""

    def __init__(self, theta=0.1, m=0, l=0):
        if not (0.0 < theta <= 1.0):
            raise ValueError("theta must lie in (0, 1]")
        if m < 0 or l < 0:
            raise ValueError("derivative orders must be nonnegative")
        self.theta = float(theta)
        self.m = int(m)
        self.l = int(l)


def weighted_norm(u, norm):
    """Discrete H_theta^(m,l) norm of a grid field (trapezoidal quadrature)."""
    if norm.m > MAX_DERIV_ORDER or norm.l > MAX_DERIV_ORDER:
        raise StencilError(
            f"derivative order ({norm.m}, {norm.l}) beyond supported maximum "
            f"{MAX_DERIV_ORDER}"
        )
    total = 0.0
    for s in range(norm.m + 1):
        for t in range(norm.l + 1):
            total += norm.theta**s * u.deriv(s, t).l2_norm() ** 2
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# basis
# ---------------------------------------------------------------------------

class GalerkinBasis:
    """Trigonometric x-modes on [x0, x1], orthonormalized in the discrete
    weighted product <f, g>_m = sum_{s<=m} theta^s int dx^s f dx^s g dx.

    Periodicity is admissible because the extended coefficients are constant
    in x outside the central cutoff window.  `values(d)` returns the d-th
    derivative of every orthonormal mode sampled on the grid, shape (N, nx).
    """

    def __init__(self, x0, x1, nx, n_modes, theta=0.1, m=0):
        if n_modes < 1:
            raise ValueError("need at least one mode")
        if n_modes // 2 >= (nx - 1) // 2:
            raise ValueError(
                f"{n_modes} modes exceed the Nyquist limit of a {nx}-node grid"
            )
        self.x = np.linspace(x0, x1, nx)
        self.period = x1 - x0
        self.n_modes = int(n_modes)
        self.theta = float(theta)
        self.m = int(m)
        self.weights = np.full(nx, self.x[1] - self.x[0])
        self.weights[0] *= 0.5
        self.weights[-1] *= 0.5
        # raw mode table: frequency k and cos/sin phase per mode
        ks, phases = [0], ["c"]
        k = 1
        while len(ks) < n_modes:
            ks.append(k)
            phases.append("c")
            if len(ks) < n_modes:
                ks.append(k)
                phases.append("s")
            k += 1
        self._ks = np.array(ks)
        self._phases = phases
        self._raw_cache = {}
        gram = self._gram()
        # Cholesky G = R^T R gives coefficients C = inv(R)^T with C G C^T = I
        R = np.linalg.cholesky(gram).T
        self._coef = np.linalg.inv(R).T
        self._values_cache = {}

    def _raw(self, d):
        """d-th derivative of the raw trig modes, shape (N, nx)."""
        if d not in self._raw_cache:
            out = np.empty((self.n_modes, len(self.x)))
            for i, (k, ph) in enumerate(zip(self._ks, self._phases)):
                om = 2.0 * np.pi * k / self.period
                arg = om * (self.x - self.x[0])
                # derivative cycles cos -> -sin -> -cos -> sin
                shift = d if ph == "c" else d + 3
                base = [np.cos, lambda a: -np.sin(a), lambda a: -np.cos(a), np.sin][
                    shift % 4
                ](arg)
                out[i] = om**d * base if k > 0 else (1.0 if d == 0 else 0.0)
            self._raw_cache[d] = out
        return self._raw_cache[d]

    def _gram(self):
        g = np.zeros((self.n_modes, self.n_modes))
        for s in range(self.m + 1):
            rs = self._raw(s)
            g += self.theta**s * (rs * self.weights) @ rs.T
        return g

    def values(self, d=0):
        if d not in self._values_cache:
            self._values_cache[d] = self._coef @ self._raw(d)
        return self._values_cache[d]

    def inner_products(self):
        """Discrete <phi_i, phi_j>_m matrix (identity to roundoff)."""
        g = np.zeros((self.n_modes, self.n_modes))
        for s in range(self.m + 1):
            vs = self.values(s)
            g += self.theta**s * (vs * self.weights) @ vs.T
        return g


# ---------------------------------------------------------------------------
# energy certificate
# ---------------------------------------------------------------------------

class EnergyCertificate:
    """Multiplier integrands and margin summary for the extended operator."""

    def __init__(self, kit, ylevels, I1, I2, I3, I4, gamma2):
        self.kit = kit
        self.ylevels = ylevels
        self.I1 = I1
        self.I2 = I2
        self.I3 = I3
        self.I4 = I4
        self.gamma2 = gamma2
        quad = I1.values * I3.values - 2.0 * I2.values**2
        self.margins = {
            "min_I1": float(np.min(I1.values)),
            "min_I3_minus_gamma2": float(np.min(I3.values - gamma2[None, :])),
            "min_I4": float(np.min(I4.values)),
            "min_I1I3_minus_2I2sq": float(np.min(quad)),
        }
        self.C6 = self.margins["min_I4"]
        # pointwise form bound: I1 ux^2 + 2 I2 ux uy + I3 uy^2 + I4 u^2
        #   >= (gamma^2/2) uy^2 + C6 u^2  >= margin (||gamma uy||^2 + ||u||^2)
        self.coercivity_margin = min(0.5, self.C6)

    def worst_node(self, which):
        field = {"I1": self.I1, "I3": self.I3, "I4": self.I4}[which]
        vals = field.values - (self.gamma2[None, :] if which == "I3" else 0.0)
        i, j = np.unravel_index(np.argmin(vals), vals.shape)
        return (float(field.x[i]), float(field.y[j]))

    def report(self):
        return {
            "margins": dict(self.margins),
            "C6": self.C6,
            "coercivity_margin": self.coercivity_margin,
            "constants": {
                "M1": self.kit.M1, "M2": self.kit.M2,
                "M3": self.kit.M3, "M4": self.kit.M4,
                "delta_cut": self.kit.delta_cut,
            },
        }


def energy_certificate(L, kit, tol=1e-12):
    """Evaluate the multiplier integrands of the zeroth-order energy estimate
    and check their sign conditions; raises CertificateFailureError with the
    worst offending node if any fails."""
    if L.stage != "extended":
        raise ValueError("energy certificate requires the extended operator")
    A, D, E, F = L.b11, L.b1, L.b2, L.b0
    y = A.y
    a = kit.a(y)[None, :]
    b = kit.b(y)[None, :]
    ap = kit.da(y)[None, :]
    app = kit.d2a(y)[None, :]
    bp = kit.db(y)[None, :]
    g2 = kit.gamma2(y)
    # the cutoff transitions may be narrower than the grid spacing, so prefer
    # the closed-form derivatives attached by extend_coefficients over finite
    # differences of the glued fields
    ad = getattr(L, "analytic_derivs", None)
    if ad is not None:
        A_x, A_y, A_xx = ad["A_x"], ad["A_y"], ad["A_xx"]
        D_x, E_y, F_y = ad["D_x"], ad["E_y"], ad["F_y"]
    else:
        A_x, A_y, A_xx = A.dx(), A.dy(), A.dxx()
        D_x, E_y, F_y = D.dx(), E.dy(), F.dy()
    I1 = (bp / 2.0 - a) * A.values + b * A_y.values / 2.0
    I2 = -b * A_x.values / 2.0 + b * D.values / 2.0
    I3 = -a - bp / 2.0 + b * E.values
    I4 = (
        a * A_xx.values / 2.0
        + app / 2.0
        - a * D_x.values / 2.0
        - (ap * E.values + a * E_y.values) / 2.0
        - (bp / 2.0 - a) * F.values
        - b * F_y.values / 2.0
    )
    cert = EnergyCertificate(
        kit, y, A.like(I1), A.like(I2), A.like(I3), A.like(I4), g2
    )

    def fail(name, vals, floor, message):
        i, j = np.unravel_index(np.argmin(vals), vals.shape)
        margin = float(vals[i, j] - floor)
        raise CertificateFailureError(
            f"{message} by {-margin:.3g} at (x, y) = "
            f"({A.x[i]:.4g}, {y[j]:.4g})",
            node=(float(A.x[i]), float(y[j])),
            margin=margin,
        )

    if cert.margins["min_I1"] < -tol:
        fail("I1", I1, 0.0, "I1 drops below zero")
    if cert.margins["min_I3_minus_gamma2"] < -tol:
        fail("I3", I3 - g2[None, :], 0.0, "I3 drops below gamma^2")
    if cert.margins["min_I4"] <= tol:
        fail("I4", I4, 0.0, "I4 loses its positive floor")
    quad = I1 * I3 - 2.0 * I2**2
    scale = max(1.0, float(np.max(np.abs(quad))))
    if cert.margins["min_I1I3_minus_2I2sq"] < -tol * scale:
        fail("I1I3", quad, 0.0, "I1*I3 - 2*I2^2 turns negative")
    return cert


def quadratic_form(L, kit, u, theta=0.1, m=0):
    """Discrete (a u + b u_y, L u)_m pairing used by the coercivity check."""
    y = u.y
    mult = u.like(kit.a(y)[None, :] * u.values + kit.b(y)[None, :] * u.dy().values)
    Lu = L.apply(u)
    total = 0.0
    for s in range(m + 1):
        total += theta**s * (mult.deriv(s, 0) * Lu.deriv(s, 0)).integral()
    return float(total)


# ---------------------------------------------------------------------------
# Galerkin solve
# ---------------------------------------------------------------------------

class GalerkinSolution:
    """Grid solution together with its mode coefficients and solver report."""

    def __init__(self, field, coefficients, basis, report):
        self.field = field
        self.coefficients = coefficients  # d[l, j]: mode l at y-level j
        self.basis = basis
        self.report = report

    @property
    def values(self):
        return self.field.values


def _x_derivatives(values, hx, up_to):
    """List of x-derivative arrays of a coefficient field, orders 0..up_to."""
    from .grids import _deriv1

    out = [values]
    for _ in range(up_to):
        out.append(_deriv1(out[-1], hx, 0))
    return out


def _pairing_blocks(coef_values, hx, basis, mode_order):
    """M[l, i, j] = sum_s theta^s int phi_l^(s) dx^s(C phi_i^(d)) dx
    for a coefficient field C(x, y), via the Leibniz rule; the coefficient's
    x-derivatives come from finite differences, the modes' are analytic."""
    m, theta = basis.m, basis.theta
    wt = basis.weights
    cders = _x_derivatives(coef_values, hx, m)
    N = basis.n_modes
    M = np.zeros((N, N, coef_values.shape[1]))
    for s in range(m + 1):
        test = basis.values(s) * wt
        for r in range(s + 1):
            trial = basis.values(mode_order + s - r)
            c = comb(s, r) * theta**s
            M += c * np.einsum("lx,xj,ix->lij", test, cders[r], trial, optimize=True)
    return M


def _project_rhs(fvalues, hx, basis):
    m, theta = basis.m, basis.theta
    wt = basis.weights
    fders = _x_derivatives(fvalues, hx, m)
    out = np.zeros((basis.n_modes, fvalues.shape[1]))
    for s in range(m + 1):
        out += theta**s * (basis.values(s) * wt) @ fders[s]
    return out


def galerkin_solve(L, f, basis, norm=None, pivot_tol=1e-12):
    """Solve L u = f on L's rectangle with u = 0 on the far-field y-boundary.

    Expands u in the basis's x-modes, projects the equation in the weighted
    discrete product, and solves the block-tridiagonal second-order system in
    y.  Returns u on the grid with a solver report attached (residual on the
    inner window, smallest pivot, sizes)."""
    if L.stage != "extended":
        raise ValueError("galerkin_solve requires the extended operator")
    if f.values.shape != L.b11.values.shape or f.rect != L.rect:
        raise ValueError("right-hand side must live on the operator grid")
    if norm is not None and (norm.theta != basis.theta or norm.m != basis.m):
        raise ValueError("norm spec inconsistent with the basis product")
    hx = L.b11.hx
    hy = L.b11.hy
    ny = L.b11.ny
    N = basis.n_modes

    # zero-order blocks: A phi'' + D phi' + F phi; first-order-in-y blocks: E phi
    G = (
        _pairing_blocks(L.b11.values, hx, basis, 2)
        + _pairing_blocks(L.b1.values, hx, basis, 1)
        + _pairing_blocks(L.b0.values, hx, basis, 0)
    )
    Eb = _pairing_blocks(L.b2.values, hx, basis, 0)
    rhs = _project_rhs(f.values, hx, basis)

    nin = ny - 2  # interior y-levels; Dirichlet rows eliminated
    ident = np.eye(N)
    # block rows j = 1..ny-2:  (d'' + E d' + G d)(y_j) = f(y_j)
    lower = np.empty((nin - 1, N, N))
    diag = np.empty((nin, N, N))
    upper = np.empty((nin - 1, N, N))
    for k in range(nin):
        j = k + 1
        diag[k] = -2.0 * ident / hy**2 + G[:, :, j]
        if k > 0:
            lower[k - 1] = ident / hy**2 - Eb[:, :, j] / (2.0 * hy)
        if k < nin - 1:
            upper[k] = ident / hy**2 + Eb[:, :, j] / (2.0 * hy)
    indptr = np.empty(nin + 1, dtype=np.int64)
    indices = []
    data = []
    pos = 0
    for k in range(nin):
        indptr[k] = pos
        if k > 0:
            indices.append(k - 1)
            data.append(lower[k - 1])
            pos += 1
        indices.append(k)
        data.append(diag[k])
        pos += 1
        if k < nin - 1:
            indices.append(k + 1)
            data.append(upper[k])
            pos += 1
    indptr[nin] = pos
    mat = bsr_matrix(
        (np.array(data), np.array(indices, dtype=np.int64), indptr),
        shape=(nin * N, nin * N),
    ).tocsc()

    try:
        lu = splu(mat)
    except RuntimeError as exc:
        raise SolverFailureError(f"factorization failed: {exc}") from exc
    piv = np.abs(lu.U.diagonal())
    scale = float(np.max(piv)) if piv.size else 0.0
    if scale == 0.0 or float(np.min(piv)) < pivot_tol * scale:
        raise SolverFailureError(
            f"linear system singular to tolerance (smallest pivot "
            f"{float(np.min(piv)):.3g}, largest {scale:.3g})"
        )
    sol = lu.solve(rhs[:, 1:-1].T.reshape(-1))
    d = np.zeros((N, ny))
    d[:, 1:-1] = sol.reshape(nin, N).T

    u = L.b11.like(basis.values(0).T @ d)
    resid = L.apply(u) - f
    inner = getattr(L, "inner_rect", None)
    if inner is not None:
        kit = getattr(L, "kit", None)
        window = inner.scaled(min(kit.mu2 if kit is not None else 1.0,
                                  L.enlargement))
        resid_win = resid.restrict(window)
    else:
        resid_win = resid
    report = {
        "n_modes": N,
        "grid": [L.b11.nx, ny],
        "residual_sup": resid_win.sup_norm(),
        "residual_l2": resid_win.l2_norm(),
        "rhs_l2": f.l2_norm(),
        "smallest_pivot": float(np.min(piv)),
    }
    return GalerkinSolution(u, d, basis, report)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def moser_monitor(u, f, w, ms=(0, 1, 2), offset=3, theta=0.1):
    """Per-solve ratio report R_m = ||u||_m / (||f||_m + ||w||_{m+off} ||f||_2).

    Tracks boundedness of the tame estimate behind the linear solves; the
    derivative offset is configurable because desk-scale grids cannot resolve
    the analytic bookkeeping orders, and every report records the offset used.
    """
    ratios = {}
    f2 = weighted_norm(f, WeightedNormSpec(theta, 2, 2))
    for m in ms:
        fm = weighted_norm(f, WeightedNormSpec(theta, m, m))
        denom_w = weighted_norm(
            w, WeightedNormSpec(theta, min(m + offset, MAX_DERIV_ORDER),
                                min(m + offset, MAX_DERIV_ORDER))
        )
        denom = fm + denom_w * f2
        if denom == 0.0:
            ratios[m] = None  # 0/0: nothing solved, report not-applicable
        else:
            ratios[m] = weighted_norm(u, WeightedNormSpec(theta, m, m)) / denom
    return {"offset": offset, "theta": theta, "ratios": ratios}
