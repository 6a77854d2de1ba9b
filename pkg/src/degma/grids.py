"""Uniform tensor-product grids and scalar fields with finite-difference calculus.

A GridField samples a scalar function on a uniform grid over a rectangle and
provides derivative access through 4th-order stencils (one-sided at the
boundary).  All pipeline intermediates (w, Phi(w), operator coefficients,
cutoffs) are carried as GridFields.
"""

import io

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .errors import StencilError


class Rectangle:
    """Axis-aligned rectangle [x0, x1] x [y0, y1]."""

    __slots__ = ("x0", "x1", "y0", "y1")

    def __init__(self, x0, x1, y0, y1):
        if not (x1 > x0 and y1 > y0):
            raise ValueError("degenerate rectangle")
        self.x0 = float(x0)
        self.x1 = float(x1)
        self.y0 = float(y0)
        self.y1 = float(y1)

    @classmethod
    def centered(cls, half_x, half_y):
        return cls(-half_x, half_x, -half_y, half_y)

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    def scaled(self, factor):
        """Rectangle enlarged by `factor` about its center."""
        cx = 0.5 * (self.x0 + self.x1)
        cy = 0.5 * (self.y0 + self.y1)
        hx = 0.5 * self.width * factor
        hy = 0.5 * self.height * factor
        return Rectangle(cx - hx, cx + hx, cy - hy, cy + hy)

    def contains(self, x, y, tol=0.0):
        return (
            (x >= self.x0 - tol)
            & (x <= self.x1 + tol)
            & (y >= self.y0 - tol)
            & (y <= self.y1 + tol)
        )

    def __eq__(self, other):
        return isinstance(other, Rectangle) and (
            (self.x0, self.x1, self.y0, self.y1)
            == (other.x0, other.x1, other.y0, other.y1)
        )

    def __repr__(self):
        return f"Rectangle([{self.x0}, {self.x1}] x [{self.y0}, {self.y1}])"


# one-sided / offset first-derivative stencils of order 4 (5 points)
_D1_EDGE0 = np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12.0
_D1_EDGE1 = np.array([-3.0, -10.0, 18.0, -6.0, 1.0]) / 12.0
# one-sided / offset second-derivative stencils of order 4 (6 points)
_D2_EDGE0 = np.array([45.0, -154.0, 214.0, -156.0, 61.0, -10.0]) / 12.0
_D2_EDGE1 = np.array([10.0, -15.0, -4.0, 14.0, -6.0, 1.0]) / 12.0


def _deriv1(a, h, axis):
    """First derivative along `axis`, 4th order, one-sided at edges."""
    n = a.shape[axis]
    if n < 6:
        raise StencilError("need at least 6 nodes per axis for 4th-order stencils")
    a = np.moveaxis(a, axis, 0)
    out = np.empty_like(a)
    out[2:-2] = (-a[4:] + 8.0 * a[3:-1] - 8.0 * a[1:-3] + a[:-4]) / (12.0 * h)
    out[0] = np.tensordot(_D1_EDGE0, a[:5], axes=(0, 0)) / h
    out[1] = np.tensordot(_D1_EDGE1, a[:5], axes=(0, 0)) / h
    out[-1] = -np.tensordot(_D1_EDGE0, a[::-1][:5], axes=(0, 0)) / h
    out[-2] = -np.tensordot(_D1_EDGE1, a[::-1][:5], axes=(0, 0)) / h
    return np.moveaxis(out, 0, axis)


def _deriv2(a, h, axis):
    """Second derivative along `axis`, 4th order, one-sided at edges."""
    n = a.shape[axis]
    if n < 6:
        raise StencilError("need at least 6 nodes per axis for 4th-order stencils")
    a = np.moveaxis(a, axis, 0)
    out = np.empty_like(a)
    h2 = h * h
    out[2:-2] = (
        -a[4:] + 16.0 * a[3:-1] - 30.0 * a[2:-2] + 16.0 * a[1:-3] - a[:-4]
    ) / (12.0 * h2)
    out[0] = np.tensordot(_D2_EDGE0, a[:6], axes=(0, 0)) / h2
    out[1] = np.tensordot(_D2_EDGE1, a[:6], axes=(0, 0)) / h2
    out[-1] = np.tensordot(_D2_EDGE0, a[::-1][:6], axes=(0, 0)) / h2
    out[-2] = np.tensordot(_D2_EDGE1, a[::-1][:6], axes=(0, 0)) / h2
    return np.moveaxis(out, 0, axis)


class GridField:
    """Scalar field on a uniform grid; values[i, j] = f(x_i, y_j)."""

    __slots__ = ("rect", "values", "_spline")

    def __init__(self, rect, values):
        values = np.asarray(values, dtype=float)
        if values.ndim != 2:
            raise ValueError("GridField values must be 2D")
        self.rect = rect
        self.values = values
        self._spline = None

    # -- construction -----------------------------------------------------
    @classmethod
    def from_function(cls, fn, rect, nx, ny):
        x = np.linspace(rect.x0, rect.x1, nx)
        y = np.linspace(rect.y0, rect.y1, ny)
        X, Y = np.meshgrid(x, y, indexing="ij")
        return cls(rect, np.broadcast_to(np.asarray(fn(X, Y), dtype=float), X.shape).copy())

    @classmethod
    def constant(cls, value, rect, nx, ny):
        return cls(rect, np.full((nx, ny), float(value)))

    def like(self, values):
        return GridField(self.rect, values)

    # -- geometry of the grid --------------------------------------------
    @property
    def nx(self):
        return self.values.shape[0]

    @property
    def ny(self):
        return self.values.shape[1]

    @property
    def hx(self):
        return self.rect.width / (self.nx - 1)

    @property
    def hy(self):
        return self.rect.height / (self.ny - 1)

    @property
    def x(self):
        return np.linspace(self.rect.x0, self.rect.x1, self.nx)

    @property
    def y(self):
        return np.linspace(self.rect.y0, self.rect.y1, self.ny)

    def meshgrid(self):
        return np.meshgrid(self.x, self.y, indexing="ij")

    # -- calculus ---------------------------------------------------------
    def dx(self):
        return self.like(_deriv1(self.values, self.hx, 0))

    def dy(self):
        return self.like(_deriv1(self.values, self.hy, 1))

    def dxx(self):
        return self.like(_deriv2(self.values, self.hx, 0))

    def dyy(self):
        return self.like(_deriv2(self.values, self.hy, 1))

    def dxy(self):
        return self.like(_deriv1(_deriv1(self.values, self.hx, 0), self.hy, 1))

    def deriv(self, sx, sy):
        """Mixed derivative d^sx/dx^sx d^sy/dy^sy by stencil composition."""
        a = self.values
        k = sx
        while k >= 2:
            a = _deriv2(a, self.hx, 0)
            k -= 2
        if k == 1:
            a = _deriv1(a, self.hx, 0)
        k = sy
        while k >= 2:
            a = _deriv2(a, self.hy, 1)
            k -= 2
        if k == 1:
            a = _deriv1(a, self.hy, 1)
        return self.like(a)

    # -- interpolation / resampling --------------------------------------
    def spline(self):
        if self._spline is None:
            kx = min(3, self.nx - 1)
            ky = min(3, self.ny - 1)
            self._spline = RectBivariateSpline(self.x, self.y, self.values, kx=kx, ky=ky)
        return self._spline

    def at(self, xq, yq):
        """Cubic-spline evaluation at arbitrary points (arrays broadcast)."""
        xq = np.asarray(xq, dtype=float)
        yq = np.asarray(yq, dtype=float)
        shp = np.broadcast(xq, yq).shape
        vals = self.spline().ev(np.broadcast_to(xq, shp).ravel(), np.broadcast_to(yq, shp).ravel())
        return vals.reshape(shp)

    def resample(self, rect, nx, ny):
        x = np.linspace(rect.x0, rect.x1, nx)
        y = np.linspace(rect.y0, rect.y1, ny)
        X, Y = np.meshgrid(x, y, indexing="ij")
        return GridField(rect, self.at(X, Y))

    def restrict(self, rect):
        """Restrict to a sub-rectangle, keeping the grid spacing (snapped)."""
        nx = max(6, int(round(rect.width / self.hx)) + 1)
        ny = max(6, int(round(rect.height / self.hy)) + 1)
        return self.resample(rect, nx, ny)

    # -- norms ------------------------------------------------------------
    def sup_norm(self):
        return float(np.max(np.abs(self.values)))

    def l2_norm(self):
        """L2 norm by trapezoidal quadrature."""
        w = np.trapezoid(np.trapezoid(self.values**2, dx=self.hy, axis=1), dx=self.hx)
        return float(np.sqrt(max(w, 0.0)))

    def integral(self):
        return float(np.trapezoid(np.trapezoid(self.values, dx=self.hy, axis=1), dx=self.hx))

    # -- arithmetic -------------------------------------------------------
    def _coerce(self, other):
        if isinstance(other, GridField):
            if other.values.shape != self.values.shape:
                raise ValueError("grid shape mismatch")
            return other.values
        return other

    def __add__(self, other):
        return self.like(self.values + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.like(self.values - self._coerce(other))

    def __rsub__(self, other):
        return self.like(self._coerce(other) - self.values)

    def __mul__(self, other):
        return self.like(self.values * self._coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.like(self.values / self._coerce(other))

    def __rtruediv__(self, other):
        return self.like(self._coerce(other) / self.values)

    def __pow__(self, p):
        return self.like(self.values**p)

    def __neg__(self):
        return self.like(-self.values)

    def copy(self):
        return self.like(self.values.copy())


def c_surrogate_norm(field, max_order=6):
    """Max over grid derivatives up to total order `max_order` (sup norms).

    Stands in for high-order Hoelder norms, which a finite grid cannot
    certify; the order is configurable and recorded wherever it is used.
    """
    worst = 0.0
    for s in range(max_order + 1):
        for t in range(max_order + 1 - s):
            worst = max(worst, field.deriv(s, t).sup_norm())
    return worst


def grid_to_csv(field, stream_or_path):
    """Row-major CSV dump with a header carrying ranges and node counts."""
    header = "x0,x1,y0,y1,nx,ny\n%.17g,%.17g,%.17g,%.17g,%d,%d" % (
        field.rect.x0,
        field.rect.x1,
        field.rect.y0,
        field.rect.y1,
        field.nx,
        field.ny,
    )
    if hasattr(stream_or_path, "write"):
        np.savetxt(stream_or_path, field.values, delimiter=",", header=header, fmt="%.17g")
    else:
        with open(stream_or_path, "w") as fh:
            np.savetxt(fh, field.values, delimiter=",", header=header, fmt="%.17g")


def grid_from_csv(stream_or_path):
    if hasattr(stream_or_path, "read"):
        text = stream_or_path.read()
    else:
        with open(stream_or_path) as fh:
            text = fh.read()
    lines = text.splitlines()
    meta = lines[1].lstrip("# ").split(",")
    x0, x1, y0, y1 = (float(v) for v in meta[:4])
    nx, ny = int(meta[4]), int(meta[5])
    values = np.loadtxt(io.StringIO("\n".join(lines[2:])), delimiter=",")
    values = values.reshape(nx, ny)
    return GridField(Rectangle(x0, x1, y0, y1), values)
