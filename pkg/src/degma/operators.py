"""Second-order linear operators with gridded coefficients.

The operator is L = b11 d_xx + 2 b12 d_xy + b22 d_yy + b1 d_x + b2 d_y + b0,
tagged with its reduction stage (L1..L8) and coordinate frame.
"""

import numpy as np

STAGES = ("L1", "L2", "L3", "L4", "L5", "L6", "L7", "L8", "extended")
FRAMES = ("xy", "xieta", "alphabeta")


class LinearOperatorField:
    def __init__(self, stage, frame, b11, b12, b22, b1, b2, b0, enlargement=1.0):
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        if frame not in FRAMES:
            raise ValueError(f"unknown frame {frame!r}")
        self.stage = stage
        self.frame = frame
        self.b11 = b11
        self.b12 = b12
        self.b22 = b22
        self.b1 = b1
        self.b2 = b2
        self.b0 = b0
        self.enlargement = float(enlargement)

    @property
    def rect(self):
        return self.b11.rect

    def coefficients(self):
        return {
            "b11": self.b11,
            "b12": self.b12,
            "b22": self.b22,
            "b1": self.b1,
            "b2": self.b2,
            "b0": self.b0,
        }

    def apply(self, u):
        """Apply the operator to a GridField on the same grid."""
        out = (
            self.b11.values * u.dxx().values
            + 2.0 * self.b12.values * u.dxy().values
            + self.b22.values * u.dyy().values
            + self.b1.values * u.dx().values
            + self.b2.values * u.dy().values
            + self.b0.values * u.values
        )
        return u.like(out)

    def with_stage(self, stage, frame=None, enlargement=None, **updates):
        coeffs = self.coefficients()
        coeffs.update(updates)
        return LinearOperatorField(
            stage,
            self.frame if frame is None else frame,
            coeffs["b11"],
            coeffs["b12"],
            coeffs["b22"],
            coeffs["b1"],
            coeffs["b2"],
            coeffs["b0"],
            enlargement=self.enlargement if enlargement is None else enlargement,
        )

    def map_coefficients(self, fn):
        c = {k: fn(v) for k, v in self.coefficients().items()}
        return LinearOperatorField(
            self.stage, self.frame, c["b11"], c["b12"], c["b22"],
            c["b1"], c["b2"], c["b0"], enlargement=self.enlargement,
        )

    def max_abs(self):
        return {k: float(np.max(np.abs(v.values))) for k, v in self.coefficients().items()}
