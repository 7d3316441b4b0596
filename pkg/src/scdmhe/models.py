"""System models: nonlinear maps, exact pseudo-linear factors, Jacobians.

Every model exposes the same five evaluations:

* ``dynamics(x, u, k)``      -- state transition f
* ``measurement(x, k)``      -- output map h
* ``factors(x, u, k)``       -- coefficient matrices (A, B) with
  ``f(x, u, k) == A @ x + B @ u`` exactly (no truncation error)
* ``output_matrix(x, k)``    -- coefficient matrix C with ``h(x, k) == C @ x``
* ``jacobians(x, u, k)``     -- (df/dx, dh/dx), used by the EKF and the
  Jacobian-based nonlinear MHE baseline

Keeping the factored and differentiated forms on one object lets the window
estimator and the recursive baselines share a single model definition, so a
comparison between them isolates the factorization-vs-linearization choice.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .exceptions import CovarianceError, ModelError

# Inputs with |u| below this are rejected by the quadrotor B factor, whose
# entries contain 1 - g/u.
INPUT_GUARD = 1e-6

# |z / h_max| below this switches the range factor to its series expansion,
# avoiding the 0/0 cancellation of tanh(z/h_max) / (z/h_max).
_SMALL_RATIO = 1e-4


def _require_finite(name, value):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"non-finite {name}: {value!r}")
    return arr


def _scalar(value):
    """Cheap scalar extraction for 0/1-element inputs (hot path)."""
    if isinstance(value, np.ndarray):
        return value.item(0) if value.size else float(value)
    return float(value)


def validate_spd(mat, name, tol=0.0):
    """Check symmetry and positive definiteness (via Cholesky)."""
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise CovarianceError(f"{name} must be square, got shape {mat.shape}")
    if not np.allclose(mat, mat.T, rtol=0.0, atol=1e-12 * (1.0 + np.abs(mat).max())):
        raise CovarianceError(f"{name} is not symmetric")
    try:
        np.linalg.cholesky(mat - tol * np.eye(mat.shape[0]) if tol else mat)
    except np.linalg.LinAlgError:
        raise CovarianceError(f"{name} is not positive definite") from None
    return mat


class SystemModel:
    """Base class fixing the model interface and the dimensions (n, m, p)."""

    n: int
    m: int
    p: int

    def dynamics(self, x, u, k):
        raise NotImplementedError

    def measurement(self, x, k):
        raise NotImplementedError

    def factors(self, x, u, k):
        raise NotImplementedError

    def output_matrix(self, x, k):
        raise NotImplementedError

    def jacobians(self, x, u, k):
        raise NotImplementedError


@dataclass(frozen=True)
class QuadrotorParams:
    """Vertical-kinematics constants (SI units)."""

    ts: float = 0.05        # sampling period, s
    mass: float = 1.5       # kg
    gravity: float = 9.81   # m/s^2
    drag: float = 0.25      # quadratic drag coefficient
    h_max: float = 30.0     # rangefinder saturation altitude, m

    def __post_init__(self):
        for name in ("ts", "mass", "gravity", "drag", "h_max"):
            if not getattr(self, name) > 0.0:
                raise ModelError(f"QuadrotorParams.{name} must be > 0")


@dataclass(frozen=True)
class NoiseSpec:
    """Process and measurement covariances, both symmetric positive definite."""

    process: np.ndarray
    measurement: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "process", validate_spd(self.process, "process covariance"))
        object.__setattr__(
            self, "measurement", validate_spd(self.measurement, "measurement covariance")
        )


class QuadrotorKinematics(SystemModel):
    """Altitude/vertical-velocity model with saturating rangefinder.

    State ``x = [z, zdot]``, scalar thrust-acceleration input u, scalar range
    measurement.  Forward-Euler dynamics::

        z+    = z + ts * zdot
        zdot+ = zdot + ts * (u - g - (c_d / m) * zdot * |zdot|)

    Measurement ``y = h_max * tanh(z / h_max)``: accurate below the saturation
    altitude, pinned near h_max above it.
    """

    n, m, p = 2, 1, 1

    def __init__(self, params: QuadrotorParams | None = None):
        self.params = params or QuadrotorParams()

    def dynamics(self, x, u, k):
        c = self.params
        z, zdot = _scalar(x[0]), _scalar(x[1])
        u = _scalar(u)
        if not (math.isfinite(z) and math.isfinite(zdot) and math.isfinite(u)):
            raise ModelError(f"non-finite model input: x={x!r}, u={u!r}")
        return np.array(
            [
                z + c.ts * zdot,
                zdot + c.ts * (u - c.gravity - (c.drag / c.mass) * zdot * abs(zdot)),
            ]
        )

    def measurement(self, x, k):
        c = self.params
        z = _scalar(x[0])
        if not math.isfinite(z):
            raise ModelError(f"non-finite state: {x!r}")
        return np.array([c.h_max * math.tanh(z / c.h_max)])

    def factors(self, x, u, k):
        c = self.params
        zdot = _scalar(x[1])
        u = _scalar(u)
        if not (math.isfinite(zdot) and math.isfinite(u)):
            raise ModelError(f"non-finite model input: x={x!r}, u={u!r}")
        if abs(u) < INPUT_GUARD:
            raise ModelError(
                f"input u={u!r} is within {INPUT_GUARD} of zero: the coefficient "
                "B(u) = [0; ts*(1 - g/u)] is singular there"
            )
        a = np.array([[1.0, c.ts], [0.0, 1.0 - c.ts * (c.drag / c.mass) * abs(zdot)]])
        b = np.array([[0.0], [c.ts * (1.0 - c.gravity / u)]])
        return a, b

    def output_matrix(self, x, k):
        c = self.params
        z = _scalar(x[0])
        if not math.isfinite(z):
            raise ModelError(f"non-finite state: {x!r}")
        return np.array([[_range_factor(z, c.h_max), 0.0]])

    def jacobians(self, x, u, k):
        c = self.params
        z, zdot = _scalar(x[0]), _scalar(x[1])
        if not (math.isfinite(z) and math.isfinite(zdot)):
            raise ModelError(f"non-finite state: {x!r}")
        f_x = np.array(
            [[1.0, c.ts], [0.0, 1.0 - 2.0 * c.ts * (c.drag / c.mass) * abs(zdot)]]
        )
        h_x = np.array([[1.0 / math.cosh(z / c.h_max) ** 2, 0.0]])
        return f_x, h_x


def _range_factor(z, h_max):
    """tanh(z/h_max) / (z/h_max), with the removable singularity at z = 0.

    For |z/h_max| < 1e-4 the series 1 - w^2/3 is exact to ~1e-17, so the
    branch is continuous at the switch point.
    """
    w = z / h_max
    if abs(w) < _SMALL_RATIO:
        return 1.0 - w * w / 3.0
    return math.tanh(w) / w


class LinearModel(SystemModel):
    """Constant-coefficient model where factors, Jacobians, and dynamics agree.

    All five evaluations are built from the same (A0, B0, C0), which makes
    this the reference model for Kalman-equivalence checks: any estimator that
    is exact in the linear-Gaussian case must reproduce the Kalman filter here.
    """

    def __init__(self, a=None, b=None, c=None):
        if a is None:
            a = np.array([[1.0, 0.05], [0.0, 1.0]])
        if b is None:
            b = np.array([[0.0], [0.05]])
        if c is None:
            c = np.array([[1.0, 0.0]])
        self.a = np.atleast_2d(np.asarray(a, dtype=float))
        self.b = np.atleast_2d(np.asarray(b, dtype=float))
        self.c = np.atleast_2d(np.asarray(c, dtype=float))
        self.n = self.a.shape[0]
        self.m = self.b.shape[1]
        self.p = self.c.shape[0]
        if self.a.shape != (self.n, self.n):
            raise ModelError(f"A must be square, got {self.a.shape}")
        if self.b.shape != (self.n, self.m):
            raise ModelError(f"B shape {self.b.shape} inconsistent with A")
        if self.c.shape != (self.p, self.n):
            raise ModelError(f"C shape {self.c.shape} inconsistent with A")

    def dynamics(self, x, u, k):
        x = _require_finite("state", x)
        u = np.atleast_1d(_require_finite("input", u))
        return self.a @ x + self.b @ u

    def measurement(self, x, k):
        return self.c @ _require_finite("state", x)

    def factors(self, x, u, k):
        return self.a.copy(), self.b.copy()

    def output_matrix(self, x, k):
        return self.c.copy()

    def jacobians(self, x, u, k):
        return self.a.copy(), self.c.copy()


def control_signal(k, gravity=9.81, amplitude=0.5, time_scale=1.0):
    """Benchmark thrust command ``g + amplitude * sin(time_scale * k)``.

    The step index k enters the sine in radians.  ``time_scale`` rescales the
    argument for sensitivity studies; the default uses the bare integer index.
    Always positive for amplitude < g, so the quadrotor B factor stays regular.
    """
    if k < 0:
        raise ModelError(f"step index must be >= 0, got {k}")
    return gravity + amplitude * math.sin(time_scale * k)
