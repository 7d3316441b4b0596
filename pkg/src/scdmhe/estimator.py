"""Iterated pseudo-linear moving-horizon estimator.

Each time step solves a short sequence of equality-constrained QPs over the
sliding window.  The coefficient matrices of the pseudo-linear constraints are
evaluated along the previous iterate's state trajectory, so every inner
problem is convex; iterating re-freezes the coefficients until the stacked
state trajectory stops moving (displacement below tolerance) or the iteration
cap is reached.  Windows are warm-started by shifting the previous converged
trajectory and propagating the newest state through the nonlinear dynamics.

The arrival cost summarizing pre-window data is propagated in prediction
form: when the window slides, the discarded stage's measurement is absorbed
by one pseudo-linear gain update of the anchor mean, and the anchor
covariance follows the discrete-time Riccati recursion with the coefficient
matrices evaluated at the discarded stage's converged state.  In the
linear-Gaussian case this makes the window estimator reproduce the Kalman
filter exactly; see tests/test_acceptance.py.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .exceptions import CovarianceError, ScdMheError
from .models import NoiseSpec, validate_spd
from .qp import HorizonKkt

# PD repair threshold for the arrival covariance: eigenvalues in
# (-PD_REPAIR, PD_REPAIR] are lifted by adding PD_REPAIR * I; anything more
# negative is a genuine loss of positive definiteness.
PD_REPAIR = 1e-10


@dataclass
class WindowEstimate:
    """Decision-vector solution over one window, split by variable kind.

    ``states[j]`` is the stage-j state (j = 0 is the oldest stage in the
    window), ``process_noises[j]`` the stage-j process noise (one fewer than
    states), ``meas_noises[j]`` the stage-j measurement noise.  The flattened
    layout is exactly [states..., process_noises..., meas_noises...].
    """

    states: np.ndarray          # (ell, n)
    process_noises: np.ndarray  # (ell-1, n)
    meas_noises: np.ndarray     # (ell, p)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.process_noises = np.asarray(self.process_noises, dtype=float).reshape(
            self.states.shape[0] - 1, self.states.shape[1]
        )
        self.meas_noises = np.atleast_2d(np.asarray(self.meas_noises, dtype=float))
        if self.meas_noises.shape[0] != self.states.shape[0]:
            raise ScdMheError(
                f"{self.meas_noises.shape[0]} measurement-noise stages for "
                f"{self.states.shape[0]} state stages"
            )

    @property
    def horizon(self):
        return self.states.shape[0]

    def flatten(self):
        return np.concatenate(
            [self.states.ravel(), self.process_noises.ravel(), self.meas_noises.ravel()]
        )

    @classmethod
    def from_flat(cls, z, n, p, ell):
        z = np.asarray(z, dtype=float)
        expected = n * ell + n * (ell - 1) + p * ell
        if z.shape != (expected,):
            raise ScdMheError(f"flat vector has shape {z.shape}, expected ({expected},)")
        states = z[: n * ell].reshape(ell, n)
        w = z[n * ell: n * ell + n * (ell - 1)].reshape(ell - 1, n)
        v = z[n * ell + n * (ell - 1):].reshape(ell, p)
        return cls(states=states, process_noises=w, meas_noises=v)


@dataclass
class ArrivalCost:
    """Prior anchor for the window's first state with its confidence."""

    x_bar: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.x_bar = np.asarray(self.x_bar, dtype=float).reshape(-1)
        self.cov = validate_spd(self.cov, "arrival covariance")


@dataclass(frozen=True)
class EstimatorConfig:
    horizon: int = 12
    max_iterations: int = 15
    tolerance: float = 1e-6
    hessian_regularization: float = 0.0

    def __post_init__(self):
        if self.horizon < 2:
            raise ScdMheError(f"horizon must be >= 2, got {self.horizon}")
        if self.max_iterations < 1:
            raise ScdMheError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not self.tolerance > 0.0:
            raise ScdMheError(f"tolerance must be > 0, got {self.tolerance}")
        if self.hessian_regularization < 0.0:
            raise ScdMheError("hessian_regularization must be >= 0")


@dataclass
class StepOutcome:
    """Result of one estimator step, plus the trace the exporter consumes."""

    x_hat: np.ndarray
    window: WindowEstimate
    i_star: int
    displacements: list = field(default_factory=list)
    new_arrival: ArrivalCost | None = None
    kkt_residuals: list = field(default_factory=list)
    converged: bool = True


def warm_start(states, model, u_prev, k_prev):
    """Initial trajectory for the next window: shift by one stage, then
    predict the leading edge through the nonlinear dynamics."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    out = np.empty_like(states)
    out[:-1] = states[1:]
    out[-1] = model.dynamics(states[-1], u_prev, k_prev)
    return out


def riccati_update(p_cov, a_bar, c_bar, q_cov, r_cov):
    """One prediction-form Riccati step

        P+ = Abar P Abar' - Abar P Cbar' (Cbar P Cbar' + R)^-1 Cbar P Abar' + Q

    symmetrized, with a tiny-eigenvalue repair.  Raises CovarianceError if the
    innovation covariance is singular or positive definiteness is lost.
    """
    p_cov = np.asarray(p_cov, dtype=float)
    a_bar = np.atleast_2d(a_bar)
    c_bar = np.atleast_2d(c_bar)
    s = c_bar @ p_cov @ c_bar.T + r_cov
    try:
        gain = np.linalg.solve(s, c_bar @ p_cov).T  # P Cbar' S^-1
    except np.linalg.LinAlgError:
        raise CovarianceError("innovation covariance is singular") from None
    p_next = a_bar @ (p_cov - gain @ c_bar @ p_cov) @ a_bar.T + q_cov
    p_next = 0.5 * (p_next + p_next.T)
    eigs = np.linalg.eigvalsh(p_next)
    if eigs[0] <= -PD_REPAIR:
        raise CovarianceError(
            f"arrival covariance lost positive definiteness (min eig {eigs[0]:.3e})"
        )
    if eigs[0] <= PD_REPAIR:
        p_next = p_next + PD_REPAIR * np.eye(p_next.shape[0])
    return p_next


def update_arrival(arrival, window, model, y_first, u_first, k_first, noise):
    """Arrival cost for the next window, absorbing the discarded stage.

    The coefficient matrices are evaluated at the converged first-stage state
    of the supplied window.  The anchor mean receives one gain update with the
    discarded measurement and is then propagated pseudo-linearly; the anchor
    covariance follows :func:`riccati_update`.  Keeping the mean in prediction
    form (rather than copying the window's own smoothed state) is what makes
    the estimator collapse to the Kalman filter on linear models: the window
    re-processes every measurement it contains, so the anchor must carry only
    pre-window information.
    """
    y_first = np.atleast_1d(np.asarray(y_first, dtype=float))
    u_first = np.atleast_1d(np.asarray(u_first, dtype=float))
    x0 = window.states[0]
    a_bar, b_bar = model.factors(x0, u_first, k_first)
    c_bar = model.output_matrix(x0, k_first)
    s = c_bar @ arrival.cov @ c_bar.T + noise.measurement
    try:
        gain = np.linalg.solve(s, c_bar @ arrival.cov).T
    except np.linalg.LinAlgError:
        raise CovarianceError("innovation covariance is singular") from None
    corrected = arrival.x_bar + gain @ (y_first - c_bar @ arrival.x_bar)
    x_next = a_bar @ corrected + b_bar @ u_first
    p_next = riccati_update(arrival.cov, a_bar, c_bar, noise.process, noise.measurement)
    return ArrivalCost(x_bar=x_next, cov=p_next)


class ScdMhe:
    """Sequential window estimator (one instance per data stream).

    Drive it with :meth:`init_first_window` once the first ``horizon``
    measurements are available (e.g. from an EKF priming pass), then call
    :meth:`step` for every subsequent step.  Instances hold the window
    buffers and arrival cost and are not safe for concurrent mutation.
    """

    def __init__(self, model, config: EstimatorConfig, noise: NoiseSpec,
                 x0_bar, p0):
        self.model = model
        self.config = config
        self.noise = noise
        self._arrival = ArrivalCost(x_bar=x0_bar, cov=p0)
        self._kkt = HorizonKkt(model.n, model.p, config.horizon)
        self._y = deque(maxlen=config.horizon)
        self._u = deque(maxlen=config.horizon - 1)
        self._window = None
        self._k = None
        self.last_i_star = None
        reg = config.hessian_regularization
        q_inv = np.linalg.inv(noise.process) + reg * np.eye(model.n)
        r_inv = np.linalg.inv(noise.measurement) + reg * np.eye(model.p)
        self._wq = np.repeat(2.0 * q_inv[None], config.horizon - 1, axis=0)
        self._wr = np.repeat(2.0 * r_inv[None], config.horizon, axis=0)
        self._reg = reg

    @property
    def arrival(self):
        """Arrival cost that the *next* window will use."""
        return self._arrival

    @property
    def window(self):
        return self._window

    def init_first_window(self, trajectory, measurements, inputs):
        """Prime the estimator at step ``horizon - 1``.

        ``trajectory`` holds the preliminary states for steps 0..horizon-1
        (forward simulation or an EKF pass), ``measurements`` the first
        ``horizon`` measurements, ``inputs`` the first ``horizon - 1`` inputs.
        No QP is solved here; the first solve happens at step ``horizon``.
        """
        ell = self.config.horizon
        trajectory = np.atleast_2d(np.asarray(trajectory, dtype=float))
        if trajectory.shape != (ell, self.model.n):
            raise ScdMheError(
                f"initial trajectory has shape {trajectory.shape}, "
                f"expected {(ell, self.model.n)}"
            )
        if len(measurements) != ell or len(inputs) != ell - 1:
            raise ScdMheError(
                f"need {ell} measurements and {ell - 1} inputs to prime, "
                f"got {len(measurements)} and {len(inputs)}"
            )
        for y in measurements:
            self._y.append(np.asarray(y, dtype=float).reshape(self.model.p))
        for u in inputs:
            self._u.append(np.asarray(u, dtype=float).reshape(self.model.m))
        w = np.empty((ell - 1, self.model.n))
        v = np.empty((ell, self.model.p))
        for j in range(ell - 1):
            w[j] = trajectory[j + 1] - self.model.dynamics(trajectory[j], self._u[j], j)
        for j in range(ell):
            v[j] = self._y[j] - self.model.measurement(trajectory[j], j)
        self._window = WindowEstimate(states=trajectory.copy(), process_noises=w,
                                      meas_noises=v)
        self._k = ell - 1
        self.last_i_star = self.config.max_iterations
        self._advance_arrival()

    def step(self, y_k, u_prev):
        """Process the next measurement; returns the step's :class:`StepOutcome`."""
        if self._window is None:
            raise ScdMheError("estimator not initialized; call init_first_window first")
        ell = self.config.horizon
        k = self._k + 1
        self._y.append(np.asarray(y_k, dtype=float).reshape(self.model.p))
        self._u.append(np.asarray(u_prev, dtype=float).reshape(self.model.m))
        y_arr = np.array(self._y)
        u_arr = np.array(self._u)
        traj = warm_start(self._window.states, self.model, u_arr[-1], k - 1)
        wp = 2.0 * (np.linalg.inv(self._arrival.cov)
                    + self._reg * np.eye(self.model.n))

        displacements, residuals = [], []
        window = None
        for _ in range(self.config.max_iterations):
            window, delta, res = self.iterate_once(traj, y_arr, u_arr, k, wp=wp)
            displacements.append(delta)
            residuals.append(res)
            traj = window.states
            if delta < self.config.tolerance:
                break

        self._window = window
        self._k = k
        self.last_i_star = len(displacements)
        self._advance_arrival()
        return StepOutcome(
            x_hat=window.states[-1].copy(),
            window=window,
            i_star=len(displacements),
            displacements=displacements,
            new_arrival=self._arrival,
            kkt_residuals=residuals,
            converged=displacements[-1] < self.config.tolerance,
        )

    def iterate_once(self, trajectory, y_arr, u_arr, k, wp=None):
        """Freeze coefficients along ``trajectory``, solve the QP once.

        Returns ``(window, displacement, kkt_residual)`` where displacement is
        the Euclidean norm of the stacked state-trajectory change.
        """
        ell = self.config.horizon
        n, p = self.model.n, self.model.p
        steps = range(k + 1 - ell, k + 1)
        a_seq = np.empty((ell - 1, n, n))
        b_dyn = np.empty((ell - 1, n))
        c_seq = np.empty((ell, p, n))
        for j, kj in enumerate(steps):
            if j < ell - 1:
                a_j, b_j = self.model.factors(trajectory[j], u_arr[j], kj)
                a_seq[j] = a_j
                b_dyn[j] = b_j @ u_arr[j]
            c_seq[j] = self.model.output_matrix(trajectory[j], kj)
        if wp is None:
            wp = 2.0 * (np.linalg.inv(self._arrival.cov) + self._reg * np.eye(n))
        chi, w, v, _lam, res, _ref = self._kkt.solve(
            wp, self._wq, self._wr, self._arrival.x_bar, a_seq, c_seq, b_dyn, y_arr
        )
        delta = float(np.linalg.norm((chi - trajectory).ravel()))
        return WindowEstimate(states=chi, process_noises=w, meas_noises=v), delta, res

    def _advance_arrival(self):
        self._arrival = update_arrival(
            self._arrival,
            self._window,
            self.model,
            self._y[0],
            self._u[0],
            self._k + 1 - self.config.horizon,
            self.noise,
        )
