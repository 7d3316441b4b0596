"""Reference estimators: EKF, UKF, and a Jacobian-based nonlinear MHE.

All three reduce to the exact Kalman filter on a constant-coefficient model,
which is the cross-check the test suite leans on.  On the quadrotor benchmark
they differ in how they treat the saturating measurement: the EKF and UKF
propagate local derivative information (which vanishes in saturation), and
the nonlinear MHE re-linearizes inside an SQP loop, recovering slowly through
the flat region.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimator import (
    ArrivalCost,
    EstimatorConfig,
    StepOutcome,
    WindowEstimate,
    riccati_update,
    warm_start,
)
from .exceptions import FilterError, ScdMheError
from .models import NoiseSpec, validate_spd
from .qp import HorizonKkt


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.cov = validate_spd(self.cov, "belief covariance")


@dataclass(frozen=True)
class UkfParams:
    """Unscented-transform parameters (spread, secondary scaling, prior shape)."""

    alpha: float = 1e-3
    kappa: float = 0.0
    beta: float = 2.0


def ekf_predict(belief, model, u, q_cov, k):
    f_x, _ = model.jacobians(belief.mean, u, k)
    mean = model.dynamics(belief.mean, u, k)
    cov = f_x @ belief.cov @ f_x.T + q_cov
    return GaussianBelief(mean=mean, cov=0.5 * (cov + cov.T))


def ekf_update(belief, model, y, r_cov, k):
    """Measurement update in Joseph form; returns (belief, kalman_gain)."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    _, h_x = model.jacobians(belief.mean, np.zeros(model.m), k)
    s = h_x @ belief.cov @ h_x.T + r_cov
    try:
        gain = np.linalg.solve(s, h_x @ belief.cov).T
    except np.linalg.LinAlgError:
        raise FilterError("innovation covariance is singular") from None
    mean = belief.mean + gain @ (y - model.measurement(belief.mean, k))
    i_kh = np.eye(model.n) - gain @ h_x
    cov = i_kh @ belief.cov @ i_kh.T + gain @ r_cov @ gain.T
    return GaussianBelief(mean=mean, cov=0.5 * (cov + cov.T)), gain


def ekf_step(belief, model, u, y, q_cov, r_cov, k):
    belief = ekf_predict(belief, model, u, q_cov, k)
    belief, _ = ekf_update(belief, model, y, r_cov, k)
    return belief


def unscented_weights(n, params: UkfParams):
    """Mean/covariance weights and the composite scaling lambda."""
    scale = params.alpha ** 2 * (n + params.kappa)
    if scale <= 0.0:
        raise FilterError(
            f"alpha^2 (n + kappa) = {scale!r} must be positive (n={n}, {params})"
        )
    lam = scale - n
    w_m = np.full(2 * n + 1, 1.0 / (2.0 * scale))
    w_m[0] = lam / scale
    w_c = w_m.copy()
    w_c[0] += 1.0 - params.alpha ** 2 + params.beta
    return w_m, w_c, lam


def _scaled_sqrt(cov, scale):
    """Matrix square root of scale * cov: Cholesky, or an eigenvalue-clipped
    root if rounding made the scaled matrix indefinite."""
    m = scale * cov
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        eigs, vecs = np.linalg.eigh(0.5 * (m + m.T))
        return vecs @ np.diag(np.sqrt(np.clip(eigs, 0.0, None)))


def sigma_points(mean, cov, lam):
    n = mean.shape[0]
    root = _scaled_sqrt(cov, n + lam)
    pts = np.empty((2 * n + 1, n))
    pts[0] = mean
    pts[1: n + 1] = mean + root.T
    pts[n + 1:] = mean - root.T
    return pts


def ukf_predict(belief, model, u, q_cov, k, params):
    w_m, w_c, lam = unscented_weights(model.n, params)
    pts = sigma_points(belief.mean, belief.cov, lam)
    prop = np.stack([model.dynamics(pt, u, k) for pt in pts])
    mean = w_m @ prop
    dev = prop - mean
    cov = (dev.T * w_c) @ dev + q_cov
    return GaussianBelief(mean=mean, cov=0.5 * (cov + cov.T))


def ukf_update(belief, model, y, r_cov, k, params):
    y = np.atleast_1d(np.asarray(y, dtype=float))
    w_m, w_c, lam = unscented_weights(model.n, params)
    pts = sigma_points(belief.mean, belief.cov, lam)
    outs = np.stack([model.measurement(pt, k) for pt in pts])
    y_hat = w_m @ outs
    dy = outs - y_hat
    dx = pts - belief.mean
    p_yy = (dy.T * w_c) @ dy + r_cov
    p_xy = (dx.T * w_c) @ dy
    try:
        gain = np.linalg.solve(p_yy, p_xy.T).T
    except np.linalg.LinAlgError:
        raise FilterError("innovation covariance is singular") from None
    mean = belief.mean + gain @ (y - y_hat)
    cov = belief.cov - gain @ p_yy @ gain.T
    return GaussianBelief(mean=mean, cov=0.5 * (cov + cov.T)), gain


def ukf_step(belief, model, u, y, q_cov, r_cov, k, params):
    belief = ukf_predict(belief, model, u, q_cov, k, params)
    belief, _ = ukf_update(belief, model, y, r_cov, k, params)
    return belief


class NonlinearMhe:
    """Multiple-shooting nonlinear MHE solved by SQP with a merit line search.

    Inner iterations linearize the dynamics and measurement maps with their
    Jacobians around the current trajectory, keep the exact affine defect
    terms so the constraints are first-order expansions, and solve the same
    horizon QP as the pseudo-linear estimator.  Full steps are damped by
    halving against the merit function (window cost plus weighted squared
    nonlinear constraint violation).  The arrival cost uses the same
    prediction-form recursion as the pseudo-linear estimator but with
    Jacobian matrices, i.e. one EKF step on the discarded stage.
    """

    def __init__(self, model, config: EstimatorConfig, noise: NoiseSpec,
                 x0_bar, p0, max_inner=30, max_halvings=20):
        self.model = model
        self.config = config
        self.noise = noise
        self.max_inner = max_inner
        self.max_halvings = max_halvings
        self._arrival = ArrivalCost(x_bar=x0_bar, cov=p0)
        self._kkt = HorizonKkt(model.n, model.p, config.horizon)
        self._y = []
        self._u = []
        self._window = None
        self._k = None
        self.last_i_star = None
        reg = config.hessian_regularization
        q_inv = np.linalg.inv(noise.process) + reg * np.eye(model.n)
        r_inv = np.linalg.inv(noise.measurement) + reg * np.eye(model.p)
        self._wq = np.repeat(2.0 * q_inv[None], config.horizon - 1, axis=0)
        self._wr = np.repeat(2.0 * r_inv[None], config.horizon, axis=0)
        self._reg = reg
        # merit weight for the squared constraint violation: the stiffest
        # quadratic weight in the window, so violating a constraint is never
        # cheaper than explaining it as noise
        self._merit_mu = max(
            float(np.abs(2.0 * q_inv).max()), float(np.abs(2.0 * r_inv).max())
        )

    @property
    def arrival(self):
        return self._arrival

    @property
    def window(self):
        return self._window

    def init_first_window(self, trajectory, measurements, inputs):
        ell = self.config.horizon
        trajectory = np.atleast_2d(np.asarray(trajectory, dtype=float))
        if trajectory.shape != (ell, self.model.n):
            raise ScdMheError(
                f"initial trajectory has shape {trajectory.shape}, "
                f"expected {(ell, self.model.n)}"
            )
        if len(measurements) != ell or len(inputs) != ell - 1:
            raise ScdMheError("window buffer lengths inconsistent with horizon")
        self._y = [np.asarray(y, dtype=float).reshape(self.model.p) for y in measurements]
        self._u = [np.asarray(u, dtype=float).reshape(self.model.m) for u in inputs]
        w, v = self._project_noises(trajectory, ell - 1)
        self._window = WindowEstimate(states=trajectory.copy(), process_noises=w,
                                      meas_noises=v)
        self._k = ell - 1
        self.last_i_star = self.config.max_iterations
        self._advance_arrival()

    def _project_noises(self, states, k):
        """Noise variables that make ``states`` satisfy the nonlinear
        constraints exactly (the feasible representation of a trajectory)."""
        ell = self.config.horizon
        steps = range(k + 1 - ell, k + 1)
        w = np.empty((ell - 1, self.model.n))
        v = np.empty((ell, self.model.p))
        for j, kj in enumerate(steps):
            if j < ell - 1:
                w[j] = states[j + 1] - self.model.dynamics(states[j], self._u[j], kj)
            v[j] = self._y[j] - self.model.measurement(states[j], kj)
        return w, v

    def _cost(self, states, w, v, wp):
        d0 = states[0] - self._arrival.x_bar
        cost = 0.5 * d0 @ wp @ d0
        cost += 0.5 * np.einsum("ja,jab,jb->", w, self._wq, w)
        cost += 0.5 * np.einsum("ja,jab,jb->", v, self._wr, v)
        return cost

    def _violation(self, states, w, v, k):
        ell = self.config.horizon
        steps = range(k + 1 - ell, k + 1)
        total = 0.0
        for j, kj in enumerate(steps):
            if j < ell - 1:
                d = states[j + 1] - self.model.dynamics(states[j], self._u[j], kj) - w[j]
                total += float(d @ d)
            e = self._y[j] - self.model.measurement(states[j], kj) - v[j]
            total += float(e @ e)
        return total

    def step(self, y_k, u_prev):
        if self._window is None:
            raise ScdMheError("estimator not initialized; call init_first_window first")
        ell = self.config.horizon
        n, p = self.model.n, self.model.p
        k = self._k + 1
        self._y.append(np.asarray(y_k, dtype=float).reshape(p))
        self._u.append(np.asarray(u_prev, dtype=float).reshape(self.model.m))
        self._y = self._y[-ell:]
        self._u = self._u[-(ell - 1):]
        y_arr = np.array(self._y)
        u_arr = np.array(self._u)
        steps = range(k + 1 - ell, k + 1)

        states = warm_start(self._window.states, self.model, u_arr[-1], k - 1)
        wp = 2.0 * (np.linalg.inv(self._arrival.cov) + self._reg * np.eye(n))

        displacements, residuals = [], []
        converged = False
        line_search_ok = True
        for _ in range(self.max_inner):
            # re-project the noise variables so the iterate sits exactly on
            # the nonlinear constraint manifold before linearizing; without
            # this, leftover infeasibility from damped steps can turn the QP
            # direction into a merit-ascent direction and stall the search
            w, v = self._project_noises(states, k)
            a_seq = np.empty((ell - 1, n, n))
            b_dyn = np.empty((ell - 1, n))
            c_seq = np.empty((ell, p, n))
            b_meas = np.empty((ell, p))
            for j, kj in enumerate(steps):
                u_j = u_arr[j] if j < ell - 1 else np.zeros(self.model.m)
                f_x, h_x = self.model.jacobians(states[j], u_j, kj)
                if j < ell - 1:
                    a_seq[j] = f_x
                    b_dyn[j] = self.model.dynamics(states[j], u_arr[j], kj) - f_x @ states[j]
                c_seq[j] = h_x
                b_meas[j] = y_arr[j] - self.model.measurement(states[j], kj) + h_x @ states[j]
            chi_c, w_c, v_c, _lam, res, _ref = self._kkt.solve(
                wp, self._wq, self._wr, self._arrival.x_bar, a_seq, c_seq, b_dyn, b_meas
            )
            residuals.append(res)
            full_move = float(np.linalg.norm((chi_c - states).ravel()))
            if full_move < self.config.tolerance:
                states, w, v = chi_c, w_c, v_c
                displacements.append(full_move)
                converged = True
                break
            # current iterate is feasible by projection, so its merit is the
            # bare cost; Armijo sufficient decrease is measured against the QP
            # model's prediction (candidate satisfies linearized constraints)
            merit_cur = self._cost(states, w, v, wp)
            predicted = max(merit_cur - self._cost(chi_c, w_c, v_c, wp), 0.0)
            alpha = 1.0
            accepted = False
            for _ in range(self.max_halvings + 1):
                s_try = states + alpha * (chi_c - states)
                w_try = w + alpha * (w_c - w)
                v_try = v + alpha * (v_c - v)
                merit_try = (self._cost(s_try, w_try, v_try, wp)
                             + self._merit_mu * self._violation(s_try, w_try, v_try, k))
                if merit_try <= merit_cur - 1e-4 * alpha * predicted:
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                # stalled: keep the current iterate and flag the step
                line_search_ok = False
                displacements.append(0.0)
                break
            states, w, v = s_try, w_try, v_try
            delta = alpha * full_move
            displacements.append(delta)
            if delta < self.config.tolerance:
                converged = True
                break

        # return the feasible representation of the final trajectory
        w, v = self._project_noises(states, k)
        window = WindowEstimate(states=states, process_noises=w, meas_noises=v)
        self._window = window
        self._k = k
        self.last_i_star = len(displacements)
        self._advance_arrival()
        return StepOutcome(
            x_hat=states[-1].copy(),
            window=window,
            i_star=len(displacements),
            displacements=displacements,
            new_arrival=self._arrival,
            kkt_residuals=residuals,
            converged=converged and line_search_ok,
        )

    def _advance_arrival(self):
        """Jacobian-based prediction-form arrival update (one EKF step on the
        discarded stage, linearized at the window's converged first state)."""
        k_first = self._k + 1 - self.config.horizon
        x0 = self._window.states[0]
        u_first = self._u[0]
        y_first = self._y[0]
        a_bar, c_bar = self.model.jacobians(x0, u_first, k_first)
        s = c_bar @ self._arrival.cov @ c_bar.T + self.noise.measurement
        try:
            gain = np.linalg.solve(s, c_bar @ self._arrival.cov).T
        except np.linalg.LinAlgError:
            raise FilterError("innovation covariance is singular") from None
        corrected = self._arrival.x_bar + gain @ (
            y_first - self.model.measurement(self._arrival.x_bar, k_first)
        )
        x_next = self.model.dynamics(corrected, u_first, k_first)
        p_next = riccati_update(self._arrival.cov, a_bar, c_bar,
                                self.noise.process, self.noise.measurement)
        self._arrival = ArrivalCost(x_bar=x_next, cov=p_next)
