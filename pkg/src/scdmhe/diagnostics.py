"""Observability and boundedness diagnostics.

These are the runtime-checkable faces of the estimator's stability
preconditions: a windowed observability Gramian with a positive smallest
eigenvalue (the measurements pin down the window's initial state), arrival
covariances bounded away from zero and infinity, and a bounded estimation
error.  The Gramian is evaluated along whichever trajectory the caller
supplies; theory checks use the simulator's true states, practical monitoring
uses the estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ScdMheError


@dataclass
class ObservabilityReport:
    gramian: np.ndarray
    alpha_hat: float
    window_start: int


@dataclass
class BoundsLog:
    """Per-step extremes collected from a finished trial."""

    p_min_eigs: np.ndarray
    p_max_eigs: np.ndarray
    a_norms: np.ndarray
    c_norms: np.ndarray
    error_norms: np.ndarray
    violations: list = field(default_factory=list)


def observability_gramian(a_seq, c_seq, r_seq, window_start=0):
    """Windowed Gramian  sum_j Phi_j' C_j' R_j^-1 C_j Phi_j.

    ``a_seq`` holds the ell-1 transition matrices inside the window, ``c_seq``
    and ``r_seq`` the ell output matrices and measurement covariances.
    Phi accumulates products of the transition matrices starting from the
    identity, so the Gramian measures how well the window's measurements
    determine its first state.
    """
    a_seq = [np.atleast_2d(a) for a in a_seq]
    c_seq = [np.atleast_2d(c) for c in c_seq]
    r_seq = [np.atleast_2d(r) for r in r_seq]
    ell = len(c_seq)
    if len(a_seq) != ell - 1 or len(r_seq) != ell:
        raise ScdMheError(
            f"window lengths inconsistent: {len(a_seq)} transitions, "
            f"{ell} outputs, {len(r_seq)} covariances"
        )
    n = c_seq[0].shape[1]
    gram = np.zeros((n, n))
    phi = np.eye(n)
    for j in range(ell):
        if j > 0:
            phi = a_seq[j - 1] @ phi
        cp = c_seq[j] @ phi
        gram += cp.T @ np.linalg.solve(r_seq[j], cp)
    gram = 0.5 * (gram + gram.T)
    alpha_hat = float(np.linalg.eigvalsh(gram)[0])
    return ObservabilityReport(gramian=gram, alpha_hat=alpha_hat,
                               window_start=window_start)


def bounds_monitor(arrival_covs, a_norms, c_norms, errors,
                   p_band=(1e-8, 1e6), error_cap=None):
    """Extract eigenvalue extremes, coefficient norms, and error norms from a
    trial trace; flag configured-band violations (reporting only)."""
    p_min = np.array([np.linalg.eigvalsh(p)[0] for p in arrival_covs])
    p_max = np.array([np.linalg.eigvalsh(p)[-1] for p in arrival_covs])
    a_norms = np.asarray(a_norms, dtype=float)
    c_norms = np.asarray(c_norms, dtype=float)
    errors = np.asarray(errors, dtype=float)
    violations = []
    if p_min.size and p_min.min() < p_band[0]:
        violations.append(f"arrival covariance eigenvalue below {p_band[0]:g}")
    if p_max.size and p_max.max() > p_band[1]:
        violations.append(f"arrival covariance eigenvalue above {p_band[1]:g}")
    if not np.all(np.isfinite(errors)):
        violations.append("non-finite estimation error")
    if error_cap is not None and errors.size and errors.max() > error_cap:
        violations.append(f"estimation error above {error_cap:g}")
    return BoundsLog(p_min_eigs=p_min, p_max_eigs=p_max, a_norms=a_norms,
                     c_norms=c_norms, error_norms=errors, violations=violations)
