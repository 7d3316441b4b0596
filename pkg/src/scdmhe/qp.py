"""Horizon-structured equality-constrained quadratic programs.

The window estimation problem is the canonical QP

    min_z  1/2 z' H z + f' z   subject to  A_eq z = b_eq

over the stacked decision vector ``z = [chi_0 .. chi_{L-1}, w_0 .. w_{L-2},
v_0 .. v_{L-1}]`` (window-local stage indices).  H is block diagonal: the
doubled inverse arrival covariance on the first state block, zeros on the
remaining state blocks, and doubled inverse noise covariances on the noise
blocks.  A_eq stacks the dynamic rows over the measurement rows:

    row block j of A_d:   -A_j chi_j + chi_{j+1} - w_j = b_d[j]
    row block j of A_m:    C_j chi_j + v_j            = b_m[j]

Two solve paths share one contract (KKT residual <= tol after at most two
rounds of iterative refinement):

* :func:`solve_kkt` factors the assembled sparse KKT matrix with SuperLU and
  checks pivots explicitly; it accepts any :class:`EqualityQP`.
* :class:`HorizonKkt` is the per-estimator workspace used in the estimation
  loop.  It permutes the KKT system into stage-interleaved order, where states
  couple only adjacent stages, and factors the resulting fixed-bandwidth
  banded matrix with LAPACK.  Cost per solve is linear in the horizon length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sparse
import scipy.sparse.linalg as sparse_linalg

from .exceptions import ConvergenceError, QpError, RankDeficiencyError
from .models import NoiseSpec, validate_spd

KKT_TOL = 1e-9
MAX_REFINEMENTS = 2
# A pivot below this fraction of the largest pivot is treated as rank deficiency.
PIVOT_RTOL = 1e-12


@dataclass
class EqualityQP:
    """Canonical equality-constrained QP with sparse operators."""

    h: sparse.csc_matrix
    f_lin: np.ndarray
    a_eq: sparse.csc_matrix
    b_eq: np.ndarray
    n_z: int
    n_c: int
    # (n, p, ell) when assembled from a horizon; None for hand-built problems.
    structure: tuple | None = None


@dataclass
class QPSolution:
    z_star: np.ndarray
    multipliers: np.ndarray
    kkt_residual: float
    refinements: int = 0


def _as_weight(cov, name, regularization):
    """Doubled, optionally regularized inverse covariance block."""
    cov = validate_spd(cov, name)
    inv = np.linalg.inv(cov)
    if regularization:
        inv = inv + regularization * np.eye(cov.shape[0])
    return 2.0 * inv


def _noise_weights(noise, ell, regularization):
    if isinstance(noise, NoiseSpec):
        noise = [noise] * ell
    if len(noise) != ell:
        raise QpError(f"need {ell} noise specs, got {len(noise)}")
    wq = np.stack([_as_weight(ns.process, "process covariance", regularization) for ns in noise[: ell - 1]])
    wr = np.stack([_as_weight(ns.measurement, "measurement covariance", regularization) for ns in noise])
    return wq, wr


def assemble_qp(x_bar, p_cov, noise, a_seq, b_seq, c_seq, inputs, measurements,
                regularization=0.0):
    """Build the window QP from pseudo-linear coefficients.

    Parameters
    ----------
    x_bar, p_cov : arrival anchor (n,) and covariance (n, n).
    noise : NoiseSpec or sequence of ell NoiseSpec (stage-indexed).
    a_seq, b_seq : ell-1 coefficient matrices A_j (n, n) and B_j (n, m).
    c_seq : ell output matrices C_j (p, n).
    inputs : ell-1 input vectors (m,).
    measurements : ell measurement vectors (p,).
    """
    a_seq = [np.atleast_2d(a) for a in a_seq]
    b_seq = [np.atleast_2d(b) for b in b_seq]
    c_seq = [np.atleast_2d(c) for c in c_seq]
    ell = len(c_seq)
    if ell < 2:
        raise QpError(f"horizon must be >= 2, got {ell}")
    if len(a_seq) != ell - 1 or len(b_seq) != ell - 1:
        raise QpError(f"need {ell - 1} (A, B) pairs for horizon {ell}, "
                      f"got {len(a_seq)} and {len(b_seq)}")
    if len(inputs) != ell - 1 or len(measurements) != ell:
        raise QpError("input/measurement window lengths inconsistent with horizon")
    b_dyn = np.stack([np.atleast_1d(np.asarray(b_seq[j] @ np.atleast_1d(inputs[j]), dtype=float))
                      for j in range(ell - 1)])
    b_meas = np.stack([np.atleast_1d(np.asarray(measurements[j], dtype=float))
                       for j in range(ell)])
    return assemble_linearized_qp(x_bar, p_cov, noise, a_seq, c_seq, b_dyn, b_meas,
                                  regularization)


def assemble_linearized_qp(x_bar, p_cov, noise, a_seq, c_seq, b_dyn, b_meas,
                           regularization=0.0):
    """Like :func:`assemble_qp` but with fully general constraint right-hand
    sides, as needed for Jacobian linearizations with affine defect terms."""
    a_seq = [np.atleast_2d(a) for a in a_seq]
    c_seq = [np.atleast_2d(c) for c in c_seq]
    ell = len(c_seq)
    n = a_seq[0].shape[0] if a_seq else c_seq[0].shape[1]
    p = c_seq[0].shape[0]
    for j, a in enumerate(a_seq):
        if a.shape != (n, n):
            raise QpError(f"A[{j}] has shape {a.shape}, expected {(n, n)}")
    for j, c in enumerate(c_seq):
        if c.shape != (p, n):
            raise QpError(f"C[{j}] has shape {c.shape}, expected {(p, n)}")
    x_bar = np.asarray(x_bar, dtype=float).reshape(n)
    wp = _as_weight(p_cov, "arrival covariance", regularization)
    wq, wr = _noise_weights(noise, ell, regularization)
    if wq.shape[1] != n or wr.shape[1] != p:
        raise QpError("noise covariance dimensions inconsistent with (n, p)")

    n_z = n * ell + n * (ell - 1) + p * ell
    n_c = n * (ell - 1) + p * ell
    off_w = n * ell
    off_v = off_w + n * (ell - 1)

    h = sparse.lil_matrix((n_z, n_z))
    h[:n, :n] = wp
    for j in range(ell - 1):
        h[off_w + j * n: off_w + (j + 1) * n, off_w + j * n: off_w + (j + 1) * n] = wq[j]
    for j in range(ell):
        h[off_v + j * p: off_v + (j + 1) * p, off_v + j * p: off_v + (j + 1) * p] = wr[j]

    f_lin = np.zeros(n_z)
    f_lin[:n] = -wp @ x_bar

    a = sparse.lil_matrix((n_c, n_z))
    for j in range(ell - 1):
        rows = slice(j * n, (j + 1) * n)
        a[rows, j * n: (j + 1) * n] = -a_seq[j]
        a[rows, (j + 1) * n: (j + 2) * n] = np.eye(n)
        a[rows, off_w + j * n: off_w + (j + 1) * n] = -np.eye(n)
    for j in range(ell):
        rows = slice(n * (ell - 1) + j * p, n * (ell - 1) + (j + 1) * p)
        a[rows, j * n: (j + 1) * n] = c_seq[j]
        a[rows, off_v + j * p: off_v + (j + 1) * p] = np.eye(p)

    b_eq = np.concatenate([np.asarray(b_dyn, dtype=float).reshape(-1),
                           np.asarray(b_meas, dtype=float).reshape(-1)])
    if b_eq.shape[0] != n_c:
        raise QpError(f"right-hand side has length {b_eq.shape[0]}, expected {n_c}")
    return EqualityQP(h=h.tocsc(), f_lin=f_lin, a_eq=a.tocsc(), b_eq=b_eq,
                      n_z=n_z, n_c=n_c, structure=(n, p, ell))


def kkt_residual(qp, z, lam):
    """max(inf-norm stationarity, inf-norm feasibility), recomputed from the
    problem data so it is independent of whichever factorization produced z."""
    r_stat = qp.h @ z + qp.f_lin + qp.a_eq.T @ lam
    r_feas = qp.a_eq @ z - qp.b_eq
    return max(np.abs(r_stat).max(), np.abs(r_feas).max(initial=0.0))


def solve_kkt(qp, tol=KKT_TOL, max_refinements=MAX_REFINEMENTS):
    """Solve the QP through its KKT system with a sparse LU factorization.

    Raises
    ------
    RankDeficiencyError
        if a pivot of the factorization is zero or tiny relative to the
        largest pivot (rank-deficient constraints or singular reduced Hessian).
    ConvergenceError
        if the recomputed KKT residual stays above ``tol`` after
        ``max_refinements`` rounds of iterative refinement.
    """
    kkt = sparse.bmat([[qp.h, qp.a_eq.T], [qp.a_eq, None]], format="csc")
    rhs = np.concatenate([-qp.f_lin, qp.b_eq])
    try:
        lu = sparse_linalg.splu(kkt)
    except RuntimeError as exc:  # SuperLU signals exact singularity this way
        raise RankDeficiencyError(f"KKT factorization failed: {exc}") from None
    pivots = np.abs(lu.U.diagonal())
    if pivots.min() <= PIVOT_RTOL * pivots.max():
        bad = int(np.argmin(pivots))
        raise RankDeficiencyError(
            f"zero pivot at KKT position {bad} (|pivot| = {pivots[bad]:.3e}); "
            "constraints are rank deficient or the reduced Hessian is singular"
        )
    sol = lu.solve(rhs)
    z, lam = sol[: qp.n_z], sol[qp.n_z:]
    res = kkt_residual(qp, z, lam)
    refinements = 0
    while res > tol and refinements < max_refinements:
        r = np.concatenate([qp.h @ z + qp.f_lin + qp.a_eq.T @ lam,
                            qp.a_eq @ z - qp.b_eq])
        d = lu.solve(-r)
        z = z + d[: qp.n_z]
        lam = lam + d[qp.n_z:]
        res = kkt_residual(qp, z, lam)
        refinements += 1
    if res > tol:
        raise ConvergenceError(
            f"KKT residual {res:.3e} above tolerance {tol:.1e} "
            f"after {refinements} refinement rounds"
        )
    return QPSolution(z_star=z, multipliers=lam, kkt_residual=res,
                      refinements=refinements)


def dump_qp(qp, base_path):
    """Write (H, f_lin, A_eq, b_eq) as plain-text sparse triplets.

    One file per component (``<base>_H.txt``, ``<base>_f.txt``,
    ``<base>_Aeq.txt``, ``<base>_beq.txt``), one ``row col value`` line per
    nonzero with 17 significant digits, rows sorted by (row, col).  Vectors
    use column 0.  Intended for diffing assembled problems across
    implementations.
    """
    base = str(base_path)
    paths = []
    for suffix, mat in (("H", qp.h), ("Aeq", qp.a_eq)):
        coo = mat.tocoo()
        order = np.lexsort((coo.col, coo.row))
        path = f"{base}_{suffix}.txt"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i in order:
                fh.write(f"{coo.row[i]} {coo.col[i]} {coo.data[i]:.17g}\n")
        paths.append(path)
    for suffix, vec in (("f", qp.f_lin), ("beq", qp.b_eq)):
        path = f"{base}_{suffix}.txt"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, v in enumerate(vec):
                if v != 0.0:
                    fh.write(f"{i} 0 {v:.17g}\n")
        paths.append(path)
    return paths


class HorizonKkt:
    """Banded KKT workspace for one (n, p, ell) window shape.

    Variables are interleaved per stage as ``[chi_j, v_j, lam_m_j, w_j,
    lam_d_j]`` so every KKT entry sits within a fixed band (states couple only
    adjacent stages).  The band template, scatter indices, and permutation are
    computed once; each solve fills values, runs one LAPACK banded LU, and
    refines against the exactly recomputed residual.

    Instances own their scratch buffers and are not thread-safe; use one per
    estimator.
    """

    def __init__(self, n, p, ell):
        if ell < 2:
            raise QpError(f"horizon must be >= 2, got {ell}")
        self.n, self.p, self.ell = n, p, ell
        self.n_z = n * ell + n * (ell - 1) + p * ell
        self.n_c = n * (ell - 1) + p * ell
        self.dim = self.n_z + self.n_c

        # natural index blocks
        chi = np.arange(n * ell).reshape(ell, n)
        w = n * ell + np.arange(n * (ell - 1)).reshape(ell - 1, n)
        v = n * ell + n * (ell - 1) + np.arange(p * ell).reshape(ell, p)
        lam_d = self.n_z + np.arange(n * (ell - 1)).reshape(ell - 1, n)
        lam_m = self.n_z + n * (ell - 1) + np.arange(p * ell).reshape(ell, p)

        perm = []
        for j in range(ell):
            perm += [*chi[j], *v[j], *lam_m[j]]
            if j < ell - 1:
                perm += [*w[j], *lam_d[j]]
        perm = np.array(perm)
        pos = np.empty(self.dim, dtype=np.intp)  # natural index -> banded index
        pos[perm] = np.arange(self.dim)
        self._perm = perm
        self._pos = pos

        entries_i, entries_j = [], []
        entry_count = [0]

        def block(rows, cols):
            """Record a dense block; return its flat scatter order (row-major)."""
            ii, jj = np.meshgrid(pos[rows], pos[cols], indexing="ij")
            start = entry_count[0]
            entries_i.append(ii.ravel())
            entries_j.append(jj.ravel())
            entry_count[0] += ii.size
            return start, ii.size

        spans = {}
        spans["wp"] = [block(chi[0], chi[0])]
        spans["wq"] = [block(w[j], w[j]) for j in range(ell - 1)]
        spans["wr"] = [block(v[j], v[j]) for j in range(ell)]
        # dynamics coefficients, both the constraint row and its transpose
        spans["a_row"] = [block(lam_d[j], chi[j]) for j in range(ell - 1)]
        spans["a_col"] = [block(chi[j], lam_d[j]) for j in range(ell - 1)]
        spans["c_row"] = [block(lam_m[j], chi[j]) for j in range(ell)]
        spans["c_col"] = [block(chi[j], lam_m[j]) for j in range(ell)]
        # constant identity couplings
        const_idx, const_val = [], []

        def const_block(rows, cols, mat):
            start, size = block(rows, cols)
            const_idx.append((start, size))
            const_val.append(np.asarray(mat, dtype=float).ravel())

        eye_n, eye_p = np.eye(n), np.eye(p)
        for j in range(ell - 1):
            const_block(lam_d[j], chi[j + 1], eye_n)   # + chi_{j+1}
            const_block(chi[j + 1], lam_d[j], eye_n)
            const_block(lam_d[j], w[j], -eye_n)        # - w_j
            const_block(w[j], lam_d[j], -eye_n)
        for j in range(ell):
            const_block(lam_m[j], v[j], eye_p)         # + v_j
            const_block(v[j], lam_m[j], eye_p)

        all_i = np.concatenate(entries_i)
        all_j = np.concatenate(entries_j)
        self.kl = int(np.max(all_i - all_j))
        self.ku = int(np.max(all_j - all_i))
        n_band_rows = self.kl + self.ku + 1
        # flat index into the (n_band_rows, dim) banded array
        flat_idx = (self.ku + all_i - all_j) * self.dim + all_j

        def span_idx(key):
            return np.concatenate([flat_idx[s: s + size] for s, size in spans[key]])

        self._idx = {key: span_idx(key) for key in
                     ("wp", "wq", "wr", "a_row", "a_col", "c_row", "c_col")}
        # Transposed blocks are filled from the same value array (A.ravel(),
        # C.ravel()); reorder their scatter indices so the (a, b) value lands
        # in the (b, a) slot.
        tr_a = np.arange((ell - 1) * n * n).reshape(ell - 1, n, n)
        self._idx["a_col"] = self._idx["a_col"][tr_a.transpose(0, 2, 1).ravel()]
        tr_c = np.arange(ell * n * p).reshape(ell, n, p)
        self._idx["c_col"] = self._idx["c_col"][tr_c.transpose(0, 2, 1).ravel()]

        self._template = np.zeros((n_band_rows, self.dim))
        tflat = self._template.ravel()
        for (start, size), vals in zip(const_idx, const_val):
            tflat[flat_idx[start: start + size]] = vals

        # rhs scatter positions (banded order)
        self._rhs_chi0 = pos[chi[0]]
        self._rhs_lam_d = pos[lam_d.ravel()]
        self._rhs_lam_m = pos[lam_m.ravel()]
        # natural-order slices for unpacking the solution
        self._chi, self._w, self._v = chi, w, v
        self._lam_d, self._lam_m = lam_d, lam_m

    def solve(self, wp, wq, wr, x_bar, a_seq, c_seq, b_dyn, b_meas,
              tol=KKT_TOL, max_refinements=MAX_REFINEMENTS):
        """Solve one window QP given weight blocks and coefficients.

        Parameters are stacked arrays: ``wq`` (ell-1, n, n) and ``wr``
        (ell, p, p) are the doubled inverse noise covariances, ``wp`` (n, n)
        the doubled inverse arrival covariance, ``a_seq`` (ell-1, n, n),
        ``c_seq`` (ell, p, n), ``b_dyn`` (ell-1, n), ``b_meas`` (ell, p).

        Returns ``(chi, w, v, lam, residual, refinements)`` with chi (ell, n),
        w (ell-1, n), v (ell, p) and lam the stacked multipliers (n_c,).
        """
        ab = self._template.copy()
        flat = ab.ravel()
        flat[self._idx["wp"]] = wp.ravel()
        flat[self._idx["wq"]] = wq.reshape(-1)
        flat[self._idx["wr"]] = wr.reshape(-1)
        a_flat = -a_seq.reshape(-1)
        flat[self._idx["a_row"]] = a_flat
        flat[self._idx["a_col"]] = a_flat
        c_flat = c_seq.reshape(-1)
        flat[self._idx["c_row"]] = c_flat
        flat[self._idx["c_col"]] = c_flat

        g0 = wp @ x_bar
        rhs = np.zeros(self.dim)
        rhs[self._rhs_chi0] = g0
        rhs[self._rhs_lam_d] = b_dyn.reshape(-1)
        rhs[self._rhs_lam_m] = b_meas.reshape(-1)

        try:
            sol_banded = scipy.linalg.solve_banded((self.kl, self.ku), ab, rhs)
        except np.linalg.LinAlgError as exc:
            raise RankDeficiencyError(f"banded KKT factorization failed: {exc}") from None

        sol = np.empty(self.dim)
        sol[self._perm] = sol_banded
        chi = sol[self._chi]
        w = sol[self._w] if self.ell > 1 else np.zeros((0, self.n))
        v = sol[self._v]
        lam_d = sol[self._lam_d]
        lam_m = sol[self._lam_m]

        def residuals():
            r_chi = np.einsum("jpn,jp->jn", c_seq, lam_m)
            r_chi[0] += wp @ chi[0] - g0
            r_chi[:-1] -= np.einsum("jab,ja->jb", a_seq, lam_d)
            r_chi[1:] += lam_d
            r_w = np.einsum("jab,jb->ja", wq, w) - lam_d
            r_v = np.einsum("jab,jb->ja", wr, v) + lam_m
            r_dyn = chi[1:] - np.einsum("jab,jb->ja", a_seq, chi[:-1]) - w - b_dyn
            r_meas = np.einsum("jpb,jb->jp", c_seq, chi) + v - b_meas
            return r_chi, r_w, r_v, r_dyn, r_meas

        def res_norm(parts):
            return max(np.abs(part).max(initial=0.0) for part in parts)

        parts = residuals()
        res = res_norm(parts)
        refinements = 0
        while res > tol and refinements < max_refinements:
            r_chi, r_w, r_v, r_dyn, r_meas = parts
            corr_rhs = np.zeros(self.dim)
            corr_rhs[self._pos[self._chi.ravel()]] = -r_chi.reshape(-1)
            corr_rhs[self._pos[self._w.ravel()]] = -r_w.reshape(-1)
            corr_rhs[self._pos[self._v.ravel()]] = -r_v.reshape(-1)
            corr_rhs[self._rhs_lam_d] = -r_dyn.reshape(-1)
            corr_rhs[self._rhs_lam_m] = -r_meas.reshape(-1)
            d_banded = scipy.linalg.solve_banded((self.kl, self.ku), ab, corr_rhs)
            d = np.empty(self.dim)
            d[self._perm] = d_banded
            chi = chi + d[self._chi]
            w = w + d[self._w]
            v = v + d[self._v]
            lam_d = lam_d + d[self._lam_d]
            lam_m = lam_m + d[self._lam_m]
            parts = residuals()
            res = res_norm(parts)
            refinements += 1
        if res > tol:
            raise ConvergenceError(
                f"KKT residual {res:.3e} above tolerance {tol:.1e} "
                f"after {refinements} refinement rounds"
            )
        lam = np.concatenate([lam_d.reshape(-1), lam_m.reshape(-1)])
        return chi, w, v, lam, res, refinements
