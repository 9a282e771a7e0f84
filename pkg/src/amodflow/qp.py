"""Sparse convex QP solver for problems in standard form

    minimize   1/2 z'Pz + q'z
    subject to A z = b,  z >= 0

using a primal-dual interior-point method with Mehrotra predictor-corrector
steps.  The Newton system is the regularised quasi-definite KKT matrix,
factored once per iteration with SuperLU and cleaned up by a few steps of
iterative refinement.  Rank-deficient equality blocks (flow conservation has
one redundant row per connected component) are tolerated by the dual
regularisation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


@dataclass
class QpResult:
    z: np.ndarray
    y: np.ndarray
    s: np.ndarray
    objective: float
    primal_residual: float      # ||Az - b||_inf
    dual_residual: float        # ||Pz + q - A'y - s||_inf
    complementarity: float      # max_i z_i s_i
    iterations: int
    converged: bool

    @property
    def kkt_residual(self) -> float:
        return max(self.primal_residual, self.dual_residual, self.complementarity)


def _max_step(v, dv):
    """Largest step keeping v + t*dv >= 0 (may exceed 1)."""
    neg = dv < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-v[neg] / dv[neg]))


def solve_standard_qp(P, q, A, b, tol: float = 1e-9, max_iter: int = 200,
                      reg: float = 1e-11) -> QpResult:
    """Solve the standard-form QP; see module docstring.

    Convergence is declared when the primal residual is below
    ``tol * (1 + ||b||_inf)``, the dual residual below ``tol * (1 + ||q||_inf)``
    and every complementarity product below ``tol**1.5 * scale``.
    """
    P = sp.csc_matrix(P, dtype=float)
    A = sp.csc_matrix(A, dtype=float)
    q = np.asarray(q, dtype=float)
    b = np.asarray(b, dtype=float)
    n = q.size
    m = b.size
    if n == 0:
        return QpResult(np.zeros(0), np.zeros(m), np.zeros(0), 0.0,
                        float(np.max(np.abs(b), initial=0.0)), 0.0, 0.0, 0, True)
    At = A.T.tocsc()
    I_n = sp.identity(n, format="csc")
    I_m = sp.identity(m, format="csc")

    def kkt(d):
        return sp.bmat([[-(P + sp.diags(d + reg)), At], [A, reg * I_m]], format="csc")

    def kkt0(d):
        return sp.bmat([[-(P + sp.diags(d)), At], [A, None]], format="csc")

    def solve(lu, K0, rhs):
        sol = lu.solve(rhs)
        for _ in range(3):
            r = rhs - K0 @ sol
            if np.max(np.abs(r)) <= 1e-14 * (1.0 + np.max(np.abs(rhs))):
                break
            sol += lu.solve(r)
        return sol

    # starting point: minimum-norm-ish primal, least-squares dual, then shift
    K = sp.bmat([[-(P + I_n), At], [A, 1e-8 * I_m]], format="csc")
    lu = spla.splu(K)
    sol = lu.solve(np.concatenate([q, b]))
    z = sol[:n]
    y = sol[n:]
    s = q + P @ z - At @ y
    z = z + max(-1.5 * z.min(), 0.0)
    s = s + max(-1.5 * s.min(), 0.0)
    zs = z @ s
    z = z + 0.5 * zs / max(s.sum(), 1e-12) + 1e-2
    s = s + 0.5 * zs / max(z.sum(), 1e-12) + 1e-2

    bnorm = 1.0 + np.max(np.abs(b), initial=0.0)
    qnorm = 1.0 + np.max(np.abs(q), initial=0.0)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        rp = b - A @ z
        rd = P @ z + q - At @ y - s
        mu = z @ s / n
        scale = max(1.0, abs(0.5 * z @ (P @ z) + q @ z))
        if (np.max(np.abs(rp), initial=0.0) <= tol * bnorm
                and np.max(np.abs(rd)) <= tol * qnorm
                and np.max(z * s) <= tol ** 1.5 * scale):
            converged = True
            break
        d = s / z
        Kr = kkt(d)
        K0 = kkt0(d)
        try:
            lu = spla.splu(Kr)
        except RuntimeError:
            log.warning("KKT factorisation failed at iteration %d", it)
            break
        # predictor
        rhs = np.concatenate([rd + s, rp])
        sol = solve(lu, K0, rhs)
        dz_a, dy_a = sol[:n], sol[n:]
        ds_a = -s - d * dz_a
        a_p = min(1.0, _max_step(z, dz_a))
        a_d = min(1.0, _max_step(s, ds_a))
        mu_aff = (z + a_p * dz_a) @ (s + a_d * ds_a) / n
        sigma = min(1.0, (mu_aff / mu) ** 3)
        # corrector
        target = sigma * mu - dz_a * ds_a
        rhs = np.concatenate([rd + s - target / z, rp])
        sol = solve(lu, K0, rhs)
        dz, dy = sol[:n], sol[n:]
        ds = (target - z * s - s * dz) / z
        alpha = min(1.0, 0.995 * min(_max_step(z, dz), _max_step(s, ds)))
        z = z + alpha * dz
        y = y + alpha * dy
        s = s + alpha * ds
        z = np.maximum(z, 1e-300)
        s = np.maximum(s, 1e-300)
    rp = b - A @ z
    rd = P @ z + q - At @ y - s
    obj = float(0.5 * z @ (P @ z) + q @ z)
    return QpResult(z, y, s, obj, float(np.max(np.abs(rp), initial=0.0)),
                    float(np.max(np.abs(rd))), float(np.max(z * s)), it, converged)
