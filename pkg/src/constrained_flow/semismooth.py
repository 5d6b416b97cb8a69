"""Augmented-Lagrangian semismooth Newton solver for pointwise ball constraints.

Solves the discrete variational inequality

    find x in K:  <M x - b, xi - x> >= 0  for all xi in K,
    K = {x = C psi : |A_c x| <= gamma_c for every constrained cell c},

where ``C`` is the streamfunction curl (so ``x`` is divergence free by
construction) and ``A_c`` stacks ``k`` rows per cell (centre velocity for
``k = 2``, centre gradient tensor for ``k = 4``).  With ``M = I`` this is the
metric projection onto ``K``.

Each outer step fixes multipliers ``mu`` and solves the semismooth equation

    K psi - f + c B^T (z - P(z)) = 0,   z = B psi + mu / c,

with ``P`` the cellwise projection onto the balls, then updates
``mu <- c (z - P(z))``.  The generalized Jacobian ``K + c B^T (I - DP) B`` is
positive definite even when the active constraints are linearly dependent
(many active cells, or ``gamma = 0`` patches), which is what makes this
formulation robust compared with Newton on the full KKT system.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


@dataclass
class NewtonReport:
    converged: bool
    iterations: int          # total inner Newton steps
    outer_iterations: int
    stationarity: float
    feasibility: float
    n_active: int
    history: list = field(default_factory=list)


@dataclass
class ConstrainedSolution:
    x: np.ndarray            # interior face values of the solution
    psi: np.ndarray          # streamfunction at interior nodes
    mu: np.ndarray           # multipliers, shape (k, n_constrained)
    cells: np.ndarray        # flat indices of the constrained cells
    x_free: np.ndarray       # unconstrained solution (same M, b)
    reaction: np.ndarray     # A^T mu on interior faces
    report: NewtonReport


def ball_project(z, g):
    """Project the columns of ``z`` (shape ``(k, m)``) onto balls of radii ``g``."""
    nz = np.sqrt((z * z).sum(axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(nz > g, g / nz, 1.0)
    return z * ratio, nz


class ConstrainedNewtonSolver:
    """Reusable solver for one grid, constraint operator and system matrix.

    ``blocks`` are the ``k`` row blocks of the constraint operator, each of
    shape ``(n_cells, n_faces)``; ``curl`` maps streamfunction to faces.  ``M``
    must have a positive definite symmetric part; it need not be symmetric.
    """

    def __init__(self, curl, blocks, M, *, tol=1e-11, max_outer=40, max_inner=50,
                 c_max_factor=1e4):
        self.C = sp.csr_matrix(curl)
        self.blocks = [sp.csr_matrix(B) for B in blocks]
        self.M = sp.csr_matrix(M)
        self.K = (self.C.T @ self.M @ self.C).tocsc()
        self.BC = [sp.csr_matrix(B @ self.C) for B in self.blocks]
        self.tol = tol
        self.max_outer = max_outer
        self.max_inner = max_inner
        asym = self.K - self.K.T
        self.symmetric = asym.nnz == 0 or abs(asym).max() <= 1e-14 * abs(self.K).max()
        m_scale = float(np.mean(np.abs(self.M.diagonal())))
        a_scale = float(np.mean([B.multiply(B).sum(axis=1).mean() for B in self.blocks]))
        self.c0 = 1e2 * m_scale / a_scale
        # penalty growth stops at c_max_factor * c0; far beyond that the inner
        # Newton systems lose accuracy to round-off
        self.c_max_factor = c_max_factor
        self.m_scale = m_scale
        self._lu_free = None

    def _free_solve(self, rhs):
        if self._lu_free is None:
            self._lu_free = spla.splu(self.K)
        return self._lu_free.solve(rhs)

    def solve(self, b, gamma, mu0=None) -> ConstrainedSolution:
        """``gamma`` is a flat per-cell array; ``inf`` entries are unconstrained."""
        C, K = self.C, self.K
        f = C.T @ b
        psi = self._free_solve(f)
        x_free = C @ psi
        cells = np.flatnonzero(np.isfinite(gamma))
        g = np.asarray(gamma, float)[cells]
        k = len(self.blocks)
        m = cells.size
        if m == 0:
            rep = NewtonReport(True, 0, 0, 0.0, 0.0, 0)
            return ConstrainedSolution(x_free, psi, np.zeros((k, 0)), cells, x_free,
                                       np.zeros_like(x_free), rep)
        if m == self.blocks[0].shape[0] and not np.any(g):
            # every cell pinned to zero: the admissible set is {0}
            A_T = sp.vstack([B_ for B_ in self.blocks]).T.tocsr()
            mu = spla.lsqr(A_T, b, atol=1e-14, btol=1e-14)[0].reshape(k, m)
            rep = NewtonReport(True, 0, 0, 0.0, 0.0, m)
            zero = np.zeros_like(x_free)
            return ConstrainedSolution(zero, np.zeros_like(psi), mu, cells, x_free,
                                       A_T @ mu.ravel(), rep)
        B = sp.vstack([M_[cells] for M_ in self.BC]).tocsr()   # rows ordered (r, cell)
        mu = np.zeros((k, m)) if mu0 is None else np.array(mu0, float).reshape(k, m)

        vscale = max(1.0, float(np.abs(x_free).max()), float(np.abs(b).max()) / self.m_scale)
        fscale = max(float(np.abs(f).max()), self.m_scale * vscale, 1e-300)
        c = self.c0

        def Y_of(psi):
            return (B @ psi).reshape(k, m)

        def kkt_feasibility(Y, mu):
            P, _ = ball_project(Y + mu / c, g)
            return float(np.abs(Y - P).max())

        total_inner = 0
        history = []
        converged = False
        feas = np.inf
        stat = np.inf
        outer = 0
        for outer in range(1, self.max_outer + 1):
            psi, inner, stat = self._inner(psi, mu, c, B, f, g, k, m, fscale, vscale)
            total_inner += inner
            Y = Y_of(psi)
            z = Y + mu / c
            P, _ = ball_project(z, g)
            mu_new = c * (z - P)
            feas_prev = feas
            feas = max(float(np.abs(Y - P).max()), kkt_feasibility(Y, mu_new))
            mu = mu_new
            history.append((stat, feas))
            if feas <= self.tol * vscale and stat <= self.tol:
                converged = True
                break
            if feas > 0.1 * feas_prev and c < self.c_max_factor * self.c0:
                c *= 10.0
        x = C @ psi
        Y = Y_of(psi)
        n_active = int((np.sqrt((Y * Y).sum(axis=0)) >= g - 1e-9 * vscale).sum())
        reaction = sum(self.blocks[r][cells].T @ mu[r] for r in range(k))
        rep = NewtonReport(converged, total_inner, outer, stat, feas, n_active, history)
        if not converged:
            log.warning("constrained Newton solve stopped after %d outer steps "
                        "(stationarity %.2e, feasibility %.2e)", outer, stat, feas)
        return ConstrainedSolution(x, psi, mu, cells, x_free, reaction, rep)

    def _inner(self, psi, mu, c, B, f, g, k, m, fscale, vscale):
        """Semismooth Newton on the augmented-Lagrangian stationarity equation.

        Returns ``(psi, iterations, stationarity)``; stationarity is the size
        of the last Newton correction in velocity units relative to
        ``vscale``, which stays meaningful when large ``c`` puts a round-off
        floor under the raw residual.
        """
        K, C = self.K, self.C

        def evaluate(psi):
            z = (B @ psi).reshape(k, m) + mu / c
            P, nz = ball_project(z, g)
            d = z - P
            F = K @ psi - f + c * (B.T @ d.ravel())
            return F, z, nz, d

        def merit(psi, F, d):
            if self.symmetric:
                return 0.5 * psi @ (K @ psi) - f @ psi + 0.5 * c * float((d * d).sum())
            return 0.5 * float(F @ F)

        F, z, nz, d = evaluate(psi)
        phi = merit(psi, F, d)
        stat = np.inf
        it = 0
        for it in range(1, self.max_inner + 1):
            if not np.any(F):
                return psi, it - 1, 0.0
            out = nz > g
            safe = np.where(nz > 0, nz, 1.0)
            rho = np.where(out & (g > 0), g / safe, 0.0)
            zh = z / safe
            # c (I - DP) per cell: zero inside, c[(1 - rho) I + rho zh zh^T] outside
            blocks = []
            for r in range(k):
                row = []
                for s in range(k):
                    coef = rho * zh[r] * zh[s]
                    if r == s:
                        coef = coef + (1.0 - rho)
                    row.append(sp.diags(np.where(out, c * coef, 0.0)))
                blocks.append(row)
            D = sp.bmat(blocks, format="csr")
            H = (K + B.T @ D @ B).tocsc()
            dpsi = spla.spsolve(H, -F)
            stat = float(np.abs(C @ dpsi).max()) / vscale
            if stat <= 0.1 * self.tol:
                psi = psi + dpsi
                return psi, it, stat
            step = 1.0
            slope = float(F @ dpsi)
            for _ in range(30):
                psi_t = psi + step * dpsi
                F_t, z_t, nz_t, d_t = evaluate(psi_t)
                phi_t = merit(psi_t, F_t, d_t)
                # residual decrease also counts: near the solution the
                # potential stalls at round-off level before the residual does
                ok = float(F_t @ F_t) <= (1 - 1e-4 * step) * float(F @ F)
                if self.symmetric:
                    ok = ok or phi_t <= phi + 1e-4 * step * slope
                if ok:
                    break
                step *= 0.5
            else:
                psi_t = psi + dpsi
                F_t, z_t, nz_t, d_t = evaluate(psi_t)
                phi_t = merit(psi_t, F_t, d_t)
            psi, F, z, nz, d, phi = psi_t, F_t, z_t, nz_t, d_t, phi_t
        return psi, it, stat
