"""Discrete Helmholtz/Leray projection onto divergence-free no-slip fields."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import fft

from .grid import (ScalarField, StaggeredGrid, VectorField, _check_same_grid,
                   divergence, gradient)

log = logging.getLogger(__name__)


class PoissonConvergenceError(RuntimeError):
    def __init__(self, residual, iterations):
        super().__init__(f"Poisson solve did not converge: relative residual "
                         f"{residual:.3e} after {iterations} iterations")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class PoissonInfo:
    residual: float
    iterations: int
    mean_removed: float


def neumann_laplacian(sf: ScalarField) -> ScalarField:
    """``div(grad p)`` with zero normal flux: the 5-point Neumann Laplacian."""
    return divergence(gradient(sf))


def _neumann_eigenvalues(grid: StaggeredGrid) -> np.ndarray:
    kx = np.arange(grid.nx)
    ky = np.arange(grid.ny)
    lx = -(4 / grid.hx**2) * np.sin(np.pi * kx / (2 * grid.nx)) ** 2
    ly = -(4 / grid.hy**2) * np.sin(np.pi * ky / (2 * grid.ny)) ** 2
    return lx[:, None] + ly[None, :]


@dataclass(frozen=True)
class PoissonSolver:
    """Mean-zero solver for the Neumann Laplacian.

    ``method="dct"`` diagonalises the operator with a type-II cosine transform
    (exact up to round-off on the uniform rectangle); ``method="cg"`` runs
    Jacobi-preconditioned conjugate gradients.  Both return the mean-zero
    solution and enforce the same residual contract.
    """

    grid: StaggeredGrid
    tolerance: float = 1e-12
    max_iterations: int = 20_000
    method: str = "dct"

    def __post_init__(self):
        if not 0 < self.tolerance < 1:
            raise ValueError("tolerance must lie in (0, 1)")
        if self.method not in ("dct", "cg"):
            raise ValueError(f"unknown Poisson method {self.method!r}")

    def solve(self, rhs: ScalarField, return_info: bool = False):
        if rhs.grid != self.grid:
            _check_same_grid(rhs, ScalarField.zeros(self.grid))
        b = rhs.values
        mean = float(b.mean())
        if abs(mean) > 1e-14 * max(1.0, np.abs(b).max()):
            log.debug("Poisson rhs has mean %.3e; solving the compatible part", mean)
        b = b - mean
        bnorm = np.linalg.norm(b)
        if bnorm == 0.0:
            q = np.zeros_like(b)
            info = PoissonInfo(0.0, 0, mean)
            return (ScalarField(self.grid, q), info) if return_info else ScalarField(self.grid, q)

        if self.method == "dct":
            q, iterations = self._solve_dct(b), 1
        else:
            q, iterations = self._solve_cg(b, bnorm)
        q = q - q.mean()
        res = np.linalg.norm(neumann_laplacian(ScalarField(self.grid, q)).values - b) / bnorm
        # the spectral solve is exact; allow for round-off growth with grid size
        limit = self.tolerance if self.method == "cg" else max(self.tolerance, 1e-13 * np.sqrt(b.size))
        if res > limit:
            raise PoissonConvergenceError(res, iterations)
        out = ScalarField(self.grid, q)
        return (out, PoissonInfo(float(res), iterations, mean)) if return_info else out

    def _solve_dct(self, b):
        lam = _neumann_eigenvalues(self.grid)
        bh = fft.dctn(b, type=2, norm="ortho")
        lam[0, 0] = 1.0
        qh = bh / lam
        qh[0, 0] = 0.0
        return fft.idctn(qh, type=2, norm="ortho")

    def _solve_cg(self, b, bnorm):
        g = self.grid
        diag = np.full(g.shape, 2 / g.hx**2 + 2 / g.hy**2)
        diag[[0, -1], :] -= 1 / g.hx**2
        diag[:, [0, -1]] -= 1 / g.hy**2

        def apply(p):  # SPD on mean-zero functions
            return -neumann_laplacian(ScalarField(g, p)).values

        def precond(r):
            z = r / diag
            return z - z.mean()

        rhs = -b
        x = np.zeros_like(b)
        r = rhs.copy()
        z = precond(r)
        p = z.copy()
        rz = np.sum(r * z)
        for it in range(1, self.max_iterations + 1):
            Ap = apply(p)
            alpha = rz / np.sum(p * Ap)
            x += alpha * p
            r -= alpha * Ap
            if np.linalg.norm(r) <= 0.1 * self.tolerance * bnorm:
                return x, it
            z = precond(r)
            rz_new = np.sum(r * z)
            p = z + (rz_new / rz) * p
            rz = rz_new
        raise PoissonConvergenceError(np.linalg.norm(r) / bnorm, self.max_iterations)


def poisson_solve(rhs: ScalarField, solver: PoissonSolver | None = None, return_info=False):
    solver = solver or PoissonSolver(rhs.grid)
    return solver.solve(rhs, return_info=return_info)


def leray_project(z: VectorField, solver: PoissonSolver | None = None) -> VectorField:
    """Orthogonal projection onto discrete divergence-free no-slip fields.

    Normal boundary-face values are dropped first; the remainder is split as
    ``z = P z + grad q``.
    """
    z0 = z.with_no_slip()
    q = poisson_solve(divergence(z0), solver)
    return z0 - gradient(q)
