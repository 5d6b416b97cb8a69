"""Staggered (MAC) grid geometry, field containers and stencil operators.

Layout on an ``nx`` by ``ny`` cell grid:

* scalars live at cell centres, shape ``(nx, ny)``;
* ``u`` lives on vertical faces, shape ``(nx + 1, ny)``; ``u[i, j]`` sits at
  ``x = i * hx``;
* ``v`` lives on horizontal faces, shape ``(nx, ny + 1)``; ``v[i, j]`` sits at
  ``y = j * hy``.

Velocity boundary faces (``u[0]``, ``u[nx]``, ``v[:, 0]``, ``v[:, ny]``) carry
the normal component and are held at zero for no-slip fields.  Tangential
no-slip enters through ghost reflection in :func:`vector_laplacian`.

All inner products are area weighted: ``<a, b> = hx * hy * sum(a * b)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp


class GridMismatchError(ValueError):
    """Raised when fields defined on different grids are combined."""


@dataclass(frozen=True)
class StaggeredGrid:
    nx: int
    ny: int
    hx: float
    hy: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny:
            raise ValueError("nx and ny must be integers")
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid needs nx >= 2 and ny >= 2, got {self.nx}x{self.ny}")
        if not (self.hx > 0 and self.hy > 0):
            raise ValueError("cell widths must be positive")

    @classmethod
    def uniform(cls, nx: int, ny: int, lx: float = 1.0, ly: float = 1.0,
                origin=(0.0, 0.0)) -> "StaggeredGrid":
        return cls(nx, ny, lx / nx, ly / ny, tuple(origin))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    @property
    def lengths(self) -> tuple[float, float]:
        return (self.nx * self.hx, self.ny * self.hy)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Meshgrid (``indexing='ij'``) of cell-centre coordinates."""
        x = self.origin[0] + (np.arange(self.nx) + 0.5) * self.hx
        y = self.origin[1] + (np.arange(self.ny) + 0.5) * self.hy
        return np.meshgrid(x, y, indexing="ij")

    def u_points(self) -> tuple[np.ndarray, np.ndarray]:
        x = self.origin[0] + np.arange(self.nx + 1) * self.hx
        y = self.origin[1] + (np.arange(self.ny) + 0.5) * self.hy
        return np.meshgrid(x, y, indexing="ij")

    def v_points(self) -> tuple[np.ndarray, np.ndarray]:
        x = self.origin[0] + (np.arange(self.nx) + 0.5) * self.hx
        y = self.origin[1] + np.arange(self.ny + 1) * self.hy
        return np.meshgrid(x, y, indexing="ij")

    def boundary_distance(self) -> np.ndarray:
        """Distance from each cell centre to the nearest side of the rectangle."""
        X, Y = self.cell_centers()
        lx, ly = self.lengths
        x0, y0 = self.origin
        return np.minimum.reduce([X - x0, x0 + lx - X, Y - y0, y0 + ly - Y])

    # -- degree-of-freedom bookkeeping for the sparse operators ---------------

    @cached_property
    def _face_index(self) -> tuple[np.ndarray, np.ndarray]:
        nx, ny = self.nx, self.ny
        iu = -np.ones((nx + 1, ny), dtype=np.int64)
        iu[1:nx, :] = np.arange((nx - 1) * ny).reshape(nx - 1, ny)
        iv = -np.ones((nx, ny + 1), dtype=np.int64)
        iv[:, 1:ny] = (nx - 1) * ny + np.arange(nx * (ny - 1)).reshape(nx, ny - 1)
        return iu, iv

    @property
    def u_index(self) -> np.ndarray:
        """Interior-DOF number of every u face, ``-1`` on boundary faces."""
        return self._face_index[0]

    @property
    def v_index(self) -> np.ndarray:
        return self._face_index[1]

    @property
    def n_interior_faces(self) -> int:
        return (self.nx - 1) * self.ny + self.nx * (self.ny - 1)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny


# ---------------------------------------------------------------------------
# Field containers
# ---------------------------------------------------------------------------


def _frozen(a, shape, what, allow_inf=False) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.shape == ():
        arr = np.full(shape, float(arr))
    if arr.shape != shape:
        raise ValueError(f"{what}: expected shape {shape}, got {arr.shape}")
    if allow_inf:
        if np.isnan(arr).any():
            raise ValueError(f"{what}: NaN values")
    elif not np.isfinite(arr).all():
        raise ValueError(f"{what}: non-finite values")
    arr.flags.writeable = False
    return arr


def _check_same_grid(a, b):
    if a.grid != b.grid:
        raise GridMismatchError(f"grid mismatch: {a.grid} vs {b.grid}")


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: StaggeredGrid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values",
                           _frozen(self.values, self.grid.shape, "ScalarField"))

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_function(cls, grid, f):
        X, Y = grid.cell_centers()
        return cls(grid, np.broadcast_to(f(X, Y), grid.shape))

    def dot(self, other: "ScalarField") -> float:
        _check_same_grid(self, other)
        return float(self.grid.cell_area * np.sum(self.values * other.values))

    def norm(self) -> float:
        return float(np.sqrt(self.dot(self)))

    def mean(self) -> float:
        return float(self.values.mean())

    def __add__(self, other):
        if isinstance(other, ScalarField):
            _check_same_grid(self, other)
            return ScalarField(self.grid, self.values + other.values)
        return ScalarField(self.grid, self.values + other)

    def __sub__(self, other):
        if isinstance(other, ScalarField):
            _check_same_grid(self, other)
            return ScalarField(self.grid, self.values - other.values)
        return ScalarField(self.grid, self.values - other)

    def __mul__(self, c):
        return ScalarField(self.grid, self.values * c)

    __rmul__ = __mul__

    def __neg__(self):
        return ScalarField(self.grid, -self.values)


@dataclass(frozen=True, eq=False)
class VectorField:
    grid: StaggeredGrid
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        g = self.grid
        object.__setattr__(self, "u", _frozen(self.u, (g.nx + 1, g.ny), "VectorField.u"))
        object.__setattr__(self, "v", _frozen(self.v, (g.nx, g.ny + 1), "VectorField.v"))

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros((grid.nx + 1, grid.ny)), np.zeros((grid.nx, grid.ny + 1)))

    @classmethod
    def from_functions(cls, grid, fu, fv, no_slip=True):
        """Sample ``fu`` at u faces and ``fv`` at v faces."""
        u = np.array(np.broadcast_to(fu(*grid.u_points()), (grid.nx + 1, grid.ny)), float)
        v = np.array(np.broadcast_to(fv(*grid.v_points()), (grid.nx, grid.ny + 1)), float)
        if no_slip:
            u[0], u[-1] = 0.0, 0.0
            v[:, 0], v[:, -1] = 0.0, 0.0
        return cls(grid, u, v)

    @classmethod
    def from_interior(cls, grid, x: np.ndarray):
        """Inverse of :meth:`interior`; boundary faces are set to zero."""
        u = np.zeros((grid.nx + 1, grid.ny))
        v = np.zeros((grid.nx, grid.ny + 1))
        n_u = (grid.nx - 1) * grid.ny
        u[1:-1, :] = x[:n_u].reshape(grid.nx - 1, grid.ny)
        v[:, 1:-1] = x[n_u:].reshape(grid.nx, grid.ny - 1)
        return cls(grid, u, v)

    def interior(self) -> np.ndarray:
        """Flat vector of interior-face values, ordered as ``grid.u_index``/``v_index``."""
        return np.concatenate([self.u[1:-1, :].ravel(), self.v[:, 1:-1].ravel()])

    def with_no_slip(self) -> "VectorField":
        return VectorField.from_interior(self.grid, self.interior())

    def boundary_normal_max(self) -> float:
        return float(max(np.abs(self.u[[0, -1]]).max(), np.abs(self.v[:, [0, -1]]).max()))

    def dot(self, other: "VectorField") -> float:
        _check_same_grid(self, other)
        s = np.sum(self.u * other.u) + np.sum(self.v * other.v)
        return float(self.grid.cell_area * s)

    def norm(self) -> float:
        return float(np.sqrt(self.dot(self)))

    def max_abs(self) -> float:
        return float(max(np.abs(self.u).max(), np.abs(self.v).max()))

    def __add__(self, other):
        _check_same_grid(self, other)
        return VectorField(self.grid, self.u + other.u, self.v + other.v)

    def __sub__(self, other):
        _check_same_grid(self, other)
        return VectorField(self.grid, self.u - other.u, self.v - other.v)

    def __mul__(self, c):
        return VectorField(self.grid, self.u * c, self.v * c)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return VectorField(self.grid, self.u / c, self.v / c)

    def __neg__(self):
        return VectorField(self.grid, -self.u, -self.v)


@dataclass(frozen=True, eq=False)
class ObstacleField:
    """Extended non-negative obstacle samples at cell centres; ``inf`` allowed."""

    grid: StaggeredGrid
    values: np.ndarray = field()

    def __post_init__(self):
        vals = _frozen(self.values, self.grid.shape, "ObstacleField", allow_inf=True)
        if (vals < 0).any():
            raise ValueError("obstacle values must be non-negative")
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, grid, value: float):
        return cls(grid, np.full(grid.shape, float(value)))

    @property
    def is_degenerate(self) -> bool:
        return bool((self.values == 0).any())

    def finite_mask(self) -> np.ndarray:
        return np.isfinite(self.values)


# ---------------------------------------------------------------------------
# Stencil operators
# ---------------------------------------------------------------------------


def divergence(vf: VectorField) -> ScalarField:
    g = vf.grid
    d = (vf.u[1:, :] - vf.u[:-1, :]) / g.hx + (vf.v[:, 1:] - vf.v[:, :-1]) / g.hy
    return ScalarField(g, d)


def gradient(sf: ScalarField) -> VectorField:
    """Face-centred gradient with zero normal flux on the boundary faces."""
    g = sf.grid
    p = sf.values
    u = np.zeros((g.nx + 1, g.ny))
    v = np.zeros((g.nx, g.ny + 1))
    u[1:-1, :] = (p[1:, :] - p[:-1, :]) / g.hx
    v[:, 1:-1] = (p[:, 1:] - p[:, :-1]) / g.hy
    return VectorField(g, u, v)


def _laplacian_component(a: np.ndarray, hx: float, hy: float, wall_axis: int) -> np.ndarray:
    """5-point Laplacian of one velocity component.

    Along ``1 - wall_axis`` the first and last entries are the (zero) normal
    boundary faces; along ``wall_axis`` the samples are half a cell from the
    wall and the ghost value is the negated neighbour.
    """
    out = np.zeros_like(a)
    if wall_axis == 1:  # u component: faces along x, cells along y
        inner = a[1:-1, :]
        lap = (a[2:, :] - 2 * inner + a[:-2, :]) / hx**2
        padded = np.concatenate([-inner[:, :1], inner, -inner[:, -1:]], axis=1)
        lap = lap + (padded[:, 2:] - 2 * inner + padded[:, :-2]) / hy**2
        out[1:-1, :] = lap
    else:  # v component: cells along x, faces along y
        inner = a[:, 1:-1]
        lap = (a[:, 2:] - 2 * inner + a[:, :-2]) / hy**2
        padded = np.concatenate([-inner[:1, :], inner, -inner[-1:, :]], axis=0)
        lap = lap + (padded[2:, :] - 2 * inner + padded[:-2, :]) / hx**2
        out[:, 1:-1] = lap
    return out


def vector_laplacian(vf: VectorField) -> VectorField:
    g = vf.grid
    return VectorField(g, _laplacian_component(vf.u, g.hx, g.hy, 1),
                       _laplacian_component(vf.v, g.hx, g.hy, 0))


def interpolate_face_to_center(vf: VectorField) -> tuple[ScalarField, ScalarField]:
    g = vf.grid
    return (ScalarField(g, 0.5 * (vf.u[1:, :] + vf.u[:-1, :])),
            ScalarField(g, 0.5 * (vf.v[:, 1:] + vf.v[:, :-1])))


def center_speed(vf: VectorField) -> np.ndarray:
    uc, vc = interpolate_face_to_center(vf)
    return np.hypot(uc.values, vc.values)


def dirichlet_energy(vf: VectorField) -> float:
    """Discrete ``|grad v|^2`` as ``-<lap v, v>`` (boundary faces ignored)."""
    return -vector_laplacian(vf).dot(vf)


def cell_velocity_gradient(vf: VectorField) -> np.ndarray:
    """Cell-centred velocity gradient, shape ``(4, nx, ny)``.

    Components are ``du/dx, du/dy, dv/dx, dv/dy``.  Normal derivatives are
    exact face differences; cross derivatives use central differences of the
    centre-interpolated component with the wall ghost ``-value``.
    """
    g = vf.grid
    uc, vc = (c.values for c in interpolate_face_to_center(vf))
    dudx = (vf.u[1:, :] - vf.u[:-1, :]) / g.hx
    dvdy = (vf.v[:, 1:] - vf.v[:, :-1]) / g.hy
    up = np.concatenate([-uc[:, :1], uc, -uc[:, -1:]], axis=1)
    dudy = (up[:, 2:] - up[:, :-2]) / (2 * g.hy)
    vp = np.concatenate([-vc[:1, :], vc, -vc[-1:, :]], axis=0)
    dvdx = (vp[2:, :] - vp[:-2, :]) / (2 * g.hx)
    return np.stack([dudx, dudy, dvdx, dvdy])


# ---------------------------------------------------------------------------
# Sparse matrix forms on the interior face DOFs
# ---------------------------------------------------------------------------


def _coo(rows, cols, vals, shape):
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    keep = (rows >= 0) & (cols >= 0)
    return sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=shape)


def laplacian_matrix(grid: StaggeredGrid) -> sp.csr_matrix:
    """Matrix of :func:`vector_laplacian` acting on interior face values."""
    n = grid.n_interior_faces
    rows, cols, vals = [], [], []

    def add(r, c, w):
        r, c = np.broadcast_arrays(r, c)
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(np.broadcast_to(w, r.shape).astype(float).ravel())

    for idx, h_face, h_cell, axis in ((grid.u_index, grid.hx, grid.hy, 0),
                                      (grid.v_index, grid.hy, grid.hx, 1)):
        # idx has shape (faces along `axis`, cells along the other axis)
        a = idx if axis == 0 else idx.T
        inner = a[1:-1, :]
        add(inner, inner, -2.0 / h_face**2 - 2.0 / h_cell**2)
        add(inner, a[2:, :], 1.0 / h_face**2)
        add(inner, a[:-2, :], 1.0 / h_face**2)
        add(inner[:, :-1], inner[:, 1:], 1.0 / h_cell**2)
        add(inner[:, 1:], inner[:, :-1], 1.0 / h_cell**2)
        add(inner[:, [0, -1]], inner[:, [0, -1]], -1.0 / h_cell**2)
    return _coo(rows, cols, vals, (n, n))


def curl_matrix(grid: StaggeredGrid) -> sp.csr_matrix:
    """Map interior node streamfunction values to interior face velocities.

    ``u = d(psi)/dy`` and ``v = -d(psi)/dx`` with ``psi = 0`` on the boundary;
    its range is exactly the discrete divergence-free no-slip subspace.
    """
    nx, ny = grid.nx, grid.ny
    node = -np.ones((nx + 1, ny + 1), dtype=np.int64)
    node[1:nx, 1:ny] = np.arange((nx - 1) * (ny - 1)).reshape(nx - 1, ny - 1)
    iu, iv = grid.u_index, grid.v_index
    rows = [iu, iu, iv, iv]
    cols = [node[:, 1:], node[:, :-1], node[1:, :], node[:-1, :]]
    vals = [np.full(iu.shape, 1 / grid.hy), np.full(iu.shape, -1 / grid.hy),
            np.full(iv.shape, -1 / grid.hx), np.full(iv.shape, 1 / grid.hx)]
    return _coo([r.ravel() for r in rows], [c.ravel() for c in cols],
                [v.ravel() for v in vals],
                (grid.n_interior_faces, (nx - 1) * (ny - 1)))


def center_interpolation_matrices(grid: StaggeredGrid) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Matrices mapping interior face values to cell-centre ``u`` and ``v``."""
    nx, ny = grid.nx, grid.ny
    cell = np.arange(nx * ny).reshape(nx, ny)
    iu, iv = grid.u_index, grid.v_index
    n = grid.n_interior_faces
    Iu = _coo([cell.ravel(), cell.ravel()], [iu[:-1].ravel(), iu[1:].ravel()],
              [np.full(nx * ny, 0.5)] * 2, (nx * ny, n))
    Iv = _coo([cell.ravel(), cell.ravel()], [iv[:, :-1].ravel(), iv[:, 1:].ravel()],
              [np.full(nx * ny, 0.5)] * 2, (nx * ny, n))
    return Iu, Iv


def cell_gradient_matrices(grid: StaggeredGrid) -> list[sp.csr_matrix]:
    """Matrix forms of the four components of :func:`cell_velocity_gradient`."""
    nx, ny = grid.nx, grid.ny
    hx, hy = grid.hx, grid.hy
    cell = np.arange(nx * ny).reshape(nx, ny)
    n = grid.n_interior_faces
    iu, iv = grid.u_index, grid.v_index
    Iu, Iv = center_interpolation_matrices(grid)
    ones = np.ones(nx * ny)
    dudx = _coo([cell.ravel()] * 2, [iu[1:].ravel(), iu[:-1].ravel()],
                [ones / hx, -ones / hx], (nx * ny, n))
    dvdy = _coo([cell.ravel()] * 2, [iv[:, 1:].ravel(), iv[:, :-1].ravel()],
                [ones / hy, -ones / hy], (nx * ny, n))

    def central(axis, h):
        # central difference of centre values along `axis` with ghost = -value
        m = nx if axis == 0 else ny
        D = sp.lil_matrix((m, m))
        for k in range(m):
            lo, hi = k - 1, k + 1
            if lo >= 0:
                D[k, lo] -= 1
            else:
                D[k, k] += 1
            if hi < m:
                D[k, hi] += 1
            else:
                D[k, k] -= 1
        D = D.tocsr() / (2 * h)
        if axis == 0:
            return sp.kron(D, sp.identity(ny), format="csr")
        return sp.kron(sp.identity(nx), D, format="csr")

    dudy = central(1, hy) @ Iu
    dvdx = central(0, hx) @ Iv
    return [dudx, dudy.tocsr(), dvdx.tocsr(), dvdy]
