"""Tensor-product shape functions on a uniform Cartesian cell grid.

Two families share one interface:

``bspline``
    Uniform B-splines of degree ``p`` over a clamped (open) knot vector whose
    interior knots are the cell faces.  ``C^(p-1)`` across cells.
``legendre``
    Hierarchic integrated-Legendre modes of the p-version FEM, ``C^0``.

All evaluation is done in cell-local coordinates ``xi`` in ``[0, 1]``;
derivatives are returned per unit of ``xi`` and must be divided by the cell
size to obtain physical gradients.

Local numbering of the ``(p+1)**3`` functions supported on a cell is C-order
over the per-axis local index: ``a = (ax * m + ay) * m + az`` with
``m = p + 1``.  The per-axis local index maps to a global 1D function index
``cell * stride + ax`` where ``stride`` is 1 for B-splines and ``p`` for the
hierarchic basis (vertex modes first/last, bubbles in between).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import legendre as npleg

FAMILIES = ("bspline", "legendre")

_XI_TOL = 1e-12


class BasisDomainError(ValueError):
    """Evaluation point outside the reference cell."""


@dataclass(frozen=True)
class BasisSpec:
    family: str = "bspline"
    p: int = 3

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown basis family {self.family!r}; expected one of {FAMILIES}")
        if int(self.p) < 1:
            raise ValueError(f"polynomial order must be >= 1, got {self.p}")

    @property
    def m(self) -> int:
        """Functions per axis on one cell."""
        return self.p + 1

    @property
    def n_local(self) -> int:
        return self.m**3

    @property
    def continuity(self) -> int:
        return self.p - 1 if self.family == "bspline" else 0

    @property
    def stride(self) -> int:
        return 1 if self.family == "bspline" else self.p

    def n_functions_1d(self, n_cells: int) -> int:
        if self.family == "bspline":
            return n_cells + self.p
        return n_cells * self.p + 1


def clamped_knots(n_cells: int, p: int) -> np.ndarray:
    """Open knot vector in cell units: ``p+1`` repeated end knots, unit spacing."""
    inner = np.arange(n_cells + 1, dtype=float)
    return np.concatenate([np.zeros(p), inner, np.full(p, float(n_cells))])


def bspline_1d(cell, xi, p: int, n_cells: int):
    """Values and first derivatives of the ``p+1`` B-splines active on ``cell``.

    Vectorised Cox-de Boor recursion.  ``cell`` and ``xi`` broadcast to a
    common shape ``S``; the result arrays have shape ``S + (p+1,)`` and the
    derivative is taken with respect to ``xi`` (one cell = one unit).
    """
    cell, xi = np.broadcast_arrays(np.asarray(cell, dtype=np.int64), np.asarray(xi, dtype=float))
    shape = cell.shape
    cell = cell.ravel()
    u = cell + xi.ravel()
    t = clamped_knots(n_cells, p)
    span = cell + p
    npt = u.size

    def _basis(deg):
        N = np.zeros((npt, deg + 1))
        N[:, 0] = 1.0
        left = np.zeros((npt, deg + 1))
        right = np.zeros((npt, deg + 1))
        for j in range(1, deg + 1):
            left[:, j] = u - t[span + 1 - j]
            right[:, j] = t[span + j] - u
            saved = np.zeros(npt)
            for r in range(j):
                temp = N[:, r] / (right[:, r + 1] + left[:, j - r])
                N[:, r] = saved + right[:, r + 1] * temp
                saved = left[:, j - r] * temp
            N[:, j] = saved
        return N

    vals = _basis(p)
    lower = _basis(p - 1)  # functions span-p+1 .. span
    ders = np.zeros_like(vals)
    for r in range(p + 1):
        k = span - p + r
        if r >= 1:
            d = t[k + p] - t[k]
            ders[:, r] += np.where(d > 0, p * lower[:, r - 1] / np.where(d > 0, d, 1.0), 0.0)
        if r <= p - 1:
            d = t[k + p + 1] - t[k + 1]
            ders[:, r] -= np.where(d > 0, p * lower[:, r] / np.where(d > 0, d, 1.0), 0.0)
    return vals.reshape(shape + (p + 1,)), ders.reshape(shape + (p + 1,))


def legendre_1d(xi, p: int):
    """Integrated-Legendre modes on ``[0, 1]`` in local order (left, bubbles, right)."""
    xi = np.asarray(xi, dtype=float)
    t = 2.0 * xi - 1.0
    vals = np.empty(xi.shape + (p + 1,))
    ders = np.empty_like(vals)
    vals[..., 0] = 0.5 * (1.0 - t)
    vals[..., p] = 0.5 * (1.0 + t)
    ders[..., 0] = -1.0
    ders[..., p] = 1.0
    for k in range(2, p + 1):
        ck = np.zeros(k + 1)
        ck[k] = 1.0
        ck[k - 2] = -1.0
        scale = 1.0 / np.sqrt(2.0 * (2 * k - 1))
        vals[..., k - 1] = scale * npleg.legval(t, ck)
        ck1 = np.zeros(k)
        ck1[k - 1] = 1.0
        # d/dt phi_k = sqrt((2k-1)/2) L_{k-1}; d/dxi = 2 d/dt
        ders[..., k - 1] = 2.0 * np.sqrt((2 * k - 1) / 2.0) * npleg.legval(t, ck1)
    return vals, ders


def eval_1d(spec: BasisSpec, cell, xi, n_cells: int):
    if spec.family == "bspline":
        return bspline_1d(cell, xi, spec.p, n_cells)
    vals, ders = legendre_1d(xi, spec.p)
    shape = np.broadcast_shapes(np.shape(cell), np.shape(xi))
    return np.broadcast_to(vals, shape + vals.shape[-1:]), np.broadcast_to(ders, shape + ders.shape[-1:])


def tensor_product(vx, vy, vz, dx, dy, dz):
    """Combine per-axis tables ``(npts, m)`` into values ``(npts, m^3)`` and gradients ``(npts, m^3, 3)``."""
    npts, m = vx.shape
    vals = (vx[:, :, None, None] * vy[:, None, :, None] * vz[:, None, None, :]).reshape(npts, m**3)
    g = np.empty((npts, m**3, 3))
    g[:, :, 0] = (dx[:, :, None, None] * vy[:, None, :, None] * vz[:, None, None, :]).reshape(npts, -1)
    g[:, :, 1] = (vx[:, :, None, None] * dy[:, None, :, None] * vz[:, None, None, :]).reshape(npts, -1)
    g[:, :, 2] = (vx[:, :, None, None] * vy[:, None, :, None] * dz[:, None, None, :]).reshape(npts, -1)
    return vals, g


def eval_basis(spec: BasisSpec, xi, cell=(0, 0, 0), grid_shape=(1, 1, 1)):
    """Values and reference gradients of all functions supported on ``cell``.

    ``xi`` is ``(3,)`` or ``(npts, 3)`` in ``[0, 1]^3``.  ``cell`` is the
    integer cell position (one triple or one per point) on a grid of
    ``grid_shape`` cells; it only matters for B-splines near the boundary.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    if np.any(xi < -_XI_TOL) or np.any(xi > 1.0 + _XI_TOL):
        raise BasisDomainError("local coordinate outside the reference cell [0, 1]^3")
    xi = np.clip(xi, 0.0, 1.0)
    cell = np.broadcast_to(np.atleast_2d(np.asarray(cell, dtype=np.int64)), xi.shape)
    tabs = [eval_1d(spec, cell[:, k], xi[:, k], grid_shape[k]) for k in range(3)]
    return tensor_product(tabs[0][0], tabs[1][0], tabs[2][0], tabs[0][1], tabs[1][1], tabs[2][1])


@dataclass(frozen=True)
class DofLayout:
    """Global numbering of tensor-product functions over the active cells.

    ``cell_dofs[c, a]`` is the scalar DOF of local function ``a`` on active
    cell ``c``.  Vector fields interleave components: ``dof = comp + ncomp * scalar``.
    """

    spec: BasisSpec
    components: int
    func_shape: tuple
    func_index: np.ndarray  # (n_scalar, 3) global per-axis function indices
    cell_dofs: np.ndarray  # (n_cells, n_local)

    @property
    def n_scalar(self) -> int:
        return len(self.func_index)

    @property
    def n_dofs(self) -> int:
        return self.n_scalar * self.components

    def vector_cell_dofs(self) -> np.ndarray:
        """Element DOFs ordered ``(a, comp)`` -> ``a * ncomp + comp``."""
        k = self.components
        d = self.cell_dofs[:, :, None] * k + np.arange(k)
        return d.reshape(len(self.cell_dofs), -1)


def local_axis_functions(spec: BasisSpec, cells: np.ndarray) -> list:
    """Per-axis global 1D function indices ``(n_cells, m)`` for each axis."""
    off = np.arange(spec.m)
    return [cells[:, k, None] * spec.stride + off for k in range(3)]


def dof_map(grid, spec: BasisSpec, components: int = 1) -> DofLayout:
    """Number the functions touched by the active cells of ``grid``.

    Numbering is lexicographic in the global per-axis function index
    (x slowest), hence a pure function of the active-cell set.
    """
    cells = np.asarray(grid.cells, dtype=np.int64)
    shape = tuple(spec.n_functions_1d(int(n)) for n in grid.shape)
    gx, gy, gz = local_axis_functions(spec, cells)
    m = spec.m
    lin = ((gx[:, :, None, None] * shape[1] + gy[:, None, :, None]) * shape[2] + gz[:, None, None, :]).reshape(len(cells), m**3)
    uniq, inv = np.unique(lin, return_inverse=True)
    func_index = np.stack(np.unravel_index(uniq, shape), axis=1)
    return DofLayout(spec, int(components), shape, func_index, inv.reshape(lin.shape).astype(np.int64))
