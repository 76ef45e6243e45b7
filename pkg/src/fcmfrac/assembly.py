"""Weak-form assembly of the elastic and phase-field systems on the cell grid.

Quadrature points of a cell form a tensor grid and the basis is a tensor
product, so field interpolation, residual projection and element matrices
are evaluated axis by axis (sum factorisation).  Element matrices are
scattered into a fixed sparsity pattern through a precomputed index map.

Fictitious-domain contributions are scaled by the indicator ``alpha``.
Dirichlet conditions are imposed with a penalty on surface point sets
(box faces, embedded planes or triangulated surfaces).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .basis import BasisSpec, dof_map, eval_1d, tensor_product
from .grid import ALPHA_FCM, gauss_1d
from .material import ETA, degraded_stress, positive_energy, tangent_moduli

log = logging.getLogger(__name__)

FACES = {"xmin": (0, 0), "xmax": (0, 1), "ymin": (1, 0), "ymax": (1, 1), "zmin": (2, 0), "zmax": (2, 1)}
BC_KINDS = ("fixed", "displacement", "free", "phase", "seed")


class ConfigurationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# sum-factorised kernels
# ---------------------------------------------------------------------------

def _interp(U, X, Y, Z):
    """``U[c, a, b, k, ...]`` -> values at tensor points ``[c, x, y, z, ...]``."""
    nc, m = U.shape[0], U.shape[1]
    tail = U.shape[4:]
    C = int(np.prod(tail)) if tail else 1
    q = X.shape[1]
    T = np.matmul(Z[:, None], U.reshape(nc, m * m, m, C))  # (c, ab, z, C)
    T = np.matmul(Y[:, None], T.reshape(nc, m, m, q * C))  # (c, a, y, zC)
    T = np.matmul(X, T.reshape(nc, m, q * q * C))  # (c, x, yzC)
    return T.reshape((nc, q, q, q) + tail)


def _project(F, X, Y, Z):
    """Transpose of :func:`_interp`: point data to local coefficients."""
    nc, q = F.shape[0], F.shape[1]
    tail = F.shape[4:]
    C = int(np.prod(tail)) if tail else 1
    m = X.shape[2]
    T = np.matmul(X.transpose(0, 2, 1), F.reshape(nc, q, q * q * C))  # (c, a, yzC)
    T = np.matmul(Y.transpose(0, 2, 1)[:, None], T.reshape(nc, m, q, q * C))  # (c, a, b, zC)
    T = np.matmul(Z.transpose(0, 2, 1)[:, None], T.reshape(nc, m * m, q, C))  # (c, ab, k, C)
    return T.reshape((nc, m, m, m) + tail)


def _gram(C, PX, PY, PZ, raw=False):
    """``K[c, a, b] = sum_q C[c, q] prod_k P_k[c, q_k, a_k, b_k]``.

    With ``raw=True`` the result keeps the contraction order
    ``(c, az, bz, ay, by, ax, bx)`` flattened to ``(c, m^6)``; see
    :func:`raw_to_standard`.
    """
    nc, q = C.shape[0], C.shape[1]
    m = PX.shape[-1]
    m2 = m * m
    T = np.matmul(C.reshape(nc, q * q, q), PZ.reshape(nc, q, m2)).reshape(nc, q, q, m2)
    T = np.matmul(T.transpose(0, 1, 3, 2), PY.reshape(nc, 1, q, m2))  # (c, x, kl, jm)
    T = np.matmul(T.reshape(nc, q, m2 * m2).transpose(0, 2, 1), PX.reshape(nc, q, m2))
    if raw:
        return T.reshape(nc, -1)
    return raw_to_standard(T, m)


def raw_to_standard(K, m):
    """Reorder raw gram output to ``(c, a, b)`` with C-order local indices."""
    nc = K.shape[0]
    tail = K.shape[2:] if K.ndim > 2 and K.shape[1] == m**6 else ()
    K = K.reshape((nc, m, m, m, m, m, m) + tail).transpose((0, 5, 3, 1, 6, 4, 2) + tuple(range(7, 7 + len(tail))))
    return K.reshape((nc, m**3, m**3) + tail)


def _standard_to_raw_map(pair_map, m):
    nc = pair_map.shape[0]
    return pair_map.reshape(nc, m, m, m, m, m, m).transpose(0, 3, 6, 2, 5, 1, 4).reshape(nc, -1)


def _pair(A, B):
    return A[..., :, None] * B[..., None, :]


@dataclass(eq=False)
class _GroupData:
    start: int
    stop: int
    nc: int
    q: int
    dofs: np.ndarray  # (nc, m^3)
    V: tuple  # per-axis values (nc, q, m)
    D: tuple  # per-axis physical derivatives (nc, q, m)
    pair_map: np.ndarray | None = None  # (nc, n_local, n_local) pattern positions
    raw_map: np.ndarray | None = None  # same positions in raw gram order


class Pattern:
    """Fixed CSR pattern of the scalar operator and element-to-entry maps."""

    def __init__(self, n, keys_list):
        keys = np.unique(np.concatenate([k.ravel() for k in keys_list]))
        self.n = int(n)
        self.keys = keys
        rows = keys // n
        self.indices = (keys % n).astype(np.int32)
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=n))]).astype(np.int32)
        self.nnz = len(keys)

    def lookup(self, keys):
        pos = np.searchsorted(self.keys, keys)
        if np.any(pos >= self.nnz) or np.any(self.keys[np.minimum(pos, self.nnz - 1)] != keys):
            raise ValueError("entry outside the assembled sparsity pattern")
        return pos

    def scalar(self, data):
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    def block(self, data3):
        k = data3.shape[-1]
        A = sp.bsr_matrix((data3, self.indices, self.indptr), shape=(self.n * k, self.n * k))
        return A.tocsr()


class Discretization:
    """Basis tables, DOF layout and sparsity for one grid + quadrature rule.

    ``material`` is a per-voxel :class:`~fcmfrac.material.MaterialField`;
    moduli are sampled at quadrature points and scaled by ``alpha``.
    """

    def __init__(self, image, grid, quad, spec: BasisSpec | None = None, material=None):
        self.image = image
        self.grid = grid
        self.quad = quad
        self.spec = spec or BasisSpec("bspline", grid.p)
        if self.spec.p != grid.p:
            raise ValueError("basis order differs from grid order")
        self.layout = dof_map(grid, self.spec, 1)
        self.n_scalar = self.layout.n_scalar
        h = grid.h
        self.groups = []
        for g in quad.groups:
            pos = grid.cells[g.cells]
            V, D = [], []
            for k in range(3):
                uniq, inv = np.unique(pos[:, k], return_inverse=True)
                v, d = eval_1d(self.spec, uniq[:, None], g.xi1d[None, :], grid.shape[k])
                V.append(np.ascontiguousarray(v[inv]))
                D.append(np.ascontiguousarray(d[inv] / h))
            self.groups.append(_GroupData(g.start, g.stop, len(g.cells), g.q,
                                          self.layout.cell_dofs[g.cells], tuple(V), tuple(D)))
        n = self.n_scalar
        keys = [gd.dofs[:, :, None] * n + gd.dofs[:, None, :] for gd in self.groups]
        self.pattern = Pattern(n, keys)
        for gd, kk in zip(self.groups, keys):
            gd.pair_map = self.pattern.lookup(kk.ravel()).reshape(kk.shape)
            gd.raw_map = _standard_to_raw_map(gd.pair_map, self.spec.m)
        self.material = None
        if material is not None:
            self.set_material(material)
        self._laplace_data = None

    # -- material -----------------------------------------------------------
    def set_material(self, material):
        v = self.quad.voxel
        self.material = material
        self.kappa = material.kappa[v]
        self.mu = material.mu[v]
        self.lam = material.lam[v]
        self.gc = material.Gc[v]
        self.E = material.E[v]
        if np.any(~(self.gc > 0)):
            raise ConfigurationError("critical energy release rate must be positive at every point")

    @property
    def alpha(self):
        return self.quad.alpha

    @property
    def n_points(self):
        return self.quad.n_points

    # -- field evaluation ---------------------------------------------------
    def _cell_coeffs(self, gd, coeffs, ncomp):
        m = self.spec.m
        if ncomp == 1:
            return coeffs[gd.dofs].reshape(gd.nc, m, m, m)
        c = coeffs.reshape(-1, ncomp)[gd.dofs]
        return c.reshape(gd.nc, m, m, m, ncomp)

    def scalar_at_points(self, s):
        """Values and gradients ``(nq,), (nq, 3)`` of a scalar field at quadrature points."""
        val = np.empty(self.n_points)
        grad = np.empty((self.n_points, 3))
        for gd in self.groups:
            U = self._cell_coeffs(gd, s, 1)
            X, Y, Z = gd.V
            val[gd.start:gd.stop] = _interp(U, X, Y, Z).ravel()
            grad[gd.start:gd.stop, 0] = _interp(U, gd.D[0], Y, Z).ravel()
            grad[gd.start:gd.stop, 1] = _interp(U, X, gd.D[1], Z).ravel()
            grad[gd.start:gd.stop, 2] = _interp(U, X, Y, gd.D[2]).ravel()
        return val, grad

    def scalar_values(self, s):
        val = np.empty(self.n_points)
        for gd in self.groups:
            val[gd.start:gd.stop] = _interp(self._cell_coeffs(gd, s, 1), *gd.V).ravel()
        return val

    def displacement_gradient(self, u):
        """``grad[q, i, j] = d u_i / d x_j`` at quadrature points."""
        grad = np.empty((self.n_points, 3, 3))
        for gd in self.groups:
            U = self._cell_coeffs(gd, u, 3)
            X, Y, Z = gd.V
            grad[gd.start:gd.stop, :, 0] = _interp(U, gd.D[0], Y, Z).reshape(-1, 3)
            grad[gd.start:gd.stop, :, 1] = _interp(U, X, gd.D[1], Z).reshape(-1, 3)
            grad[gd.start:gd.stop, :, 2] = _interp(U, X, Y, gd.D[2]).reshape(-1, 3)
        return grad

    def strain(self, u):
        g = self.displacement_gradient(u)
        return 0.5 * (g + g.transpose(0, 2, 1))

    def project_scalar(self, f):
        """``r_a = sum_q f_q N_a(x_q)`` (weights must be folded into ``f``)."""
        out = np.zeros(self.n_scalar)
        for gd in self.groups:
            F = f[gd.start:gd.stop].reshape(gd.nc, gd.q, gd.q, gd.q)
            loc = _project(F, *gd.V).reshape(gd.nc, -1)
            out += np.bincount(gd.dofs.ravel(), weights=loc.ravel(), minlength=self.n_scalar)
        return out

    # -- point evaluation ---------------------------------------------------
    def basis_at(self, points):
        """Active cell, local functions and physical gradients at arbitrary points."""
        idx, xi = self.grid.locate(points)
        ok = idx >= 0
        pos = self.grid.cells[np.where(ok, idx, 0)]
        tabs = [eval_1d(self.spec, pos[:, k], xi[:, k], self.grid.shape[k]) for k in range(3)]
        vals, grads = tensor_product(tabs[0][0], tabs[1][0], tabs[2][0], tabs[0][1], tabs[1][1], tabs[2][1])
        return idx, vals, grads / self.grid.h

    def evaluate(self, points, coeffs, ncomp=1):
        """Field values and gradients at points; NaN outside active cells."""
        idx, vals, grads = self.basis_at(points)
        dofs = self.layout.cell_dofs[np.where(idx >= 0, idx, 0)]
        if ncomp == 1:
            c = coeffs[dofs]
            v = np.einsum("pa,pa->p", vals, c)
            g = np.einsum("paj,pa->pj", grads, c)
        else:
            c = coeffs.reshape(-1, ncomp)[dofs]
            v = np.einsum("pa,pai->pi", vals, c)
            g = np.einsum("paj,pai->pij", grads, c)
        bad = idx < 0
        v = np.asarray(v, dtype=float)
        v[bad] = np.nan
        g[bad] = np.nan
        return v, g

    def cell_pair_map(self, cells):
        """Pattern positions ``(len(cells), n_local, n_local)`` of active cells' element entries."""
        if not hasattr(self, "_cell_slot"):
            grp = np.empty(self.grid.n_cells, dtype=np.int64)
            loc = np.empty(self.grid.n_cells, dtype=np.int64)
            for k, g in enumerate(self.quad.groups):
                grp[g.cells] = k
                loc[g.cells] = np.arange(len(g.cells))
            self._cell_slot = (grp, loc)
        grp, loc = self._cell_slot
        cells = np.asarray(cells)
        n = self.spec.n_local
        out = np.empty((len(cells), n, n), dtype=np.int64)
        for k, gd in enumerate(self.groups):
            sel = grp[cells] == k
            out[sel] = gd.pair_map[loc[cells[sel]]]
        return out

    # -- matrices -----------------------------------------------------------
    def scalar_gram(self, coef, with_gradient=False, raw=True):
        """Per-group scalar element matrices; mass (``N N``) or stiffness (``grad N . grad N``).

        Raw order (see :func:`_gram`) unless ``raw=False``.
        """
        out = []
        for gd in self.groups:
            C = coef[gd.start:gd.stop].reshape(gd.nc, gd.q, gd.q, gd.q)
            V, D = gd.V, gd.D
            if with_gradient:
                K = 0.0
                for k in range(3):
                    P = [_pair(D[j], D[j]) if j == k else _pair(V[j], V[j]) for j in range(3)]
                    K = K + _gram(C, *P, raw=True)
            else:
                K = _gram(C, *[_pair(V[j], V[j]) for j in range(3)], raw=True)
            out.append(K if raw else raw_to_standard(K, self.spec.m))
        return out

    def scatter_scalar(self, elems):
        data = np.zeros(self.pattern.nnz)
        for gd, K in zip(self.groups, elems):
            data += np.bincount(gd.raw_map.ravel(), weights=K.ravel(), minlength=self.pattern.nnz)
        return data

    def elastic_elements(self, lam_c, mu_c, raw=True):
        """Per-group blocks of ``lam' div div + mu' (grad + grad^T)``.

        Shape ``(nc, m^6, 3, 3)`` in raw order, or ``(nc, n_local, n_local, 3, 3)``
        with ``raw=False``; block ``[..., i, j]`` couples component ``i`` of the
        test function with component ``j`` of the trial function.
        """
        out = []
        for gd in self.groups:
            V, D = gd.V, gd.D
            shp = (gd.nc, gd.q, gd.q, gd.q)
            CL = lam_c[gd.start:gd.stop].reshape(shp)
            CM = mu_c[gd.start:gd.stop].reshape(shp)
            GL, GM = {}, {}
            for i in range(3):
                for j in range(3):
                    P = [_pair(D[k] if k == i else V[k], D[k] if k == j else V[k]) for k in range(3)]
                    GL[i, j] = _gram(CL, *P, raw=True)
                    GM[i, j] = _gram(CM, *P, raw=True)
            lap = GM[0, 0] + GM[1, 1] + GM[2, 2]
            # mu' d_j N_a d_i N_b is the (j, i) derivative pairing
            blocks = [GL[i, j] + GM[j, i] + (lap if i == j else 0.0) for i in range(3) for j in range(3)]
            B = np.stack(blocks, axis=-1).reshape(gd.nc, -1, 3, 3)
            out.append(B if raw else raw_to_standard(B, self.spec.m))
        return out

    def scatter_block(self, elems):
        nnz = self.pattern.nnz
        data = np.zeros(nnz * 9)
        off = np.arange(9)
        for gd, B in zip(self.groups, elems):
            idx = (gd.raw_map[..., None] * 9 + off).ravel()
            data += np.bincount(idx, weights=B.ravel(), minlength=nnz * 9)
        return data.reshape(nnz, 3, 3)


    def project_gradient(self, S):
        """``f[a, i] = sum_q S[q, i, j] d_j N_a(x_q)``; ``S`` carries the weights."""
        out = np.zeros((self.n_scalar, 3))
        for gd in self.groups:
            Sg = S[gd.start:gd.stop].reshape(gd.nc, gd.q, gd.q, gd.q, 3, 3)
            X, Y, Z = gd.V
            loc = (_project(np.ascontiguousarray(Sg[..., 0]), gd.D[0], Y, Z)
                   + _project(np.ascontiguousarray(Sg[..., 1]), X, gd.D[1], Z)
                   + _project(np.ascontiguousarray(Sg[..., 2]), X, Y, gd.D[2])).reshape(gd.nc, -1, 3)
            idx = (gd.dofs[:, :, None] * 3 + np.arange(3)).ravel()
            out += np.bincount(idx, weights=loc.ravel(), minlength=3 * self.n_scalar).reshape(-1, 3)
        return out.ravel()


# ---------------------------------------------------------------------------
# boundary regions
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Region:
    """A constrained surface: one box face, an axis-aligned plane, or triangles.

    ``bounds`` optionally restricts the surface to an axis-aligned box.
    ``physical_only`` applies the fictitious-domain indicator to the surface
    integral (default for faces and planes): points outside physical voxels
    are weighted by ``alpha_fcm``, exactly like volume integrals, so the
    fictitious extension of a solution sees a consistent problem.
    Triangulations lie on the boundary and are kept at full weight wherever
    they meet an active cell.
    """

    face: str | None = None
    plane: tuple | None = None  # (axis, coordinate)
    triangles: np.ndarray | None = None  # (nt, 3, 3) vertices in mm
    bounds: tuple | None = None
    physical_only: bool | None = None

    def __post_init__(self):
        given = sum(x is not None for x in (self.face, self.plane, self.triangles))
        if given != 1:
            raise ConfigurationError("a region needs exactly one of face, plane or triangles")
        if self.face is not None and self.face not in FACES:
            raise ConfigurationError(f"unknown face {self.face!r}; expected one of {sorted(FACES)}")


@dataclass(frozen=True, eq=False)
class BoundarySpec:
    """Boundary condition on a region.

    ``kind``: ``fixed`` (all components to ``value``), ``displacement``
    (one ``component``), ``free`` (traction-free, only used for force
    integration), ``phase`` (phase-field value) or ``seed`` (an initial
    crack on a bounded plane, imposed through the history field rather
    than as a constraint; see :func:`fcmfrac.solver.seed_history`).  The prescribed value is
    ``value + scale * applied`` where ``applied`` is the controlled
    displacement of the current load step.
    """

    name: str
    region: Region
    kind: str = "fixed"
    component: int | None = None
    value: float = 0.0
    scale: float = 0.0
    penalty: float | None = None

    def __post_init__(self):
        if self.kind not in BC_KINDS:
            raise ConfigurationError(f"unknown boundary kind {self.kind!r}; expected one of {BC_KINDS}")
        if self.kind == "displacement" and self.component not in (0, 1, 2):
            raise ConfigurationError(f"boundary {self.name!r}: displacement needs component 0, 1 or 2")
        if self.penalty is not None and not self.penalty > 0:
            raise ConfigurationError(f"boundary {self.name!r}: penalty must be positive")

    @property
    def components(self) -> tuple:
        if self.kind == "fixed":
            return (0, 1, 2)
        if self.kind == "displacement":
            return (self.component,)
        return ()

    def prescribed(self, applied: float) -> float:
        return self.value + self.scale * applied


@dataclass(frozen=True, eq=False)
class SurfacePoints:
    points: np.ndarray
    weights: np.ndarray
    normals: np.ndarray

    @property
    def area(self) -> float:
        return float(self.weights.sum())


def _plane_points(grid, axis, coord, depth, n_gauss):
    k1, k2 = [k for k in range(3) if k != axis]
    x1, w1 = gauss_1d(n_gauss, depth)
    n1, n2 = grid.shape[k1], grid.shape[k2]
    h = grid.h
    a = (np.arange(n1)[:, None] + x1[None, :]).ravel() * h + grid.origin[k1]
    b = (np.arange(n2)[:, None] + x1[None, :]).ravel() * h + grid.origin[k2]
    wa = np.tile(w1, n1) * h
    wb = np.tile(w1, n2) * h
    A, B = np.meshgrid(a, b, indexing="ij")
    pts = np.empty((A.size, 3))
    pts[:, axis] = coord
    pts[:, k1] = A.ravel()
    pts[:, k2] = B.ravel()
    return pts, np.outer(wa, wb).ravel()


def read_triangulation(path) -> np.ndarray:
    """Read a surface triangulation as an ``(nt, 3, 3)`` vertex array in mm.

    Supports ASCII and binary STL, and JSON of the form
    ``{"vertices": [[x, y, z], ...], "triangles": [[i, j, k], ...]}``.
    """
    path = str(path)
    if path.lower().endswith(".json"):
        import json

        with open(path) as f:
            d = json.load(f)
        v = np.asarray(d["vertices"], dtype=float).reshape(-1, 3)
        t = np.asarray(d["triangles"], dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ConfigurationError(f"{path}: triangle index out of range")
        return v[t]
    with open(path, "rb") as f:
        data = f.read()
    if len(data) >= 84:
        n = int(np.frombuffer(data[80:84], dtype="<u4")[0])
        if len(data) == 84 + 50 * n:
            rec = np.dtype([("normal", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
            return np.frombuffer(data[84:], dtype=rec, count=n)["v"].astype(float)
    text = data.decode("ascii", errors="replace")
    if not text.lstrip().lower().startswith("solid"):
        raise ConfigurationError(f"{path}: not a recognised STL or JSON triangulation")
    verts = [line.split()[1:4] for line in text.splitlines() if line.strip().lower().startswith("vertex")]
    if len(verts) % 3:
        raise ConfigurationError(f"{path}: vertex count is not a multiple of 3")
    return np.asarray(verts, dtype=float).reshape(-1, 3, 3)


def _subdivide_triangles(tris, max_edge):
    tris = np.asarray(tris, dtype=float)
    while True:
        e = np.linalg.norm(tris[:, [1, 2, 0]] - tris, axis=2).max(axis=1)
        big = e > max_edge
        if not big.any():
            return tris
        t = tris[big]
        m01 = 0.5 * (t[:, 0] + t[:, 1])
        m12 = 0.5 * (t[:, 1] + t[:, 2])
        m20 = 0.5 * (t[:, 2] + t[:, 0])
        children = np.concatenate([
            np.stack([t[:, 0], m01, m20], 1),
            np.stack([m01, t[:, 1], m12], 1),
            np.stack([m20, m12, t[:, 2]], 1),
            np.stack([m01, m12, m20], 1),
        ])
        tris = np.concatenate([tris[~big], children])


def distance_to_region(region: Region, points) -> np.ndarray:
    """Euclidean distance from ``points`` to a plane region clipped to its ``bounds``."""
    if region.plane is None:
        raise ConfigurationError("distances are only defined for plane regions")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    q = pts.copy()
    axis, coord = int(region.plane[0]), float(region.plane[1])
    if region.bounds is not None:
        lo, hi = (np.asarray(b, dtype=float) for b in region.bounds)
        q = np.clip(q, lo, hi)
    q[:, axis] = coord
    return np.linalg.norm(pts - q, axis=1)


def surface_points(region: Region, image, grid, depth=2, n_gauss=None, alpha_fcm=ALPHA_FCM) -> SurfacePoints:
    """Quadrature points on ``region`` that fall inside active cells.

    With ``physical_only`` the weights of fictitious points are scaled by
    ``alpha_fcm``; ``alpha_fcm=None`` drops those points instead.
    """
    n_gauss = grid.p + 1 if n_gauss is None else n_gauss
    physical_only = region.physical_only
    if region.triangles is not None:
        tris = _subdivide_triangles(region.triangles, grid.h / 2**max(depth, 1))
        # degree-2 rule on each sub-triangle
        bary = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
        cross = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
        area = 0.5 * np.linalg.norm(cross, axis=1)
        nrm = cross / np.maximum(2 * area, 1e-300)[:, None]
        pts = np.einsum("qk,tkd->tqd", bary, tris).reshape(-1, 3)
        w = np.repeat(area / 3.0, 3)
        normals = np.repeat(nrm, 3, axis=0)
        physical_only = False if physical_only is None else physical_only
    else:
        if region.face is not None:
            axis, side = FACES[region.face]
            coord = image.upper[axis] if side else image.lower[axis]
            sign = 1.0 if side else -1.0
        else:
            axis, coord = int(region.plane[0]), float(region.plane[1])
            sign = 1.0
        pts, w = _plane_points(grid, axis, coord, depth, n_gauss)
        normals = np.zeros_like(pts)
        normals[:, axis] = sign
        physical_only = True if physical_only is None else physical_only
    keep = grid.locate(pts)[0] >= 0
    ijk, inbox = image.voxel_ijk(pts)
    keep &= inbox
    if physical_only:
        inside = image.inside[tuple(ijk.T)]
        if alpha_fcm is None:
            keep &= inside
        else:
            w = w * np.where(inside, 1.0, alpha_fcm)
            keep &= w > 0
    if region.bounds is not None:
        lo, hi = (np.asarray(b, dtype=float) for b in region.bounds)
        keep &= np.all((pts >= lo - 1e-12) & (pts <= hi + 1e-12), axis=1)
    return SurfacePoints(pts[keep], w[keep], normals[keep])


class BoundaryOperator:
    """Penalty operator of one boundary condition, precomputed on the pattern."""

    def __init__(self, disc: Discretization, spec: BoundarySpec, depth=None, beta=None):
        self.spec = spec
        self.disc = disc
        depth = disc.quad.depth if depth is None else depth
        self.surface = surface_points(spec.region, disc.image, disc.grid, depth, disc.quad.n_gauss,
                                      disc.quad.alpha_fcm)
        ijk, inbox = disc.image.voxel_ijk(self.surface.points)
        if not np.any(inbox & disc.image.inside[tuple(ijk.T)]):
            warnings.warn(f"boundary {spec.name!r} selects no surface inside the physical domain")
        self.beta = spec.penalty if spec.penalty is not None else beta
        idx, vals, grads = disc.basis_at(self.surface.points)
        self.cell = idx
        self.vals = vals
        self.grads = grads
        self.dofs = disc.layout.cell_dofs[idx]
        self.comps = np.zeros(3, dtype=bool)
        self.comps[list(spec.components)] = True
        self._mass = None
        self._load = None

    @property
    def constrained(self) -> bool:
        return self.spec.kind in ("fixed", "displacement", "phase")

    def mass_data(self):
        """Pattern data of ``sum_p w N_a N_b`` (without the penalty factor)."""
        if self._mass is None:
            pat = self.disc.pattern
            data = np.zeros(pat.nnz)
            order = np.argsort(self.cell, kind="stable")
            cells, first = np.unique(self.cell[order], return_index=True)
            bounds = np.append(first, len(order))
            chunk = 256
            for i in range(0, len(cells), chunk):
                sel = order[bounds[i]:bounds[min(i + chunk, len(cells))]]
                v = self.vals[sel]
                wv = self.surface.weights[sel, None] * v
                loc = np.add.reduceat(wv[:, :, None] * v[:, None, :], first[i:i + chunk] - first[i], axis=0)
                cmap = self.disc.cell_pair_map(cells[i:i + chunk])
                data += np.bincount(cmap.ravel(), weights=loc.ravel(), minlength=pat.nnz)
            self._mass = data
        return self._mass

    def load_shape(self):
        """``sum_p w N_a`` per scalar DOF (unit prescribed value)."""
        if self._load is None:
            loc = self.surface.weights[:, None] * self.vals
            self._load = np.bincount(self.dofs.ravel(), weights=loc.ravel(), minlength=self.disc.n_scalar)
        return self._load

    def block_data(self):
        """Penalty contribution in ``(nnz, 3, 3)`` block layout (cached)."""
        if getattr(self, "_block", None) is None:
            out = np.zeros((self.disc.pattern.nnz, 3, 3))
            if self.spec.kind in ("fixed", "displacement"):
                m = self.beta * self.mass_data()
                for c in np.flatnonzero(self.comps):
                    out[:, c, c] = m
            self._block = out
        return self._block

    def rhs(self, applied: float) -> np.ndarray:
        f = np.zeros((self.disc.n_scalar, 3))
        if self.spec.kind in ("fixed", "displacement"):
            val = self.spec.prescribed(applied)
            if val != 0.0:
                load = self.beta * val * self.load_shape()
                for c in np.flatnonzero(self.comps):
                    f[:, c] = load
        return f.ravel()

    def displacement(self, u):
        c = u.reshape(-1, 3)[self.dofs]
        return np.einsum("pa,pai->pi", self.vals, c)


# ---------------------------------------------------------------------------
# public assembly operations
# ---------------------------------------------------------------------------

def default_penalty(material, h: float, factor: float = 1e3) -> float:
    """Penalty that dominates the stiffness scale ``max(E) / h``."""
    E = np.asarray(material.E)
    return float(factor * np.max(E[np.isfinite(E)]) / h)


def elastic_coefficients(disc: Discretization, u, s_q, eta=ETA, tension=None):
    """Quadrature-weighted tangent moduli.

    The branch of the split law is taken from ``tension`` (boolean per
    point) when given, else from the sign of ``tr(eps(u))``; ``u=None``
    means zero strain (compression branch).
    """
    if tension is not None:
        tr = np.where(tension, 1.0, -1.0)
    elif u is None:
        tr = np.zeros(disc.n_points)
    else:
        tr = np.trace(disc.strain(u), axis1=1, axis2=2)
    lam_e, mu_e = tangent_moduli(tr, s_q, disc.kappa, disc.mu, eta)
    wa = disc.quad.weight * disc.alpha
    return lam_e * wa, mu_e * wa


def assemble_elastic(disc: Discretization, s, bcs=(), u=None, applied=0.0, eta=ETA, body_force=None):
    """Elastic stiffness and right-hand side for phase field ``s``.

    The split law is piecewise linear in strain; the branch at each point is
    taken from ``u`` (compression branch everywhere when ``u`` is None, which
    is exact for undamaged material).  ``bcs`` are :class:`BoundaryOperator`
    objects.
    """
    s_q = disc.scalar_values(s) if s is not None else np.ones(disc.n_points)
    lam_c, mu_c = elastic_coefficients(disc, u, s_q, eta)
    data = disc.scatter_block(disc.elastic_elements(lam_c, mu_c))
    rhs = np.zeros(disc.n_scalar * 3)
    for bc in bcs:
        if bc.spec.kind in ("fixed", "displacement"):
            data += bc.block_data()
            rhs += bc.rhs(applied)
    if body_force is not None:
        b = np.asarray(body_force, dtype=float)
        f = disc.quad.weight * disc.alpha
        for c in range(3):
            rhs.reshape(-1, 3)[:, c] += disc.project_scalar(f * b[c])
    return disc.pattern.block(data), rhs


def penalty_matrix(disc: Discretization, bcs):
    """Sum of the displacement penalty operators as a CSR matrix."""
    data = np.zeros((disc.pattern.nnz, 3, 3))
    for bc in bcs:
        if bc.spec.kind in ("fixed", "displacement"):
            data += bc.block_data()
    return disc.pattern.block(data)


def penalty_rhs(disc: Discretization, bcs, applied=0.0):
    rhs = np.zeros(disc.n_scalar * 3)
    for bc in bcs:
        if bc.spec.kind in ("fixed", "displacement"):
            rhs += bc.rhs(applied)
    return rhs


class ElasticOperator:
    """Matrix-free elastic stiffness for frozen pointwise moduli.

    ``lam_c`` and ``mu_c`` are the weighted effective moduli at quadrature
    points (see :func:`elastic_coefficients`); ``K_pen`` is the penalty
    matrix.  :meth:`matrix` assembles the same operator explicitly.
    """

    def __init__(self, disc: Discretization, lam_c, mu_c, K_pen):
        self.disc = disc
        self.lam_c = lam_c
        self.mu_c = mu_c
        self.K_pen = K_pen
        n = 3 * disc.n_scalar
        self.shape = (n, n)

    def matvec(self, u):
        eps = self.disc.strain(u)
        tr = np.trace(eps, axis1=1, axis2=2)
        S = 2.0 * self.mu_c[:, None, None] * eps
        S[:, [0, 1, 2], [0, 1, 2]] += (self.lam_c * tr)[:, None]
        return self.disc.project_gradient(S) + self.K_pen @ u

    def matrix(self):
        data = self.disc.scatter_block(self.disc.elastic_elements(self.lam_c, self.mu_c))
        return self.disc.pattern.block(data) + self.K_pen


def internal_force(disc: Discretization, u, s_q, eta=ETA):
    """Weak internal force of the degraded split law (penalty terms excluded)."""
    sig = degraded_stress(disc.strain(u), s_q, disc.kappa, disc.mu, eta)
    return disc.project_gradient((disc.quad.weight * disc.alpha)[:, None, None] * sig)


def assemble_phasefield(disc: Discretization, H, l0: float, eta=ETA, bcs=()):
    """Matrix and right-hand side of ``-4 l0^2 lap(s) + (4 l0 (1-eta) H / Gc + 1) s = 1``."""
    if not l0 > 0:
        raise ConfigurationError("length scale must be positive")
    if np.any(~(disc.gc > 0)):
        raise ConfigurationError("critical energy release rate must be positive at every point")
    H = np.asarray(H, dtype=float)
    wa = disc.quad.weight * disc.alpha
    key = float(l0)
    if disc._laplace_data is None or disc._laplace_data[0] != key:
        lap = disc.scatter_scalar(disc.scalar_gram(4.0 * l0**2 * wa, with_gradient=True))
        disc._laplace_data = (key, lap)
    data = disc._laplace_data[1].copy()
    react = wa * (4.0 * l0 * (1.0 - eta) * H / disc.gc + 1.0)
    data += disc.scatter_scalar(disc.scalar_gram(react))
    rhs = disc.project_scalar(wa)
    for bc in bcs:
        if bc.spec.kind == "phase":
            data += bc.beta * bc.mass_data()
            rhs += bc.beta * bc.spec.value * bc.load_shape()
    return disc.pattern.scalar(data), rhs


def positive_energy_at_points(disc: Discretization, u):
    """Alpha-scaled tensile/deviatoric energy density at quadrature points."""
    return disc.alpha * positive_energy(disc.strain(u), disc.kappa, disc.mu)


def update_history(psi_pos, H):
    """Pointwise running maximum of the driving energy."""
    return np.maximum(H, psi_pos)


def stress_at_points(disc: Discretization, u, s, eta=ETA):
    s_q = disc.scalar_values(s)
    return disc.alpha[:, None, None] * degraded_stress(disc.strain(u), s_q, disc.kappa, disc.mu, eta)


def reaction_force(disc: Discretization, u, s, bc: BoundaryOperator, applied=0.0, eta=ETA):
    """Total force [N] exerted on the specimen through ``bc``'s surface.

    Constrained components use the penalty traction ``beta (u_bar - u)``,
    which is the discrete boundary traction of the penalised problem.  Other
    components integrate ``sigma . n`` over the surface.  ``s=None`` means
    intact material.
    """
    surf = bc.surface
    if s is None:
        s = np.ones(disc.n_scalar)
    F = np.zeros(3)
    if len(surf.weights) == 0:
        return F
    comps = bc.comps if bc.spec.kind in ("fixed", "displacement") else np.zeros(3, dtype=bool)
    if not comps.all():
        if not comps.any():
            warnings.warn(f"region {bc.spec.name!r} is not constrained; integrating sigma.n")
        F[~comps] = _traction_integral(disc, u, s, bc, eta)[~comps]
    if comps.any():
        ubar = bc.spec.prescribed(applied)
        uh = bc.displacement(u)
        t = bc.beta * (ubar - uh)
        F[comps] = (surf.weights[:, None] * t).sum(axis=0)[comps]
    return F


def _traction_integral(disc, u, s, bc, eta):
    surf = bc.surface
    pts = surf.points
    _, gu = disc.evaluate(pts, u, 3)
    sv, _ = disc.evaluate(pts, s, 1)
    eps = 0.5 * (gu + gu.transpose(0, 2, 1))
    ijk, _ = disc.image.voxel_ijk(pts)
    vox = disc.image.flat_index(ijk)
    mat = disc.material
    alpha = np.where(disc.image.flat_inside()[vox], 1.0, ALPHA_FCM)
    sig = alpha[:, None, None] * degraded_stress(eps, np.clip(sv, 0, None), mat.kappa[vox], mat.mu[vox], eta)
    # the outward normal of the specimen is the region normal; force on the specimen is -sigma.n_region
    t = np.einsum("pij,pj->pi", sig, surf.normals)
    return (surf.weights[:, None] * t).sum(axis=0)
