"""Voxel images, the embedded Cartesian cell grid and its cut-cell quadrature.

Geometry and material are voxel-wise.  A point belongs to the voxel whose
half-open extent ``(x_k, x_{k+1}]`` contains it, i.e. points on a shared
voxel face go to the lower-index voxel (the first voxel also owns the
lower bounding-box face).

Quadrature is stored cell by cell as tensor products of 1D rules: uncut
cells get ``n_gauss`` Gauss-Legendre points per axis, cut cells get the
composite rule of ``2**depth`` equal sub-intervals per axis, i.e. a uniform
sub-cell partition with a Gauss rule on every sub-cell.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

ALPHA_FCM = 1.0e-6
IMAGE_KINDS = ("hu", "rho_k2hpo4", "rho_ash")
_DTYPES = {"float32": "<f4", "int16": "<i2", "float64": "<f8", "uint8": "u1"}


class DomainError(ValueError):
    """A point or region lies outside the computational domain."""


class EmptyDomainError(ValueError):
    """The voxel mask selects no physical material."""


@dataclass(frozen=True, eq=False)
class VoxelImage:
    """Regular 3D scalar grid; ``values[i, j, k]`` is voxel ``(i, j, k)``.

    ``origin`` is the lower corner of voxel ``(0, 0, 0)`` in mm.  On disk
    values are stored x-fastest; in memory they are an ``(nx, ny, nz)`` array.
    """

    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    kind: str = "rho_ash"
    mask: np.ndarray | None = None
    hu_calibration: tuple | None = None  # (slope, intercept): rho_K2HPO4 = slope * HU + intercept

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 3:
            raise ValueError(f"voxel values must be 3D, got shape {vals.shape}")
        if min(vals.shape) < 1:
            raise ValueError("voxel dims must be >= 1")
        object.__setattr__(self, "values", vals)
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or min(sp) <= 0:
            raise ValueError(f"spacing must be three positive lengths, got {self.spacing}")
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if self.kind not in IMAGE_KINDS:
            raise ValueError(f"unknown image kind {self.kind!r}; expected one of {IMAGE_KINDS}")
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != vals.shape:
                raise ValueError(f"mask shape {mask.shape} differs from image shape {vals.shape}")
            object.__setattr__(self, "mask", mask)
        if self.hu_calibration is not None:
            object.__setattr__(self, "hu_calibration", tuple(float(c) for c in self.hu_calibration))

    @property
    def dims(self) -> tuple:
        return self.values.shape

    @property
    def inside(self) -> np.ndarray:
        return self.mask if self.mask is not None else np.ones(self.dims, dtype=bool)

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.origin)

    @property
    def upper(self) -> np.ndarray:
        return self.lower + np.asarray(self.dims) * np.asarray(self.spacing)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def with_threshold(self, threshold: float) -> "VoxelImage":
        """Copy whose mask is ``values > threshold``."""
        return VoxelImage(self.values, self.spacing, self.origin, self.kind, self.values > threshold, self.hu_calibration)

    def voxel_ijk(self, points) -> tuple:
        """Owning voxel of each point (lower-index tie-break) and an in-box flag."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rel = (pts - self.lower) / np.asarray(self.spacing)
        ijk = np.ceil(rel).astype(np.int64) - 1
        span = np.asarray(self.upper - self.lower)
        tol = 1e-12 * max(float(span.max()), 1.0)
        inbox = np.all((pts >= self.lower - tol) & (pts <= self.upper + tol), axis=1)
        ijk = np.clip(ijk, 0, np.asarray(self.dims) - 1)
        return ijk, inbox

    def flat_index(self, ijk) -> np.ndarray:
        """x-fastest linear voxel index (the on-disk order)."""
        ijk = np.atleast_2d(ijk)
        return np.ravel_multi_index((ijk[:, 0], ijk[:, 1], ijk[:, 2]), self.dims, order="F")

    def flat_values(self) -> np.ndarray:
        return self.values.ravel(order="F")

    def flat_inside(self) -> np.ndarray:
        return self.inside.ravel(order="F")


def read_image(sidecar_path, mask_path=None) -> VoxelImage:
    """Load a raw little-endian voxel array described by a JSON sidecar."""
    sidecar_path = os.fspath(sidecar_path)
    with open(sidecar_path) as f:
        meta = json.load(f)
    base = os.path.dirname(os.path.abspath(sidecar_path))
    dims = tuple(int(d) for d in meta["dims"])
    dtype = meta.get("dtype", "float32")
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported voxel dtype {dtype!r}")
    raw = np.fromfile(os.path.join(base, meta["data"]), dtype=_DTYPES[dtype])
    if raw.size != int(np.prod(dims)):
        raise ValueError(f"{meta['data']}: expected {int(np.prod(dims))} values, found {raw.size}")
    values = raw.astype(float).reshape(dims, order="F")
    mask = None
    mpath = mask_path or meta.get("mask")
    if mpath:
        mraw = np.fromfile(os.path.join(base, mpath), dtype="u1")
        if mraw.size != values.size:
            raise ValueError(f"{mpath}: mask length {mraw.size} differs from image length {values.size}")
        mask = mraw.reshape(dims, order="F") > 0
    cal = meta.get("hu_calibration")
    if cal is not None:
        cal = (cal["slope"], cal["intercept"])
    img = VoxelImage(values, meta.get("spacing", (1, 1, 1)), meta.get("origin", (0, 0, 0)),
                     meta.get("kind", "rho_ash"), mask, cal)
    if mask is None and meta.get("threshold") is not None:
        img = img.with_threshold(float(meta["threshold"]))
    return img


def write_image(image: VoxelImage, sidecar_path, dtype: str = "float32") -> None:
    """Write ``<stem>.raw`` (+ ``<stem>_mask.raw``) and the JSON sidecar."""
    sidecar_path = os.fspath(sidecar_path)
    base = os.path.dirname(os.path.abspath(sidecar_path))
    stem = os.path.splitext(os.path.basename(sidecar_path))[0]
    data_name = f"{stem}.raw"
    image.flat_values().astype(_DTYPES[dtype]).tofile(os.path.join(base, data_name))
    meta = {
        "dims": list(image.dims),
        "spacing": list(image.spacing),
        "origin": list(image.origin),
        "dtype": dtype,
        "kind": image.kind,
        "data": data_name,
    }
    if image.mask is not None:
        mask_name = f"{stem}_mask.raw"
        image.flat_inside().astype("u1").tofile(os.path.join(base, mask_name))
        meta["mask"] = mask_name
    if image.hu_calibration is not None:
        meta["hu_calibration"] = {"slope": image.hu_calibration[0], "intercept": image.hu_calibration[1]}
    with open(sidecar_path, "w") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")


@dataclass(frozen=True, eq=False)
class EmbeddedGrid:
    """Uniform cells of edge ``h`` covering the image bounding box.

    ``cells`` lists the active cells (positive overlap with inside voxels) as
    integer positions sorted C-order; ``inside_fraction`` is the physical
    volume fraction of each.
    """

    h: float
    p: int
    origin: np.ndarray
    shape: tuple
    cells: np.ndarray
    inside_fraction: np.ndarray
    bounding_box: tuple

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def cut(self) -> np.ndarray:
        return self.inside_fraction < 1.0 - 1e-12

    @property
    def cell_volume(self) -> float:
        return self.h**3

    @property
    def lookup(self) -> np.ndarray:
        """Dense map from cell position to active index (-1 when inactive)."""
        lut = getattr(self, "_lookup", None)
        if lut is None:
            lut = np.full(self.shape, -1, dtype=np.int64)
            lut[tuple(self.cells.T)] = np.arange(self.n_cells)
            object.__setattr__(self, "_lookup", lut)
        return lut

    def locate(self, points):
        """Active cell index and local coordinates of each point (-1 if none)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rel = (pts - self.origin) / self.h
        shape = np.asarray(self.shape)
        lo = np.clip(np.ceil(rel).astype(np.int64) - 1, 0, shape - 1)
        hi = np.clip(np.floor(rel).astype(np.int64), 0, shape - 1)
        inside = np.all((rel >= -1e-12) & (rel <= shape + 1e-12), axis=1)
        lut = self.lookup
        idx = np.where(inside, lut[tuple(lo.T)], -1)
        pos = lo.copy()
        # a point on a face shared with an inactive lower cell belongs to the upper one
        alt = np.where(inside & (idx < 0), lut[tuple(hi.T)], -1)
        use_alt = (idx < 0) & (alt >= 0)
        idx = np.where(use_alt, alt, idx)
        pos[use_alt] = hi[use_alt]
        xi = np.clip(rel - pos, 0.0, 1.0)
        return idx, xi


def _overlap_1d(n_cells, h, n_vox, dx):
    """Overlap lengths between cell intervals and voxel intervals (both from 0)."""
    c0 = np.arange(n_cells)[:, None] * h
    v0 = np.arange(n_vox)[None, :] * dx
    return np.clip(np.minimum(c0 + h, v0 + dx) - np.maximum(c0, v0), 0.0, None)


def build_grid(image: VoxelImage, h: float, p: int) -> EmbeddedGrid:
    """Cartesian cells of size ``h`` over the image box; keep cells touching material."""
    if not h > 0:
        raise ValueError(f"cell size must be positive, got {h}")
    if int(p) < 1:
        raise ValueError(f"polynomial order must be >= 1, got {p}")
    inside = image.inside
    if not inside.any():
        raise EmptyDomainError("empty domain: the mask selects no voxel")
    extent = image.upper - image.lower
    shape = tuple(max(1, int(np.ceil(e / h - 1e-9))) for e in extent)
    ox, oy, oz = (_overlap_1d(shape[k], h, image.dims[k], image.spacing[k]) for k in range(3))
    vol = np.tensordot(ox, inside.astype(float), axes=(1, 0))  # (cx, vy, vz)
    vol = np.tensordot(vol, oy, axes=(1, 1))  # (cx, vz, cy)
    vol = np.tensordot(vol, oz, axes=(1, 1))  # (cx, cy, cz)
    frac = vol / h**3
    active = frac > 1e-12
    cells = np.argwhere(active)
    return EmbeddedGrid(
        h=float(h),
        p=int(p),
        origin=image.lower.copy(),
        shape=shape,
        cells=cells.astype(np.int64),
        inside_fraction=np.minimum(frac[active], 1.0),
        bounding_box=(tuple(image.lower), tuple(image.upper)),
    )


def indicator(image: VoxelImage, points, alpha_fcm: float = ALPHA_FCM) -> np.ndarray:
    """1 in physical voxels, ``alpha_fcm`` elsewhere; points must lie in the image box."""
    ijk, inbox = image.voxel_ijk(points)
    if not np.all(inbox):
        raise DomainError("indicator evaluated outside the image bounding box")
    ins = image.inside[tuple(ijk.T)]
    out = np.where(ins, 1.0, alpha_fcm)
    return out if np.ndim(points) > 1 else out[0]


def gauss_1d(n: int, depth: int = 0):
    """Composite Gauss-Legendre rule on ``[0, 1]`` with ``2**depth`` sub-intervals."""
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    k = 2**depth
    pts = ((np.arange(k)[:, None] + x[None, :]) / k).ravel()
    wts = np.tile(w / k, k)
    return pts, wts


@dataclass(frozen=True, eq=False)
class QuadGroup:
    """Cells sharing one tensor rule; their points occupy ``[start, stop)``."""

    cells: np.ndarray  # active-cell indices
    xi1d: np.ndarray
    w1d: np.ndarray
    start: int

    @property
    def q(self) -> int:
        return len(self.xi1d)

    @property
    def stop(self) -> int:
        return self.start + len(self.cells) * self.q**3


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Flat per-point arrays, grouped by rule; within a cell points are C-order in (qx, qy, qz)."""

    groups: tuple
    cell: np.ndarray
    xi: np.ndarray
    weight: np.ndarray  # physical measure, mm^3
    alpha: np.ndarray
    voxel: np.ndarray  # x-fastest voxel index, used as material index
    points: np.ndarray
    depth: int
    n_gauss: int
    cell_volume: float
    alpha_fcm: float = ALPHA_FCM

    @property
    def n_points(self) -> int:
        return len(self.weight)

    @property
    def ref_weight(self) -> np.ndarray:
        return self.weight / self.cell_volume

    @property
    def physical(self) -> np.ndarray:
        return self.alpha == 1.0


def build_quadrature(grid: EmbeddedGrid, image: VoxelImage, depth: int = 2,
                     alpha_fcm: float = ALPHA_FCM, n_gauss: int | None = None) -> QuadratureRule:
    """Gauss rules for uncut cells, ``2**depth``-per-axis sub-cell rules for cut cells."""
    if depth < 0:
        raise ValueError("subdivision depth must be >= 0")
    n_gauss = grid.p + 1 if n_gauss is None else int(n_gauss)
    cut = grid.cut
    groups = []
    arrays = {k: [] for k in ("cell", "xi", "weight", "alpha", "voxel", "points")}
    start = 0
    for sel, d in ((~cut, 0), (cut, depth)):
        cells = np.flatnonzero(sel)
        if len(cells) == 0:
            continue
        x1, w1 = gauss_1d(n_gauss, d)
        g = QuadGroup(cells, x1, w1, start)
        groups.append(g)
        start = g.stop
        q = len(x1)
        X, Y, Z = np.meshgrid(x1, x1, x1, indexing="ij")
        xi = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
        W = (w1[:, None, None] * w1[None, :, None] * w1[None, None, :]).ravel() * grid.h**3
        pos = grid.cells[cells]
        pts = grid.origin + grid.h * (pos[:, None, :] + xi[None, :, :])
        pts = pts.reshape(-1, 3)
        ijk, inbox = image.voxel_ijk(pts)
        # points past the image box are fictitious
        alpha = np.where(inbox & image.inside[tuple(ijk.T)], 1.0, alpha_fcm)
        arrays["cell"].append(np.repeat(cells, q**3))
        arrays["xi"].append(np.tile(xi, (len(cells), 1)))
        arrays["weight"].append(np.tile(W, len(cells)))
        arrays["alpha"].append(alpha)
        arrays["voxel"].append(image.flat_index(ijk))
        arrays["points"].append(pts)
    cat = {k: np.concatenate(v) for k, v in arrays.items()}
    return QuadratureRule(groups=tuple(groups), depth=int(depth), n_gauss=n_gauss,
                          cell_volume=grid.h**3, alpha_fcm=float(alpha_fcm), **cat)


def integrated_volume(quad: QuadratureRule) -> float:
    """Sum of alpha-weighted quadrature weights."""
    return float(np.sum(quad.weight * quad.alpha))
