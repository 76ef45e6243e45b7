"""Derived quantities: strain probes, principal values, failure loads,
crack iso-volumes, regression statistics and file output (CSV, VTK).
"""

from __future__ import annotations

import base64
import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

NOISE_FLOOR = 10.0  # microstrain


class ProbeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ForceStrainRecord:
    """One load step: applied displacement [mm], reaction force [N], probe strains [microstrain]."""

    step: int
    applied: float
    force: float
    strains: tuple = ()


@dataclass(frozen=True)
class Probe:
    name: str
    center: tuple
    radius: float = 0.5


def write_records(path, records, probe_names=()):
    """Write force-strain records; floats use ``repr`` so files are exact and reproducible."""
    names = list(probe_names) or [f"probe{i}" for i in range(len(records[0].strains) if records else 0)]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "applied_mm", "force_N"] + [f"eps3_{n}_ustrain" for n in names])
        for r in records:
            w.writerow([r.step, repr(float(r.applied)), repr(float(r.force))] + [repr(float(e)) for e in r.strains])


def read_records(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    if header[:3] != ["step", "applied_mm", "force_N"]:
        raise ValueError(f"{path}: not a force-strain CSV (header {header[:3]})")
    names = [h[len("eps3_"):-len("_ustrain")] for h in header[3:]]
    recs = [ForceStrainRecord(int(r[0]), float(r[1]), float(r[2]), tuple(float(x) for x in r[3:])) for r in body]
    return recs, names


def read_curve(path):
    """Two numeric columns ``(x, y)`` from a CSV with a header row (reference curves)."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] < 2:
        raise ValueError(f"{path}: expected at least two columns")
    return data[:, 0], data[:, 1]


# ---------------------------------------------------------------------------
# tensors and probes
# ---------------------------------------------------------------------------

def principal_values(tensor):
    """Eigenvalues sorted descending and the matching unit eigenvectors (columns)."""
    t = np.asarray(tensor, dtype=float)
    t = 0.5 * (t + np.swapaxes(t, -1, -2))
    w, v = np.linalg.eigh(t)
    return w[..., ::-1], v[..., ::-1]


def min_principal(tensor):
    return np.linalg.eigvalsh(0.5 * (tensor + np.swapaxes(tensor, -1, -2)))[..., 0]


def ball_rule(center, radius, n_r=3, n_theta=4, n_phi=8):
    """Points and weights of a symmetric product rule on a ball.

    Gauss in ``r`` (weight ``r^2``) x Gauss in ``cos(theta)`` x uniform
    ``phi``.  Reflection-symmetric, so the mean of an affine field equals
    its value at the centre.
    """
    c = np.asarray(center, dtype=float)
    if radius == 0:
        return c[None, :], np.ones(1)
    xr, wr = np.polynomial.legendre.leggauss(n_r)
    r = 0.5 * radius * (xr + 1.0)
    wr = 0.5 * radius * wr * r**2
    ct, wt = np.polynomial.legendre.leggauss(n_theta)
    phi = (np.arange(n_phi) + 0.5) * 2 * np.pi / n_phi
    wp = np.full(n_phi, 2 * np.pi / n_phi)
    R, CT, PH = np.meshgrid(r, ct, phi, indexing="ij")
    st = np.sqrt(1.0 - CT**2)
    pts = c + np.stack([R * st * np.cos(PH), R * st * np.sin(PH), R * CT], axis=-1).reshape(-1, 3)
    w = (wr[:, None, None] * wt[None, :, None] * wp[None, None, :]).ravel()
    return pts, w


def probe_strain(disc, u, center, radius=0.5, **rule):
    """Volume average of the minimum principal strain over a ball, in microstrain.

    Only points in physical voxels contribute.  ``radius == 0`` evaluates
    the strain at the centre.
    """
    pts, w = ball_rule(center, radius, **rule)
    image = disc.image
    ijk, inbox = image.voxel_ijk(pts)
    phys = inbox & image.inside[tuple(ijk.T)]
    idx = disc.grid.locate(pts)[0]
    keep = phys & (idx >= 0)
    if not keep.any():
        raise ProbeError(f"probe sphere at {tuple(center)} (r={radius}) lies entirely outside the material")
    _, g = disc.evaluate(pts[keep], u, 3)
    eps = 0.5 * (g + g.transpose(0, 2, 1))
    e3 = min_principal(eps)
    ww = w[keep]
    return float(np.dot(ww, e3) / ww.sum() * 1e6)


# ---------------------------------------------------------------------------
# failure load and regression
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FailureLoad:
    force: float
    step: int
    peak_detected: bool


def failure_load(records) -> FailureLoad:
    """Maximum force magnitude and its step (earliest on ties).

    ``peak_detected`` is False when the maximum is the last record, i.e. the
    curve was still rising when the run stopped.
    """
    recs = sorted(records, key=lambda r: r.step)
    if not recs:
        raise ValueError("failure load of an empty record list")
    f = np.abs([r.force for r in recs])
    i = int(np.argmax(f))  # first occurrence
    return FailureLoad(float(f[i]), int(recs[i].step), i < len(recs) - 1)


@dataclass(frozen=True)
class RegressionStats:
    slope: float
    intercept: float
    r2: float
    rmse: float
    e_rel: float
    n: int

    def as_row(self):
        return [repr(self.slope), repr(self.intercept), repr(self.r2), repr(self.rmse), repr(self.e_rel), str(self.n)]


def regression(measured, computed, noise_floor=NOISE_FLOOR) -> RegressionStats:
    """Least-squares line of computed against measured values."""
    x = np.asarray(measured, dtype=float)
    y = np.asarray(computed, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("measured and computed must be 1D sequences of equal length")
    if len(x) < 3:
        raise ValueError("regression needs at least 3 points")
    sxx = np.sum((x - x.mean()) ** 2)
    if sxx == 0:
        raise ValueError("measured values have zero variance")
    slope = float(np.sum((x - x.mean()) * (y - y.mean())) / sxx)
    intercept = float(y.mean() - slope * x.mean())
    res = y - (slope * x + intercept)
    syy = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 if syy == 0 else float(max(0.0, 1.0 - np.sum(res**2) / syy))
    rmse = float(np.sqrt(np.mean(res**2)))
    sel = np.abs(x) > noise_floor
    e_rel = float(np.mean(np.abs(y[sel] - x[sel]) / np.abs(x[sel])) * 100) if sel.any() else float("nan")
    return RegressionStats(slope, intercept, r2, rmse, e_rel, int(len(x)))


def write_regression(path, rows):
    """``rows``: iterable of ``(label, RegressionStats)``."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["label", "slope", "intercept_ustrain", "r2", "rmse_ustrain", "e_rel_percent", "n"])
        for label, st in rows:
            w.writerow([label] + st.as_row())


def relative_error(value, reference):
    return abs(value - reference) / abs(reference)


# ---------------------------------------------------------------------------
# field sampling and crack iso-volume
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SampleGrid:
    """Regular sub-cell sampling of the active cells (centres of ``n^3`` sub-boxes per cell)."""

    points: np.ndarray
    size: float  # sub-box edge
    ijk: np.ndarray  # global sub-box index
    shape: tuple


def sample_grid(grid, per_axis) -> SampleGrid:
    n = int(per_axis)
    loc = (np.arange(n) + 0.5) / n
    X, Y, Z = np.meshgrid(loc, loc, loc, indexing="ij")
    off = np.stack([X.ravel(), Y.ravel(), Z.ravel()], 1)
    pts = grid.origin + grid.h * (grid.cells[:, None, :] + off[None]).reshape(-1, 3)
    sub = np.stack(np.meshgrid(*(np.arange(n),) * 3, indexing="ij"), -1).reshape(-1, 3)
    ijk = (grid.cells[:, None, :] * n + sub[None]).reshape(-1, 3)
    return SampleGrid(pts, grid.h / n, ijk, tuple(int(s) * n for s in grid.shape))


@dataclass(frozen=True, eq=False)
class IsoVolume:
    """Selected sub-boxes with ``s_low <= s <= s_high`` inside the material."""

    centers: np.ndarray
    size: float
    s: np.ndarray
    displacement: np.ndarray | None
    ijk: np.ndarray
    labels: np.ndarray  # connected-component id per selected box (1-based)

    @property
    def n_components(self) -> int:
        return int(self.labels.max()) if len(self.labels) else 0

    @property
    def volume(self) -> float:
        return float(len(self.centers) * self.size**3)

    def component_sizes(self):
        return np.bincount(self.labels)[1:] if len(self.labels) else np.zeros(0, dtype=int)


def crack_isovolume(disc, s, s_low=0.0, s_high=0.03, u=None, per_axis=None) -> IsoVolume:
    """Sub-voxel threshold selection of the phase field.

    Sampling defaults to twice the per-axis Gauss density of an uncut cell.
    Only samples in physical voxels are considered.
    """
    if not 0.0 <= s_low < s_high <= 1.0:
        raise ValueError("thresholds must satisfy 0 <= s_low < s_high <= 1")
    n = per_axis or 2 * disc.quad.n_gauss
    sg = sample_grid(disc.grid, n)
    ijk_v, inbox = disc.image.voxel_ijk(sg.points)
    phys = inbox & disc.image.inside[tuple(ijk_v.T)]
    sv, _ = disc.evaluate(sg.points, s, 1)
    sel = phys & (sv >= s_low) & (sv <= s_high)
    disp = None
    if u is not None and sel.any():
        disp, _ = disc.evaluate(sg.points[sel], u, 3)
    lab = np.zeros(0, dtype=np.int64)
    if sel.any():
        vol = np.zeros(sg.shape, dtype=bool)
        vol[tuple(sg.ijk[sel].T)] = True
        full, _ = ndimage.label(vol)  # face connectivity
        lab = full[tuple(sg.ijk[sel].T)]
    return IsoVolume(sg.points[sel], sg.size, sv[sel], disp, sg.ijk[sel], lab)


# ---------------------------------------------------------------------------
# VTK writers (XML, base64 binary, little-endian)
# ---------------------------------------------------------------------------

def _b64(arr):
    a = np.ascontiguousarray(arr)
    raw = a.tobytes()
    head = np.array([len(raw)], dtype="<u4").tobytes()
    return base64.b64encode(head + raw).decode("ascii")


def _vtk_type(arr):
    return {np.dtype("<f8"): "Float64", np.dtype("<f4"): "Float32", np.dtype("<i8"): "Int64",
            np.dtype("<i4"): "Int32", np.dtype("u1"): "UInt8"}[arr.dtype]


def _data_array(name, arr, ncomp=1):
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        arr = arr.astype("<f8")
    return (f'<DataArray type="{_vtk_type(arr)}" Name="{name}" NumberOfComponents="{ncomp}" '
            f'format="binary">{_b64(arr)}</DataArray>')


def write_vti(path, origin, spacing, dims, point_data):
    """Point data on a regular grid of ``dims`` points; arrays in x-fastest order."""
    nx, ny, nz = dims
    buf = io.StringIO()
    buf.write('<?xml version="1.0"?>\n<VTKFile type="ImageData" version="1.0" byte_order="LittleEndian" header_type="UInt32">\n')
    ext = f"0 {nx - 1} 0 {ny - 1} 0 {nz - 1}"
    o = " ".join(repr(float(x)) for x in origin)
    sp = " ".join(repr(float(x)) for x in spacing)
    buf.write(f'<ImageData WholeExtent="{ext}" Origin="{o}" Spacing="{sp}">\n<Piece Extent="{ext}">\n<PointData>\n')
    for name, arr in point_data.items():
        arr = np.asarray(arr)
        ncomp = 1 if arr.ndim == 1 else arr.shape[1]
        buf.write(_data_array(name, arr, ncomp) + "\n")
    buf.write("</PointData>\n</Piece>\n</ImageData>\n</VTKFile>\n")
    with open(path, "w") as f:
        f.write(buf.getvalue())


_HEX_CORNERS = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], float)


def write_vtu_boxes(path, centers, size, cell_data=None, displacement=None, warp=0.0):
    """Axis-aligned boxes as VTK hexahedra, optionally warped by ``warp * displacement``."""
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    n = len(centers)
    pts = centers[:, None, :] + (size * (_HEX_CORNERS - 0.5))[None]
    if displacement is not None and warp:
        pts = pts + warp * np.asarray(displacement)[:, None, :]
    pts = pts.reshape(-1, 3)
    conn = np.arange(8 * n, dtype="<i8")
    offs = 8 * np.arange(1, n + 1, dtype="<i8")
    types = np.full(n, 12, dtype="u1")
    buf = io.StringIO()
    buf.write('<?xml version="1.0"?>\n<VTKFile type="UnstructuredGrid" version="1.0" byte_order="LittleEndian" header_type="UInt32">\n')
    buf.write(f'<UnstructuredGrid>\n<Piece NumberOfPoints="{8 * n}" NumberOfCells="{n}">\n')
    buf.write("<Points>\n" + _data_array("Points", pts, 3) + "\n</Points>\n")
    buf.write("<Cells>\n" + _data_array("connectivity", conn) + "\n" + _data_array("offsets", offs) + "\n"
              + _data_array("types", types) + "\n</Cells>\n")
    buf.write("<CellData>\n")
    for name, arr in (cell_data or {}).items():
        arr = np.asarray(arr)
        buf.write(_data_array(name, arr, 1 if arr.ndim == 1 else arr.shape[1]) + "\n")
    buf.write("</CellData>\n</Piece>\n</UnstructuredGrid>\n</VTKFile>\n")
    with open(path, "w") as f:
        f.write(buf.getvalue())


def read_vtk_array(path, name):
    """Decode one named binary DataArray from a file written by this module."""
    import xml.etree.ElementTree as ET

    root = ET.parse(path).getroot()
    for da in root.iter("DataArray"):
        if da.get("Name") == name:
            raw = base64.b64decode(da.text.strip())
            dt = {"Float64": "<f8", "Float32": "<f4", "Int64": "<i8", "Int32": "<i4", "UInt8": "u1"}[da.get("type")]
            arr = np.frombuffer(raw[4:], dtype=dt)
            k = int(da.get("NumberOfComponents", "1"))
            return arr.reshape(-1, k) if k > 1 else arr
    raise KeyError(name)


@dataclass(frozen=True, eq=False)
class FieldSnapshot:
    """Fields sampled at the image's voxel centres (x-fastest) for visualisation."""

    s: np.ndarray
    u: np.ndarray
    H: np.ndarray
    sigma1: np.ndarray
    sigma3: np.ndarray
    eps3: np.ndarray
    inside: np.ndarray
    extras: dict = field(default_factory=dict)


def voxel_centres(image):
    idx = np.stack(np.meshgrid(*(np.arange(n) for n in image.dims), indexing="ij"), -1)
    pts = image.lower + (idx + 0.5) * np.asarray(image.spacing)
    return pts.transpose(2, 1, 0, 3).reshape(-1, 3)  # x-fastest


def field_snapshot(disc, state, eta) -> FieldSnapshot:
    """Evaluate s, u, principal stresses and strains at every voxel centre.

    ``H`` lives at quadrature points; each voxel reports the weighted
    average of ``H`` over the cell that contains it.
    """
    from .material import degraded_stress

    image = disc.image
    pts = voxel_centres(image)
    sv, _ = disc.evaluate(pts, state.s, 1)
    uv, gu = disc.evaluate(pts, state.u, 3)
    # points outside every active cell carry no field: report s=1, u=0, zero strain
    bad = np.isnan(sv)
    sv[bad], uv[bad], gu[bad] = 1.0, 0.0, 0.0
    eps = 0.5 * (gu + gu.transpose(0, 2, 1))
    mat = disc.material
    sig = degraded_stress(eps, np.clip(sv, 0.0, 1.0), mat.kappa, mat.mu, eta)
    pv, _ = principal_values(sig)
    # cell-averaged history (history lives at quadrature points)
    cellH = np.bincount(disc.quad.cell, weights=state.H * disc.quad.weight, minlength=disc.grid.n_cells)
    cellW = np.bincount(disc.quad.cell, weights=disc.quad.weight, minlength=disc.grid.n_cells)
    idx = disc.grid.locate(pts)[0]
    Hv = np.where(idx >= 0, cellH[np.maximum(idx, 0)] / np.maximum(cellW[np.maximum(idx, 0)], 1e-300), 0.0)
    return FieldSnapshot(sv, uv, Hv, pv[:, 0], pv[:, 2], min_principal(eps) * 1e6, image.flat_inside())


def write_fields_vti(path, disc, state, eta):
    snap = field_snapshot(disc, state, eta)
    img = disc.image
    origin = img.lower + 0.5 * np.asarray(img.spacing)
    write_vti(path, origin, img.spacing, img.dims, {
        "s": snap.s, "u": snap.u, "H": snap.H, "sigma1": snap.sigma1, "sigma3": snap.sigma3,
        "eps3_ustrain": snap.eps3, "inside": snap.inside.astype("u1"),
    })
    return snap


def write_isovolume(path, iso: IsoVolume, warp=0.0):
    write_vtu_boxes(path, iso.centers, iso.size, {"s": iso.s, "component": iso.labels.astype("<i8")},
                    displacement=iso.displacement, warp=warp)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
