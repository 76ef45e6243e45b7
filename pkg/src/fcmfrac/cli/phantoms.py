"""Deterministic synthetic voxel specimens.

Each generator returns a :class:`~fcmfrac.grid.VoxelImage` of ash density
together with a matching run-config dictionary (boundary conditions, probes
and discretisation suited to the specimen).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..grid import VoxelImage
from ..material import E_to_ash, E_to_Gc, ash_to_E

KINDS = ("uniform-bar", "notched-plate", "sphere", "layered-bone-surrogate")


@dataclass(frozen=True)
class Phantom:
    image: VoxelImage
    config: dict  # run-config blocks (without paths)
    info: dict


def _centres(dims, spacing):
    return [(np.arange(n) + 0.5) * s for n, s in zip(dims, spacing)]


def uniform_bar(dims=(16, 16, 64), spacing=1.0, density=1.0, strain=-1e-3, seed=0) -> Phantom:
    """Solid box loaded along z; mid-planes carry symmetry conditions so the stress is uniaxial."""
    dims = tuple(int(d) for d in dims)
    sp = (float(spacing),) * 3
    img = VoxelImage(np.full(dims, float(density)), sp, (0.0, 0.0, 0.0), "rho_ash")
    L = dims[2] * sp[2]
    cx, cy = dims[0] * sp[0] / 2, dims[1] * sp[1] / 2
    E = float(ash_to_E(density))
    cfg = {
        "discretization": {"h": 2.0 * sp[0], "p": 2, "depth": 1},
        "material": {"fracture": False},
        "solver": {"l0": 4.0 * sp[0], "schedule": {"u_large": abs(strain) * L / 4, "u_med": abs(strain) * L / 4,
                                                    "u_small": abs(strain) * L / 4, "target": abs(strain) * L}},
        "boundary": {
            "load": "top",
            "load_component": 2,
            "conditions": [
                {"name": "bottom", "kind": "displacement", "component": 2, "face": "zmin"},
                {"name": "top", "kind": "displacement", "component": 2, "face": "zmax", "scale": float(np.sign(strain))},
                {"name": "sym_x", "kind": "displacement", "component": 0, "plane": [0, cx]},
                {"name": "sym_y", "kind": "displacement", "component": 1, "plane": [1, cy]},
            ],
        },
        "postproc": {"probes": [{"name": "centre", "center": [cx, cy, L / 2], "radius": 0.5}]},
    }
    info = {"E": E, "area": dims[0] * dims[1] * sp[0] * sp[1], "length": L}
    return Phantom(img, cfg, info)


def notched_plate(dims=(64, 64, 4), spacing=0.125, density=1.0, notch_fraction=0.5, notch_width=2, seed=0) -> Phantom:
    """Thin square plate with an edge notch at mid-height, pulled along y.

    The notch is removed from the mask (voxels ``x < notch_fraction * Lx``
    in a band of ``notch_width`` voxels centred at mid-height).  ``ymin`` is
    clamped and ``ymax`` is displaced in +y.

    A slit thinner than a cell is bridged by the smooth basis, so the config
    also seeds the crack on the notch mid-plane through the initial history
    field (a ``seed`` condition), which is independent of the mesh.
    """
    dims = tuple(int(d) for d in dims)
    sp = (float(spacing),) * 3
    vals = np.full(dims, float(density))
    mask = np.ones(dims, dtype=bool)
    ny = dims[1]
    j0 = ny // 2 - notch_width // 2
    n_notch = int(round(notch_fraction * dims[0]))
    mask[:n_notch, j0:j0 + notch_width, :] = False
    img = VoxelImage(vals, sp, (0.0, 0.0, 0.0), "rho_ash", mask)
    Lx, Ly, Lz = (d * s for d, s in zip(dims, sp))
    cfg = {
        # four voxels per cell with depth 2 keeps every sub-cell aligned with the voxel faces
        "discretization": {"h": 4.0 * sp[0], "p": 2, "depth": 2},
        "solver": {"l0": 8.0 * sp[0], "schedule": {"u_large": 0.01, "u_med": 0.002, "u_small": 0.001,
                                                     "target": 0.2, "switch_energy": 0.5, "switch_phase": 0.9,
                                                     "max_steps": 300}},
        "boundary": {
            "load": "top",
            "load_component": 1,
            "conditions": [
                {"name": "bottom", "kind": "fixed", "face": "ymin"},
                {"name": "top", "kind": "displacement", "component": 1, "face": "ymax", "scale": 1.0},
                {"name": "top_x", "kind": "displacement", "component": 0, "face": "ymax"},
                {"name": "notch", "kind": "seed", "plane": [1, (j0 + notch_width / 2) * sp[1]],
                 "bounds": [[0.0, 0.0, 0.0], [n_notch * sp[0], Ly, Lz]]},
            ],
        },
        "postproc": {"probes": [{"name": "ligament", "center": [0.75 * Lx, Ly / 2, Lz / 2], "radius": 0.5 * sp[0]}]},
    }
    info = {"notch_length": n_notch * sp[0], "crack_plane_y": (j0 + notch_width / 2) * sp[1]}
    return Phantom(img, cfg, info)


def sphere(n=64, radius=None, spacing=1.0, density=1.0, seed=0) -> Phantom:
    """Ball of radius ``radius`` (default ``0.4 n`` voxels) centred in an ``n^3`` box."""
    n = int(n)
    sp = float(spacing)
    R = 0.4 * n * sp if radius is None else float(radius)
    x = (np.arange(n) + 0.5) * sp - n * sp / 2
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    mask = X**2 + Y**2 + Z**2 <= R**2
    img = VoxelImage(np.full((n, n, n), float(density)), (sp,) * 3, (0.0, 0.0, 0.0), "rho_ash", mask)
    c = n * sp / 2
    cfg = {
        "discretization": {"h": R / 4, "p": 2, "depth": 2},
        "material": {"fracture": False},
        "solver": {"l0": R / 2, "schedule": {"u_large": 0.01 * R, "u_med": 0.01 * R, "u_small": 0.01 * R, "target": 0.01 * R}},
        "boundary": {
            "load": "top",
            "load_component": 2,
            "conditions": [
                {"name": "bottom", "kind": "fixed", "plane": [2, c - 0.8 * R]},
                {"name": "top", "kind": "displacement", "component": 2, "plane": [2, c + 0.8 * R], "scale": -1.0},
            ],
        },
        "postproc": {"probes": [{"name": "centre", "center": [c, c, c], "radius": 0.5}]},
    }
    return Phantom(img, cfg, {"radius": R, "analytic_volume": 4.0 / 3.0 * np.pi * R**3})


def layered_bone_surrogate(dims=(20, 20, 40), spacing=1.0, shell_density=1.2, core_density=0.25,
                           shell_thickness=3.0, band=(0.45, 0.6), gc_ratio=0.6, core_noise=0.02,
                           seed=0, gc0=7.0, e0=20000.0, beta=0.8) -> Phantom:
    """Cylinder with a stiff shell, a soft core and a weak band ("neck").

    The band (axial range ``band`` as fractions of the height) replaces the
    shell density by one whose critical energy release rate is ``gc_ratio``
    times the shell's.  The core carries seeded multiplicative noise.
    Compressed along z between the end faces.
    """
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in dims)
    sp = (float(spacing),) * 3
    cx, cy, cz = _centres(dims, sp)
    X, Y, Z = np.meshgrid(cx, cy, cz, indexing="ij")
    Lx, Ly, Lz = (d * s for d, s in zip(dims, sp))
    R = 0.5 * min(Lx, Ly)
    r = np.hypot(X - Lx / 2, Y - Ly / 2)
    mask = r <= R
    shell = mask & (r > R - shell_thickness)
    in_band = (Z >= band[0] * Lz) & (Z <= band[1] * Lz)
    E_shell = ash_to_E(shell_density)
    # Gc ~ E^beta, so the band modulus follows from the requested Gc ratio
    E_band = E_shell * gc_ratio ** (1.0 / beta)
    rho_band = float(E_to_ash(E_band))
    vals = np.zeros(dims)
    core = mask & ~shell
    vals[core] = core_density * (1.0 + core_noise * rng.standard_normal(int(core.sum())))
    vals[shell] = shell_density
    vals[shell & in_band] = rho_band
    img = VoxelImage(vals, sp, (0.0, 0.0, 0.0), "rho_ash", mask)
    cfg = {
        "discretization": {"h": 1.25 * sp[0], "p": 2, "depth": 1},
        "material": {"gc0": gc0, "e0": e0, "beta": beta},
        "solver": {"l0": 2.0 * sp[0], "schedule": {"u_large": 0.04, "u_med": 0.01, "u_small": 0.005, "target": 1.0,
                                                  "drop_fraction": 0.9}},
        "boundary": {
            "load": "top",
            "load_component": 2,
            "conditions": [
                {"name": "bottom", "kind": "fixed", "face": "zmin"},
                {"name": "top", "kind": "displacement", "component": 2, "face": "zmax", "scale": -1.0},
                {"name": "top_x", "kind": "displacement", "component": 0, "face": "zmax"},
                {"name": "top_y", "kind": "displacement", "component": 1, "face": "zmax"},
            ],
        },
        "postproc": {"probes": [{"name": "neck", "center": [Lx / 2 + R - shell_thickness / 2, Ly / 2, 0.5 * (band[0] + band[1]) * Lz],
                                 "radius": 0.5}]},
    }
    info = {
        "rho_band": rho_band,
        "E_shell": float(E_shell),
        "E_band": float(E_band),
        "gc_shell": float(E_to_Gc(E_shell, gc0, e0, beta)),
        "gc_band": float(E_to_Gc(E_band, gc0, e0, beta)),
        "gc_ratio": float(gc_ratio),
    }
    return Phantom(img, cfg, info)


GENERATORS = {
    "uniform-bar": uniform_bar,
    "notched-plate": notched_plate,
    "sphere": sphere,
    "layered-bone-surrogate": layered_bone_surrogate,
}


def make_phantom(kind: str, size=None, seed: int = 0, **kwargs) -> Phantom:
    """Dispatch by kind; ``size`` is the voxel dims (or ``n`` for the sphere)."""
    if kind not in GENERATORS:
        raise ValueError(f"unknown phantom kind {kind!r}; choose from {', '.join(KINDS)}")
    gen = GENERATORS[kind]
    if size is not None:
        if kind == "sphere":
            kwargs["n"] = int(np.atleast_1d(size)[0])
        else:
            kwargs["dims"] = tuple(int(x) for x in size)
    return gen(seed=seed, **kwargs)
