"""Glue between a :class:`RunConfig` and the numerical modules, plus artifact output."""

from __future__ import annotations

import csv
import json
import logging
import os
import platform
import time
from dataclasses import dataclass

import numpy as np

from .. import __version__
from ..assembly import BoundarySpec, Discretization, Region, read_triangulation
from ..basis import BasisSpec
from ..grid import build_grid, build_quadrature, read_image
from ..material import MaterialLaw, material_field
from ..postproc import (
    Probe,
    crack_isovolume,
    failure_load,
    probe_strain,
    read_curve,
    regression,
    relative_error,
    write_fields_vti,
    write_isovolume,
    write_records,
    write_regression,
)
from ..solver import LoadSchedule, StaggeredConfig, load_checkpoint, make_problem, run_simulation
from .config import RunConfig, config_hash, config_to_dict

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.npz"


@dataclass(eq=False)
class Setup:
    cfg: RunConfig
    image: object
    disc: Discretization
    problem: object
    schedule: LoadSchedule
    staggered: StaggeredConfig


def material_law(cfg: RunConfig) -> MaterialLaw:
    m = cfg.material
    return MaterialLaw(m.gc0, m.e0, m.beta, m.nu, m.hu_slope, m.hu_intercept, m.fracture)


def boundary_specs(cfg: RunConfig):
    out = []
    for c in cfg.boundary.conditions:
        tris = read_triangulation(cfg.path(c.surface)) if c.surface is not None else None
        plane = (int(c.plane[0]), float(c.plane[1])) if c.plane is not None else None
        bounds = tuple(tuple(b) for b in c.bounds) if c.bounds is not None else None
        region = Region(face=c.face, plane=plane, triangles=tris, bounds=bounds, physical_only=c.physical_only)
        out.append(BoundarySpec(c.name, region, c.kind, c.component, c.value, c.scale, c.penalty))
    return out


def build_setup(cfg: RunConfig, image=None) -> Setup:
    """Image -> grid -> quadrature -> material -> boundary operators."""
    if image is None:
        image = read_image(cfg.path(cfg.paths.image), cfg.path(cfg.paths.mask))
    d = cfg.discretization
    grid = build_grid(image, d.h, d.p)
    quad = build_quadrature(grid, image, d.depth, d.alpha_fcm)
    mat = material_field(image, material_law(cfg))
    disc = Discretization(image, grid, quad, BasisSpec(d.basis, d.p), mat)
    s = cfg.solver
    probes = tuple(Probe(p.name, tuple(p.center), p.radius) for p in cfg.postproc.probes)
    problem = make_problem(disc, boundary_specs(cfg), cfg.boundary.load, cfg.boundary.load_component, probes,
                           l0=s.l0, penalty_factor=s.penalty_factor)
    sc = s.schedule
    schedule = LoadSchedule(sc.u_large, sc.u_med, sc.u_small, sc.target, sc.switch_energy, sc.switch_phase,
                            sc.drop_fraction, sc.max_steps)
    stag = StaggeredConfig(s.l0, s.eps_stag, s.n_stag, cfg.material.eta, s.rtol, s.branch_iterations, s.linear_solver)
    log.info("grid: %d active cells (%d cut), %d scalar functions, %d quadrature points",
             grid.n_cells, int(grid.cut.sum()), disc.n_scalar, quad.n_points)
    return Setup(cfg, image, disc, problem, schedule, stag)


# ---------------------------------------------------------------------------
# measured strains (regression input)
# ---------------------------------------------------------------------------

def read_measured(cfg: RunConfig):
    """``(ids, values, points)`` from the two measured-data CSV files."""
    pp = cfg.postproc
    vals = {}
    with open(cfg.path(pp.measured_values), newline="") as f:
        rows = list(csv.reader(f))
    for r in rows[1:]:
        vals[r[0].strip()] = float(r[1])
    pts = {}
    with open(cfg.path(pp.measured_points), newline="") as f:
        rows = list(csv.reader(f))
    for r in rows[1:]:
        pts[r[0].strip()] = [float(x) for x in r[1:4]]
    ids = [i for i in vals if i in pts]
    missing = sorted(set(vals) - set(pts))
    if missing:
        raise ValueError(f"measured points missing coordinates: {', '.join(missing[:5])}")
    return ids, np.array([vals[i] for i in ids]), np.array([pts[i] for i in ids])


class MeasuredTracker:
    """Computes strains at measured points on every step up to the peak.

    The computed strains used for the regression are interpolated linearly
    in force to the measured load level (first crossing on the rising branch).
    """

    def __init__(self, setup: Setup, radius: float):
        self.ids, self.values, self.points = read_measured(setup.cfg)
        self.setup = setup
        self.radius = radius
        self.level = setup.cfg.postproc.measured_force
        self.prev = None  # (force, strains)
        self.result = None

    def __call__(self, state, diag, rec):
        if self.result is not None:
            return
        disc = self.setup.disc
        strains = np.array([probe_strain(disc, state.u, p, self.radius) for p in self.points])
        F = abs(rec.force)
        if self.level is None:
            self.prev = (F, strains)
            return
        if F >= self.level:
            if self.prev is None or self.prev[0] >= F:
                self.result = strains
            else:
                t = (self.level - self.prev[0]) / (F - self.prev[0])
                self.result = (1 - t) * self.prev[1] + t * strains
        else:
            self.prev = (F, strains)

    def computed(self):
        if self.result is not None:
            return self.result
        return self.prev[1] if self.prev is not None else None


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def provenance(cfg: RunConfig, extra=None) -> dict:
    import numpy
    import scipy

    out = {
        "config_hash": config_hash(cfg),
        "version": __version__,
        "python": platform.python_version(),
        "numpy": numpy.__version__,
        "scipy": scipy.__version__,
        "parameters": config_to_dict(cfg),
    }
    out.update(extra or {})
    return out


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def write_history(path, diagnostics, append=False):
    """Per-step solver diagnostics; ``append`` continues the file of a resumed run."""
    append = append and os.path.exists(path)
    with open(path, "a" if append else "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if not append:
            w.writerow(["step", "applied_mm", "stage", "staggered_iterations", "residual", "converged",
                        "branch_iterations", "linear_iterations", "s_min", "damage_drive", "Fx_N", "Fy_N", "Fz_N"])
        for d in diagnostics:
            w.writerow([d.step, repr(d.applied), d.stage, d.iterations, repr(float(d.residual)), int(d.converged),
                        d.branch_iterations, d.linear_iterations, repr(d.s_min), repr(d.drive)]
                       + [repr(x) for x in d.force])


def report(setup: Setup, records, state, out_dir, measured=None, extra=None):
    """Postprocessing artifacts shared by ``run`` and ``postproc``.  Returns the summary dict."""
    cfg = setup.cfg
    pp = cfg.postproc
    names = [p.name for p in cfg.postproc.probes]
    write_records(os.path.join(out_dir, "force_strain.csv"), records, names)
    summary = dict(extra or {})
    summary["n_steps"] = len(records)
    if records:
        fl = failure_load(records)
        summary["failure_load_N"] = fl.force
        summary["failure_step"] = fl.step
        summary["peak_detected"] = fl.peak_detected
        ref = pp.reference_failure_load
        if ref is None and pp.reference_curve is not None:
            ref = float(np.max(np.abs(read_curve(cfg.path(pp.reference_curve))[1])))
        if ref is not None:
            summary["reference_failure_load_N"] = ref
            summary["failure_load_rel_error"] = relative_error(fl.force, ref)
    if measured is not None:
        ids, vals, comp = measured
        st = regression(vals, comp)
        write_regression(os.path.join(out_dir, "regression.csv"), [("all", st)])
        with open(os.path.join(out_dir, "measured_vs_computed.csv"), "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["point_id", "measured_ustrain", "computed_ustrain"])
            for i, a, b in zip(ids, vals, comp):
                w.writerow([i, repr(float(a)), repr(float(b))])
        summary["regression"] = {"slope": st.slope, "intercept": st.intercept, "r2": st.r2, "rmse": st.rmse,
                                 "e_rel_percent": st.e_rel, "n": st.n}
    iso = crack_isovolume(setup.disc, state.s, pp.iso_low, pp.iso_high, state.u, pp.sampling)
    summary["crack_volume_mm3"] = iso.volume
    summary["crack_components"] = iso.n_components
    if pp.vtk:
        write_fields_vti(os.path.join(out_dir, "fields_final.vti"), setup.disc, state, cfg.material.eta)
        write_isovolume(os.path.join(out_dir, "crack_isovolume.vtu"), iso, pp.warp)
    return summary


def run(cfg: RunConfig, out_dir: str, image=None, resume=False, on_step=None) -> dict:
    """Solve ``cfg`` and write all artifacts to ``out_dir``; returns the summary dict.

    ``on_step(state, diagnostics, record)`` is called after every accepted step.
    """
    t0 = time.perf_counter()
    os.makedirs(out_dir, exist_ok=True)
    setup = build_setup(cfg, image)
    ckpt = os.path.join(out_dir, CHECKPOINT)
    tracker = None
    if cfg.postproc.measured_values is not None:
        tracker = MeasuredTracker(setup, cfg.postproc.probes[0].radius if cfg.postproc.probes else 0.5)
    resume_data = load_checkpoint(ckpt) if resume and os.path.exists(ckpt) else None
    callbacks = [f for f in (tracker, on_step) if f is not None]

    def step_hook(state, diag, rec):
        for f in callbacks:
            f(state, diag, rec)

    res = run_simulation(setup.problem, setup.schedule, setup.staggered, resume=resume_data,
                         checkpoint_path=ckpt, on_step=step_hook if callbacks else None)
    records = res.records
    measured = None
    if tracker is not None and tracker.computed() is not None:
        measured = (tracker.ids, tracker.values, tracker.computed())
        # keep the regression input with the checkpoint so postproc can rebuild it
        from ..solver import save_checkpoint

        save_checkpoint(ckpt, res.state, records, {"stage": res.stage, "max_force": res.max_force,
                                                   "reason": res.reason,
                                                   "measured_computed": [float(x) for x in measured[2]]})
    write_history(os.path.join(out_dir, "history.csv"), res.diagnostics, append=resume_data is not None)
    summary = report(setup, records, res.state, out_dir, measured,
                     {"termination": res.reason, "n_cells": setup.disc.grid.n_cells,
                      "n_dofs": 4 * setup.disc.n_scalar})
    summary["wall_time_s"] = time.perf_counter() - t0
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    _write_json(os.path.join(out_dir, "provenance.json"), provenance(cfg))
    return summary


def postprocess(cfg: RunConfig, out_dir: str) -> dict:
    """Regenerate artifacts from an existing checkpoint without solving."""
    ckpt = os.path.join(out_dir, CHECKPOINT)
    if not os.path.exists(ckpt):
        raise FileNotFoundError(f"no checkpoint at {ckpt}; run `fcmfrac run --config ...` first")
    state, records, meta = load_checkpoint(ckpt)
    setup = build_setup(cfg)
    measured = None
    if "measured_computed" in meta and cfg.postproc.measured_values is not None:
        ids, vals, _ = read_measured(cfg)
        measured = (ids, vals, np.array(meta["measured_computed"]))
    summary = report(setup, records, state, out_dir, measured, {"termination": meta.get("reason")})
    return summary


def probe(cfg: RunConfig, out_dir: str, points=None, radius=None):
    """Probe strains on the checkpointed final state: list of ``(name, centre, microstrain)``."""
    ckpt = os.path.join(out_dir, CHECKPOINT)
    if not os.path.exists(ckpt):
        raise FileNotFoundError(f"no checkpoint at {ckpt}; run `fcmfrac run --config ...` first")
    state, _, _ = load_checkpoint(ckpt)
    setup = build_setup(cfg)
    if points is None:
        targets = [(p.name, tuple(p.center), p.radius if radius is None else radius) for p in cfg.postproc.probes]
    else:
        targets = [(f"point{i}", tuple(p), 0.5 if radius is None else radius) for i, p in enumerate(points)]
    return [(n, c, probe_strain(setup.disc, state.u, c, r)) for n, c, r in targets]
