"""Benchmark drivers shared by the acceptance tests and ``scripts/``.

Every driver writes a phantom (image + config) to disk and solves it
through :func:`fcmfrac.cli.runner.run`, i.e. the same code path as
``fcmfrac run``, so the benchmark artifacts are ordinary run directories.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
import yaml

from .cli.config import load_config, merge_blocks
from .cli.phantoms import make_phantom
from .grid import write_image
from .postproc import crack_isovolume, failure_load, read_records


def write_phantom(kind, out_dir, size=None, seed=0, overrides=None, **kwargs):
    """Write ``image.json``/``image.raw`` and ``config.yaml``; returns ``(RunConfig, Phantom)``.

    ``overrides`` is merged into the phantom's preset config blocks.
    """
    ph = make_phantom(kind, size, seed, **kwargs)
    os.makedirs(out_dir, exist_ok=True)
    write_image(ph.image, os.path.join(out_dir, "image.json"), dtype="float64")
    data = merge_blocks({"paths": {"image": "image.json", "output_dir": "output"}}, ph.config)
    if overrides:
        data = merge_blocks(data, overrides)
    path = os.path.join(out_dir, "config.yaml")
    with open(path, "w") as f:
        f.write(f"# {kind} phantom, seed {seed}\n")
        yaml.safe_dump(data, f, sort_keys=False, default_flow_style=None)
    return load_config(path), ph


def refined(cfg, factor=2):
    """Override block for a ``factor``-times smaller cell at unchanged sub-cell size."""
    d = cfg.discretization
    levels = int(round(np.log2(factor)))
    if 2**levels != factor or d.depth < levels:
        raise ValueError(f"refinement by {factor} needs a power of two <= 2^depth (depth={d.depth})")
    return {"discretization": {"h": d.h / factor, "depth": d.depth - levels}}


# ---------------------------------------------------------------------------
# crack band geometry
# ---------------------------------------------------------------------------

@dataclass
class CrackBand:
    n_components: int
    volume: float
    lower: np.ndarray
    upper: np.ndarray
    direction: np.ndarray  # unit vector of largest spread of the band
    angle_to_load_deg: float  # angle between ``direction`` and the load axis
    thickness_ratio: float  # spread along the load axis / spread along ``direction``

    @property
    def connected(self) -> bool:
        return self.n_components == 1

    def orthogonal(self, min_angle_deg=75.0, max_thickness_ratio=0.25) -> bool:
        """Band runs across the load axis and is thin along it."""
        return self.angle_to_load_deg >= min_angle_deg and self.thickness_ratio <= max_thickness_ratio


def crack_band(disc, s, load_axis, iso_low=0.0, iso_high=0.1, sampling=None) -> CrackBand:
    """Connectivity and orientation of ``{iso_low <= s <= iso_high}``.

    The orientation is the principal direction of the band's sample
    points (largest variance); spreads are standard deviations.
    """
    iso = crack_isovolume(disc, s, iso_low, iso_high, None, sampling)
    c = iso.centers
    if len(c) < 2:
        nan = float("nan")
        return CrackBand(iso.n_components, iso.volume, np.full(3, nan), np.full(3, nan), np.full(3, nan), nan, nan)
    cov = np.cov(c.T)
    w, v = np.linalg.eigh(cov)
    direction = v[:, -1]
    angle = float(np.degrees(np.arccos(min(1.0, abs(direction[load_axis])))))
    along_load = float(np.sqrt(cov[load_axis, load_axis]))
    ratio = along_load / float(np.sqrt(max(w[-1], 1e-300)))
    return CrackBand(iso.n_components, iso.volume, c.min(axis=0), c.max(axis=0), direction, angle, ratio)


# ---------------------------------------------------------------------------
# synthetic reference data (report checks)
# ---------------------------------------------------------------------------

def strains_at_force(records, level):
    """Probe strains interpolated linearly in |force| to ``level`` (first crossing on the rising branch)."""
    F = np.abs([r.force for r in records])
    E = np.array([r.strains for r in records])
    k = int(np.argmax(F >= level)) if np.any(F >= level) else len(F) - 1
    if k == 0 or F[k] < level:
        return E[k]
    t = (level - F[k - 1]) / (F[k] - F[k - 1])
    return (1 - t) * E[k - 1] + t * E[k]


def write_synthetic_reference(out_dir, records, points, level, force_scale=1.01, force_noise=0.001,
                              strain_noise=0.03, seed=0):
    """Perturbed copies of a computed run, written as reference/measured input files.

    * ``reference_curve.csv``: forces times ``force_scale * (1 + force_noise * N(0, 1))``
      per step (a systematic offset plus small step-to-step scatter);
    * ``measured_values.csv`` / ``measured_points.csv``: probe strains at
      force ``level`` times ``1 + strain_noise * N(0, 1)`` per point.

    Returns the ``postproc`` override block that points a run at these files.
    """
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    applied = np.array([r.applied for r in records])
    force = np.array([r.force for r in records]) * force_scale * (1.0 + force_noise * rng.standard_normal(len(records)))
    with open(os.path.join(out_dir, "reference_curve.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["applied_mm", "force_N"])
        w.writerows([[repr(float(a)), repr(float(b))] for a, b in zip(applied, force)])
    eps = strains_at_force(records, level) * (1.0 + strain_noise * rng.standard_normal(len(points)))
    ids = [f"P{i:02d}" for i in range(len(points))]
    with open(os.path.join(out_dir, "measured_values.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["point_id", "value_ustrain"])
        w.writerows([[i, repr(float(e))] for i, e in zip(ids, eps)])
    with open(os.path.join(out_dir, "measured_points.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["point_id", "x", "y", "z"])
        w.writerows([[i] + [repr(float(x)) for x in p] for i, p in zip(ids, points)])
    return {"postproc": {"reference_curve": os.path.abspath(os.path.join(out_dir, "reference_curve.csv")),
                         "measured_values": os.path.abspath(os.path.join(out_dir, "measured_values.csv")),
                         "measured_points": os.path.abspath(os.path.join(out_dir, "measured_points.csv")),
                         "measured_force": float(level)}}


def run_peak(out_dir):
    """``(failure_load, records)`` of a finished run directory."""
    recs, _ = read_records(os.path.join(out_dir, "force_strain.csv"))
    return failure_load(recs), recs


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

def notched_plate_pair(root, overrides=None, on_step=None, oracle_drop_fraction=0.85):
    """Notched plate and its 2x-refined self-oracle.

    The oracle only needs the peak, so it stops once the force falls below
    ``oracle_drop_fraction`` of its maximum.  Returns a dict with both
    configs, failure loads, relative gap, wall times and the phantom.
    """
    import time

    from .cli.runner import run

    cfg, ph = write_phantom("notched-plate", os.path.join(root, "coarse"), overrides=overrides)
    t0 = time.perf_counter()
    run(cfg, cfg.output_dir(), on_step=on_step)
    t_coarse = time.perf_counter() - t0
    fine_over = merge_blocks(refined(cfg), {"solver": {"schedule": {"drop_fraction": oracle_drop_fraction}}})
    oracle, _ = write_phantom("notched-plate", os.path.join(root, "fine"),
                              overrides=merge_blocks(overrides or {}, fine_over))
    t0 = time.perf_counter()
    run(oracle, oracle.output_dir())
    t_fine = time.perf_counter() - t0
    fl, recs = run_peak(cfg.output_dir())
    fl_ref, recs_ref = run_peak(oracle.output_dir())
    return {"cfg": cfg, "oracle": oracle, "phantom": ph, "failure_load": fl, "records": recs,
            "oracle_failure_load": fl_ref, "oracle_records": recs_ref,
            "gap": abs(fl.force - fl_ref.force) / abs(fl_ref.force), "t_coarse": t_coarse, "t_fine": t_fine}


def plate_crack_band(cfg, iso_high=0.1):
    """:class:`CrackBand` of a finished notched-plate run (final checkpointed state)."""
    from .cli.runner import build_setup
    from .solver import load_checkpoint

    state, _, _ = load_checkpoint(os.path.join(cfg.output_dir(), "checkpoint.npz"))
    return crack_band(build_setup(cfg).disc, state.s, cfg.boundary.load_component, 0.0, iso_high)
