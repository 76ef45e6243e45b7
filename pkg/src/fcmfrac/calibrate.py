"""Parameter sweeps against a reference failure load or force–displacement curve.

A sweep re-runs the same configuration for each value of one parameter
(``l0``, ``beta`` or ``gc0``), scores every run with a metric and ranks the
values.  Runs that raise are recorded as failed and ranked last; they never
abort the sweep.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .postproc import failure_load, read_curve, read_records

log = logging.getLogger(__name__)

PARAMETERS = {"l0": ("solver", "l0"), "beta": ("material", "beta"), "gc0": ("material", "gc0")}
METRICS = ("failure_load", "curve_rmse")


@dataclass
class SweepSpec:
    parameter: str
    values: list
    metric: str = "failure_load"
    reference_failure_load: float | None = None
    reference_curve: tuple | None = None  # (applied, force) arrays

    def __post_init__(self):
        if self.parameter not in PARAMETERS:
            raise ValueError(f"unknown sweep parameter {self.parameter!r}; choose from {', '.join(PARAMETERS)}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown sweep metric {self.metric!r}; choose from {', '.join(METRICS)}")
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if self.metric == "curve_rmse" and self.reference_curve is None:
            raise ValueError("metric curve_rmse needs a reference curve")


@dataclass
class SweepResult:
    value: float
    status: str  # "ok" or "failed"
    failure_load: float = float("nan")
    metric: float = float("nan")
    n_steps: int = 0
    message: str = ""
    out_dir: str = ""
    curve: tuple = field(default=(), repr=False)


def with_parameter(cfg, parameter: str, value: float):
    """Deep copy of a run config with one parameter replaced."""
    block, key = PARAMETERS[parameter]
    new = copy.deepcopy(cfg)
    setattr(getattr(new, block), key, float(value))
    new.sweep = None
    return new


def curve_rmse(applied, force, ref_applied, ref_force) -> float:
    """RMS force difference on the computed load steps inside the reference range.

    The reference is interpolated linearly; signs are ignored (magnitudes are
    compared) so compression and tension curves can be mixed.
    """
    a = np.abs(np.asarray(applied, dtype=float))
    ra = np.abs(np.asarray(ref_applied, dtype=float))
    order = np.argsort(ra, kind="stable")
    ra, rf = ra[order], np.abs(np.asarray(ref_force, dtype=float))[order]
    keep = (a >= ra[0]) & (a <= ra[-1])
    if not keep.any():
        return float("inf")
    diff = np.abs(np.asarray(force, dtype=float))[keep] - np.interp(a[keep], ra, rf)
    return float(np.sqrt(np.mean(diff**2)))


def score(spec: SweepSpec, records) -> tuple[float, float]:
    """``(failure_load, metric)`` for one run; smaller metric is better."""
    fl = failure_load(records).force if records else float("nan")
    if spec.metric == "failure_load":
        ref = spec.reference_failure_load
        if ref is None and spec.reference_curve is not None:
            ref = float(np.max(np.abs(spec.reference_curve[1])))
        metric = abs(fl - ref) / abs(ref) if ref is not None else fl
    else:
        metric = curve_rmse([r.applied for r in records], [r.force for r in records], *spec.reference_curve)
    return fl, float(metric)


def rank(results: list[SweepResult]) -> list[SweepResult]:
    """Successful runs by ascending metric (ties: smaller value), then failed runs by value."""
    ok = sorted((r for r in results if r.status == "ok" and np.isfinite(r.metric)), key=lambda r: r.value)
    ok = sorted(ok, key=lambda r: r.metric)  # stable: equal metrics keep ascending value order
    taken = {id(r) for r in ok}
    rest = sorted((r for r in results if id(r) not in taken), key=lambda r: r.value)
    return ok + rest


def _default_runner(cfg, out_dir):
    from .cli.runner import run

    run(cfg, out_dir)
    return read_records(os.path.join(out_dir, "force_strain.csv"))[0]


def run_sweep(cfg, spec: SweepSpec, out_dir: str, runner=None) -> list[SweepResult]:
    """Run every value of the sweep; returns results in input order.

    ``runner(cfg, out_dir) -> records`` defaults to a full ``fcmfrac run``.
    """
    runner = runner or _default_runner
    os.makedirs(out_dir, exist_ok=True)
    results = []
    for v in spec.values:
        sub = os.path.join(out_dir, f"{spec.parameter}_{float(v):g}")
        try:
            records = runner(with_parameter(cfg, spec.parameter, v), sub)
            fl, metric = score(spec, records)
            res = SweepResult(float(v), "ok", fl, metric, len(records), "", sub,
                              ([r.applied for r in records], [r.force for r in records]))
        except Exception as exc:  # a failed run must not abort the sweep
            log.warning("sweep %s=%g failed: %s", spec.parameter, v, exc)
            res = SweepResult(float(v), "failed", message=f"{type(exc).__name__}: {exc}", out_dir=sub)
        log.info("sweep %s=%g: %s failure_load=%.6g metric=%.6g", spec.parameter, v, res.status,
                 res.failure_load, res.metric)
        results.append(res)
    write_sweep(out_dir, spec, results)
    return results


def write_sweep(out_dir: str, spec: SweepSpec, results: list[SweepResult]):
    ranked = rank(results)
    position = {id(r): i + 1 for i, r in enumerate(ranked)}
    with open(os.path.join(out_dir, "sweep.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([spec.parameter, "status", "failure_load_N", spec.metric, "rank", "n_steps", "message"])
        for r in results:
            w.writerow([repr(r.value), r.status, repr(r.failure_load), repr(r.metric), position[id(r)],
                        r.n_steps, r.message])
    best = ranked[0] if ranked and ranked[0].status == "ok" else None
    summary = {
        "parameter": spec.parameter,
        "metric": spec.metric,
        "values": [r.value for r in results],
        "failure_loads_N": [_finite(r.failure_load) if r.status == "ok" else None for r in results],
        "best_value": best.value if best else None,
        "best_metric": best.metric if best else None,
        "n_failed": sum(r.status != "ok" for r in results),
        "failure_load_monotone_decreasing": strictly_decreasing([r.failure_load for r in results]),
    }
    with open(os.path.join(out_dir, "sweep_summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True, allow_nan=False, default=str)
        f.write("\n")
    return summary


def _finite(x):
    return float(x) if np.isfinite(x) else None


def strictly_decreasing(values) -> bool:
    v = np.asarray(values, dtype=float)
    return bool(v.size > 1 and np.all(np.isfinite(v)) and np.all(np.diff(v) < 0))


def spec_from_config(cfg) -> SweepSpec:
    """Build a :class:`SweepSpec` from a config's ``sweep`` block."""
    sw = cfg.sweep
    if sw is None:
        raise ValueError("config has no sweep block")
    curve = read_curve(cfg.path(sw.reference_curve)) if sw.reference_curve else None
    return SweepSpec(sw.parameter, list(sw.values), sw.metric, sw.reference_failure_load, curve)
