"""Quasi-static staggered driver for the coupled elastic / phase-field problem.

One load step prescribes a new controlled displacement and alternates

1. history update from the current displacement and a phase-field solve,
2. an elastic solve with the new phase field,

until both subproblem residuals fall below ``eps_stag`` or ``n_stag``
iterations are spent.  The elastic subproblem is piecewise linear in the
strain (tension/compression branch of the split law) and is solved by a
fixed-point on the branch pattern, which is Newton's method for this law.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import (
    BoundaryOperator,
    ConfigurationError,
    Discretization,
    ElasticOperator,
    assemble_phasefield,
    default_penalty,
    distance_to_region,
    elastic_coefficients,
    internal_force,
    penalty_matrix,
    penalty_rhs,
    positive_energy_at_points,
    reaction_force,
    update_history,
)
from .material import ETA
from .postproc import ForceStrainRecord, probe_strain

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "fcmfrac-checkpoint-1"
SEED_FACTOR = 500.0  # history seed amplitude B, in units of Gc / (4 l0)
FINISHED = ("post_peak_drop", "target")


class LinearSolveError(RuntimeError):
    """A linear solve broke down or missed its tolerance."""


class StepError(RuntimeError):
    """Fatal failure inside a load step; carries the step context."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LoadSchedule:
    """Adaptive displacement stepping.

    Stage 0 uses ``u_large``.  The schedule moves to ``u_med`` once the
    damage-driving indicator ``max 4 l0 H / Gc`` over physical points
    exceeds ``switch_energy`` and to ``u_small`` once ``min s`` drops below
    ``switch_phase``.  Stages never go back.  With seeded cracks both
    indicators measure damage beyond the seed (see :func:`run_simulation`).  The run stops when the force
    falls below ``drop_fraction`` of its running maximum, when ``target`` is
    reached, or after ``max_steps`` steps.
    """

    u_large: float = 0.04
    u_med: float = 0.002
    u_small: float = 0.001
    target: float = 2.0
    switch_energy: float = 0.5
    switch_phase: float = 0.9
    drop_fraction: float = 0.25
    max_steps: int = 2000

    def __post_init__(self):
        if not (self.u_large >= self.u_med >= self.u_small > 0):
            raise ConfigurationError("load steps must satisfy u_large >= u_med >= u_small > 0")
        if not self.target > 0:
            raise ConfigurationError("target displacement must be positive")
        if not 0 <= self.drop_fraction < 1:
            raise ConfigurationError("drop_fraction must lie in [0, 1)")
        if int(self.max_steps) < 1:
            raise ConfigurationError("max_steps must be >= 1")

    def increment(self, stage: int) -> float:
        return (self.u_large, self.u_med, self.u_small)[stage]

    def stage_for(self, stage: int, drive: float, s_min: float) -> int:
        new = stage
        if drive > self.switch_energy:
            new = max(new, 1)
        if s_min < self.switch_phase:
            new = max(new, 2)
        return new


@dataclass(frozen=True)
class StaggeredConfig:
    l0: float = 2.0
    eps_stag: float = 1e-5
    n_stag: int = 25
    eta: float = ETA
    rtol: float = 1e-8
    branch_iterations: int = 25
    linear_solver: str = "auto"  # auto | direct | cg

    def __post_init__(self):
        if not self.eps_stag > 0:
            raise ConfigurationError("eps_stag must be positive")
        if int(self.n_stag) < 1:
            raise ConfigurationError("n_stag must be >= 1")
        if not 0 < self.eta < 0.1:
            raise ConfigurationError("eta must satisfy 0 < eta << 1")
        if not self.l0 > 0:
            raise ConfigurationError("l0 must be positive")
        if self.linear_solver not in ("auto", "direct", "cg"):
            raise ConfigurationError(f"unknown linear solver {self.linear_solver!r}")


@dataclass(eq=False)
class FieldState:
    u: np.ndarray
    s: np.ndarray
    H: np.ndarray
    applied: float = 0.0
    step: int = 0

    def copy(self) -> "FieldState":
        return FieldState(self.u.copy(), self.s.copy(), self.H.copy(), self.applied, self.step)

    @classmethod
    def initial(cls, disc: Discretization, H0=None) -> "FieldState":
        H = np.zeros(disc.n_points) if H0 is None else np.array(H0, dtype=float)
        return cls(np.zeros(3 * disc.n_scalar), np.ones(disc.n_scalar), H)


@dataclass
class StepDiagnostics:
    step: int
    applied: float
    iterations: int
    residual: float
    converged: bool
    r_u: list = field(default_factory=list)
    r_s: list = field(default_factory=list)
    branch_iterations: int = 0
    linear_iterations: int = 0
    stage: int = 0
    s_min: float = 1.0
    drive: float = 0.0
    force: tuple = (0.0, 0.0, 0.0)
    wall: float = 0.0


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

class LinearSolver:
    """SPD solves with a reusable sparse LU factor.

    ``direct`` factorises every matrix.  ``cg`` runs preconditioned CG whose
    preconditioner is the LU factor of an earlier matrix of the same
    system; the factor is refreshed when CG needs more than
    ``refactor_after`` iterations.  ``auto`` is ``direct`` below
    ``direct_limit`` unknowns and ``cg`` above.
    """

    def __init__(self, method="auto", rtol=1e-8, refactor_after=30, direct_limit=200, maxiter=300):
        self.method = method
        self.rtol = rtol
        self.refactor_after = refactor_after
        self.direct_limit = direct_limit
        self.maxiter = maxiter
        self._factors = {}
        self.iterations = 0
        self.factorizations = 0

    def _factor(self, A):
        self.factorizations += 1
        try:
            return spla.splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                             options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise LinearSolveError(f"factorisation failed ({exc}); {_diagnostics(A)}") from exc

    def solve(self, A, b, key="system", x0=None):
        A = sp.csr_matrix(A)
        b = np.asarray(b, dtype=float)
        nb = np.linalg.norm(b)
        if nb == 0.0:
            return np.zeros_like(b)
        method = self.method
        if method == "auto":
            method = "direct" if A.shape[0] <= self.direct_limit else "cg"
        if method == "direct" or key not in self._factors:
            lu = self._factor(A)
            self._factors[key] = lu
            x = lu.solve(b)
            if method == "direct" or _relres(A, x, b, nb) <= self.rtol:
                return self._check(A, x, b, nb, lu)
        lu = self._factors[key]
        x, its, ok = self._pcg(A, b, lu, x0)
        if not ok or its > self.refactor_after:
            lu = self._factor(A)
            self._factors[key] = lu
            x, its2, ok = self._pcg(A, b, lu, lu.solve(b))
            if not ok:
                raise LinearSolveError(f"preconditioned CG did not reach rtol={self.rtol:g}; {_diagnostics(A)}")
        return x

    def solve_operator(self, op, b, key="system", x0=None):
        """Solve with a matrix-free operator (``op.matvec``, ``op.matrix()``).

        The explicit matrix is only assembled to (re)build the preconditioner.
        """
        b = np.asarray(b, dtype=float)
        if np.linalg.norm(b) == 0.0:
            return np.zeros_like(b)
        if self.method == "direct" or key not in self._factors:
            return self.solve(op.matrix(), b, key=key, x0=x0)
        A = spla.LinearOperator(op.shape, matvec=op.matvec, dtype=float)
        x, its, ok = self._pcg(A, b, self._factors[key], x0)
        if ok and its <= self.refactor_after:
            return x
        M = op.matrix()
        lu = self._factor(M)
        self._factors[key] = lu
        x, _, ok = self._pcg(M, b, lu, lu.solve(b))
        if not ok:
            raise LinearSolveError(f"preconditioned CG did not reach rtol={self.rtol:g}; {_diagnostics(M)}")
        return x

    def _pcg(self, A, b, lu, x0):
        M = spla.LinearOperator(A.shape, matvec=lu.solve, dtype=float)
        count = [0]

        def cb(_):
            count[0] += 1

        x, info = spla.cg(A, b, x0=x0, rtol=self.rtol, atol=0.0, maxiter=self.maxiter, M=M, callback=cb)
        self.iterations += count[0]
        if info < 0:
            raise LinearSolveError(f"CG breakdown (info={info}); {_diagnostics(A)}")
        return x, count[0], info == 0

    def _check(self, A, x, b, nb, lu):
        r = _relres(A, x, b, nb)
        if not np.isfinite(r):
            raise LinearSolveError(f"non-finite solution; {_diagnostics(A)}")
        if r > self.rtol:
            # one round of iterative refinement with the fresh factor
            x, _, ok = self._pcg(A, b, lu, x)
            if not ok:
                raise LinearSolveError(f"relative residual {r:.3e} exceeds rtol={self.rtol:g}; {_diagnostics(A)}")
        return x


def _relres(A, x, b, nb):
    return float(np.linalg.norm(A @ x - b) / nb)


def _diagnostics(A):
    d = A.diagonal()
    sym = abs(A - A.T).max() / max(abs(A).max(), 1e-300)
    return (f"n={A.shape[0]}, nnz={A.nnz}, diag range [{d.min():.3e}, {d.max():.3e}], "
            f"non-positive diagonal entries={int(np.sum(d <= 0))}, relative asymmetry={sym:.1e}")


def solve_linear(A, b, rtol=1e-8, method="auto"):
    """One-shot SPD solve to relative residual ``rtol``."""
    return LinearSolver(method, rtol).solve(A, b)


# ---------------------------------------------------------------------------
# problem definition
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Problem:
    """A discretised specimen with its boundary conditions and probes.

    ``load_bc`` names the boundary condition whose reaction force is
    recorded; ``load_component`` selects the force component.  ``H0`` is
    the history field the run starts from (non-zero only at crack seeds).
    """

    disc: Discretization
    bcs: tuple
    load_bc: str
    load_component: int = 2
    probes: tuple = ()
    H0: np.ndarray | None = None  # initial history field (crack seeds)

    def __post_init__(self):
        self.K_pen = penalty_matrix(self.disc, self.bcs)
        self._f0 = penalty_rhs(self.disc, self.bcs, 0.0)
        self._f1 = penalty_rhs(self.disc, self.bcs, 1.0) - self._f0

    def load_vector(self, applied: float) -> np.ndarray:
        """Penalty right-hand side; affine in the controlled displacement."""
        return self._f0 + applied * self._f1

    def bc(self, name) -> BoundaryOperator:
        for b in self.bcs:
            if b.spec.name == name:
                return b
        raise KeyError(f"no boundary condition named {name!r}")


def make_problem(disc: Discretization, specs, load_bc, load_component=2, probes=(), l0=2.0,
                 penalty_factor=1e3, depth=None) -> Problem:
    """Build boundary operators with default penalties for each spec; ``seed`` specs set ``H0``."""
    h = disc.grid.h
    if not l0 >= h:
        warnings.warn(f"length scale l0={l0} is below the cell size h={h}; the crack band is unresolved")
    beta_u = default_penalty(disc.material, h, penalty_factor)
    beta_s = penalty_factor * (4.0 * l0**2 / h + h)
    ops, seeds = [], []
    for spec in specs:
        if spec.kind == "seed":
            seeds.append(spec)
            continue
        beta = beta_s if spec.kind == "phase" else beta_u
        ops.append(BoundaryOperator(disc, spec, depth=depth, beta=beta))
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigurationError("boundary condition names must be unique")
    if load_bc not in [o.spec.name for o in ops]:
        raise ConfigurationError(f"load boundary {load_bc!r} is not defined")
    H0 = seed_history(disc, [s.region for s in seeds], l0) if seeds else None
    return Problem(disc, tuple(ops), load_bc, int(load_component), tuple(probes), H0)


def seed_history(disc: Discretization, regions, l0, B=SEED_FACTOR):
    """Initial history field that nucleates a crack on each (plane) region.

    ``H0 = B Gc / (4 l0) (1 - 2 d / l0)`` for distances ``d <= l0 / 2`` and
    zero beyond: a continuous field independent of the mesh, so a refined
    discretisation sees the same initial crack.  With the default ``B = 500``
    the phase field on the seed drops to about 0.01-0.02.  Much larger
    ``B`` gives a boundary layer of width ``~ l0 / sqrt(B)`` that coarse
    cells cannot resolve, and the discrete phase field undershoots below 0.
    """
    H0 = np.zeros(disc.n_points)
    gc = np.asarray(disc.gc, dtype=float)
    finite = np.isfinite(gc)
    for region in regions:
        d = distance_to_region(region, disc.quad.points)
        near = finite & (d <= 0.5 * l0)
        H0[near] = np.maximum(H0[near], B * gc[near] / (4.0 * l0) * (1.0 - 2.0 * d[near] / l0))
    return H0


# ---------------------------------------------------------------------------
# staggered step
# ---------------------------------------------------------------------------

def damage_drive(disc, H, l0, H0=None):
    """``max 4 l0 H / Gc`` over physical quadrature points (0 when fracture is off).

    With an initial history ``H0`` only the excess ``max(H - H0, 0)`` counts.
    """
    phys = disc.quad.physical
    if H0 is not None:
        H = np.maximum(H - H0, 0.0)
    return float(np.max(4.0 * l0 * H[phys] / disc.gc[phys])) if phys.any() else 0.0


def seeded_phase(problem: Problem, cfg: StaggeredConfig):
    """Phase field at the quadrature points for the initial history alone (all ones without seeds)."""
    disc = problem.disc
    if problem.H0 is None:
        return np.ones(disc.n_points)
    A, b = assemble_phasefield(disc, problem.H0, cfg.l0, cfg.eta, problem.bcs)
    return disc.scalar_values(solve_linear(A, b, cfg.rtol, cfg.linear_solver))


def elastic_residual(problem: Problem, u, s_q, applied, eta=ETA):
    """``|r| / max(|f|, |f_int|)`` of the penalised equilibrium equations."""
    fint = internal_force(problem.disc, u, s_q, eta) + problem.K_pen @ u
    f = problem.load_vector(applied)
    den = max(np.linalg.norm(f), np.linalg.norm(fint), 1e-300)
    return float(np.linalg.norm(fint - f) / den)


def solve_elastic(problem: Problem, u0, s_q, applied, cfg: StaggeredConfig, linsolver: LinearSolver):
    """Equilibrium for a fixed phase field; returns ``(u, branch_iterations)``.

    Each pass freezes the tension/compression branch at every point, which
    makes the problem linear (the secant stiffness is the tangent), and
    solves it; the loop ends when the new displacement reproduces the
    branch pattern.
    """
    disc = problem.disc
    u = u0
    f = problem.load_vector(applied)
    pattern = np.trace(disc.strain(u), axis1=1, axis2=2) > 0
    for it in range(1, cfg.branch_iterations + 1):
        lam_c, mu_c = elastic_coefficients(disc, None, s_q, cfg.eta, tension=pattern)
        op = ElasticOperator(disc, lam_c, mu_c, problem.K_pen)
        u = linsolver.solve_operator(op, f, key="u", x0=u)
        new = np.trace(disc.strain(u), axis1=1, axis2=2) > 0
        if np.array_equal(new, pattern):
            return u, it
        pattern = new
    warnings.warn("tension/compression branch pattern did not settle; using last iterate")
    return u, cfg.branch_iterations


def staggered_step(problem: Problem, state: FieldState, du: float, cfg: StaggeredConfig,
                   linsolver: LinearSolver | None = None):
    """Advance the controlled displacement by ``du`` and iterate to a coupled solution.

    Residuals (both relative, see module docs):

    * ``R_s = |K_s(H) s - b| / |b|`` with ``H`` refreshed from the current ``u``;
    * ``R_u = |K(u, s) u - f| / max(|f|, |K u|)`` with the freshly solved ``s``.
    """
    if not np.isfinite(du):
        raise ValueError("displacement increment must be finite")
    linsolver = linsolver or LinearSolver(cfg.linear_solver, cfg.rtol)
    disc = problem.disc
    t0 = time.perf_counter()
    applied = state.applied + du
    u, s = state.u.copy(), state.s.copy()
    H_n = state.H
    diag = StepDiagnostics(step=state.step + 1, applied=applied, iterations=0, residual=np.inf, converged=False)
    its0 = linsolver.iterations
    for i in range(1, cfg.n_stag + 1):
        H = update_history(positive_energy_at_points(disc, u), H_n)
        A, b = assemble_phasefield(disc, H, cfg.l0, cfg.eta, problem.bcs)
        r_s = float(np.linalg.norm(A @ s - b) / np.linalg.norm(b))
        try:
            s = linsolver.solve(A, b, key="s", x0=s)
            s_q = disc.scalar_values(s)
            r_u = elastic_residual(problem, u, s_q, applied, cfg.eta)
            u, nb = solve_elastic(problem, u, s_q, applied, cfg, linsolver)
        except LinearSolveError as exc:
            raise StepError(f"step {diag.step} (applied {applied:.6g} mm), staggered iteration {i}: {exc}") from exc
        diag.branch_iterations += nb
        diag.r_u.append(r_u)
        diag.r_s.append(r_s)
        diag.iterations = i
        diag.residual = max(r_u, r_s)
        if diag.residual < cfg.eps_stag:
            diag.converged = True
            break
    if not diag.converged:
        warnings.warn(f"step {diag.step}: staggered scheme not converged after {cfg.n_stag} iterations "
                      f"(residual {diag.residual:.2e}); state accepted")
    H = update_history(positive_energy_at_points(disc, u), H_n)
    diag.linear_iterations = linsolver.iterations - its0
    diag.wall = time.perf_counter() - t0
    new = FieldState(u, s, H, applied, state.step + 1)
    return new, diag


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    records: list
    diagnostics: list
    state: FieldState
    stage: int
    reason: str
    wall: float
    max_force: float = 0.0


def _record(problem: Problem, state: FieldState, cfg: StaggeredConfig):
    disc = problem.disc
    F = reaction_force(disc, state.u, state.s, problem.bc(problem.load_bc), state.applied, cfg.eta)
    strains = tuple(probe_strain(disc, state.u, p.center, p.radius) for p in problem.probes)
    return F, ForceStrainRecord(state.step, float(state.applied), float(F[problem.load_component]), strains)


def run_simulation(problem: Problem, schedule: LoadSchedule, cfg: StaggeredConfig, resume=None,
                   checkpoint_path=None, on_step=None) -> RunResult:
    """Run load steps until post-peak drop, target displacement or the step cap.

    ``resume`` is the tuple returned by :func:`load_checkpoint`; a
    checkpoint of a run that already finished (post-peak drop or target)
    is returned unchanged.  With ``checkpoint_path`` the state is saved
    after every accepted step, so an interrupted run can be resumed, and on
    a fatal step error the last accepted state is kept before the error
    propagates.

    Stage switches react to damage beyond any seeded crack: the drive uses
    ``H - H0`` and the phase indicator is ``1 - max(s_seed - s)``, where
    ``s_seed`` is the phase field of the initial history alone.  Without
    seeds these are the plain ``max 4 l0 H / Gc`` and ``min s``.
    """
    disc = problem.disc
    t0 = time.perf_counter()
    s_seed = seeded_phase(problem, cfg)
    linsolver = LinearSolver(cfg.linear_solver, cfg.rtol)
    if resume is not None:
        state, records, meta = resume
        stage = int(meta.get("stage", 0))
        max_force = float(meta.get("max_force", 0.0))
        diagnostics = []
        if meta.get("reason") in FINISHED:
            return RunResult(records, diagnostics, state, stage, meta["reason"], 0.0, max_force)
    else:
        state = FieldState.initial(disc, problem.H0)
        records, diagnostics, stage, max_force = [], [], 0, 0.0
    reason = "max_steps"
    tol = 1e-12 * schedule.target
    while True:
        if state.step >= schedule.max_steps:
            reason = "max_steps"
            break
        if state.applied >= schedule.target - tol:
            reason = "target"
            break
        du = min(schedule.increment(stage), schedule.target - state.applied)
        try:
            new, diag = staggered_step(problem, state, du, cfg, linsolver)
        except StepError:
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, state, records, {"stage": stage, "max_force": max_force, "fatal": True})
            raise
        s_q = disc.scalar_values(new.s)
        phys = disc.quad.physical
        diag.s_min = float(s_q[phys].min())
        diag.drive = damage_drive(disc, new.H, cfg.l0, problem.H0)
        s_ind = 1.0 - float(np.max(s_seed[phys] - s_q[phys]))
        F, rec = _record(problem, new, cfg)
        diag.force = tuple(float(x) for x in F)
        diag.stage = stage
        records.append(rec)
        diagnostics.append(diag)
        state = new
        fabs = abs(rec.force)
        max_force = max(max_force, fabs)
        log.info("step %d: u=%.5f mm F=%.6g N stag=%d res=%.1e s_min=%.4f stage=%d",
                 rec.step, rec.applied, rec.force, diag.iterations, diag.residual, diag.s_min, stage)
        if on_step is not None:
            on_step(state, diag, rec)
        stage = schedule.stage_for(stage, diag.drive, s_ind)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, state, records, {"stage": stage, "max_force": max_force})
        if max_force > 0 and fabs < schedule.drop_fraction * max_force:
            reason = "post_peak_drop"
            break
    result = RunResult(records, diagnostics, state, stage, reason, time.perf_counter() - t0, max_force)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, state, records, {"stage": stage, "max_force": max_force, "reason": reason})
    return result


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, state: FieldState, records, meta=None):
    """``.npz`` container: arrays ``u``, ``s``, ``H`` and a JSON ``header`` string."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "step": int(state.step),
        "applied": float(state.applied),
        "n_u": int(len(state.u)),
        "n_s": int(len(state.s)),
        "n_points": int(len(state.H)),
        "records": [asdict(r) for r in records],
        "meta": meta or {},
    }
    with open(path, "wb") as f:
        np.savez(f, u=state.u, s=state.s, H=state.H, header=np.array(json.dumps(header)))


def load_checkpoint(path):
    """Return ``(state, records, meta)``."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a checkpoint of format {CHECKPOINT_FORMAT}")
        state = FieldState(z["u"].copy(), z["s"].copy(), z["H"].copy(), header["applied"], header["step"])
    recs = [ForceStrainRecord(r["step"], r["applied"], r["force"], tuple(r["strains"])) for r in header["records"]]
    return state, recs, header.get("meta", {})
