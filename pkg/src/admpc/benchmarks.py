"""Benchmark systems and comparison campaigns.

Two families: the two-state coupled example (one unstable mode, two scalar
subsystems) and chains of masses linked by springs and dampers. Chains are
predicted with a forward-Euler model, which keeps the neighbor structure,
and simulated with the exact zero-order-hold model.
"""
from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import mpc
from .conic import ToleranceConfig
from .errors import AdmpcError, BuildError, StepInfeasible
from .model import (
    CoupledSystem,
    CtsLtiSystem,
    LtiSystem,
    Partition,
    decompose,
    euler_discretize,
    validate_system,
    zoh_discretize,
)


def _box(n):
    return np.vstack([np.eye(n), -np.eye(n)])


def illustrative_system() -> tuple[LtiSystem, Partition]:
    """Two scalar subsystems, x1 unstable (a = 5), coupled both ways."""
    A = np.array([[5.0, 0.1], [0.3, 0.9]])
    sys = LtiSystem(
        A=A,
        B=np.eye(2),
        G=_box(2),
        g=np.full(4, 5.0),
        H=_box(2),
        h=np.ones(4),
        Q=np.eye(2),
        R=0.1 * np.eye(2),
    )
    part = Partition(states=((0,), (1,)), inputs=((0,), (1,)), neighbors=((0, 1), (0, 1)))
    return validate_system(sys), part


def grid_x0(sys: LtiSystem, k: int = 21) -> np.ndarray:
    """k x k grid over the state box of a two-state system, row-major in (x1, x2)."""
    if sys.n != 2:
        raise BuildError("grid_x0 is defined for two-state systems")
    lo = -sys.g[2:]
    hi = sys.g[:2]
    g1 = np.linspace(lo[0], hi[0], k)
    g2 = np.linspace(lo[1], hi[1], k)
    return np.array([[a, b] for a in g1 for b in g2])


# -- spring-mass-damper chains ------------------------------------------------------


@dataclass(frozen=True)
class SmdChainSpec:
    M: int = 3
    mass_range: tuple = (5.0, 10.0)
    spring_range: tuple = (0.8, 1.2)
    damper_range: tuple = (0.8, 1.2)
    input_range: tuple = (2.0, 4.0)
    pos_bound: float = 2.0
    vel_bound: float = 5.0
    x0_intervals: tuple = ((-2.0, -1.8), (1.8, 2.0))
    dt: float = 0.1
    q: float = 1.0
    r: float = 0.1

    def __post_init__(self):
        if self.M < 2:
            raise BuildError("a chain needs at least two masses")


@dataclass(frozen=True, eq=False)
class SmdChain:
    """One drawn chain: parameters, models, partition and initial state."""

    spec: SmdChainSpec
    masses: np.ndarray
    springs: np.ndarray  # per link (i, i+1)
    dampers: np.ndarray
    u_c: np.ndarray  # per mass
    x0: np.ndarray
    cts: CtsLtiSystem
    partition: Partition

    def prediction_model(self) -> LtiSystem:
        return euler_discretize(self.cts, self.spec.dt)

    def simulation_model(self) -> LtiSystem:
        return zoh_discretize(self.cts, self.spec.dt)

    def energy(self, x) -> float:
        """Kinetic plus spring potential energy of state x."""
        x = np.asarray(x, float)
        p, v = x[0::2], x[1::2]
        return float(0.5 * np.sum(self.masses * v**2) + 0.5 * np.sum(self.springs * np.diff(p) ** 2))


def _chain_matrices(masses, springs, dampers):
    M = masses.size
    Ac = np.zeros((2 * M, 2 * M))
    Bc = np.zeros((2 * M, M))
    for i in range(M):
        Ac[2 * i, 2 * i + 1] = 1.0
        Bc[2 * i + 1, i] = 1.0 / masses[i]
    for l in range(M - 1):
        i, j = l, l + 1
        for a, b in ((i, j), (j, i)):
            Ac[2 * a + 1, 2 * a] -= springs[l] / masses[a]
            Ac[2 * a + 1, 2 * b] += springs[l] / masses[a]
            Ac[2 * a + 1, 2 * a + 1] -= dampers[l] / masses[a]
            Ac[2 * a + 1, 2 * b + 1] += dampers[l] / masses[a]
    return Ac, Bc


def smd_instance(spec: SmdChainSpec, seed: int) -> SmdChain:
    """Draw a chain and its initial state; identical (spec, seed) give identical chains."""
    rng = np.random.default_rng(seed)
    M = spec.M
    masses = rng.uniform(*spec.mass_range, M)
    springs = rng.uniform(*spec.spring_range, M - 1)
    dampers = rng.uniform(*spec.damper_range, M - 1)
    u_c = rng.uniform(*spec.input_range, M)
    side = rng.integers(0, len(spec.x0_intervals), M)
    pos = np.array([rng.uniform(*spec.x0_intervals[s]) for s in side])
    x0 = np.zeros(2 * M)
    x0[0::2] = pos
    Ac, Bc = _chain_matrices(masses, springs, dampers)
    n = 2 * M
    lim = np.tile([spec.pos_bound, spec.vel_bound], M)
    cts = CtsLtiSystem(
        A_c=Ac,
        B_c=Bc,
        G=_box(n),
        g=np.concatenate([lim, lim]),
        H=_box(M),
        h=np.concatenate([u_c, u_c]),
        Q=spec.q * np.eye(n),
        R=spec.r * np.eye(M),
    )
    part = Partition(
        states=tuple((2 * i, 2 * i + 1) for i in range(M)),
        inputs=tuple((i,) for i in range(M)),
        neighbors=tuple(tuple(j for j in (i - 1, i, i + 1) if 0 <= j < M) for i in range(M)),
    )
    return SmdChain(spec, masses, springs, dampers, u_c, x0, cts, part)


def smd_chain(spec: SmdChainSpec, seed: int) -> tuple[CtsLtiSystem, Partition]:
    c = smd_instance(spec, seed)
    return c.cts, c.partition


# -- comparison campaigns -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Trial:
    """One closed-loop experiment: prediction model, plant and initial state."""

    index: int
    seed: int
    cs: CoupledSystem
    sim: LtiSystem
    x0: np.ndarray


def illustrative_trials(k: int = 21) -> list:
    sys, part = illustrative_system()
    cs = decompose(sys, part)
    return [Trial(i, 0, cs, sys, x0) for i, x0 in enumerate(grid_x0(sys, k))]


def trial_seeds(seed: int, n_trials: int) -> list:
    """Independent per-trial seeds derived from one campaign seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_trials)]


def smd_trials(spec: SmdChainSpec, n_trials: int, seed: int, matched: bool = False) -> list:
    """Random chains; ``matched`` simulates with the (Euler) prediction model itself."""
    out = []
    for k, s in enumerate(trial_seeds(seed, n_trials)):
        c = smd_instance(spec, s)
        pred = validate_system(c.prediction_model())
        sim = pred if matched else c.simulation_model()
        out.append(Trial(k, s, decompose(pred, c.partition), sim, c.x0))
    return out


@dataclass
class RunResult:
    trial: int
    variant: str
    cost: float
    steps: int
    converged: bool
    infeasible_at: int | None
    mean_solve_ms: float
    state_utilization: float  # max over applied steps t >= 1 of max_r (G x_t)_r / g_r
    error: str = ""
    trace: mpc.RhTrace | None = None

    @property
    def feasible(self) -> bool:
        return self.infeasible_at is None and not self.error


@dataclass
class ComparisonReport:
    variants: list
    T: int
    results: list = field(default_factory=list)

    def runs(self, variant) -> list:
        v = mpc.parse_variant(variant).value
        return [r for r in self.results if r.variant == v]

    def trials(self) -> list:
        return sorted({r.trial for r in self.results})

    def cost_table(self) -> dict:
        """trial -> {variant: cost or nan when infeasible}."""
        tab = {}
        for r in self.results:
            tab.setdefault(r.trial, {})[r.variant] = r.cost if r.feasible else np.nan
        return tab

    def suboptimality(self, variant, reference="C_Max") -> np.ndarray:
        """Per-trial (J - J_ref) / J_ref over trials where both are feasible and J_ref > 0."""
        v, ref = mpc.parse_variant(variant).value, mpc.parse_variant(reference).value
        out = []
        for tr, row in sorted(self.cost_table().items()):
            if v in row and ref in row and np.isfinite(row[v]) and np.isfinite(row[ref]) and row[ref] > 0:
                out.append((row[v] - row[ref]) / row[ref])
        return np.array(out)

    def mean_cost(self, variant) -> float:
        c = [r.cost for r in self.runs(variant) if r.feasible]
        return float(np.mean(c)) if c else np.nan

    def mean_solve_ms(self, variant) -> float:
        c = [r.mean_solve_ms for r in self.runs(variant) if r.steps]
        return float(np.mean(c)) if c else np.nan

    def infeasible_count(self, variant) -> int:
        return sum(1 for r in self.runs(variant) if not r.feasible)

    def binding_fraction(self, variant, tol=1e-6) -> float:
        """Share of feasible runs whose state constraints become active after t = 0."""
        rs = [r for r in self.runs(variant) if r.feasible]
        return float(np.mean([r.state_utilization >= 1 - tol for r in rs])) if rs else np.nan

    def summary_rows(self) -> list:
        rows = []
        for v in self.variants:
            name = mpc.parse_variant(v).value
            sub = self.suboptimality(name) if name != "C_Max" else np.zeros(0)
            rows.append(
                {
                    "variant": name,
                    "trials": len(self.runs(name)),
                    "infeasible": self.infeasible_count(name),
                    "mean_cost": self.mean_cost(name),
                    "mean_suboptimality": float(np.mean(sub)) if sub.size else (0.0 if name == "C_Max" else np.nan),
                    "mean_solve_ms": self.mean_solve_ms(name),
                    "binding_fraction": self.binding_fraction(name),
                }
            )
        return rows

    def to_csv(self, stream, header: str | None = None, timing: bool = True) -> None:
        """One row per (trial, variant).

        ``timing=False`` drops the wall-clock column so that repeated runs
        with the same seed produce identical bytes.
        """
        if header:
            stream.write(header.rstrip("\n") + "\n")
        w = csv.writer(stream, lineterminator="\n")
        cols = ["trial", "variant", "cost", "steps", "converged", "infeasible_at", "mean_solve_ms",
                "state_utilization", "error"]
        if not timing:
            cols.remove("mean_solve_ms")
        w.writerow(cols)
        for r in sorted(self.results, key=lambda r: (r.trial, r.variant)):
            row = [r.trial, r.variant, f"{r.cost:.12g}", r.steps, int(r.converged),
                   "" if r.infeasible_at is None else r.infeasible_at,
                   f"{r.mean_solve_ms:.3f}", f"{r.state_utilization:.9g}", r.error]
            if not timing:
                del row[6]
            w.writerow(row)

    def format_table(self) -> str:
        out = io.StringIO()
        out.write(f"{'variant':<11} {'trials':>6} {'infeas':>6} {'mean cost':>12} {'subopt':>9} {'solve ms':>9}\n")
        for row in self.summary_rows():
            out.write(
                f"{row['variant']:<11} {row['trials']:>6} {row['infeasible']:>6} {row['mean_cost']:>12.5g} "
                f"{row['mean_suboptimality']:>9.4f} {row['mean_solve_ms']:>9.2f}\n"
            )
        return out.getvalue()


def _state_utilization(trace: mpc.RhTrace, sys: LtiSystem) -> float:
    X = trace.X[1:]
    if X.size == 0 or sys.G.shape[0] == 0:
        return 0.0
    return float(np.max((X @ sys.G.T) / sys.g[None, :]))


def run_trial(trial: Trial, variants, T, conv_tol=1e-3, max_steps=300, tol=None, keep_trace=False) -> list:
    """Run every variant on one trial; infeasible baselines are recorded, not raised."""
    tol = tol or ToleranceConfig()
    out = []
    central = design = None
    for v in variants:
        v = mpc.parse_variant(v)
        try:
            if v.centralized:
                from .lmi import synthesize_centralized

                central = central or synthesize_centralized(trial.cs.system, tol)
            else:
                from .lmi import build_design_phase

                design = design or build_design_phase(trial.cs, tol)
            form = mpc.formulate(trial.cs, v, T, tol, central=central, design=design)
            tr = mpc.receding_horizon(trial.sim, form, trial.x0, conv_tol, max_steps)
            res = RunResult(
                trial.index, v.value, mpc.closed_loop_cost(tr), tr.steps, tr.converged, None,
                float(np.mean(tr.solve_ms)) if tr.steps else 0.0, _state_utilization(tr, trial.cs.system),
            )
        except StepInfeasible as e:
            tr = e.trace
            res = RunResult(
                trial.index, v.value, mpc.closed_loop_cost(tr), tr.steps, False, e.t,
                float(np.mean(tr.solve_ms)) if tr.steps else 0.0, _state_utilization(tr, trial.cs.system),
            )
        except AdmpcError as e:
            tr = None
            res = RunResult(trial.index, v.value, np.nan, 0, False, None, 0.0, 0.0, error=f"{type(e).__name__}: {e}")
        if keep_trace:
            res.trace = tr
        out.append(res)
    return out


def _run_trial_args(args):
    return run_trial(*args)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("ADMPC_THREADS", "1")))
    except ValueError:
        return 1


def run_comparison(
    trials, variants, T, conv_tol=1e-3, max_steps=300, tol=None, keep_traces=False, workers=None
) -> ComparisonReport:
    """Run all variants on all trials and collect a report.

    Trials are independent; with ``workers > 1`` they run in worker
    processes (capped by ``ADMPC_THREADS`` by default). Results are
    reduced in trial order, so the report does not depend on scheduling.
    """
    variants = [mpc.parse_variant(v) for v in variants]
    if not variants:
        raise BuildError("at least one variant is required")
    workers = default_workers() if workers is None else max(1, int(workers))
    jobs = [(tr, variants, T, conv_tol, max_steps, tol, keep_traces) for tr in trials]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            chunks = list(ex.map(_run_trial_args, jobs))
    else:
        chunks = [_run_trial_args(j) for j in jobs]
    rep = ComparisonReport([v.value for v in variants], int(T))
    for c in chunks:
        rep.results.extend(c)
    return rep


def trajectory_error(report: ComparisonReport, a="D_Adaptive", b="C_Max") -> np.ndarray:
    """Max-abs state difference between two variants per trial and step (nan-padded).

    Returns an array (trials, steps); after a run converges its final state
    is held, so the error of two converged runs tends to their final gap.
    """
    ta = {r.trial: r.trace for r in report.runs(a) if r.trace is not None and r.feasible}
    tb = {r.trial: r.trace for r in report.runs(b) if r.trace is not None and r.feasible}
    keys = sorted(set(ta) & set(tb))
    if not keys:
        return np.zeros((0, 0))
    L = max(max(len(ta[k].records), len(tb[k].records)) for k in keys)
    err = np.full((len(keys), L), np.nan)
    for r, k in enumerate(keys):
        Xa, Xb = _pad(ta[k].X, L), _pad(tb[k].X, L)
        err[r] = np.max(np.abs(Xa - Xb), axis=1)
    return err


def _pad(X, L):
    if X.shape[0] >= L:
        return X[:L]
    return np.vstack([X, np.repeat(X[-1:], L - X.shape[0], axis=0)])
