"""Finite-horizon MPC problems and receding-horizon simulation.

Five variants share one builder:

``C_Max``      centralized value function, maximal invariant polytope;
``C_Ellip``    centralized value function, largest invariant sublevel set;
``D_Fixed``    separable value function, fixed decoupled ellipsoids;
``D_Adaptive`` separable value function, ellipsoid levels and terminal gains
               re-optimized at every step through conditions C1-C6;
``D_Ad0``      the adaptive problem solved once at t = 0, then frozen.

The initial state enters as a cvxpy parameter so that a program is compiled
once and re-solved along a closed-loop run.
"""
from __future__ import annotations

import csv
import enum
import json
import time
from dataclasses import dataclass, field, replace

import cvxpy as cp
import numpy as np

from . import lmi
from .conic import Cone, ConicProblem, Status, ToleranceConfig, solve
from .errors import BuildError, DimensionMismatch, StepInfeasible
from .model import CoupledSystem, LtiSystem
from .terminal_sets import PolyhedralSet, closed_loop_constraints, gilbert_tan, max_ellipsoid


class Variant(str, enum.Enum):
    C_MAX = "C_Max"
    C_ELLIP = "C_Ellip"
    D_FIXED = "D_Fixed"
    D_ADAPTIVE = "D_Adaptive"
    D_AD0 = "D_Ad0"

    @property
    def centralized(self) -> bool:
        return self in (Variant.C_MAX, Variant.C_ELLIP)


def parse_variant(name) -> Variant:
    if isinstance(name, Variant):
        return name
    for v in Variant:
        if v.value.lower() == str(name).lower():
            return v
    raise BuildError(f"unknown variant {name!r}; expected one of {[v.value for v in Variant]}")


@dataclass(frozen=True, eq=False)
class MpcFormulation:
    """A variant, a horizon and the terminal ingredients it needs."""

    variant: Variant
    T: int
    cs: CoupledSystem
    central: lmi.CentralizedTerminal | None = None
    polytope: PolyhedralSet | None = None
    alpha_c: float | None = None
    design: lmi.DistributedTerminalDesign | None = None
    alpha_fixed: np.ndarray | None = None
    K_fixed: tuple | None = None
    tol: ToleranceConfig = field(default_factory=ToleranceConfig)
    decrease: str = "tangent"  # "tangent" (sound) or "paper" (C4/C5 as printed)
    scp_iters: int = 8

    def __post_init__(self):
        object.__setattr__(self, "variant", parse_variant(self.variant))
        if self.decrease not in ("tangent", "paper"):
            raise BuildError(f"decrease must be 'tangent' or 'paper', got {self.decrease!r}")
        if int(self.T) < 1:
            raise BuildError(f"horizon must be >= 1, got {self.T}")
        v = self.variant
        need = {
            Variant.C_MAX: ("central", "polytope"),
            Variant.C_ELLIP: ("central", "alpha_c"),
            Variant.D_FIXED: ("design", "alpha_fixed", "K_fixed"),
            Variant.D_ADAPTIVE: ("design",),
            Variant.D_AD0: ("design",),
        }[v]
        missing = [k for k in need if getattr(self, k) is None]
        if missing:
            raise BuildError(f"{v.value} formulation is missing {missing}")

    @property
    def system(self) -> LtiSystem:
        return self.cs.system

    @property
    def frozen(self) -> bool:
        """True for D_Ad0 once its levels and gains are fixed."""
        return self.variant is Variant.D_AD0 and self.alpha_fixed is not None


def formulate(
    cs: CoupledSystem,
    variant,
    T: int,
    tol: ToleranceConfig | None = None,
    *,
    central: lmi.CentralizedTerminal | None = None,
    design: lmi.DistributedTerminalDesign | None = None,
    polytope: PolyhedralSet | None = None,
    decrease: str = "tangent",
) -> MpcFormulation:
    """Compute whatever terminal ingredients ``variant`` needs and wrap them up."""
    variant = parse_variant(variant)
    tol = tol or ToleranceConfig()
    kw = {}
    if variant.centralized:
        central = central or lmi.synthesize_centralized(cs.system, tol)
        kw["central"] = central
        if variant is Variant.C_MAX:
            if polytope is None:
                A_K = cs.system.A + cs.system.B @ central.K
                polytope = gilbert_tan(A_K, *closed_loop_constraints(cs.system, central.K))
            kw["polytope"] = polytope
        else:
            kw["alpha_c"] = max_ellipsoid(central.P, central.K, cs.system)
    else:
        design = design or lmi.build_design_phase(cs, tol)
        kw["design"] = design
        if variant is Variant.D_FIXED:
            alpha, gains = fixed_levels(cs, design, tol, decrease)
            kw["alpha_fixed"], kw["K_fixed"] = alpha, tuple(gains)
    return MpcFormulation(variant, int(T), cs, tol=tol, decrease=decrease, **kw)


# Offline level design only needs a feasible point; a solve whose duality gap
# stalls above the online tolerance is still usable (levels a bit below the max).
OFFLINE_ACCEPT = (1e-8, 1e-5)  # (relative residual, duality gap)


def _offline_ok(sol) -> bool:
    feas, gap = OFFLINE_ACCEPT
    if sol.ok:
        return True
    return sol.status is Status.NUMERICAL_TROUBLE and sol.primal_residual <= feas and sol.duality_gap <= gap


def fixed_levels(cs: CoupledSystem, design, tol: ToleranceConfig | None = None, decrease: str = "tangent"):
    """Offline decoupled levels: maximize sum_i beta_i subject to C1-C5.

    With the tangent decrease condition the levels are found by sequential
    convex programming from the paper-form optimum. Returns (alpha, gains)
    with alpha_i = beta_i^2. Solves that stall with a small duality gap are
    accepted (see ``OFFLINE_ACCEPT``).
    """
    p = ConicProblem("fixed-levels")
    v = lmi.add_adaptive_variables(p, cs)
    lmi.add_blocks(p, lmi.terminal_blocks(cs, design, v))
    p.minimize(-cp.sum(v.beta))
    sol = solve(p, tol)
    if not _offline_ok(sol):
        raise BuildError(f"fixed-level design failed: {sol.status.value}")
    if decrease == "tangent":
        q = ConicProblem("fixed-levels-tangent")
        bh = q.param("beta_hat", (cs.M,))
        bh2 = q.param("beta_hat_sq", (cs.M,))
        w = lmi.add_adaptive_variables(q, cs)
        lmi.add_blocks(q, lmi.terminal_blocks(cs, design, w, beta_hat=bh, beta_hat_sq=bh2))
        q.minimize(-cp.sum(w.beta))
        sol, _ = _scp(q, bh, bh2, np.maximum(sol["beta"], 1e-6), tol, iters=30, accept=_offline_ok)
        if not _offline_ok(sol):
            raise BuildError("fixed-level design failed under the tangent decrease condition")
    tv = lmi.AdaptiveTerminalVars.from_values(cs, sol.values)
    return tv.alpha, lmi.recover_gains(cs, design, tv)


def _scp(p, bh, bh2, start, tol, iters=8, halvings=6, step_tol=1e-5, accept=None):
    """Re-linearize the tangent condition at the last beta until it settles.

    The first feasible linearization point is found by halving ``start``.
    Every later solve stays feasible because the tangent is exact at the
    point it was taken. Returns ``(solution, beta_hat)``: the best optimal
    solution with its linearization point, or the last failure and None.
    ``solution.iterations`` counts backend calls and ``solve_time`` sums them.
    ``accept`` overrides the test for a usable solve (default: Optimal).
    """
    accept = accept or (lambda r: r.ok)
    beta_hat = np.asarray(start, float)
    best, best_hat, last, calls, spent = None, None, None, 0, 0.0
    for _ in range(halvings + 1):
        bh.value, bh2.value = beta_hat, beta_hat**2
        last = solve(p, tol)
        calls += 1
        spent += last.solve_time
        if accept(last):
            best, best_hat = last, beta_hat
            break
        beta_hat = 0.5 * beta_hat
    if best is None:
        last.iterations, last.solve_time = calls, spent
        return last, None
    for _ in range(iters - 1):
        nxt = np.maximum(best["beta"], 0.0)
        if np.max(np.abs(nxt - best_hat)) <= step_tol * (1.0 + np.max(np.abs(best_hat))):
            break
        bh.value, bh2.value = nxt, nxt**2
        cand = solve(p, tol)
        calls += 1
        spent += cand.solve_time
        if not accept(cand) or cand.objective > best.objective + 1e-9 * (1 + abs(best.objective)):
            break
        best, best_hat = cand, nxt
    bh.value, bh2.value = best_hat, best_hat**2
    best.iterations, best.solve_time = calls, spent
    return best, best_hat


def fix_alpha(form: MpcFormulation, sol: "MpcSolution") -> MpcFormulation:
    """Freeze the levels and gains of a solved adaptive problem (D_Ad0)."""
    if form.variant not in (Variant.D_ADAPTIVE, Variant.D_AD0) or sol.tv is None:
        raise BuildError("fix_alpha needs a solved D_Adaptive problem")
    return replace(form, variant=Variant.D_AD0, alpha_fixed=np.array(sol.alpha), K_fixed=tuple(sol.gains))


def extract_gains(cs: CoupledSystem, design, tv, gain_tol=1e-7) -> list:
    """K_Ni = Y_Ni B(beta)^-1, falling back to the reference gains where beta is ~0."""
    return lmi.recover_gains(cs, design, tv, gain_tol)


@dataclass
class MpcSolution:
    status: Status
    X: np.ndarray | None  # (T+1, n)
    U: np.ndarray | None  # (T, m)
    objective: float  # cost recomputed from X, U (nan when not solved)
    solver_objective: float
    solve_time: float
    alpha: np.ndarray | None = None
    gains: list | None = None
    tv: lmi.AdaptiveTerminalVars | None = None
    values: dict | None = None
    iterations: int = 1  # backend calls spent on this solution
    beta_hat: np.ndarray | None = None  # tangent linearization point, if any

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL


def _chol_upper(P):
    """L with L'L = P."""
    return np.linalg.cholesky(0.5 * (P + P.T)).T


class MpcProgram(ConicProblem):
    """The finite-horizon problem of one formulation, parametrized by x0."""

    def __init__(self, form: MpcFormulation):
        super().__init__(f"mpc-{form.variant.value}-T{form.T}")
        self.form = form
        self.adaptive = form.variant in (Variant.D_ADAPTIVE, Variant.D_AD0) and not form.frozen
        self.tangent = self.adaptive and form.decrease == "tangent"
        self._seed_program = None
        sys = form.system
        n, m, T = sys.n, sys.m, form.T
        self.x0 = self.param("x0", (n,), np.zeros(n))
        X = self.X = self.var("X", (T + 1, n))
        U = self.U = self.var("U", (T, m))
        self.add_zero(X[0] - self.x0, "initial")
        self.add_zero(X[1:] - X[:-1] @ sys.A.T - U @ sys.B.T, "dynamics")
        if T > 1 and sys.G.shape[0]:
            self.add_nonneg(sys.g[None, :] - X[1:T] @ sys.G.T, "state")
        if sys.H.shape[0]:
            self.add_nonneg(sys.h[None, :] - U @ sys.H.T, "input")
        self.P_term = self._terminal_cost_matrix()
        self._add_terminal()
        Lq = lmi.thin_factor(sys.Q)
        Lr = lmi.sqrt_psd(sys.R)
        Lp = lmi.thin_factor(self.P_term)
        w = cp.hstack(
            [
                cp.reshape(X[:T] @ Lq.T, (T * Lq.shape[0],), order="C"),
                cp.reshape(U @ Lr.T, (T * m,), order="C"),
                Lp @ X[T],
            ]
        )
        s = self.var("cost")
        self.add_quad_epigraph(s, w, "objective")
        self.minimize(s)

    def _terminal_cost_matrix(self):
        f = self.form
        if f.variant.centralized:
            return f.central.P
        return f.design.P_global(f.cs)

    def _add_terminal(self):
        f = self.form
        xT = self.X[f.T]
        if f.variant is Variant.C_MAX:
            self.add_nonneg(f.polytope.b - f.polytope.A @ xT, "terminal-polytope")
        elif f.variant is Variant.C_ELLIP:
            self.add_soc(np.sqrt(f.alpha_c), _chol_upper(f.central.P) @ xT, "terminal-ellipsoid")
        elif f.variant is Variant.D_FIXED or f.frozen:
            for view in f.cs.views:
                i = view.index
                beta_i = float(np.sqrt(max(f.alpha_fixed[i], 0.0)))
                self.add_soc(beta_i, _chol_upper(f.design.Z[i]) @ xT[view.state_idx], f"terminal[{i}]")
        else:
            self.tv = lmi.add_adaptive_variables(self, f.cs)
            if self.tangent:
                M = f.cs.M
                self.beta_hat = self.param("beta_hat", (M,), np.ones(M))
                self.beta_hat_sq = self.param("beta_hat_sq", (M,), np.ones(M))
                blocks = lmi.terminal_blocks(
                    f.cs, f.design, self.tv, x_T=xT, beta_hat=self.beta_hat, beta_hat_sq=self.beta_hat_sq
                )
            else:
                blocks = lmi.terminal_blocks(f.cs, f.design, self.tv, x_T=xT)
            lmi.add_blocks(self, blocks)

    # -- evaluation --------------------------------------------------------------
    def cost(self, X, U) -> float:
        """sum_t l(x_t, u_t) + x_T' P x_T for a given trajectory."""
        sys = self.form.system
        X = np.asarray(X, float)
        U = np.asarray(U, float)
        stage = np.einsum("ti,ij,tj->", X[:-1], sys.Q, X[:-1]) + np.einsum("ti,ij,tj->", U, sys.R, U)
        return float(stage + X[-1] @ self.P_term @ X[-1])

    def terminal_gain(self, sol: MpcSolution) -> np.ndarray:
        """Global gain used to extend a solution by one step."""
        f = self.form
        if f.variant.centralized:
            return f.central.K
        gains = f.K_fixed if (f.variant is Variant.D_FIXED or f.frozen) else sol.gains
        return f.cs.gain_from_local(gains)

    def solve(self, x0, tol: ToleranceConfig | None = None, beta_hat=None, fallback: bool = True) -> MpcSolution:
        """Solve for initial state ``x0``.

        Adaptive programs with the tangent decrease condition linearize at
        ``beta_hat`` when given (one backend call; a receding-horizon loop
        passes the previous step's levels). Without it, or when that call
        fails and ``fallback`` is set, a short sequential convex iteration
        seeded by the paper-form levels at ``x0`` is run.
        """
        f = self.form
        tol = tol or f.tol
        x0 = np.asarray(x0, float).reshape(-1)
        if x0.size != f.system.n:
            raise DimensionMismatch(f"x0 has {x0.size} entries, expected {f.system.n}")
        self.x0.value = x0
        if not self.tangent:
            res = solve(self, tol)
            res.iterations = 1
            return self._package(res, None)
        spent = 0.0
        if beta_hat is not None:
            hat = np.asarray(beta_hat, float)
            self.beta_hat.value, self.beta_hat_sq.value = hat, hat**2
            res = solve(self, tol)
            res.iterations = 1
            if res.ok or not fallback:
                return self._package(res, hat)
            spent = res.solve_time
        res, hat = _scp(self, self.beta_hat, self.beta_hat_sq, self._seed_levels(x0, tol), tol, f.scp_iters)
        if not res.ok and fallback:
            # the tangent is exact at the offline fixed levels, so any x0 that
            # D_Fixed accepts is feasible from this seed
            fixed = self._fixed_levels(tol)
            if fixed is not None:
                spent += res.solve_time
                res, hat = _scp(self, self.beta_hat, self.beta_hat_sq, fixed, tol, f.scp_iters, halvings=0)
        res.solve_time += spent
        return self._package(res, hat)

    def _fixed_levels(self, tol):
        """beta of the offline D_Fixed design (computed once, None if it fails)."""
        if not hasattr(self, "_fixed_beta"):
            f = self.form
            try:
                alpha, _ = fixed_levels(f.cs, f.design, tol, f.decrease)
                self._fixed_beta = np.sqrt(np.maximum(alpha, 0.0))
            except BuildError:
                self._fixed_beta = None
        return self._fixed_beta

    def _seed_levels(self, x0, tol):
        """Starting levels for the tangent iteration: the paper-form optimum at x0."""
        f = self.form
        if self._seed_program is None:
            self._seed_program = MpcProgram(replace(f, decrease="paper"))
        seed = self._seed_program.solve(x0, tol)
        if seed.ok:
            return np.maximum(np.sqrt(seed.alpha), 1e-6)
        # no paper-form solution: start from the current block levels of x0
        return np.array(
            [max(np.sqrt(x0[v.state_idx] @ f.design.Z[v.index] @ x0[v.state_idx]), 1e-3) for v in f.cs.views]
        )

    def _package(self, res, hat) -> MpcSolution:
        f = self.form
        if not res.ok:
            return MpcSolution(res.status, None, None, np.nan, np.nan, res.solve_time, iterations=res.iterations)
        X, U = res["X"], res["U"]
        sol = MpcSolution(
            res.status, X, U, self.cost(X, U), res.objective, res.solve_time,
            values=res.values, iterations=res.iterations, beta_hat=hat,
        )
        if self.adaptive:
            tv = lmi.AdaptiveTerminalVars.from_values(f.cs, res.values)
            sol.tv = tv
            sol.alpha = tv.alpha
            sol.gains = lmi.recover_gains(f.cs, f.design, tv)
        elif f.variant is Variant.D_FIXED or f.frozen:
            sol.alpha = np.asarray(f.alpha_fixed, float)
            sol.gains = list(f.K_fixed)
        return sol

    def tail_candidate(self, sol: MpcSolution):
        """Shifted solution extended by the terminal gain: (X', U')."""
        K = self.terminal_gain(sol)
        xT = sol.X[-1]
        uT = K @ xT
        X = np.vstack([sol.X[1:], self.form.system.A @ xT + self.form.system.B @ uT])
        U = np.vstack([sol.U[1:], uT[None, :]])
        return X, U

    def tail_violation(self, sol: MpcSolution) -> tuple[float, float]:
        """Worst constraint violation and cost of the tail candidate in the next problem.

        The candidate keeps every terminal variable of ``sol`` and starts at
        the predicted successor x_1. Parameter and variable values of the
        program are overwritten.
        """
        X, U = self.tail_candidate(sol)
        vals = dict(sol.values)
        vals["X"], vals["U"] = X, U
        J = self.cost(X, U)
        vals["cost"] = J
        saved = [(p, p.value) for p in self.parameters.values()]
        self.x0.value = sol.X[1]
        if self.tangent:
            # the next step linearizes at the levels of this solution
            hat = np.maximum(sol.tv.beta, 0.0)
            self.beta_hat.value, self.beta_hat_sq.value = hat, hat**2
        self.assign({k: v for k, v in vals.items() if k in self.variables})
        viol = self.max_violation()
        for p, val in saved:
            p.value = val
        return viol, J


def build(form: MpcFormulation, x0=None) -> MpcProgram:
    """Assemble the conic program of ``form``; ``x0`` only sets the initial parameter value."""
    prog = MpcProgram(form)
    if x0 is not None:
        x0 = np.asarray(x0, float).reshape(-1)
        if x0.size != form.system.n:
            raise DimensionMismatch(f"x0 has {x0.size} entries, expected {form.system.n}")
        prog.x0.value = x0
    return prog


# -- receding horizon -------------------------------------------------------------


@dataclass
class StepRecord:
    t: int
    x: np.ndarray
    u: np.ndarray
    stage_cost: float
    J_star: float
    alpha: np.ndarray | None
    status: str
    solve_ms: float
    tail_violation: float = np.nan
    tail_cost: float = np.nan


@dataclass
class RhTrace:
    """Closed-loop log; the last record of a converged run is the final state."""

    variant: str
    n: int
    m: int
    M: int
    records: list = field(default_factory=list)
    converged: bool = False
    infeasible_at: int | None = None

    @property
    def steps(self) -> int:
        """Number of control steps applied."""
        return sum(1 for r in self.records if r.status != "converged")

    @property
    def X(self) -> np.ndarray:
        return np.array([r.x for r in self.records]).reshape(-1, self.n)

    @property
    def U(self) -> np.ndarray:
        return np.array([r.u for r in self.records]).reshape(-1, self.m)

    @property
    def J_star(self) -> np.ndarray:
        return np.array([r.J_star for r in self.records if r.status != "converged"])

    @property
    def stage_costs(self) -> np.ndarray:
        return np.array([r.stage_cost for r in self.records])

    @property
    def solve_ms(self) -> np.ndarray:
        return np.array([r.solve_ms for r in self.records if r.status != "converged"])

    def summary(self) -> dict:
        return {
            "variant": self.variant,
            "cost": closed_loop_cost(self),
            "steps": self.steps,
            "converged": self.converged,
            "infeasible": self.infeasible_at is not None,
            "infeasible_at": self.infeasible_at,
            "mean_solve_ms": float(np.mean(self.solve_ms)) if self.steps else 0.0,
        }

    def to_csv(self, path_or_stream, header: str | None = None) -> None:
        own = isinstance(path_or_stream, str)
        f = open(path_or_stream, "w", newline="") if own else path_or_stream
        try:
            if header:
                f.write(header.rstrip("\n") + "\n")
            w = csv.writer(f)
            w.writerow(
                ["t"]
                + [f"x_{k + 1}" for k in range(self.n)]
                + [f"u_{k + 1}" for k in range(self.m)]
                + ["stage_cost", "J_star"]
                + [f"alpha_{k + 1}" for k in range(self.M)]
                + ["status", "solve_ms"]
            )
            for r in self.records:
                alpha = list(r.alpha) if r.alpha is not None else [""] * self.M
                w.writerow(
                    [r.t]
                    + [_fmt(v) for v in r.x]
                    + [_fmt(v) for v in r.u]
                    + [_fmt(r.stage_cost), _fmt(r.J_star)]
                    + [_fmt(a) if a != "" else "" for a in alpha]
                    + [r.status, f"{r.solve_ms:.3f}"]
                )
        finally:
            if own:
                f.close()

    def summary_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.summary(), f, indent=1)


def _fmt(v) -> str:
    return f"{float(v):.12g}"


def closed_loop_cost(trace: RhTrace) -> float:
    """Sum of applied stage costs until convergence (or abort)."""
    return float(sum(r.stage_cost for r in trace.records))


def receding_horizon(
    sim_model: LtiSystem,
    form: MpcFormulation,
    x0,
    conv_tol: float = 1e-3,
    max_steps: int = 300,
    check_tail: bool = False,
    program: MpcProgram | None = None,
) -> RhTrace:
    """Closed loop: solve, apply u_0 to ``sim_model``, repeat until ||x||_inf <= conv_tol.

    Predictions use ``form.system``; the plant steps with ``sim_model``, so
    the two may differ (e.g. Euler prediction, zero-order-hold plant). A
    D_Ad0 formulation without frozen levels solves the adaptive problem at
    the first step and freezes its levels and gains for the rest of the run.

    Raises
    ------
    StepInfeasible
        When a step has no solution; ``err.trace`` holds the partial log.
    """
    if sim_model.n != form.system.n or sim_model.m != form.system.m:
        raise DimensionMismatch("simulation and prediction models differ in dimension")
    pred = form.system
    x = np.asarray(x0, float).reshape(-1).copy()
    trace = RhTrace(form.variant.value, pred.n, pred.m, form.cs.M)
    pending_freeze = form.variant is Variant.D_AD0 and not form.frozen
    if pending_freeze:
        prog = build(replace(form, variant=Variant.D_ADAPTIVE))
    else:
        prog = program or build(form)
    beta_prev = None
    for t in range(max_steps + 1):
        if np.max(np.abs(x)) <= conv_tol:
            trace.records.append(
                StepRecord(t, x.copy(), np.zeros(pred.m), 0.0, np.nan, None, "converged", 0.0)
            )
            trace.converged = True
            return trace
        if t == max_steps:
            break
        wall = time.perf_counter()
        sol = prog.solve(x, beta_hat=beta_prev)
        ms = 1e3 * (time.perf_counter() - wall)
        if not sol.ok:
            trace.infeasible_at = t
            raise StepInfeasible(t, sol.status.value, trace)
        u = sol.U[0]
        rec = StepRecord(
            t, x.copy(), u.copy(), pred.stage_cost(x, u), sol.objective,
            None if sol.alpha is None else np.array(sol.alpha), sol.status.value, ms,
        )
        if check_tail:
            rec.tail_violation, rec.tail_cost = prog.tail_violation(sol)
        trace.records.append(rec)
        if sol.tv is not None:
            beta_prev = np.maximum(sol.tv.beta, 0.0)
        if pending_freeze:
            prog = build(fix_alpha(form, sol))
            pending_freeze = False
        x = sim_model.step(x, u)
    return trace
