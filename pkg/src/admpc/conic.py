"""Solver-agnostic conic problems: linear objective, affine maps into cones.

Problems are assembled from cvxpy affine expressions tagged with one of four
cones (zero, nonnegative orthant, second-order, PSD) and handed to an
interior-point backend (Clarabel by default). Quadratic objectives are lowered
to second-order-cone epigraphs by the callers via :meth:`ConicProblem.add_quad_epigraph`.
"""
from __future__ import annotations

import enum
import io
import time
import warnings
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from .errors import BuildError


class Cone(str, enum.Enum):
    ZERO = "zero"
    NONNEG = "nonneg"
    SOC = "soc"
    PSD = "psd"


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    NUMERICAL_TROUBLE = "NumericalTrouble"


@dataclass(frozen=True)
class ToleranceConfig:
    feas_tol: float = 1e-8
    gap_tol: float = 1e-8
    max_iter: int = 200
    solver: str = "CLARABEL"


@dataclass
class ConeConstraint:
    cone: Cone
    expr: object  # SOC: (t, x); others: a single cvxpy expression
    name: str = ""
    _cvx: object = field(default=None, repr=False)

    def value(self):
        if self.cone is Cone.SOC:
            t, x = self.expr
            return float(np.asarray(t.value).reshape(())), np.asarray(x.value, float).reshape(-1)
        return np.asarray(self.expr.value, float)

    def violation(self) -> float:
        """Distance-style violation of the current variable values (0 if inside the cone)."""
        if self.cone is Cone.SOC:
            t, x = self.value()
            return max(0.0, float(np.linalg.norm(x)) - t)
        v = self.value()
        if self.cone is Cone.ZERO:
            return float(np.max(np.abs(v))) if v.size else 0.0
        if self.cone is Cone.NONNEG:
            return float(max(0.0, -np.min(v))) if v.size else 0.0
        return max(0.0, -psd_residual(v))

    def scale(self) -> float:
        if self.cone is Cone.SOC:
            t, x = self.value()
            return 1.0 + max(abs(t), float(np.max(np.abs(x))) if x.size else 0.0)
        v = self.value()
        return 1.0 + (float(np.max(np.abs(v))) if v.size else 0.0)


def psd_residual(M, tol=None) -> float:
    """Smallest eigenvalue of the symmetric part of M."""
    M = np.asarray(M, float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise BuildError(f"psd_residual expects a square matrix, got shape {M.shape}")
    if M.size == 0:
        return 0.0
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])


def _as_expr(e):
    return e if isinstance(e, cp.Expression) else cp.Constant(np.asarray(e, float))


class ConicProblem:
    """A minimization problem over named cvxpy variables and tagged cone constraints."""

    def __init__(self, name: str = "", check_symmetry: bool = True):
        self.name = name
        self.variables: dict[str, cp.Variable] = {}
        self.parameters: dict[str, cp.Parameter] = {}
        self.constraints: list[ConeConstraint] = []
        self.objective = None
        self.check_symmetry = check_symmetry
        self._problem = None

    # -- construction ----------------------------------------------------------
    def var(self, name, shape=(), **kw) -> cp.Variable:
        if name in self.variables:
            raise BuildError(f"duplicate variable {name!r}")
        v = cp.Variable(shape, name=name, **kw)
        self.variables[name] = v
        self._problem = None
        return v

    def param(self, name, shape=(), value=None) -> cp.Parameter:
        if name in self.parameters:
            raise BuildError(f"duplicate parameter {name!r}")
        p = cp.Parameter(shape, name=name)
        if value is not None:
            p.value = np.asarray(value, float).reshape(shape)
        self.parameters[name] = p
        return p

    def add_zero(self, expr, name=""):
        expr = _as_expr(expr)
        self._check_affine(expr, name)
        self._push(ConeConstraint(Cone.ZERO, expr, name))

    def add_nonneg(self, expr, name=""):
        expr = _as_expr(expr)
        self._check_affine(expr, name)
        self._push(ConeConstraint(Cone.NONNEG, expr, name))

    def add_soc(self, t, x, name=""):
        """||x||_2 <= t."""
        t = _as_expr(t)
        x = _as_expr(x)
        if t.size != 1:
            raise BuildError(f"SOC {name!r}: t must be scalar")
        self._check_affine(t, name)
        self._check_affine(x, name)
        self._push(ConeConstraint(Cone.SOC, (cp.reshape(t, (), order="C"), cp.reshape(x, (x.size,), order="C")), name))

    def add_psd(self, M, name=""):
        M = _as_expr(M)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise BuildError(f"PSD block {name!r} is not square: {M.shape}")
        self._check_affine(M, name)
        if self.check_symmetry and not _is_symmetric(M):
            raise BuildError(f"PSD block {name!r} is not symmetric as an affine expression")
        self._push(ConeConstraint(Cone.PSD, M, name))

    def add_quad_epigraph(self, s, w, name=""):
        """w'w <= s, as the rotated cone ||(2w, s-1)|| <= s+1."""
        w = _as_expr(w)
        s = _as_expr(s)
        self.add_soc(s + 1, cp.hstack([2 * cp.reshape(w, (w.size,), order="C"), cp.reshape(s - 1, (1,), order="C")]), name)

    def minimize(self, expr):
        expr = _as_expr(expr)
        if expr.size != 1 or not expr.is_affine():
            raise BuildError("objective must be a scalar affine expression")
        self.objective = expr
        self._problem = None

    def _check_affine(self, expr, name):
        if not expr.is_affine():
            raise BuildError(f"constraint {name!r} is not affine in the decision variables")
        for v in expr.variables():
            if self.variables.get(v.name()) is not v:
                raise BuildError(f"constraint {name!r} references unknown variable {v.name()!r}")

    def _push(self, c: ConeConstraint):
        self.constraints.append(c)
        self._problem = None

    # -- inspection ---------------------------------------------------------------
    @property
    def n_vars(self) -> int:
        return int(sum(v.size for v in self.variables.values()))

    def count(self, cone: Cone) -> int:
        return sum(1 for c in self.constraints if c.cone is cone)

    def to_cvxpy(self) -> cp.Problem:
        if self._problem is None:
            if self.objective is None:
                raise BuildError("objective not set")
            cons = []
            for c in self.constraints:
                if c.cone is Cone.ZERO:
                    c._cvx = c.expr == 0
                elif c.cone is Cone.NONNEG:
                    c._cvx = c.expr >= 0
                elif c.cone is Cone.SOC:
                    c._cvx = cp.SOC(c.expr[0], c.expr[1])
                else:
                    c._cvx = cp.PSD(c.expr)
                cons.append(c._cvx)
            self._problem = cp.Problem(cp.Minimize(self.objective), cons)
        return self._problem

    def assign(self, values: dict):
        """Set variable values (by name) for residual checks at a given point."""
        for k, val in values.items():
            v = self.variables[k]
            v.value = np.asarray(val, float).reshape(v.shape)

    def max_violation(self, relative=False) -> float:
        worst = 0.0
        for c in self.constraints:
            v = c.violation()
            if relative:
                v = v / c.scale()
            worst = max(worst, v)
        return worst

    def violations(self) -> dict:
        return {c.name or f"c{k}": c.violation() for k, c in enumerate(self.constraints)}

    def dump(self, stream=None, solver="CLARABEL") -> str:
        """Write the canonical cone program as a header plus triplet lists.

        Format::

            # admpc conic dump <name>
            vars <N> rows <R>
            cones zero=<z> nonneg=<l> soc=<q1,q2,..> psd=<s1,s2,..>
            c <nnz>      then lines "i value"
            A <nnz>      then lines "i j value"
            b <nnz>      then lines "i value"

        Rows follow the backend's cone order; PSD cones are in scaled
        lower-triangular vectorization as produced by the backend.
        """
        data, _, _ = self.to_cvxpy().get_problem_data(solver)
        c = np.asarray(data["c"], float)
        A = data["A"].tocoo()
        b = np.asarray(data["b"], float)
        dims = data["dims"]
        out = io.StringIO()
        out.write(f"# admpc conic dump {self.name}\n")
        out.write(f"vars {c.size} rows {b.size}\n")
        soc = ",".join(str(int(q)) for q in dims.soc)
        psd = ",".join(str(int(s)) for s in dims.psd)
        out.write(f"cones zero={int(dims.zero)} nonneg={int(dims.nonneg)} soc={soc} psd={psd}\n")
        nz = np.flatnonzero(c)
        out.write(f"c {nz.size}\n")
        for i in nz:
            out.write(f"{i} {c[i]:.17g}\n")
        out.write(f"A {A.nnz}\n")
        for i, j, v in zip(A.row, A.col, A.data):
            out.write(f"{i} {j} {v:.17g}\n")
        nz = np.flatnonzero(b)
        out.write(f"b {nz.size}\n")
        for i in nz:
            out.write(f"{i} {b[i]:.17g}\n")
        text = out.getvalue()
        if stream is not None:
            stream.write(text)
        return text


def _is_symmetric(M, trials=2, seed=12345) -> bool:
    """Check M(v) == M(v)' for random values of the variables/parameters involved."""
    leaves = list(M.variables()) + list(M.parameters())
    if not leaves:
        v = np.asarray(M.value, float)
        return np.allclose(v, v.T, atol=1e-12, rtol=0)
    saved = [leaf.value for leaf in leaves]
    rng = np.random.default_rng(seed)
    ok = True
    try:
        for _ in range(trials):
            for leaf in leaves:
                val = rng.standard_normal(leaf.shape)
                if getattr(leaf, "attributes", {}).get("symmetric") or getattr(leaf, "attributes", {}).get("PSD"):
                    val = val @ val.T if leaf.attributes.get("PSD") else 0.5 * (val + val.T)
                elif getattr(leaf, "attributes", {}).get("nonneg"):
                    val = np.abs(val)
                leaf.value = val
            v = np.asarray(M.value, float)
            if not np.allclose(v, v.T, atol=1e-9 * (1 + np.max(np.abs(v))), rtol=0):
                ok = False
                break
    finally:
        for leaf, val in zip(leaves, saved):
            leaf.value = val
    return ok


@dataclass
class ConicSolution:
    status: Status
    values: dict
    objective: float
    primal_residual: float  # max relative cone violation
    max_violation: float  # max absolute cone violation
    duality_gap: float  # relative complementarity gap
    solve_time: float  # wall seconds, backend call only
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL

    def __getitem__(self, name):
        return self.values[name]


_STATUS_MAP = {
    cp.OPTIMAL: Status.OPTIMAL,
    cp.OPTIMAL_INACCURATE: Status.OPTIMAL,  # accepted only if the measured residuals pass
    cp.INFEASIBLE: Status.INFEASIBLE,
    cp.INFEASIBLE_INACCURATE: Status.INFEASIBLE,
    cp.UNBOUNDED: Status.UNBOUNDED,
    cp.UNBOUNDED_INACCURATE: Status.UNBOUNDED,
}


def _solver_opts(tol: ToleranceConfig, tighten: float = 0.1) -> dict:
    if tol.solver == "CLARABEL":
        return dict(
            tol_feas=tol.feas_tol * tighten,
            tol_gap_abs=tol.gap_tol * tighten,
            tol_gap_rel=tol.gap_tol * tighten,
            max_iter=tol.max_iter,
        )
    if tol.solver == "SCS":
        return dict(eps_abs=tol.feas_tol, eps_rel=tol.feas_tol, max_iters=100 * tol.max_iter)
    return {}


def _complementarity(problem: ConicProblem) -> float:
    total = 0.0
    for c in problem.constraints:
        if c.cone is Cone.ZERO or c._cvx is None:
            continue
        y = c._cvx.dual_value
        if y is None:
            continue
        if c.cone is Cone.SOC:
            t, x = c.value()
            yt = np.asarray(y[0], float).reshape(-1)[0] if isinstance(y, (list, tuple)) else float(np.ravel(y)[0])
            yx = np.asarray(y[1], float).reshape(-1) if isinstance(y, (list, tuple)) else np.ravel(y)[1:]
            total += t * yt + float(x @ yx)
        else:
            total += float(np.sum(c.value() * np.asarray(y, float)))
    return total


# (tolerance tightening, equilibration) tried in order while the result is
# NumericalTrouble.  Clarabel's equilibration occasionally stalls on the
# degenerate Riccati-boundary LMIs of slow plants; the unscaled retry fixes it.
_ATTEMPTS = ((0.1, True), (0.01, True), (0.1, False))


def solve(p: ConicProblem, tol: ToleranceConfig | None = None) -> ConicSolution:
    """Solve with the configured backend and return a status-tagged solution.

    A result whose measured residuals miss the tolerances is re-solved with
    tighter backend tolerances, then without backend equilibration, before it
    is reported as NumericalTrouble.  Among troubled attempts the one with the
    smallest measured residual is returned.  Numerical trouble is a status,
    never an exception.  The result is deterministic for identical problems
    and settings.
    """
    tol = tol or ToleranceConfig()
    best, elapsed = None, 0.0
    for tighten, equilibrate in _ATTEMPTS:
        sol = _solve_once(p, tol, tighten, equilibrate)
        elapsed += sol.solve_time
        if best is None or sol.primal_residual < best.primal_residual:
            best = sol
        if sol.status is not Status.NUMERICAL_TROUBLE:
            best = sol
            break
        if tol.solver != "CLARABEL":
            break
    best.solve_time = elapsed
    return best


def _solve_once(
    p: ConicProblem, tol: ToleranceConfig, tighten: float, equilibrate: bool = True
) -> ConicSolution:
    prob = p.to_cvxpy()
    opts = _solver_opts(tol, tighten)
    if not equilibrate and tol.solver == "CLARABEL":
        opts["equilibrate_enable"] = False
    t0 = time.perf_counter()
    try:
        with warnings.catch_warnings():
            # the residual/gap checks below decide acceptance, not cvxpy's accuracy flag
            warnings.simplefilter("ignore", UserWarning)
            # no warm start: deterministic runs, and a cached Clarabel instance
            # rejects the equilibration change of the retry ladder
            prob.solve(solver=tol.solver, warm_start=False, **opts)
        raw = prob.status
    except cp.error.SolverError:
        raw = "solver_error"
    elapsed = time.perf_counter() - t0
    status = _STATUS_MAP.get(raw, Status.NUMERICAL_TROUBLE)
    if status is not Status.OPTIMAL:
        return ConicSolution(status, {}, float("nan"), float("inf"), float("inf"), float("inf"), elapsed)
    values = {k: np.array(v.value, dtype=float) for k, v in p.variables.items()}
    obj = float(np.asarray(p.objective.value).reshape(()))
    rel = p.max_violation(relative=True)
    gap = abs(_complementarity(p)) / (1.0 + abs(obj))
    iters = int(getattr(prob.solver_stats, "num_iters", 0) or 0)
    if rel > tol.feas_tol or gap > tol.gap_tol:
        status = Status.NUMERICAL_TROUBLE
    return ConicSolution(status, values, obj, rel, p.max_violation(), gap, elapsed, iters)
