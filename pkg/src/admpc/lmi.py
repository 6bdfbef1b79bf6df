"""Matrix inequalities for terminal ingredients.

Centralized synthesis (Lyapunov decrease for one gain K_c and a dense P_c),
the structured design phase (block-diagonal P, neighbor-sparse gains), and the
online conditions C1-C6 on the adaptive terminal variables.

All online conditions are written in the square-root level beta_i, so that
the adaptive terminal set of subsystem i is {x_i : x_i' Z_i x_i <= beta_i^2}.
Every builder works on cvxpy expressions or plain arrays; with arrays the
returned blocks are constants whose ``.value`` can be inspected directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import cvxpy as cp
import numpy as np
import scipy.linalg

from . import _kernels
from .conic import Cone, ConicProblem, Status, ToleranceConfig, psd_residual, solve
from .errors import (
    BuildError,
    IllConditionedDesign,
    StructuredSynthesisInfeasible,
    SynthesisInfeasible,
)
from .model import CoupledSystem, LtiSystem, SubsystemView

COND_LIMIT = 1e10


class Block(NamedTuple):
    cone: Cone
    expr: object
    name: str


def sqrt_psd(M) -> np.ndarray:
    """Symmetric square root of a PSD matrix."""
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def thin_factor(M, tol=1e-12) -> np.ndarray:
    """L with L'L = M and full row rank (rows = numerical rank of M)."""
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    keep = w > tol * max(1.0, w.max(initial=0.0))
    return (V[:, keep] * np.sqrt(w[keep])).T


def _is_expr(*xs):
    return any(isinstance(x, cp.Expression) for x in xs)


def _bmat(rows):
    flat = [b for r in rows for b in r]
    if _is_expr(*flat):
        return cp.bmat([[b if isinstance(b, cp.Expression) else cp.Constant(np.atleast_2d(b)) for b in r] for r in rows])
    return np.block(rows)


def _diag(v):
    return cp.diag(v) if isinstance(v, cp.Expression) else np.diag(np.asarray(v, float))


def _col(x, k):
    """k-th entry of a vector as a 1x1 block."""
    if isinstance(x, cp.Expression):
        return cp.reshape(x[k], (1, 1), order="C")
    return np.array([[float(np.asarray(x).reshape(-1)[k])]])


def _sum(terms, shape):
    acc = None
    for t in terms:
        acc = t if acc is None else acc + t
    return np.zeros(shape) if acc is None else acc


# -- centralized synthesis -----------------------------------------------------


@dataclass(frozen=True)
class CentralizedTerminal:
    P: np.ndarray
    K: np.ndarray

    def decrease_residual(self, sys: LtiSystem) -> float:
        """lambda_min of P - (A+BK)'P(A+BK) - Q - K'RK (>= 0 means decrease holds)."""
        Acl = sys.A + sys.B @ self.K
        D = self.P - Acl.T @ self.P @ Acl - sys.Q - self.K.T @ sys.R @ self.K
        return psd_residual(D)


def _synthesis_lmi(A, B, Q, R, E, Y):
    n, m = B.shape
    Lq = thin_factor(Q)
    Lr = sqrt_psd(R)
    rq = Lq.shape[0]
    AE = A @ E + B @ Y
    return _bmat(
        [
            [E, AE.T, E @ Lq.T, Y.T @ Lr],
            [AE, E, np.zeros((n, rq)), np.zeros((n, m))],
            [Lq @ E, np.zeros((rq, n)), np.eye(rq), np.zeros((rq, m))],
            [Lr @ Y, np.zeros((m, n)), np.zeros((m, rq)), np.eye(m)],
        ]
    )


def build_theorem1_synthesis(sys: LtiSystem) -> ConicProblem:
    """Lyapunov-decrease synthesis over E = P^-1, Y = K E, minimizing trace(P).

    [[E, (AE+BY)', EQ^.5, Y'R^.5], [AE+BY, E, 0, 0], [Q^.5 E, 0, I, 0],
    [R^.5 Y, 0, 0, I]] >= 0 and [[S, I], [I, E]] >= 0 with objective trace(S).
    """
    n, m = sys.n, sys.m
    p = ConicProblem("centralized-synthesis")
    E = p.var("E", (n, n), symmetric=True)
    Y = p.var("Y", (m, n))
    S = p.var("S", (n, n), symmetric=True)
    p.add_psd(_synthesis_lmi(sys.A, sys.B, sys.Q, sys.R, E, Y), "lyapunov")
    p.add_psd(cp.bmat([[S, np.eye(n)], [np.eye(n), E]]), "trace-epigraph")
    p.minimize(cp.trace(S))
    return p


def _recover(E, Y):
    E = 0.5 * (E + E.T)
    if np.linalg.eigvalsh(E).min() <= 0:
        raise SynthesisInfeasible("synthesis returned a non-positive-definite E")
    if np.linalg.cond(E) > COND_LIMIT:
        raise IllConditionedDesign(f"cond(E) = {np.linalg.cond(E):.3g}")
    P = np.linalg.inv(E)
    P = 0.5 * (P + P.T)
    return P, Y @ P


def synthesize_centralized(
    sys: LtiSystem, tol: ToleranceConfig | None = None, polish: bool = True
) -> CentralizedTerminal:
    """Solve the synthesis LMI and recover P_c = E^-1, K_c = Y E^-1.

    With ``polish`` the returned P_c is the exact closed-loop value matrix of
    K_c (a discrete Lyapunov equation), which removes the solver's last few
    digits of slack from the decrease inequality. The interior-point P_c is
    an upper bound on it up to solver tolerance. If the solver fails
    outright, ``polish`` falls back to the DARE solution, which is the same
    trace-minimal point.
    """
    sol = solve(build_theorem1_synthesis(sys), tol)
    if _usable(sol, polish):
        P, K = _recover(sol["E"], sol["Y"])
    elif polish:
        # the trace-minimal point of the LMI set is the stabilizing DARE solution,
        # so the Riccati iteration recovers it when the interior point fails outright
        P, K = dare_fixed_point(sys)
        if np.max(np.abs(np.linalg.eigvals(sys.A + sys.B @ K))) >= 1.0:
            raise SynthesisInfeasible(f"centralized synthesis failed: {sol.status.value}")
    else:
        raise SynthesisInfeasible(f"centralized synthesis failed: {sol.status.value}")
    if polish:
        P = closed_loop_value(sys.A + sys.B @ K, sys.Q + K.T @ sys.R @ K)
    return CentralizedTerminal(P, K)


REPAIR_TOL = 1e-4
DESIGN_MARGIN = 1e-2  # relative strict-decrease margin of the design phase, see build_design_phase


def _usable(sol, repair: bool) -> bool:
    """Optimal, or (when an exact repair follows) a near-feasible interior-point stop.

    Trace-minimal syntheses sit on the Riccati boundary, where interior
    point methods stall a few digits short of 1e-8 on slow plants. Their
    iterates are still accurate enough for the exact repairs applied by the
    callers.
    """
    if sol.status is Status.OPTIMAL:
        return True
    return repair and sol.status is Status.NUMERICAL_TROUBLE and sol.primal_residual <= REPAIR_TOL


def closed_loop_value(Acl, W, fallback=None):
    """Solution of P = Acl' P Acl + W, or ``fallback`` when Acl is not Schur."""
    if np.max(np.abs(np.linalg.eigvals(Acl))) >= 1.0:
        if fallback is None:
            raise SynthesisInfeasible("closed loop is not Schur stable")
        return fallback
    P = scipy.linalg.solve_discrete_lyapunov(Acl.T, W)
    return 0.5 * (P + P.T)


def dare_fixed_point(sys: LtiSystem, max_iter=100000, tol=1e-13):
    """DARE solution by value iteration from P = Q, plus its LQR gain."""
    P, _ = _kernels.riccati_iterate(sys.A, sys.B, sys.Q, sys.R, max_iter, tol)
    K = -np.linalg.solve(sys.R + sys.B.T @ P @ sys.B, sys.B.T @ P @ sys.A)
    return P, K


# -- structured design phase -----------------------------------------------------


@dataclass(frozen=True, eq=False)
class DistributedTerminalDesign:
    """Offline products: value-function blocks P_i, set shapes Z_i, reference gains."""

    P: tuple
    Z: tuple
    K_ref: tuple
    P_inv: tuple = field(init=False)
    Z_inv: tuple = field(init=False)

    def __post_init__(self):
        for name, mats in (("P", self.P), ("Z", self.Z)):
            for i, M in enumerate(mats):
                w = np.linalg.eigvalsh(M)
                if w.min() <= 0:
                    raise IllConditionedDesign(f"{name}_{i} is not positive definite")
                if w.max() / w.min() > COND_LIMIT:
                    raise IllConditionedDesign(f"cond({name}_{i}) = {w.max() / w.min():.3g}")
        object.__setattr__(self, "P_inv", tuple(_spd_inverse(P) for P in self.P))
        object.__setattr__(self, "Z_inv", tuple(_spd_inverse(Z) for Z in self.Z))

    @property
    def M(self):
        return len(self.P)

    def P_global(self, cs: CoupledSystem) -> np.ndarray:
        return cs.block_diag_from_local(self.P)

    def P_ii(self, view: SubsystemView) -> np.ndarray:
        """W_Ni U_i' P_i U_i W_Ni' : P_i placed at the own block in neighbor coordinates."""
        out = np.zeros((view.n_N, view.n_N))
        s = view.own_slice
        out[s, s] = self.P[view.index]
        return out

    def Z_ij(self, view: SubsystemView, j: int) -> np.ndarray:
        out = np.zeros((view.n_N, view.n_N))
        s = view.nbr_slices[j]
        out[s, s] = self.Z[j]
        return out

    def with_identity_shapes(self) -> "DistributedTerminalDesign":
        return DistributedTerminalDesign(self.P, tuple(np.eye(P.shape[0]) for P in self.P), self.K_ref)


def _spd_inverse(M):
    L = np.linalg.cholesky(M)
    Li = np.linalg.inv(L)
    inv = Li.T @ Li
    return 0.5 * (inv + inv.T)


def build_design_problem(cs: CoupledSystem) -> ConicProblem:
    """Synthesis LMI restricted to block-diagonal E and neighbor-sparse Y."""
    sys = cs.system
    n, m = sys.n, sys.m
    p = ConicProblem("design-phase")
    E_blocks = [p.var(f"E{i}", (v.n_i, v.n_i), symmetric=True) for i, v in enumerate(cs.views)]
    Y_blocks = [p.var(f"Y{i}", (v.m_i, v.n_N)) for i, v in enumerate(cs.views)]
    S = p.var("S", (n, n), symmetric=True)
    E = _sum((cs.U[i].T @ E_blocks[i] @ cs.U[i] for i in range(cs.M)), (n, n))
    Y = _sum((cs.V[i].T @ Y_blocks[i] @ cs.W[i] for i in range(cs.M)), (m, n))
    p.add_psd(_synthesis_lmi(sys.A, sys.B, sys.Q, sys.R, E, Y), "structured-lyapunov")
    p.add_psd(cp.bmat([[S, np.eye(n)], [np.eye(n), E]]), "trace-epigraph")
    p.minimize(cp.trace(S))
    return p


def build_design_phase(
    cs: CoupledSystem,
    tol: ToleranceConfig | None = None,
    shapes: str = "P",
    decrease_margin: float = DESIGN_MARGIN,
) -> DistributedTerminalDesign:
    """Offline design: P_i = E_i^-1, K_ref = Y E^-1 restricted to neighbors, Z_i = P_i.

    The trace-minimal P_d sits on the boundary of the decrease inequality, so
    the online decrease blocks would have an empty interior around K_ref.  The
    returned P_d is scaled by ``1 + decrease_margin``, which turns the decrease
    with K_ref into a strict one (by ``decrease_margin * lambda_min(Q + K'RK)``).
    ``shapes="identity"`` sets Z_i = I instead of Z_i = P_i.
    """
    sol = solve(build_design_problem(cs), tol)
    if not _usable(sol, True):
        raise StructuredSynthesisInfeasible(
            f"block-diagonal terminal synthesis failed: {sol.status.value}"
        )
    P_blocks, K_ref = [], []
    E_inv = []
    for i, v in enumerate(cs.views):
        Ei = 0.5 * (sol[f"E{i}"] + sol[f"E{i}"].T)
        if np.linalg.eigvalsh(Ei).min() <= 0:
            raise StructuredSynthesisInfeasible(f"E_{i} is not positive definite")
        E_inv.append(_spd_inverse(Ei))
    for i, v in enumerate(cs.views):
        Einv_N = np.zeros((v.n_N, v.n_N))
        for j, s in v.nbr_slices.items():
            Einv_N[s, s] = E_inv[j]
        K_ref.append(sol[f"Y{i}"] @ Einv_N)
        P_blocks.append(E_inv[i])
    if decrease_margin < 0:
        raise ValueError("decrease_margin must be nonnegative")
    c = _decrease_scale(cs, P_blocks, K_ref) * (1.0 + decrease_margin)
    P_blocks = [c * P for P in P_blocks]
    Z = P_blocks if shapes == "P" else [np.eye(P.shape[0]) for P in P_blocks]
    return DistributedTerminalDesign(tuple(P_blocks), tuple(Z), tuple(K_ref))


def structured_decrease_residual(cs: CoupledSystem, P_blocks, K_ref) -> float:
    """lambda_min of P_d - A_K' P_d A_K - Q - K' R K for block-diagonal P_d and K = K_ref."""
    sys = cs.system
    P = cs.block_diag_from_local(P_blocks)
    K = cs.gain_from_local(K_ref)
    Acl = sys.A + sys.B @ K
    return psd_residual(P - Acl.T @ P @ Acl - sys.Q - K.T @ sys.R @ K)


def _decrease_scale(cs: CoupledSystem, P_blocks, K_ref, margin=1e-9) -> float:
    """Smallest c >= 1 such that c P_d satisfies the decrease with K_ref exactly.

    If P_d - A_K' P_d A_K = W + D with W = Q + K'RK and lambda_min(D) = -eps,
    then c (W + D) - W >= 0 whenever c >= w / (w - eps), w = lambda_min(W).
    """
    sys = cs.system
    eps = -structured_decrease_residual(cs, P_blocks, K_ref)
    if eps <= 0:
        return 1.0
    K = cs.gain_from_local(K_ref)
    w = psd_residual(sys.Q + K.T @ sys.R @ K)
    if eps >= w:
        raise StructuredSynthesisInfeasible(
            f"structured decrease violated by {eps:.3g}, beyond what scaling can repair"
        )
    return (1.0 + margin) * w / (w - eps)


# -- adaptive terminal variables -------------------------------------------------


@dataclass
class AdaptiveTerminalVars:
    """Numeric adaptive terminal block: beta_i = alpha_i^(1/2), Y_Ni, H_Ni and multipliers."""

    beta: np.ndarray
    Y: list
    H: list
    lam: list  # per i: (|N_i|,)
    tau: list  # per i: (n_g_i, |N_i|)
    rho: list  # per i: (n_h_i, |N_i|)

    @property
    def alpha(self) -> np.ndarray:
        return np.asarray(self.beta, float) ** 2

    @classmethod
    def zeros(cls, cs: CoupledSystem) -> "AdaptiveTerminalVars":
        return cls(
            beta=np.zeros(cs.M),
            Y=[np.zeros((v.m_i, v.n_N)) for v in cs.views],
            H=[np.zeros((v.n_N, v.n_N)) for v in cs.views],
            lam=[np.zeros(len(v.neighbors)) for v in cs.views],
            tau=[np.zeros((v.n_g, len(v.neighbors))) for v in cs.views],
            rho=[np.zeros((v.n_h, len(v.neighbors))) for v in cs.views],
        )

    def as_values(self) -> dict:
        """Flatten into the variable names used by :func:`add_adaptive_variables`."""
        out = {"beta": np.asarray(self.beta, float)}
        for i in range(len(self.Y)):
            out[f"Yt{i}"] = self.Y[i]
            out[f"Ht{i}"] = self.H[i]
            out[f"lam{i}"] = self.lam[i]
            if self.tau[i].size:
                out[f"tau{i}"] = self.tau[i]
            if self.rho[i].size:
                out[f"rho{i}"] = self.rho[i]
        return out

    @classmethod
    def from_values(cls, cs: CoupledSystem, values: dict) -> "AdaptiveTerminalVars":
        get = lambda k, shape: np.asarray(values[k], float).reshape(shape) if k in values else np.zeros(shape)
        return cls(
            beta=np.asarray(values["beta"], float).reshape(cs.M),
            Y=[get(f"Yt{i}", (v.m_i, v.n_N)) for i, v in enumerate(cs.views)],
            H=[_symm(get(f"Ht{i}", (v.n_N, v.n_N))) for i, v in enumerate(cs.views)],
            lam=[get(f"lam{i}", (len(v.neighbors),)) for i, v in enumerate(cs.views)],
            tau=[get(f"tau{i}", (v.n_g, len(v.neighbors))) for i, v in enumerate(cs.views)],
            rho=[get(f"rho{i}", (v.n_h, len(v.neighbors))) for i, v in enumerate(cs.views)],
        )


def _symm(M):
    return 0.5 * (M + M.T)


@dataclass
class SymbolicAdaptiveVars:
    beta: object
    Y: list
    H: list
    lam: list
    tau: list
    rho: list


def add_adaptive_variables(p: ConicProblem, cs: CoupledSystem, prefix: str = "") -> SymbolicAdaptiveVars:
    """Declare beta, Y_Ni, H_Ni, lambda, tau, rho with their sign constraints."""
    beta = p.var(prefix + "beta", (cs.M,))
    p.add_nonneg(beta, prefix + "beta>=0")
    Y, H, lam, tau, rho = [], [], [], [], []
    for i, v in enumerate(cs.views):
        k = len(v.neighbors)
        Y.append(p.var(f"{prefix}Yt{i}", (v.m_i, v.n_N)))
        H.append(p.var(f"{prefix}Ht{i}", (v.n_N, v.n_N), symmetric=True))
        lam.append(p.var(f"{prefix}lam{i}", (k,)))
        p.add_nonneg(lam[-1], f"{prefix}lam{i}>=0")
        if v.n_g:
            tau.append(p.var(f"{prefix}tau{i}", (v.n_g, k)))
            p.add_nonneg(tau[-1], f"{prefix}tau{i}>=0")
        else:
            tau.append(np.zeros((0, k)))
        if v.n_h:
            rho.append(p.var(f"{prefix}rho{i}", (v.n_h, k)))
            p.add_nonneg(rho[-1], f"{prefix}rho{i}>=0")
        else:
            rho.append(np.zeros((0, k)))
    return SymbolicAdaptiveVars(beta, Y, H, lam, tau, rho)


def neighbor_scaling(view: SubsystemView, beta):
    """B(beta) = blockdiag_{j in N_i} beta_j I_{n_j}, i.e. alpha_Ni^(1/2)."""
    M = len(beta) if not isinstance(beta, cp.Expression) else beta.shape[0]
    D = np.zeros((view.n_N, M))
    for j, s in view.nbr_slices.items():
        D[s, j] = 1.0
    return _diag(D @ beta)


def _beta_i(beta, i):
    return beta[i]


def _multiplier_sum(design, view, mult):
    """sum_j mult_j Z_ij for a length-|N_i| multiplier vector."""
    return _sum((mult[k] * design.Z_ij(view, j) for k, j in enumerate(view.neighbors)), (view.n_N, view.n_N))


def build_c1(view: SubsystemView, design: DistributedTerminalDesign, v) -> list:
    """Invariance of subsystem i's set under the neighbor-scaled terminal gain.

    [[Z_i^-1 beta_i, A_Ni B(beta) + B_i Y_Ni], [., sum_j lambda_ij Z_ij]] >= 0,
    sum_j lambda_ij <= beta_i.
    """
    i = view.index
    _check_shapes(view, v)
    b_i = _beta_i(v.beta, i)
    Mx = view.A_N @ neighbor_scaling(view, v.beta) + view.B @ v.Y[i]
    S = _multiplier_sum(design, view, v.lam[i])
    blk = _bmat([[design.Z_inv[i] * b_i, Mx], [Mx.T, S]])
    return [
        Block(Cone.PSD, blk, f"C1[{i}]"),
        Block(Cone.NONNEG, b_i - (cp.sum(v.lam[i]) if _is_expr(v.lam[i]) else float(np.sum(v.lam[i]))), f"C1sum[{i}]"),
    ]


def build_c2(view: SubsystemView, design: DistributedTerminalDesign, v, row: int) -> list:
    """State-constraint row `row` holds on the neighbor terminal sets."""
    i = view.index
    G = view.G_N[row : row + 1]
    g = float(view.g_N[row])
    tau = v.tau[i][row]
    Gb = G @ neighbor_scaling(view, v.beta)
    blk = _bmat([[np.array([[g]]), Gb], [Gb.T, _multiplier_sum(design, view, tau)]])
    tot = cp.sum(tau) if _is_expr(tau) else float(np.sum(tau))
    return [Block(Cone.PSD, blk, f"C2[{i},{row}]"), Block(Cone.NONNEG, g - tot, f"C2sum[{i},{row}]")]


def build_c3(view: SubsystemView, design: DistributedTerminalDesign, v, row: int) -> list:
    """Input-constraint row `row` holds for the terminal gain on the neighbor sets."""
    i = view.index
    Hrow = view.H[row : row + 1]
    h = float(view.h[row])
    rho = v.rho[i][row]
    HY = Hrow @ v.Y[i]
    blk = _bmat([[np.array([[h]]), HY], [HY.T, _multiplier_sum(design, view, rho)]])
    tot = cp.sum(rho) if _is_expr(rho) else float(np.sum(rho))
    return [Block(Cone.PSD, blk, f"C3[{i},{row}]"), Block(Cone.NONNEG, h - tot, f"C3sum[{i},{row}]")]


def build_c4(view: SubsystemView, design: DistributedTerminalDesign, v) -> list:
    """Relaxed local decrease of V_i with coupling slack H_Ni.

    Uses a thin factor L of Q_Ni (L'L = Q_Ni) in place of Q_Ni^(1/2); the
    Schur complement is the same.
    """
    i = view.index
    _check_shapes(view, v)
    b_i = _beta_i(v.beta, i)
    Bb = neighbor_scaling(view, v.beta)
    Y = v.Y[i]
    Lq = thin_factor(view.Q_N)
    Lr = sqrt_psd(view.R)
    ni, nN, mi, rq = view.n_i, view.n_N, view.m_i, Lq.shape[0]
    Mx = view.A_N @ Bb + view.B @ Y
    blk = _bmat(
        [
            [design.P_inv[i] * b_i, Mx, np.zeros((ni, rq)), np.zeros((ni, mi))],
            [Mx.T, design.P_ii(view) * b_i + v.H[i], Bb @ Lq.T, Y.T @ Lr],
            [np.zeros((rq, ni)), Lq @ Bb, np.eye(rq) * b_i, np.zeros((rq, mi))],
            [np.zeros((mi, ni)), Lr @ Y, np.zeros((mi, rq)), np.eye(mi) * b_i],
        ]
    )
    return [Block(Cone.PSD, blk, f"C4[{i}]")]


def build_c4_tangent(view: SubsystemView, design: DistributedTerminalDesign, v, beta_hat, beta_hat_sq=None) -> list:
    """Sound replacement for C4 when levels differ across subsystems.

    C4 times beta_i reads F_i' F_i <= beta_i^2 P_ii + Ht_i with
    F_i = [P_i^.5 (A_Ni B(beta) + B_i Y_Ni); L_q B(beta); R_i^.5 Y_Ni] and
    Ht_i = beta_i H_Ni. Summing over i, C5 on the Ht_i then certifies the
    summed decrease exactly. The only non-convex term, beta_i^2, is replaced
    by its tangent 2 beta_hat_i beta_i - beta_hat_i^2 <= beta_i^2, which
    gives an inner (sound) approximation that is exact at beta_i = beta_hat_i.
    ``beta_hat`` may be an array or a cvxpy parameter; passing its square
    as a separate parameter ``beta_hat_sq`` keeps the block DPP-compliant.
    """
    i = view.index
    _check_shapes(view, v)
    b_i = _beta_i(v.beta, i)
    bh = beta_hat[i]
    Bb = neighbor_scaling(view, v.beta)
    Y = v.Y[i]
    Lp = thin_factor(design.P[i])
    Lq = thin_factor(view.Q_N)
    Lr = sqrt_psd(view.R)
    F_rows = [Lp @ (view.A_N @ Bb + view.B @ Y), Lq @ Bb, Lr @ Y]
    F = _vstack(F_rows)
    k = sum(r.shape[0] for r in F_rows)
    bh_sq = bh**2 if beta_hat_sq is None else beta_hat_sq[i]
    level = 2 * bh * b_i - bh_sq
    blk = _bmat([[np.eye(k), F], [_T(F), design.P_ii(view) * level + v.H[i]]])
    return [Block(Cone.PSD, blk, f"C4t[{i}]")]


def _vstack(rows):
    return cp.vstack(rows) if _is_expr(*rows) else np.vstack(rows)


def _T(M):
    return M.T


def build_c5(cs: CoupledSystem, v) -> list:
    """Global coupling: -sum_i W_Ni' H_Ni W_Ni >= 0."""
    total = _sum((cs.W[i].T @ v.H[i] @ cs.W[i] for i in range(cs.M)), (cs.n, cs.n))
    return [Block(Cone.PSD, -total, "C5")]


def build_c6(x_iT, design: DistributedTerminalDesign, i: int, beta_i) -> list:
    """x_iT' Z_i x_iT <= beta_i^2 as [[beta_i Z_i^-1, x_iT], [x_iT', beta_i]] >= 0."""
    Zi_inv = design.Z_inv[i]
    ni = Zi_inv.shape[0]
    if isinstance(x_iT, cp.Expression):
        xc = cp.reshape(x_iT, (ni, 1), order="C")
    else:
        xc = np.asarray(x_iT, float).reshape(ni, 1)
    bb = beta_i if not isinstance(beta_i, cp.Expression) else cp.reshape(beta_i, (1, 1), order="C")
    corner = np.array([[float(bb)]]) if not isinstance(bb, cp.Expression) else bb
    blk = _bmat([[Zi_inv * beta_i, xc], [xc.T, corner]])
    return [Block(Cone.PSD, blk, f"C6[{i}]")]


def _check_shapes(view, v):
    i = view.index
    Y = v.Y[i]
    if tuple(Y.shape) != (view.m_i, view.n_N):
        raise BuildError(f"Y_N{i} has shape {Y.shape}, expected {(view.m_i, view.n_N)}")
    H = v.H[i]
    if tuple(H.shape) != (view.n_N, view.n_N):
        raise BuildError(f"H_N{i} has shape {H.shape}, expected {(view.n_N, view.n_N)}")


def terminal_blocks(
    cs: CoupledSystem, design: DistributedTerminalDesign, v, x_T=None, beta_hat=None, beta_hat_sq=None
) -> list:
    """All of C1-C5 (and C6 when terminal states are given) for every subsystem.

    With ``beta_hat`` the decrease condition is :func:`build_c4_tangent`
    instead of :func:`build_c4`, and the H variables play the role of
    beta_i H_Ni.
    """
    blocks = []
    for view in cs.views:
        blocks += build_c1(view, design, v)
        for r in range(view.n_g):
            blocks += build_c2(view, design, v, r)
        for r in range(view.n_h):
            blocks += build_c3(view, design, v, r)
        if beta_hat is None:
            blocks += build_c4(view, design, v)
        else:
            blocks += build_c4_tangent(view, design, v, beta_hat, beta_hat_sq)
    blocks += build_c5(cs, v)
    if x_T is not None:
        for view in cs.views:
            blocks += build_c6(x_T[view.state_idx], design, view.index, v.beta[view.index])
    return blocks


def add_blocks(p: ConicProblem, blocks) -> None:
    for b in blocks:
        if b.cone is Cone.PSD:
            p.add_psd(b.expr, b.name)
        elif b.cone is Cone.NONNEG:
            p.add_nonneg(b.expr, b.name)
        elif b.cone is Cone.ZERO:
            p.add_zero(b.expr, b.name)
        else:
            raise BuildError(f"unsupported block cone {b.cone}")


def block_value(b: Block):
    e = b.expr
    return np.asarray(e.value if isinstance(e, cp.Expression) else e, float)


def block_residual(b: Block) -> float:
    """lambda_min for PSD blocks, min entry for nonnegativity blocks."""
    val = block_value(b)
    if b.cone is Cone.PSD:
        return psd_residual(val)
    return float(np.min(val)) if val.size else 0.0


def recover_gains(cs: CoupledSystem, design: DistributedTerminalDesign, tv: AdaptiveTerminalVars, gain_tol=1e-7):
    """K_Ni = Y_Ni B(beta)^-1, column block j divided by beta_j.

    Column blocks of neighbors with beta_j <= gain_tol (their set is the
    origin) and whole gains with beta_i <= gain_tol fall back to K_ref.
    """
    gains = []
    for view in cs.views:
        i = view.index
        K = np.array(design.K_ref[i], dtype=float, copy=True)
        if tv.beta[i] > gain_tol:
            for j, s in view.nbr_slices.items():
                if tv.beta[j] > gain_tol:
                    K[:, s] = tv.Y[i][:, s] / tv.beta[j]
        gains.append(K)
    return gains
