"""Consensus ADMM for the adaptive distributed MPC problem.

One agent per subsystem solves its dynamics rows, path constraints, the
terminal conditions C1-C4 and C6, and its share of the cost, over its own
variables plus local copies of the neighbor trajectories x_j and levels
beta_j.  Copies are reconciled by averaging at the owning agent.  The global
coupling condition C5 (-sum_i W_Ni' H_Ni W_Ni >= 0) cannot be split, so a
coordinator keeps its own copy of every H_Ni and projects the agents'
proposals onto the C5 set each round.

The splitting and the coordinator are our construction; the rounds are the
scaled-form consensus ADMM iterations

    agents:   x_a  = argmin f_a(x_a) + rho/2 ||x_a - z + u_a||^2
    owners:   z    = Proj(mean_a(x_a + u_a))
    all:      u_a += x_a - z

run synchronously.  Updates are applied only at the round barrier, so the
result does not depend on the order in which agents are solved.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from . import lmi
from .conic import ConicProblem, Cone, Status, ToleranceConfig, solve
from .errors import BuildError, LocalSolveFailed, MaxRoundsExceeded
from .model import CoupledSystem
from .mpc import MpcFormulation, MpcSolution, Variant

COORDINATOR = "coord"
RESIDUAL_COLUMNS = ("round", "primal_res", "dual_res", "objective", "c5_violation")
SUBPROBLEM_ACCEPT = (1e-7, 1e-6)  # (relative residual, duality gap)
# Strict margin on the agents' inequalities. It must exceed the effect of the
# stopping residual eps_pri on the assembled point and stay below the slack
# that the design-phase decrease margin leaves in C4/C5.
AGENT_MARGIN = 1e-4


def _acceptable(res) -> bool:
    feas, gap = SUBPROBLEM_ACCEPT
    return res.status is Status.NUMERICAL_TROUBLE and res.primal_residual <= feas and res.duality_gap <= gap


# -- message bus -------------------------------------------------------------------


@dataclass(frozen=True)
class Message:
    round: int
    sender: object
    receiver: object
    kind: str


@dataclass
class MessageBus:
    """In-process synchronous bus. Payloads travel by reference; the log records who talked to whom."""

    log: list = field(default_factory=list)

    def send(self, rnd, sender, receiver, kind):
        self.log.append(Message(rnd, sender, receiver, kind))

    def topology_violations(self, cs: CoupledSystem) -> list:
        """Agent-to-agent messages between subsystems that are not coupled."""
        bad = []
        for msg in self.log:
            if COORDINATOR in (msg.sender, msg.receiver):
                continue
            a, b = msg.sender, msg.receiver
            if b not in cs.views[a].neighbors and a not in cs.views[b].neighbors:
                bad.append(msg)
        return bad


# -- agents ------------------------------------------------------------------------


class Agent:
    """Local problem of one subsystem, with copies of its neighbors' shared variables.

    Shared variables are keyed ``("x", j)`` for the state trajectory of
    subsystem j (shape (T+1, n_j)), ``("b", j)`` for the level beta_j and
    ``("H", i)`` for the coupling slack, which is shared with the
    coordinator only.  Inequalities carry a strict ``margin`` so that the
    assembled solution, built from consensus values that differ from the
    local copies by the primal residual, still satisfies them.
    """

    def __init__(self, form: MpcFormulation, view, x0, beta_hat=None, margin=AGENT_MARGIN, local_c5=False):
        cs, design, T = form.cs, form.design, form.T
        self.index = i = view.index
        self.view = view
        self.neighbors = tuple(view.neighbors)
        self.T = T
        self.margin = margin
        p = self.problem = ConicProblem(f"agent-{i}")
        nN, k = view.n_N, len(view.neighbors)
        self.XN = p.var("XN", (T + 1, nN))
        self.u = p.var("u", (T, view.m_i))
        self.bN = p.var("bN", (k,))
        self.Y = p.var("Y", (view.m_i, nN))
        self.H = p.var("H", (nN, nN), symmetric=True)
        self.lam = p.var("lam", (k,))
        self.tau = p.var("tau", (view.n_g, k)) if view.n_g else np.zeros((0, k))
        self.rho_mult = p.var("rho", (view.n_h, k)) if view.n_h else np.zeros((0, k))
        for name, v in (("beta", self.bN), ("lam", self.lam), ("tau", self.tau), ("rho", self.rho_mult)):
            if isinstance(v, cp.Variable):
                p.add_nonneg(v, f"{name}>=0")
        self.x0 = p.param("x0N", (nN,), np.asarray(x0, float)[view.nbr_state_idx])
        self.rho = p.param("rho_admm", (), 1.0)

        own = view.own_slice
        p.add_zero(self.XN[0] - self.x0, "initial")
        p.add_zero(self.XN[1:, own] - self.XN[:-1] @ view.A_N.T - self.u @ view.B.T, "dynamics")
        if T > 1 and view.n_g:
            p.add_nonneg(view.g_N[None, :] - self.XN[1:T] @ view.G_N.T - margin, "state")
        if view.n_h:
            p.add_nonneg(view.h[None, :] - self.u @ view.H.T - margin, "input")

        # the block builders index by global subsystem; only entry i is populated
        scatter = np.zeros((cs.M, k))
        for c, j in enumerate(view.neighbors):
            scatter[j, c] = 1.0
        beta = scatter @ self.bN
        slot = lambda x: [x if j == i else None for j in range(cs.M)]  # noqa: E731
        tv = lmi.SymbolicAdaptiveVars(
            beta, slot(self.Y), slot(self.H), slot(self.lam), slot(self.tau), slot(self.rho_mult)
        )
        blocks = lmi.build_c1(view, design, tv)
        for r in range(view.n_g):
            blocks += lmi.build_c2(view, design, tv, r)
        for r in range(view.n_h):
            blocks += lmi.build_c3(view, design, tv, r)
        self.tangent = beta_hat is not None
        if self.tangent:
            bh = np.asarray(beta_hat, float)
            self.beta_hat = p.param("beta_hat", (cs.M,), bh)
            self.beta_hat_sq = p.param("beta_hat_sq", (cs.M,), bh**2)
            blocks += lmi.build_c4_tangent(view, design, tv, self.beta_hat, self.beta_hat_sq)
        else:
            blocks += lmi.build_c4(view, design, tv)
        blocks += lmi.build_c6(self.XN[T, own], design, i, beta[i])
        if local_c5:
            blocks.append(lmi.Block(Cone.PSD, -(cs.W[i].T @ self.H @ cs.W[i]), "C5"))
        lmi.add_blocks(p, [_tighten(b, margin) for b in blocks])

        # share of the cost: stage costs over x_Ni, terminal cost of x_i
        Lq = lmi.thin_factor(view.Q_N)
        Lr = lmi.sqrt_psd(view.R)
        Lp = lmi.thin_factor(design.P[i])
        parts = [cp.reshape(self.u @ Lr.T, (T * view.m_i,), order="C"), Lp @ self.XN[T, own]]
        if Lq.shape[0]:
            parts.insert(0, cp.reshape(self.XN[:T] @ Lq.T, (T * Lq.shape[0],), order="C"))
        self.cost = p.var("cost")
        p.add_quad_epigraph(self.cost, cp.hstack(parts), "objective")

        self.local = {}
        for c, j in enumerate(view.neighbors):
            self.local[("x", j)] = self.XN[:, view.nbr_slices[j]]
            self.local[("b", j)] = self.bN[c]
        if not local_c5:
            self.local[("H", i)] = self.H
        self.targets = {}
        self.duals = {}
        self.status = None

    # consensus plumbing ------------------------------------------------------------
    def share(self, keys):
        """Declare which local keys take part in consensus and add the penalty term."""
        self.keys = tuple(key for key in self.local if key in keys)
        p = self.problem
        dev = []
        for key in self.keys:
            expr = self.local[key]
            shape = expr.shape
            self.targets[key] = p.param(f"target{_tag(key)}", shape, np.zeros(shape))
            self.duals[key] = np.zeros(shape)
            d = expr - self.targets[key]
            dev.append(cp.reshape(d, (int(np.prod(shape)) if shape else 1,), order="C"))
        if dev:
            pen = p.var("penalty")
            p.add_quad_epigraph(pen, cp.hstack(dev), "consensus")
            p.minimize(self.cost + 0.5 * self.rho * pen)
        else:
            p.minimize(self.cost)

    def solve(self, tol=None):
        """Solve the local problem.

        ADMM iterates are inexact by design, so a result the backend flags as
        NumericalTrouble is still used when its measured residual and gap are
        within ``SUBPROBLEM_ACCEPT``.
        """
        res = solve(self.problem, tol)
        self.status = res.status
        if not (res.ok or _acceptable(res)):
            raise LocalSolveFailed(self.index, res.status)
        self.values = res.values
        return res

    def value(self, key) -> np.ndarray:
        return np.asarray(self.local[key].value, float)

    def local_cost(self) -> float:
        return float(self.values["cost"])


def _tag(key):
    return f"[{key[0]}{key[1]}]"


def _tighten(block, margin):
    """PSD blocks minus margin*I, nonnegative rows minus margin; equalities untouched."""
    if margin <= 0 or block.cone is Cone.ZERO:
        return block
    e = block.expr
    if block.cone is Cone.PSD:
        return lmi.Block(Cone.PSD, e - margin * np.eye(e.shape[0]), block.name)
    return lmi.Block(block.cone, e - margin, block.name)


# -- coordinator -------------------------------------------------------------------


class Coordinator:
    """Keeps the C5 copies Hc_i and projects proposals V_i onto {sum_i W_i' Hc_i W_i <= 0}.

    Clipping the eigenvalues of the n x n aggregate is not enough: the
    clipped matrix generally has entries outside the neighbor pattern that
    no H_Ni can carry. The exact Frobenius projection is a small conic
    problem, re-solved with new parameter values every round.
    """

    def __init__(self, cs: CoupledSystem):
        self.cs = cs
        p = self.problem = ConicProblem("c5-coordinator")
        self.Hc = []
        self.V = []
        dev = []
        for view in cs.views:
            i = view.index
            Hc = p.var(f"Hc{i}", (view.n_N, view.n_N), symmetric=True)
            V = p.param(f"V{i}", (view.n_N, view.n_N), np.zeros((view.n_N, view.n_N)))
            self.Hc.append(Hc)
            self.V.append(V)
            dev.append(cp.reshape(Hc - V, (view.n_N**2,), order="C"))
        total = lmi._sum((cs.W[i].T @ self.Hc[i] @ cs.W[i] for i in range(cs.M)), (cs.n, cs.n))
        p.add_psd(-total, "C5")
        s = p.var("dist")
        p.add_quad_epigraph(s, cp.hstack(dev), "distance")
        p.minimize(s)

    def project(self, proposals, tol=None) -> list:
        for V, val in zip(self.V, proposals):
            V.value = 0.5 * (val + val.T)
        res = solve(self.problem, tol)
        if not (res.ok or _acceptable(res)):
            raise LocalSolveFailed(COORDINATOR, res.status)
        return [0.5 * (res[f"Hc{i}"] + res[f"Hc{i}"].T) for i in range(self.cs.M)]


def c5_violation(cs: CoupledSystem, H_blocks) -> float:
    """lambda_max of sum_i W_Ni' H_Ni W_Ni, clipped at 0."""
    total = sum(cs.W[i].T @ H_blocks[i] @ cs.W[i] for i in range(cs.M))
    return max(0.0, float(np.linalg.eigvalsh(0.5 * (total + total.T))[-1]))


# -- consensus state ---------------------------------------------------------------


@dataclass
class ConsensusState:
    """Consensus values, aggregate coupling block and residual history."""

    z: dict
    aggregate: np.ndarray
    history: list = field(default_factory=list)
    round: int = 0

    @property
    def primal_residual(self) -> float:
        return self.history[-1]["primal_res"] if self.history else float("inf")

    @property
    def dual_residual(self) -> float:
        return self.history[-1]["dual_res"] if self.history else float("inf")

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RESIDUAL_COLUMNS)
        for row in self.history:
            w.writerow([row["round"]] + [f"{row[c]:.10g}" for c in RESIDUAL_COLUMNS[1:]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


class AgentNetwork(list):
    """The agents of one split, plus the context shared by the rounds."""

    def __init__(self, agents, form, x0, beta_hat, coordinator, holders):
        super().__init__(agents)
        self.form = form
        self.x0 = np.asarray(x0, float)
        self.beta_hat = None if beta_hat is None else np.asarray(beta_hat, float)
        self.coordinator = coordinator
        self.holders = holders  # key -> tuple of agent indices holding a copy
        self.bus = MessageBus()

    @property
    def cs(self) -> CoupledSystem:
        return self.form.cs


def _owner(key):
    return key[1]


# -- operations --------------------------------------------------------------------


def split(
    form: MpcFormulation, cs: CoupledSystem | None = None, x0=None, beta_hat=None, margin: float = AGENT_MARGIN
) -> AgentNetwork:
    """One agent per subsystem for the adaptive formulation ``form``.

    ``beta_hat`` selects the tangent decrease condition linearized at those
    levels (required when ``form.decrease == "tangent"``); otherwise the
    paper-form decrease is used.
    """
    cs = cs or form.cs
    if form.variant not in (Variant.D_ADAPTIVE, Variant.D_AD0) or form.frozen:
        raise BuildError(f"ADMM split needs an adaptive formulation, got {form.variant.value}")
    if cs is not form.cs:
        raise BuildError("coupled system differs from the formulation's")
    if form.decrease == "tangent" and beta_hat is None:
        raise BuildError("tangent decrease needs beta_hat (the linearization levels)")
    x0 = np.zeros(cs.n) if x0 is None else np.asarray(x0, float).reshape(-1)
    if x0.size != cs.n:
        raise BuildError(f"x0 has {x0.size} entries, expected {cs.n}")
    hat = beta_hat if form.decrease == "tangent" else None
    single = cs.M == 1
    agents = [Agent(form, view, x0, hat, margin, local_c5=single) for view in cs.views]
    holders = {}
    for a in agents:
        for key in a.local:
            holders.setdefault(key, []).append(a.index)
    # a key is a consensus variable when two parties hold it (H: agent + coordinator)
    shared = {k: tuple(v) for k, v in holders.items() if len(v) > 1 or k[0] == "H"}
    for a in agents:
        a.share(shared)
    coordinator = None if single else Coordinator(cs)
    return AgentNetwork(agents, form, x0, hat, coordinator, shared)


def _initial_state(net: AgentNetwork) -> ConsensusState:
    z = {key: np.zeros(net[holders[0]].local[key].shape) for key, holders in net.holders.items()}
    return ConsensusState(z, np.zeros((net.cs.n, net.cs.n)))


def admm_round(agents: AgentNetwork, consensus: ConsensusState | None = None, rho: float = 1.0, tol=None):
    """One synchronous round: local solves, averaging and C5 projection, dual update."""
    net = agents
    cs = net.cs
    state = consensus or _initial_state(net)
    rnd = state.round + 1
    bus = net.bus
    for a in net:
        a.rho.value = float(rho)
        for key in a.keys:
            a.targets[key].value = state.z[key] - a.duals[key]
        a.solve(tol)

    # exchange: copies go to the owner, H proposals to the coordinator
    new_z = {}
    for key, holders in net.holders.items():
        if key[0] == "H":
            continue
        owner = _owner(key)
        for h in holders:
            if h != owner:
                bus.send(rnd, h, owner, f"{key[0]}{key[1]}")
        new_z[key] = np.mean([net[h].value(key) + net[h].duals[key] for h in holders], axis=0)
        for h in holders:
            if h != owner:
                bus.send(rnd, owner, h, f"z{key[0]}{key[1]}")
    if net.coordinator is not None:
        props = []
        for view in cs.views:
            key = ("H", view.index)
            a = net[view.index]
            bus.send(rnd, a.index, COORDINATOR, "H")
            props.append(a.value(key) + a.duals[key])
        Hc = net.coordinator.project(props, tol)
        for view in cs.views:
            new_z[("H", view.index)] = Hc[view.index]
            bus.send(rnd, COORDINATOR, view.index, "zH")
        aggregate = sum(cs.W[i].T @ Hc[i] @ cs.W[i] for i in range(cs.M))
    else:
        aggregate = cs.W[0].T @ np.asarray(net[0].H.value, float) @ cs.W[0]

    r2 = s2 = 0.0
    for key, holders in net.holders.items():
        for h in holders:
            a = net[h]
            diff = a.value(key) - new_z[key]
            r2 += float(np.sum(diff**2))
            s2 += float(np.sum((new_z[key] - state.z[key]) ** 2))
            a.duals[key] = a.duals[key] + diff
    H_agents = [np.asarray(a.H.value, float) for a in net]
    state.history.append(
        {
            "round": rnd,
            "primal_res": float(np.sqrt(r2)),
            "dual_res": float(rho * np.sqrt(s2)),
            "objective": float(sum(a.local_cost() for a in net)),
            "c5_violation": c5_violation(cs, H_agents),
        }
    )
    state.z = new_z
    state.aggregate = aggregate
    state.round = rnd
    return net, state


def admm_solve(
    agents: AgentNetwork,
    rho: float = 1.0,
    eps_pri: float = 1e-5,
    eps_dual: float = 1e-4,
    max_rounds: int = 500,
    tol: ToleranceConfig | None = None,
) -> tuple[MpcSolution, ConsensusState]:
    """Iterate rounds until both residuals are small, then assemble the solution.

    Raises MaxRoundsExceeded (carrying the ConsensusState) when the
    residuals are still above the thresholds after ``max_rounds`` rounds.
    """
    net = agents
    state = None
    for _ in range(max_rounds):
        net, state = admm_round(net, state, rho, tol)
        if state.primal_residual <= eps_pri and state.dual_residual <= eps_dual:
            return assemble(net, state), state
    raise MaxRoundsExceeded(max_rounds, state)


def assemble(net: AgentNetwork, state: ConsensusState) -> MpcSolution:
    """Global solution from the agents' inputs and certificates and the consensus values.

    Inputs come from the owning agents and the state trajectory is rolled
    out from x0 with them, so the dynamics hold exactly. Levels and
    coupling slacks are the consensus values; Y, lambda, tau and rho are the
    owners' local values.
    """
    form = net.form
    cs = net.cs
    sys = form.system
    T = form.T
    U = np.zeros((T, sys.m))
    for a in net:
        U[:, a.view.input_idx] = np.asarray(a.u.value, float)
    X = np.zeros((T + 1, sys.n))
    X[0] = net.x0
    for t in range(T):
        X[t + 1] = sys.A @ X[t] + sys.B @ U[t]
    beta = np.zeros(cs.M)
    for view in cs.views:
        key = ("b", view.index)
        if key in state.z:
            beta[view.index] = state.z[key]
        else:
            a = net[view.index]
            beta[view.index] = float(a.bN.value[a.neighbors.index(view.index)])
    values = {"X": X, "U": U, "beta": beta}
    for a in net:
        i = a.index
        key = ("H", i)
        values[f"Yt{i}"] = np.asarray(a.Y.value, float)
        values[f"Ht{i}"] = state.z[key] if key in state.z else np.asarray(a.H.value, float)
        values[f"lam{i}"] = np.asarray(a.lam.value, float)
        if isinstance(a.tau, cp.Variable):
            values[f"tau{i}"] = np.asarray(a.tau.value, float)
        if isinstance(a.rho_mult, cp.Variable):
            values[f"rho{i}"] = np.asarray(a.rho_mult.value, float)
    tv = lmi.AdaptiveTerminalVars.from_values(cs, values)
    P = form.design.P_global(cs)
    stage = np.einsum("ti,ij,tj->", X[:-1], sys.Q, X[:-1]) + np.einsum("ti,ij,tj->", U, sys.R, U)
    J = float(stage + X[-1] @ P @ X[-1])
    values["cost"] = J
    sol = MpcSolution(
        Status.OPTIMAL, X, U, J, state.history[-1]["objective"], 0.0,
        alpha=tv.alpha, tv=tv, values=values, iterations=state.round, beta_hat=net.beta_hat,
    )
    sol.gains = lmi.recover_gains(cs, form.design, tv)
    return sol


def assembled_violation(net: AgentNetwork, sol: MpcSolution) -> float:
    """Worst violation of the centralized problem's constraints at the assembled point."""
    from .mpc import MpcProgram

    prog = MpcProgram(net.form)
    prog.x0.value = net.x0
    if prog.tangent:
        prog.beta_hat.value, prog.beta_hat_sq.value = net.beta_hat, net.beta_hat**2
    prog.assign({k: v for k, v in sol.values.items() if k in prog.variables})
    return prog.max_violation()
