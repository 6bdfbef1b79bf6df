"""Coupled linear systems, their constraints and costs, and subsystem views.

Index convention: all state/input/subsystem indices are 0-based in code and
in model files.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import (
    CostNotPD,
    CouplingClosureViolated,
    DimensionMismatch,
    NotControllable,
    OriginNotInterior,
)

_ZERO_TOL = 1e-14


def _mat(a, rows=None, cols=None, name="matrix"):
    a = np.array(a, dtype=float)
    if a.ndim == 1 and cols is not None and rows is not None and a.size == rows * cols:
        a = a.reshape(rows, cols)
    if a.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {a.shape}")
    if rows is not None and a.shape[0] != rows or cols is not None and a.shape[1] != cols:
        raise DimensionMismatch(f"{name} has shape {a.shape}, expected ({rows}, {cols})")
    if not np.all(np.isfinite(a)):
        raise DimensionMismatch(f"{name} has non-finite entries")
    return a


def _vec(v, size=None, name="vector"):
    v = np.array(v, dtype=float).reshape(-1)
    if size is not None and v.size != size:
        raise DimensionMismatch(f"{name} has length {v.size}, expected {size}")
    if not np.all(np.isfinite(v)):
        raise DimensionMismatch(f"{name} has non-finite entries")
    return v


@dataclass(frozen=True, eq=False)
class LtiSystem:
    """x+ = A x + B u subject to G x <= g, H u <= h, stage cost x'Qx + u'Ru."""

    A: np.ndarray
    B: np.ndarray
    G: np.ndarray
    g: np.ndarray
    H: np.ndarray
    h: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        A = _mat(self.A, name="A")
        n = A.shape[0]
        B = _mat(self.B, rows=n, name="B")
        m = B.shape[1]
        G = _mat(self.G, cols=n, name="G") if np.size(self.G) else np.zeros((0, n))
        H = _mat(self.H, cols=m, name="H") if np.size(self.H) else np.zeros((0, m))
        fields = dict(
            A=_mat(A, n, n, "A"),
            B=B,
            G=G,
            g=_vec(self.g, G.shape[0], "g"),
            H=H,
            h=_vec(self.h, H.shape[0], "h"),
            Q=_mat(self.Q, n, n, "Q"),
            R=_mat(self.R, m, m, "R"),
        )
        for k, v in fields.items():
            v.setflags(write=False)
            object.__setattr__(self, k, v)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def step(self, x, u):
        return self.A @ x + self.B @ u

    def stage_cost(self, x, u) -> float:
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        return float(x @ self.Q @ x + u @ self.R @ u)


@dataclass(frozen=True, eq=False)
class CtsLtiSystem:
    """Continuous-time plant dx/dt = A_c x + B_c u with the same constraint/cost data."""

    A_c: np.ndarray
    B_c: np.ndarray
    G: np.ndarray
    g: np.ndarray
    H: np.ndarray
    h: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        A_c = _mat(self.A_c, name="A_c")
        n = A_c.shape[0]
        if A_c.shape != (n, n):
            raise DimensionMismatch("A_c must be square")
        object.__setattr__(self, "A_c", A_c)
        object.__setattr__(self, "B_c", _mat(self.B_c, rows=n, name="B_c"))

    @property
    def n(self):
        return self.A_c.shape[0]

    @property
    def m(self):
        return self.B_c.shape[1]

    def discrete(self, A, B) -> LtiSystem:
        return LtiSystem(A, B, self.G, self.g, self.H, self.h, self.Q, self.R)


def controllability_rank(A, B, tol=None) -> int:
    n = A.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    return int(np.linalg.matrix_rank(np.hstack(blocks), tol=tol))


def validate_system(sys: LtiSystem) -> LtiSystem:
    """Check the standing assumptions and return ``sys`` unchanged.

    Raises
    ------
    NotControllable
        rank [B, AB, ..., A^{n-1}B] < n.
    OriginNotInterior
        some entry of g or h is not strictly positive.
    CostNotPD
        Q not symmetric PSD or R not symmetric PD.
    """
    if not isinstance(sys, LtiSystem):
        raise TypeError("validate_system expects an LtiSystem")
    if np.any(sys.g <= 0) or np.any(sys.h <= 0):
        raise OriginNotInterior("constraint offsets g, h must be strictly positive")
    for name, M, strict in (("Q", sys.Q, False), ("R", sys.R, True)):
        if not np.allclose(M, M.T, atol=1e-12):
            raise CostNotPD(f"{name} is not symmetric")
        lam = np.linalg.eigvalsh(0.5 * (M + M.T)).min()
        if lam < (1e-12 if strict else -1e-12):
            raise CostNotPD(f"{name} has smallest eigenvalue {lam:.3g}")
    if controllability_rank(sys.A, sys.B) < sys.n:
        raise NotControllable("(A, B) is not controllable")
    return sys


# -- decomposition ---------------------------------------------------------------


@dataclass(frozen=True)
class Partition:
    """Per-subsystem state indices, input indices and neighbor sets (0-based)."""

    states: tuple
    inputs: tuple
    neighbors: tuple

    def __post_init__(self):
        st = tuple(tuple(int(k) for k in s) for s in self.states)
        ip = tuple(tuple(int(k) for k in s) for s in self.inputs)
        nb = tuple(tuple(sorted({int(k) for k in s})) for s in self.neighbors)
        if not (len(st) == len(ip) == len(nb)):
            raise DimensionMismatch("states, inputs and neighbors must have one entry per subsystem")
        object.__setattr__(self, "states", st)
        object.__setattr__(self, "inputs", ip)
        object.__setattr__(self, "neighbors", nb)

    @property
    def M(self) -> int:
        return len(self.states)

    @classmethod
    def from_dicts(cls, items):
        return cls(
            states=[d["states"] for d in items],
            inputs=[d["inputs"] for d in items],
            neighbors=[d["neighbors"] for d in items],
        )

    def to_dicts(self):
        return [
            {"states": list(s), "inputs": list(u), "neighbors": list(nb)}
            for s, u, nb in zip(self.states, self.inputs, self.neighbors)
        ]

    def check(self, n: int, m: int) -> None:
        """Index lists partition {0..n-1} and {0..m-1}; i in N_i; neighbors in range."""
        flat = sorted(k for s in self.states for k in s)
        if flat != list(range(n)):
            raise DimensionMismatch("state index lists do not partition the state vector")
        flat = sorted(k for s in self.inputs for k in s)
        if flat != list(range(m)):
            raise DimensionMismatch("input index lists do not partition the input vector")
        for i, nb in enumerate(self.neighbors):
            if i not in nb:
                raise DimensionMismatch(f"subsystem {i} must be its own neighbor")
            if any(j < 0 or j >= self.M for j in nb):
                raise DimensionMismatch(f"neighbor index out of range for subsystem {i}")
            if not self.states[i]:
                raise DimensionMismatch(f"subsystem {i} has no states")


def selection_matrix(indices, size) -> np.ndarray:
    S = np.zeros((len(indices), size))
    S[np.arange(len(indices)), list(indices)] = 1.0
    return S


@dataclass(frozen=True, eq=False)
class SubsystemView:
    """Local data of subsystem i in neighbor coordinates x_Ni = W_Ni x."""

    index: int
    neighbors: tuple
    state_idx: np.ndarray  # global indices of x_i
    nbr_state_idx: np.ndarray  # global indices of x_Ni (neighbor order)
    input_idx: np.ndarray
    own_slice: slice  # position of x_i inside x_Ni
    nbr_slices: dict  # j -> slice of x_j inside x_Ni
    A_N: np.ndarray
    B: np.ndarray
    G_N: np.ndarray
    g_N: np.ndarray
    H: np.ndarray
    h: np.ndarray
    Q_N: np.ndarray
    R: np.ndarray

    @property
    def n_i(self):
        return self.state_idx.size

    @property
    def n_N(self):
        return self.nbr_state_idx.size

    @property
    def m_i(self):
        return self.input_idx.size

    @property
    def n_g(self):
        return self.G_N.shape[0]

    @property
    def n_h(self):
        return self.H.shape[0]

    def stage_cost(self, x_N, u_i) -> float:
        return stage_cost(self, x_N, u_i)


@dataclass(frozen=True, eq=False)
class CoupledSystem:
    system: LtiSystem
    partition: Partition
    views: tuple
    U: tuple
    W: tuple
    V: tuple

    @property
    def M(self):
        return len(self.views)

    @property
    def n(self):
        return self.system.n

    @property
    def m(self):
        return self.system.m

    def step_local(self, x, u):
        """Global successor assembled from x_i+ = A_Ni x_Ni + B_i u_i."""
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        out = np.empty(self.n)
        for v in self.views:
            out[v.state_idx] = v.A_N @ x[v.nbr_state_idx] + v.B @ u[v.input_idx]
        return out

    def stage_cost(self, x, u) -> float:
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        return sum(v.stage_cost(x[v.nbr_state_idx], u[v.input_idx]) for v in self.views)

    def block_diag_from_local(self, blocks) -> np.ndarray:
        """Assemble sum_i U_i' P_i U_i from per-subsystem n_i x n_i blocks."""
        P = np.zeros((self.n, self.n))
        for v, Pi in zip(self.views, blocks):
            P[np.ix_(v.state_idx, v.state_idx)] = Pi
        return P

    def gain_from_local(self, gains) -> np.ndarray:
        """Global K with u_i = K_Ni x_Ni for every i."""
        K = np.zeros((self.m, self.n))
        for v, Ki in zip(self.views, gains):
            K[np.ix_(v.input_idx, v.nbr_state_idx)] = Ki
        return K


def _owners(part: Partition, n: int):
    own = np.empty(n, dtype=int)
    for i, s in enumerate(part.states):
        own[list(s)] = i
    return own


def _row_owner(touched, part: Partition, what: str):
    touched = sorted(touched)
    for a in touched:
        for b in touched:
            if b not in part.neighbors[a]:
                raise CouplingClosureViolated(
                    f"{what} couples subsystems {touched}, but {b} is not a neighbor of {a}"
                )
    return touched[0]


def decompose(sys: LtiSystem, part: Partition) -> CoupledSystem:
    """Split a validated system into subsystem views.

    Each state-constraint row goes to the lowest-index subsystem it touches;
    rows spanning several subsystems need those to be mutual neighbors.
    Off-diagonal cost blocks Q_ij go to the lower index of the pair.
    """
    n, m = sys.n, sys.m
    part.check(n, m)
    M = part.M
    state_owner = _owners(part, n)
    input_owner = np.empty(m, dtype=int)
    for i, s in enumerate(part.inputs):
        input_owner[list(s)] = i

    # input-decoupling: B and R must be block diagonal w.r.t. the input split
    for i in range(M):
        rows = list(part.states[i])
        for j in range(M):
            if j != i and np.any(np.abs(sys.B[np.ix_(rows, list(part.inputs[j]))]) > _ZERO_TOL):
                raise CouplingClosureViolated(f"input of subsystem {j} enters subsystem {i}")
            if j != i and np.any(
                np.abs(sys.R[np.ix_(list(part.inputs[i]), list(part.inputs[j]))]) > _ZERO_TOL
            ):
                raise CouplingClosureViolated("R couples inputs of different subsystems")

    g_rows = [[] for _ in range(M)]
    for r in range(sys.G.shape[0]):
        touched = {int(state_owner[k]) for k in np.flatnonzero(np.abs(sys.G[r]) > _ZERO_TOL)}
        if touched:
            g_rows[_row_owner(touched, part, f"state constraint row {r}")].append(r)
    h_rows = [[] for _ in range(M)]
    for r in range(sys.H.shape[0]):
        touched = {int(input_owner[k]) for k in np.flatnonzero(np.abs(sys.H[r]) > _ZERO_TOL)}
        if len(touched) > 1:
            raise CouplingClosureViolated(f"input constraint row {r} couples subsystems {sorted(touched)}")
        if touched:
            h_rows[touched.pop()].append(r)

    Q_parts = [np.zeros((n, n)) for _ in range(M)]
    for i in range(M):
        for j in range(M):
            blk = sys.Q[np.ix_(list(part.states[i]), list(part.states[j]))]
            if not np.any(np.abs(blk) > _ZERO_TOL):
                continue
            owner = i if i == j else _row_owner({i, j}, part, "cost block Q")
            Q_parts[owner][np.ix_(list(part.states[i]), list(part.states[j]))] = blk

    views, Us, Ws, Vs = [], [], [], []
    for i in range(M):
        nbr_idx = np.array([k for j in part.neighbors[i] for k in part.states[j]], dtype=int)
        st_idx = np.array(part.states[i], dtype=int)
        in_idx = np.array(part.inputs[i], dtype=int)
        U = selection_matrix(st_idx, n)
        W = selection_matrix(nbr_idx, n)
        V = selection_matrix(in_idx, m)

        reach = {int(state_owner[k]) for k in np.flatnonzero(np.any(np.abs(U @ sys.A) > _ZERO_TOL, axis=0))}
        missing = reach - set(part.neighbors[i])
        if missing:
            raise CouplingClosureViolated(
                f"dynamics of subsystem {i} depend on subsystems {sorted(missing)} outside N_{i}"
            )

        slices, off = {}, 0
        for j in part.neighbors[i]:
            slices[j] = slice(off, off + len(part.states[j]))
            off += len(part.states[j])

        Q_N = W @ Q_parts[i] @ W.T
        Q_N = 0.5 * (Q_N + Q_N.T)
        if np.linalg.eigvalsh(Q_N).min() < -1e-10:
            raise CostNotPD(f"local cost Q_N{i} is indefinite; Q is not decomposable along the partition")

        views.append(
            SubsystemView(
                index=i,
                neighbors=part.neighbors[i],
                state_idx=st_idx,
                nbr_state_idx=nbr_idx,
                input_idx=in_idx,
                own_slice=slices[i],
                nbr_slices=slices,
                A_N=U @ sys.A @ W.T,
                B=U @ sys.B @ V.T,
                G_N=sys.G[g_rows[i]][:, nbr_idx] if g_rows[i] else np.zeros((0, nbr_idx.size)),
                g_N=sys.g[g_rows[i]],
                H=sys.H[h_rows[i]][:, in_idx] if h_rows[i] else np.zeros((0, in_idx.size)),
                h=sys.h[h_rows[i]],
                Q_N=Q_N,
                R=V @ sys.R @ V.T,
            )
        )
        Us.append(U)
        Ws.append(W)
        Vs.append(V)
    return CoupledSystem(sys, part, tuple(views), tuple(Us), tuple(Ws), tuple(Vs))


def stage_cost(view: SubsystemView, x_N, u_i) -> float:
    """x_Ni' Q_Ni x_Ni + u_i' R_i u_i."""
    x_N = np.asarray(x_N, float).reshape(-1)
    u_i = np.asarray(u_i, float).reshape(-1)
    if x_N.size != view.n_N or u_i.size != view.m_i:
        raise DimensionMismatch(
            f"stage_cost expects x_N of size {view.n_N} and u of size {view.m_i}"
        )
    return float(x_N @ view.Q_N @ x_N + u_i @ view.R @ u_i)


# -- discretization -------------------------------------------------------------


def zoh_discretize(cts: CtsLtiSystem, h: float) -> LtiSystem:
    """Exact zero-order hold: A = e^{A_c h}, B = int_0^h e^{A_c s} ds B_c.

    Uses the block exponential of [[A_c, B_c], [0, 0]] * h (scaling and
    squaring with a Pade approximant).
    """
    if not h > 0:
        raise ValueError("sampling time must be positive")
    n, m = cts.n, cts.m
    blk = np.zeros((n + m, n + m))
    blk[:n, :n] = cts.A_c
    blk[:n, n:] = cts.B_c
    E = scipy.linalg.expm(blk * h)
    return cts.discrete(E[:n, :n], E[:n, n:])


def euler_discretize(cts: CtsLtiSystem, h: float) -> LtiSystem:
    """Forward Euler: A = I + h A_c, B = h B_c (keeps the sparsity of A_c)."""
    if not h > 0:
        raise ValueError("sampling time must be positive")
    return cts.discrete(np.eye(cts.n) + h * cts.A_c, h * cts.B_c)


# -- model files ------------------------------------------------------------------


@dataclass
class ModelFile:
    """Parsed model file: a plant (continuous or discrete) plus its partition."""

    system: object  # LtiSystem or CtsLtiSystem
    partition: Partition
    dt: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def continuous(self) -> bool:
        return isinstance(self.system, CtsLtiSystem)


def load_model(path) -> ModelFile:
    """Read the JSON model schema (see README, "Model file")."""
    data = json.loads(Path(path).read_text())
    return model_from_dict(data)


def model_from_dict(data: dict) -> ModelFile:
    try:
        n, m = int(data["n"]), int(data["m"])
        A = _mat(data["A"], n, n, "A")
        B = _mat(data["B"], n, m, "B")
        G = np.array(data.get("G", []), dtype=float).reshape(-1, n)
        H = np.array(data.get("H", []), dtype=float).reshape(-1, m)
        Q = _mat(data["Q"], n, n, "Q")
        R = _mat(data["R"], m, m, "R")
        g, h = data.get("g", []), data.get("h", [])
        domain = data.get("time_domain", "discrete")
        dt = data.get("dt")
        part = data.get("partition") or [
            {"states": list(range(n)), "inputs": list(range(m)), "neighbors": [0]}
        ]
    except KeyError as exc:
        raise DimensionMismatch(f"model file is missing field {exc}") from None
    if domain == "continuous":
        sys = CtsLtiSystem(A, B, G, g, H, h, Q, R)
    elif domain == "discrete":
        sys = LtiSystem(A, B, G, g, H, h, Q, R)
    else:
        raise ValueError(f"unknown time_domain {domain!r}")
    return ModelFile(sys, Partition.from_dicts(part), dt, {k: data[k] for k in data if k == "name"})


def model_to_dict(sys, part: Partition, dt=None, name=None) -> dict:
    cts = isinstance(sys, CtsLtiSystem)
    A = sys.A_c if cts else sys.A
    B = sys.B_c if cts else sys.B
    out = {
        "n": int(A.shape[0]),
        "m": int(B.shape[1]),
        "A": A.tolist(),
        "B": B.tolist(),
        "G": np.asarray(sys.G).tolist(),
        "g": np.asarray(sys.g).tolist(),
        "H": np.asarray(sys.H).tolist(),
        "h": np.asarray(sys.h).tolist(),
        "Q": np.asarray(sys.Q).tolist(),
        "R": np.asarray(sys.R).tolist(),
        "dt": dt,
        "time_domain": "continuous" if cts else "discrete",
        "partition": part.to_dicts(),
    }
    if name:
        out["name"] = name
    return out
