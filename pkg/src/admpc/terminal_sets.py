"""Terminal sets: polyhedral maximal invariant sets, ellipsoids, sampled checks.

The two centralized baselines use either the maximal output-admissible
polytope of the closed loop (Gilbert-Tan iteration) or the largest sublevel
set of the centralized value function that fits inside the constraints. The
adaptive distributed sets are checked here by sampling.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from . import _kernels
from .errors import BuildError, IterationCapExceeded, NotStable
from .model import CoupledSystem, LtiSystem

REDUNDANCY_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PolyhedralSet:
    """{x : A x <= b}."""

    A: np.ndarray
    b: np.ndarray
    k_star: int = -1  # Gilbert-Tan termination index, -1 if not from Gilbert-Tan

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, float))
        b = np.asarray(self.b, float).reshape(-1)
        if A.shape[0] != b.size:
            raise BuildError(f"polytope has {A.shape[0]} rows but {b.size} offsets")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def n(self) -> int:
        return self.A.shape[1]

    def contains(self, x, tol=1e-9) -> bool:
        return bool(np.all(self.A @ np.asarray(x, float) <= self.b + tol))

    def violation(self, X) -> float:
        """max_k max_r (A x_k - b)_r over sample rows X (negative when strictly inside)."""
        return float(_kernels.max_affine_violation(self.A, self.b, np.atleast_2d(X)))

    def boundary_samples(self, n_samples, seed=0) -> np.ndarray:
        """Boundary points by shooting random rays from the origin."""
        rng = np.random.default_rng(seed)
        D = rng.standard_normal((n_samples, self.n))
        D /= np.linalg.norm(D, axis=1, keepdims=True)
        AD = D @ self.A.T
        with np.errstate(divide="ignore"):
            ratio = np.where(AD > 1e-14, self.b[None, :] / AD, np.inf)
        return D * ratio.min(axis=1, keepdims=True)

    def to_dict(self) -> dict:
        return {"kind": "polyhedron", "A": self.A.tolist(), "b": self.b.tolist(), "k_star": self.k_star}


@dataclass(frozen=True, eq=False)
class EllipsoidalSet:
    """{x : x' Z x <= alpha}."""

    Z: np.ndarray
    alpha: float

    def __post_init__(self):
        Z = np.asarray(self.Z, float)
        if Z.ndim != 2 or Z.shape[0] != Z.shape[1]:
            raise BuildError(f"ellipsoid shape must be square, got {Z.shape}")
        if np.linalg.eigvalsh(0.5 * (Z + Z.T)).min() <= 0:
            raise BuildError("ellipsoid shape must be positive definite")
        if self.alpha < 0:
            raise BuildError("ellipsoid level must be nonnegative")
        object.__setattr__(self, "Z", 0.5 * (Z + Z.T))
        object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    def contains(self, x, tol=1e-9) -> bool:
        x = np.asarray(x, float)
        return bool(x @ self.Z @ x <= self.alpha + tol * max(1.0, self.alpha))

    def boundary_samples(self, n_samples, seed=0) -> np.ndarray:
        """Uniform directions on the boundary: sqrt(alpha) Z^(-1/2) u with u on the unit sphere."""
        rng = np.random.default_rng(seed)
        return sphere_to_ellipsoid(rng.standard_normal((n_samples, self.n)), self.Z, np.sqrt(self.alpha))

    def to_dict(self) -> dict:
        return {"kind": "ellipsoid", "Z": self.Z.tolist(), "alpha": self.alpha}


def sphere_to_ellipsoid(D, Z, radius) -> np.ndarray:
    """Map raw Gaussian rows D onto the boundary of {x' Z x <= radius^2}."""
    D = np.atleast_2d(D)
    norms = np.linalg.norm(D, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    w, V = np.linalg.eigh(Z)
    Zmh = (V / np.sqrt(w)) @ V.T
    return radius * (D / norms) @ Zmh


def contains(s, x, tol=1e-9) -> bool:
    return s.contains(x, tol)


def set_from_dict(d: dict):
    if d.get("kind") == "polyhedron":
        return PolyhedralSet(np.array(d["A"], float), np.array(d["b"], float), int(d.get("k_star", -1)))
    if d.get("kind") == "ellipsoid":
        return EllipsoidalSet(np.array(d["Z"], float), float(d["alpha"]))
    raise BuildError(f"unknown set kind {d.get('kind')!r}")


def save_set(s, path) -> None:
    with open(path, "w") as f:
        json.dump(s.to_dict(), f, indent=1)


def load_set(path):
    with open(path) as f:
        return set_from_dict(json.load(f))


def write_boundary_csv(s, path, n_samples=360, seed=0) -> None:
    """Boundary samples for plotting, one point per row (columns x_1..x_n)."""
    X = s.boundary_samples(n_samples, seed)
    if s.n == 2:
        X = X[np.argsort(np.arctan2(X[:, 1], X[:, 0]))]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x_{k + 1}" for k in range(s.n)])
        w.writerows(X.tolist())


# -- centralized baselines -----------------------------------------------------


def closed_loop_constraints(sys: LtiSystem, K):
    """Stack state rows G x <= g and input rows H K x <= h."""
    C = np.vstack([sys.G, sys.H @ K])
    c = np.concatenate([sys.g, sys.h])
    return C, c


def max_ellipsoid(P, K, sys: LtiSystem) -> float:
    """Largest alpha with {x' P x <= alpha} inside all state and closed-loop input rows.

    For one row a'x <= c the support of the ellipsoid is sqrt(alpha a'P^-1 a),
    so alpha* = min_rows c^2 / (a' P^-1 a).
    """
    C, c = closed_loop_constraints(sys, K)
    Pinv = np.linalg.inv(P)
    s = np.einsum("ri,ij,rj->r", C, Pinv, C)
    keep = s > 0
    if not np.any(keep):
        return np.inf
    return float(np.min(c[keep] ** 2 / s[keep]))


def support(P_inv, a, alpha) -> float:
    return float(np.sqrt(alpha * a @ P_inv @ a))


def _row_max(A_ub, b_ub, a):
    """max a'x over {A_ub x <= b_ub}; +inf if unbounded."""
    res = linprog(-a, A_ub=A_ub, b_ub=b_ub, bounds=[(None, None)] * a.size, method="highs")
    if res.status == 3:
        return np.inf
    if res.status != 0:
        raise BuildError(f"redundancy LP failed: {res.message}")
    return -float(res.fun)


def gilbert_tan(A_K, C, c, max_iter=500, max_dim=12, tol=REDUNDANCY_TOL) -> PolyhedralSet:
    """Maximal output-admissible set {x : C A_K^k x <= c, k = 0..k*}.

    Rows of C A_K^(k+1) are appended one power at a time; each candidate row
    is kept only if its maximum over the current set exceeds its bound by
    more than ``tol``. The iteration stops at the first power whose rows are
    all redundant, which by induction makes every later power redundant too.

    Raises
    ------
    NotStable
        If the spectral radius of A_K is >= 1.
    IterationCapExceeded
        If no power up to ``max_iter`` is fully redundant.
    """
    A_K = np.asarray(A_K, float)
    C = np.atleast_2d(np.asarray(C, float))
    c = np.asarray(c, float).reshape(-1)
    n = A_K.shape[0]
    if n > max_dim:
        raise BuildError(f"Gilbert-Tan limited to n <= {max_dim} (got {n}); raise max_dim explicitly")
    if np.max(np.abs(np.linalg.eigvals(A_K))) >= 1.0:
        raise NotStable("closed-loop matrix is not Schur stable")
    if np.any(c <= 0):
        raise BuildError("constraint offsets must be positive (origin interior)")
    rows, rhs = [C], [c]
    Ak = np.eye(n)
    for k in range(max_iter):
        Ak = Ak @ A_K
        cand = C @ Ak
        A_cur = np.vstack(rows)
        b_cur = np.concatenate(rhs)
        keep = [r for r in range(cand.shape[0]) if _row_max(A_cur, b_cur, cand[r]) > c[r] + tol]
        if not keep:
            return PolyhedralSet(A_cur, b_cur, k_star=k)
        rows.append(cand[keep])
        rhs.append(c[keep])
    raise IterationCapExceeded(f"Gilbert-Tan did not terminate within {max_iter} powers")


def remove_redundant(s: PolyhedralSet, tol=REDUNDANCY_TOL) -> PolyhedralSet:
    """Drop rows implied by the others (one LP per row)."""
    A, b = s.A.copy(), s.b.copy()
    keep = np.ones(A.shape[0], bool)
    for r in range(A.shape[0]):
        others = keep.copy()
        others[r] = False
        if not others.any():
            continue
        if _row_max(A[others], b[others], A[r]) <= b[r] + tol:
            keep[r] = False
    return PolyhedralSet(A[keep], b[keep], s.k_star)


# -- sampled validation of the adaptive distributed sets --------------------------


@dataclass
class ValidationReport:
    """Worst sampled violations of the adaptive terminal-set conditions.

    ``next_state``: max over i of x_i+' Z_i x_i+ - beta_i^2; ``state`` and
    ``input``: max of G_Ni x_Ni - g_Ni and H_i K_Ni x_Ni - h_i; ``decrease``:
    max of the summed decrease sum_i [V_i(x_i+) - V_i(x_i) + l_i]. All are
    <= 0 (up to round-off) when the conditions hold.

    ``decrease_eig`` is not sampled: it is lambda_max of the symmetric matrix
    of the summed decrease, a homogeneous quadratic form, so the decrease
    holds on the whole state space iff it is <= 0.
    """

    n_samples: int
    seed: int
    next_state: float
    state: float
    input: float
    decrease: float
    per_subsystem: list = field(default_factory=list)
    decrease_eig: float = float("nan")

    @property
    def max_violation(self) -> float:
        return max(self.next_state, self.state, self.input, 0.0)

    def ok(self, tol=1e-7, decrease_tol=1e-6) -> bool:
        return self.max_violation <= tol and self.decrease <= decrease_tol


def sample_product_set(cs: CoupledSystem, Z, beta, n_samples, rng, interior_fraction=0.0) -> np.ndarray:
    """Samples of {x : x_j' Z_j x_j <= beta_j^2 for all j}.

    Each block is drawn uniformly in direction on its own boundary; a
    fraction ``interior_fraction`` of the rows additionally scales every
    block by an independent radius in [0, 1].
    """
    X = np.zeros((n_samples, cs.n))
    n_int = int(round(interior_fraction * n_samples))
    for view in cs.views:
        j = view.index
        if beta[j] <= 0:
            continue
        pts = sphere_to_ellipsoid(rng.standard_normal((n_samples, view.n_i)), Z[j], beta[j])
        if n_int:
            pts[:n_int] *= rng.uniform(0.0, 1.0, (n_int, 1))
        X[:, view.state_idx] = pts
    return X


def verify_invariance_sampled(
    cs: CoupledSystem, design, tv, n_samples=10_000, seed=0, gains=None, interior_fraction=0.5
) -> ValidationReport:
    """Check the adaptive terminal conditions on seeded samples of the product set.

    ``tv`` is a numeric AdaptiveTerminalVars; gains default to the ones
    recovered from it. Half of the samples (by default) lie on the product
    of the block boundaries, the worst case for the containment and
    constraint conditions; the rest are radially shrunk per block, because
    the summed decrease is an indefinite quadratic form on the product set.
    """
    from .lmi import recover_gains  # local import: lmi depends on conic only

    beta = np.asarray(tv.beta, float)
    if gains is None:
        gains = recover_gains(cs, design, tv)
    rng = np.random.default_rng(seed)
    X = sample_product_set(cs, design.Z, beta, n_samples, rng, interior_fraction)
    nxt = st = inp = -np.inf
    dec = np.zeros(n_samples)
    per = []
    for view in cs.views:
        i = view.index
        K = gains[i]
        XN = X[:, view.nbr_state_idx]
        Acl = view.A_N + view.B @ K
        Xp = XN @ Acl.T
        q_next = _kernels.quad_rows(Xp, design.Z[i])
        v_next = float(np.max(q_next - beta[i] ** 2))
        v_state = float(_kernels.max_affine_violation(view.G_N, view.g_N, XN)) if view.n_g else -np.inf
        v_in = float(_kernels.max_affine_violation(view.H @ K, view.h, XN)) if view.n_h else -np.inf
        W = view.Q_N + K.T @ view.R @ K
        dec += (
            _kernels.quad_rows(Xp, design.P[i])
            - _kernels.quad_rows(X[:, view.state_idx], design.P[i])
            + _kernels.quad_rows(XN, W)
        )
        per.append({"next_state": v_next, "state": v_state, "input": v_in})
        nxt, st, inp = max(nxt, v_next), max(st, v_state), max(inp, v_in)
    return ValidationReport(
        n_samples,
        seed,
        float(nxt),
        float(st),
        float(inp),
        float(np.max(dec)) if n_samples else 0.0,
        per,
        decrease_eigenvalue(cs, design.P, gains),
    )


def decrease_matrix(cs: CoupledSystem, P_blocks, gains) -> np.ndarray:
    """Matrix D with x'Dx = sum_i [V_i(x_i+) - V_i(x_i) + l_i(x_Ni, K_Ni x_Ni)]."""
    D = np.zeros((cs.n, cs.n))
    for view in cs.views:
        i = view.index
        K = gains[i]
        Acl = view.A_N + view.B @ K
        local = Acl.T @ P_blocks[i] @ Acl + view.Q_N + K.T @ view.R @ K
        D += cs.W[i].T @ local @ cs.W[i] - cs.U[i].T @ P_blocks[i] @ cs.U[i]
    return 0.5 * (D + D.T)


def decrease_eigenvalue(cs: CoupledSystem, P_blocks, gains) -> float:
    """lambda_max of :func:`decrease_matrix`; <= 0 iff the decrease holds for every x."""
    return float(np.linalg.eigvalsh(decrease_matrix(cs, P_blocks, gains))[-1])
