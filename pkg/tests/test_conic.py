import io

import cvxpy as cp
import numpy as np
import pytest

from admpc.conic import Cone, ConicProblem, Status, ToleranceConfig, psd_residual, solve
from admpc.errors import BuildError
from admpc.lmi import build_theorem1_synthesis


def test_nonneg_lp():
    p = ConicProblem("lp")
    x = p.var("x")
    p.add_nonneg(x - 1)
    p.minimize(x)
    sol = solve(p)
    assert sol.status is Status.OPTIMAL
    assert sol["x"] == pytest.approx(1.0, abs=1e-7)
    assert sol.primal_residual <= 1e-8


def test_psd_determinant():
    p = ConicProblem("psd")
    a = p.var("a")
    p.add_psd(cp.bmat([[1, a], [a, 1]]))
    p.minimize(-a)
    sol = solve(p)
    assert sol.ok
    assert sol["a"] == pytest.approx(1.0, abs=1e-6)


def test_infeasible_is_a_status():
    p = ConicProblem("bad")
    x = p.var("x")
    p.add_nonneg(x - 1)
    p.add_nonneg(-x)
    p.minimize(x)
    assert solve(p).status is Status.INFEASIBLE


def test_unbounded_is_a_status():
    p = ConicProblem("unb")
    x = p.var("x")
    p.add_nonneg(-x)
    p.minimize(x)
    assert solve(p).status is Status.UNBOUNDED


def test_asymmetric_psd_block_rejected():
    p = ConicProblem()
    x = p.var("x")
    with pytest.raises(BuildError):
        p.add_psd(cp.bmat([[1, x], [0, 1]]))


def test_nonaffine_rejected():
    p = ConicProblem()
    x = p.var("x")
    with pytest.raises(BuildError):
        p.add_nonneg(cp.square(x))


def test_duplicate_variable():
    p = ConicProblem()
    p.var("x")
    with pytest.raises(BuildError):
        p.var("x")


def test_theorem1_lmi_optimal(illus):
    sol = solve(build_theorem1_synthesis(illus[0]))
    assert sol.ok
    P = np.linalg.inv(sol["E"])
    assert psd_residual(P) > 0


def test_soc_and_counts():
    p = ConicProblem()
    x = p.var("x", (2,))
    t = p.var("t")
    p.add_soc(t, x - np.array([3.0, 4.0]))
    p.minimize(t)
    sol = solve(p)
    assert sol.ok
    assert sol["t"] == pytest.approx(0.0, abs=1e-6)
    assert p.count(Cone.SOC) == 1


def test_deterministic():
    def build():
        p = ConicProblem()
        X = p.var("X", (3, 3), symmetric=True)
        p.add_psd(X - np.eye(3))
        p.minimize(cp.trace(X @ np.diag([1.0, 2.0, 3.0])))
        return p

    a, b = solve(build()), solve(build())
    np.testing.assert_array_equal(a["X"], b["X"])


def test_dump_has_header():
    p = ConicProblem("d")
    x = p.var("x")
    p.add_nonneg(x - 1)
    p.minimize(x)
    text = p.dump(io.StringIO())
    assert text.splitlines()[0].strip()


def test_tolerance_contract():
    # an Optimal status must honor the configured tolerances
    tol = ToleranceConfig(feas_tol=1e-9, gap_tol=1e-9)
    p = ConicProblem()
    x = p.var("x", (4,))
    p.add_nonneg(x)
    p.add_zero(cp.sum(x) - 1)
    p.minimize(x @ np.arange(1.0, 5.0))
    sol = solve(p, tol)
    assert sol.ok
    assert sol.primal_residual <= 1e-9 and sol.duality_gap <= 1e-9


class TestPsdResidual:
    def test_identity(self):
        assert psd_residual(np.eye(3)) == 1.0

    def test_indefinite(self):
        assert psd_residual(np.diag([1.0, -2.0])) == -2.0

    def test_gram(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            A = rng.standard_normal((5, 4))
            assert psd_residual(A.T @ A) >= -1e-12

    def test_not_square(self):
        with pytest.raises(BuildError):
            psd_residual(np.zeros((2, 3)))


def test_retry_settings_on_same_problem():
    # the retry ladder re-solves one problem object with different backend settings
    from admpc.conic import _solve_once

    p = ConicProblem("retry")
    x = p.var("x", (2,))
    p.add_nonneg(x - 1)
    p.minimize(cp.sum(x))
    tol = ToleranceConfig()
    a = _solve_once(p, tol, 0.1, True)
    b = _solve_once(p, tol, 0.1, False)
    assert a.ok and b.ok
    np.testing.assert_allclose(a["x"], b["x"], atol=1e-7)
