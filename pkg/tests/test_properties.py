"""Randomized property checks (hypothesis) on small instances."""
import numpy as np
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from admpc import benchmarks as bm
from admpc.conic import psd_residual
from admpc.lmi import DistributedTerminalDesign, block_residual, build_c6
from admpc.model import decompose
from admpc.terminal_sets import EllipsoidalSet, contains

from . import oracles

finite = st.floats(-3.0, 3.0, allow_nan=False, allow_infinity=False)


@st.composite
def pd_matrix(draw, n):
    A = draw(arrays(float, (n, n), elements=finite))
    return A @ A.T + 0.1 * np.eye(n)


@st.composite
def c6_case(draw):
    n = draw(st.sampled_from([2, 3]))
    Z = draw(pd_matrix(n))
    x = draw(arrays(float, (n,), elements=finite))
    beta = draw(st.floats(0.01, 5.0))
    return Z, x, beta


@settings(max_examples=200, deadline=None)
@given(c6_case())
def test_c6_schur_equivalence(case):
    Z, x, beta = case
    q = float(x @ Z @ x)
    assume(abs(q - beta**2) > 1e-6 * (1 + beta**2))
    d = DistributedTerminalDesign((Z,), (Z,), (np.zeros((1, Z.shape[0])),))
    psd = block_residual(build_c6(x, d, 0, beta)[0]) >= 0
    assert psd == (q < beta**2)


@settings(max_examples=100, deadline=None)
@given(arrays(float, st.tuples(st.integers(1, 6), st.integers(1, 5)), elements=finite))
def test_gram_psd(F):
    G = F.T @ F
    assert psd_residual(G) >= -1e-10 * (1 + np.abs(G).max())


@settings(max_examples=50, deadline=None)
@given(pd_matrix(2), st.floats(0.01, 10.0), arrays(float, (2,), elements=finite))
def test_ellipsoid_support(Z, level, a):
    assume(np.linalg.norm(a) > 1e-3)
    X = EllipsoidalSet(Z, level).boundary_samples(400, seed=0)
    s = oracles.ellipsoid_support(Z, level, a)
    assert np.max(X @ a) <= s * (1 + 1e-9) + 1e-12
    # the maximizer lies on the set
    x_star = level * np.linalg.solve(Z, a) / s
    assert contains(EllipsoidalSet(Z, level), x_star * (1 - 1e-9))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**16), st.integers(0, 2**16))
def test_chain_reassembly(M, seed, draw_seed):
    c = bm.smd_instance(bm.SmdChainSpec(M=M), seed)
    sys_ = c.prediction_model()
    cs = decompose(sys_, c.partition)
    rng = np.random.default_rng(draw_seed)
    x, u = rng.standard_normal(sys_.n), rng.standard_normal(sys_.m)
    np.testing.assert_allclose(cs.step_local(x, u), sys_.step(x, u), atol=1e-12)
    assert abs(cs.stage_cost(x, u) - sys_.stage_cost(x, u)) <= 1e-10 * (1 + sys_.stage_cost(x, u))
    gains = [rng.standard_normal((v.m_i, v.n_N)) for v in cs.views]
    K = cs.gain_from_local(gains)
    for v, Ki in zip(cs.views, gains):
        np.testing.assert_allclose((K @ x)[v.input_idx], Ki @ x[v.nbr_state_idx], atol=1e-12)
