import numpy as np
import pytest

from admpc import benchmarks as bm
from admpc import lmi, mpc
from admpc.model import decompose


@pytest.fixture(scope="session")
def illus():
    sys_, part = bm.illustrative_system()
    return sys_, part, decompose(sys_, part)


@pytest.fixture(scope="session")
def central(illus):
    return lmi.synthesize_centralized(illus[0])


@pytest.fixture(scope="session")
def design(illus):
    return lmi.build_design_phase(illus[2])


@pytest.fixture(scope="session")
def da_program(illus, design):
    form = mpc.formulate(illus[2], "D_Adaptive", 2, design=design)
    return mpc.build(form)


@pytest.fixture(scope="session")
def da_solution(da_program):
    """A solved adaptive instance with both levels strictly positive."""
    sol = da_program.solve(np.array([0.0, 2.0]))
    assert sol.ok
    return sol


@pytest.fixture(scope="session")
def smd3():
    return bm.smd_instance(bm.SmdChainSpec(M=3), seed=11)
