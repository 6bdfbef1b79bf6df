import json

import numpy as np
import pytest

from admpc.errors import (
    CostNotPD,
    CouplingClosureViolated,
    DimensionMismatch,
    NotControllable,
    OriginNotInterior,
)
from admpc.model import (
    CtsLtiSystem,
    LtiSystem,
    Partition,
    decompose,
    euler_discretize,
    load_model,
    model_from_dict,
    model_to_dict,
    stage_cost,
    validate_system,
    zoh_discretize,
)

from . import oracles


def _illus_data(**over):
    box = np.vstack([np.eye(2), -np.eye(2)])
    d = dict(
        A=[[5, 0.1], [0.3, 0.9]], B=np.eye(2), G=box, g=np.full(4, 5.0), H=box, h=np.ones(4),
        Q=np.eye(2), R=0.1 * np.eye(2),
    )
    d.update(over)
    return d


class TestValidate:
    def test_illustrative_is_valid(self):
        sys_ = LtiSystem(**_illus_data())
        assert validate_system(sys_) is sys_

    def test_zero_input_map(self):
        with pytest.raises(NotControllable):
            validate_system(LtiSystem(**_illus_data(B=np.zeros((2, 2)))))

    def test_origin_on_boundary(self):
        with pytest.raises(OriginNotInterior):
            validate_system(LtiSystem(**_illus_data(g=[5.0, 0.0, 5.0, 5.0])))

    def test_indefinite_R(self):
        with pytest.raises(CostNotPD):
            validate_system(LtiSystem(**_illus_data(R=np.diag([0.1, -0.1]))))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            LtiSystem(**_illus_data(B=np.eye(3)))


class TestDecompose:
    def test_illustrative_views(self, illus):
        cs = illus[2]
        np.testing.assert_array_equal(cs.views[0].A_N, [[5, 0.1]])
        np.testing.assert_array_equal(cs.views[1].A_N, [[0.3, 0.9]])
        for v in cs.views:
            np.testing.assert_array_equal(v.B, [[1.0]])

    def test_views_match_selection_matrices(self, illus):
        sys_, _, cs = illus
        for i, v in enumerate(cs.views):
            np.testing.assert_array_equal(v.A_N, cs.U[i] @ sys_.A @ cs.W[i].T)
            np.testing.assert_array_equal(v.B, cs.U[i] @ sys_.B @ cs.V[i].T)
            np.testing.assert_array_equal(cs.U[i] @ cs.U[i].T, np.eye(v.n_i))

    def test_block_diagonal_plant(self):
        A = np.array([[0.5, 1.0, 0, 0], [0, 0.7, 0, 0], [0, 0, 1.1, 0.2], [0, 0, 0, 0.4]])
        B = np.array([[0, 0], [1, 0], [0, 0], [0, 1.0]])
        box = np.vstack([np.eye(4), -np.eye(4)])
        sys_ = validate_system(LtiSystem(A, B, box, np.ones(8), np.zeros((0, 2)), [], np.eye(4), np.eye(2)))
        part = Partition(states=((0, 1), (2, 3)), inputs=((0,), (1,)), neighbors=((0,), (1,)))
        cs = decompose(sys_, part)
        np.testing.assert_array_equal(cs.views[0].A_N, A[:2, :2])
        np.testing.assert_array_equal(cs.views[1].A_N, A[2:, 2:])

    def test_missing_neighbor(self, illus):
        part = Partition(states=((0,), (1,)), inputs=((0,), (1,)), neighbors=((0,), (0, 1)))
        with pytest.raises(CouplingClosureViolated):
            decompose(illus[0], part)

    def test_reassembly(self, illus, smd3):
        rng = np.random.default_rng(3)
        pred = smd3.prediction_model()
        for sys_, cs in ((illus[0], illus[2]), (pred, decompose(pred, smd3.partition))):
            x = rng.standard_normal(sys_.n)
            for _ in range(10):
                u = rng.standard_normal(sys_.m)
                np.testing.assert_allclose(cs.step_local(x, u), sys_.step(x, u), atol=1e-12)
                x = sys_.step(x, u)


class TestStageCost:
    def test_zero(self, illus):
        assert stage_cost(illus[2].views[0], [0, 0], [0]) == 0.0

    def test_illustrative_value(self, illus):
        # the own state is the first neighbor coordinate of subsystem 1
        assert stage_cost(illus[2].views[0], [1, 0], [1]) == pytest.approx(1.1)

    def test_sum_equals_global(self, illus, smd3):
        rng = np.random.default_rng(0)
        pred = smd3.prediction_model()
        for sys_, cs in ((illus[0], illus[2]), (pred, decompose(pred, smd3.partition))):
            for _ in range(20):
                x, u = rng.standard_normal(sys_.n), rng.standard_normal(sys_.m)
                assert cs.stage_cost(x, u) == pytest.approx(sys_.stage_cost(x, u), abs=1e-12)

    def test_dimension_mismatch(self, illus):
        with pytest.raises(DimensionMismatch):
            stage_cost(illus[2].views[0], [1.0], [1.0])


def _cts(A_c, B_c):
    n, m = np.shape(B_c)
    return CtsLtiSystem(A_c, B_c, np.zeros((0, n)), [], np.zeros((0, m)), [], np.eye(n), np.eye(m))


class TestDiscretize:
    def test_zoh_zero_dynamics(self):
        d = zoh_discretize(_cts(np.zeros((2, 2)), np.eye(2)), 0.1)
        np.testing.assert_allclose(d.A, np.eye(2), atol=1e-15)
        np.testing.assert_allclose(d.B, 0.1 * np.eye(2), atol=1e-15)

    def test_zoh_scalar(self):
        d = zoh_discretize(_cts([[-0.7]], [[2.0]]), 0.3)
        assert d.A[0, 0] == pytest.approx(np.exp(-0.21), abs=1e-14)
        assert d.B[0, 0] == pytest.approx(2.0 * (1 - np.exp(-0.21)) / 0.7, abs=1e-14)

    def test_zoh_chain_matches_series(self, smd3):
        A, B = oracles.zoh_series(smd3.cts.A_c, smd3.cts.B_c, 0.1)
        d = smd3.simulation_model()
        np.testing.assert_allclose(d.A, A, atol=1e-10, rtol=0)
        np.testing.assert_allclose(d.B, B, atol=1e-10, rtol=0)

    def test_euler_definition(self, smd3):
        d = euler_discretize(smd3.cts, 0.1)
        np.testing.assert_array_equal(d.A, np.eye(6) + 0.1 * smd3.cts.A_c)
        np.testing.assert_array_equal(d.B, 0.1 * smd3.cts.B_c)
        pattern = (np.eye(6) + smd3.cts.A_c) != 0
        assert np.array_equal(d.A != 0, pattern)

    def test_bad_step(self, smd3):
        with pytest.raises(ValueError):
            euler_discretize(smd3.cts, 0.0)


class TestModelFile:
    def test_roundtrip(self, tmp_path, illus):
        sys_, part, _ = illus
        path = tmp_path / "m.json"
        path.write_text(json.dumps(model_to_dict(sys_, part, name="two-state")))
        mf = load_model(path)
        np.testing.assert_array_equal(mf.system.A, sys_.A)
        assert mf.partition == part
        assert not mf.continuous

    def test_continuous(self, smd3):
        d = model_to_dict(smd3.cts, smd3.partition, dt=0.1)
        mf = model_from_dict(json.loads(json.dumps(d)))
        assert mf.continuous and mf.dt == 0.1
        np.testing.assert_array_equal(mf.system.A_c, smd3.cts.A_c)

    def test_missing_field(self):
        with pytest.raises(DimensionMismatch):
            model_from_dict({"n": 1, "m": 1, "A": [[1.0]]})

    def test_default_partition_is_single(self):
        d = {"n": 1, "m": 1, "A": [[1.2]], "B": [[1.0]], "Q": [[1.0]], "R": [[1.0]]}
        mf = model_from_dict(d)
        assert mf.partition.M == 1
