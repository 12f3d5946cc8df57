import itertools

import numpy as np
import pytest

from model_tailor import linalg
from model_tailor.errors import DefinitenessError, SingularPivotError, ValidationError
from model_tailor.hessian import (
    CalibrationRecord,
    HessianState,
    build_hessian,
    eliminate,
    inv_diag,
    load_calibration,
    save_calibration,
)

from conftest import random_spd


def state_from_matrix(h, layer="t"):
    return HessianState(layer=layer, hessian=h, inverse=linalg.sym_inverse(h), damping=0.0)


class TestBuildHessian:
    def test_identity_activations_closed_form(self):
        rec = CalibrationRecord(layer="t", inputs=np.eye(3), count=3)
        state = build_hessian(rec, 0.0)
        assert np.allclose(state.hessian, (2.0 / 3.0) * np.eye(3), atol=1e-15)
        assert np.allclose(state.inverse, 1.5 * np.eye(3), atol=1e-12)
        assert state.eliminated == set()

    def test_zero_activations_fail_even_with_damping(self):
        rec = CalibrationRecord(layer="t", inputs=np.zeros((3, 5)), count=5)
        with pytest.raises(DefinitenessError):
            build_hessian(rec, 0.01)

    def test_multiply_back(self, rng):
        rec = CalibrationRecord(layer="t", inputs=rng.normal(size=(6, 20)), count=20)
        state = build_hessian(rec, 0.01)
        prod = linalg.matmul(state.hessian, state.inverse)
        assert np.max(np.abs(prod - np.eye(6))) <= 1e-8

    def test_damping_is_fraction_of_mean_diagonal(self, rng):
        x = rng.normal(size=(5, 15))
        rec = CalibrationRecord(layer="t", inputs=x, count=15)
        base = (2.0 / 15.0) * (x @ x.T)
        state = build_hessian(rec, 0.25)
        assert state.damping == pytest.approx(0.25 * np.mean(np.diag(base)))

    def test_negative_damping_rejected(self, rng):
        rec = CalibrationRecord(layer="t", inputs=rng.normal(size=(3, 9)), count=9)
        with pytest.raises(ValidationError):
            build_hessian(rec, -0.1)


class TestEliminate:
    def test_zeroes_row_and_column(self, rng):
        state = state_from_matrix(random_spd(rng, 5))
        eliminate(state, 2)
        assert not state.inverse[2, :].any() and not state.inverse[:, 2].any()
        assert state.eliminated == {2}

    def test_eliminate_all_but_one_leaves_scalar_inverse(self, rng):
        h = random_spd(rng, 4)
        state = state_from_matrix(h)
        for m in (0, 1, 3):
            eliminate(state, m)
        assert state.inverse[2, 2] == pytest.approx(1.0 / h[2, 2], rel=1e-9)

    def test_order_swap_agrees(self, rng):
        h = random_spd(rng, 8)
        a = state_from_matrix(h)
        b = state_from_matrix(h)
        eliminate(eliminate(a, 2), 5)
        eliminate(eliminate(b, 5), 2)
        assert np.max(np.abs(a.inverse - b.inverse)) <= 1e-9

    def test_repeat_elimination_rejected(self, rng):
        state = state_from_matrix(random_spd(rng, 4))
        eliminate(state, 1)
        with pytest.raises(ValidationError):
            eliminate(state, 1)

    def test_singular_pivot_rejected(self):
        h = np.eye(3)
        state = HessianState(layer="t", hessian=h, inverse=np.diag([1.0, 1e-13, 1.0]), damping=0.0)
        with pytest.raises(SingularPivotError):
            eliminate(state, 1)

    def test_restriction_matches_delete_and_invert_for_all_short_sequences(self, rng):
        h = random_spd(rng, 8)
        for length in (1, 2, 3):
            for seq in itertools.permutations(range(8), length):
                state = state_from_matrix(h)
                for m in seq:
                    eliminate(state, m)
                rest = [i for i in range(8) if i not in seq]
                oracle = linalg.sym_inverse(h[np.ix_(rest, rest)])
                got = state.inverse[np.ix_(rest, rest)]
                assert np.max(np.abs(got - oracle)) <= 1e-7 * max(1.0, np.max(np.abs(oracle)))


class TestInvDiag:
    def test_identity(self):
        state = state_from_matrix(np.eye(4))
        assert inv_diag(state) == [1.0, 1.0, 1.0, 1.0]

    def test_scaled_identity(self):
        state = state_from_matrix(2.0 * np.eye(3))
        assert inv_diag(state) == pytest.approx([0.5, 0.5, 0.5])

    def test_matches_full_inversion(self, rng):
        h = random_spd(rng, 7)
        state = state_from_matrix(h)
        full = linalg.sym_inverse(h)
        assert np.max(np.abs(np.array(inv_diag(state)) - np.diag(full))) <= 1e-9

    def test_eliminated_entries_absent(self, rng):
        state = state_from_matrix(random_spd(rng, 4))
        eliminate(state, 2)
        diag = inv_diag(state)
        assert diag[2] is None and all(v is not None for i, v in enumerate(diag) if i != 2)


class TestCalibrationIO:
    def test_round_trip(self, rng, tmp_path):
        records = {
            "layer_00": CalibrationRecord(layer="layer_00", inputs=rng.normal(size=(4, 9)), count=9),
            "layer_01": CalibrationRecord(layer="layer_01", inputs=rng.normal(size=(6, 9)), count=9),
        }
        import io

        sink = io.BytesIO()
        save_calibration(records, sink, metadata={"task_id": "beta"})
        back, meta = load_calibration(sink.getvalue())
        assert meta["task_id"] == "beta" and meta["kind"] == "calibration"
        assert set(back) == set(records)
        for name in records:
            assert np.array_equal(back[name].inputs, records[name].inputs)

    def test_wrong_kind_rejected(self):
        import io

        from model_tailor.checkpoint import Checkpoint, write_checkpoint

        sink = io.BytesIO()
        write_checkpoint(Checkpoint(metadata={"kind": "task_patch"}), sink)
        with pytest.raises(ValidationError):
            load_calibration(sink.getvalue())

    def test_bad_count_rejected(self, rng):
        with pytest.raises(ValidationError):
            CalibrationRecord(layer="t", inputs=rng.normal(size=(3, 5)), count=4)
