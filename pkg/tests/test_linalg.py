import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from model_tailor import linalg
from model_tailor.errors import DefinitenessError, ShapeError, SingularPivotError, ValidationError

from conftest import random_spd


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self, rng):
        a = rng.normal(size=(3, 5))
        assert np.array_equal(linalg.matmul(np.eye(3), a), a)

    def test_hand_checked(self):
        out = linalg.matmul([[1.0, 2.0], [3.0, 4.0]], [[0.0], [1.0]])
        assert np.array_equal(out, [[2.0], [4.0]])

    def test_matches_naive_triple_loop_exactly(self, rng):
        a = rng.normal(size=(8, 8))
        b = rng.normal(size=(8, 8))
        assert np.array_equal(linalg.matmul(a, b), naive_matmul(a, b))

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ShapeError):
            linalg.matmul(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))

    def test_rejects_non_finite(self):
        with pytest.raises(ValidationError):
            linalg.matmul([[np.nan, 0.0]], [[1.0], [1.0]])

    def test_bit_identical_repeats(self, rng):
        a = rng.normal(size=(7, 9))
        b = rng.normal(size=(9, 4))
        first = linalg.matmul(a, b)
        assert all(np.array_equal(first, linalg.matmul(a, b)) for _ in range(5))


class TestCholesky:
    def test_identity(self):
        assert np.array_equal(linalg.cholesky(np.eye(4)), np.eye(4))

    def test_closed_form_2x2(self):
        low = linalg.cholesky([[4.0, 2.0], [2.0, 3.0]])
        expected = np.array([[2.0, 0.0], [1.0, np.sqrt(2.0)]])
        assert np.allclose(low, expected, atol=1e-15)

    def test_random_spd_reconstructs(self, rng):
        h = random_spd(rng, 12)
        low = linalg.cholesky(h)
        assert np.max(np.abs(low @ low.T - h)) <= 1e-9 * np.max(np.abs(h))
        assert np.array_equal(low, np.tril(low))

    def test_non_pd_names_pivot(self):
        # leading 1x1 block fine, second pivot fails
        with pytest.raises(DefinitenessError) as err:
            linalg.cholesky([[1.0, 2.0], [2.0, 1.0]])
        assert err.value.pivot == 1

    def test_asymmetric_rejected(self):
        with pytest.raises(ValidationError):
            linalg.cholesky([[1.0, 0.5], [0.0, 1.0]])

    def test_does_not_mutate_input(self, rng):
        h = random_spd(rng, 5)
        snapshot = h.copy()
        linalg.cholesky(h)
        assert np.array_equal(h, snapshot)


class TestSymInverse:
    def test_scalar_matrix(self):
        assert np.allclose(linalg.sym_inverse(2.0 * np.eye(3)), 0.5 * np.eye(3), atol=1e-15)

    def test_closed_form_2x2(self):
        inv = linalg.sym_inverse([[2.0, 1.0], [1.0, 2.0]])
        expected = np.array([[2.0, -1.0], [-1.0, 2.0]]) / 3.0
        assert np.allclose(inv, expected, atol=1e-15)

    def test_multiply_back(self, rng):
        h = random_spd(rng, 10)
        prod = linalg.matmul(h, linalg.sym_inverse(h))
        assert np.max(np.abs(prod - np.eye(10))) <= 1e-8

    def test_result_symmetric(self, rng):
        inv = linalg.sym_inverse(random_spd(rng, 9))
        assert np.max(np.abs(inv - inv.T)) <= 1e-10

    def test_involution(self, rng):
        h = random_spd(rng, 6)
        back = linalg.sym_inverse(linalg.sym_inverse(h))
        assert np.max(np.abs(back - h)) <= 1e-6 * np.max(np.abs(h))


class TestObsDowndate:
    def test_identity_case(self):
        out = linalg.obs_downdate(np.eye(3), 1)
        assert np.array_equal(out, np.diag([1.0, 0.0, 1.0]))

    def test_matches_submatrix_inverse_2x2(self):
        hinv = linalg.sym_inverse([[2.0, 1.0], [1.0, 2.0]])
        out = linalg.obs_downdate(hinv, 0)
        # survivor block = inverse of the 1x1 restriction of H, i.e. 1/2
        assert np.allclose(out, [[0.0, 0.0], [0.0, 0.5]], atol=1e-12)

    @pytest.mark.parametrize("m", range(8))
    def test_delete_and_invert_oracle(self, rng, m):
        h = random_spd(rng, 8)
        hinv = linalg.sym_inverse(h)
        down = linalg.obs_downdate(hinv, m)
        rest = [i for i in range(8) if i != m]
        oracle = linalg.sym_inverse(h[np.ix_(rest, rest)])
        assert np.max(np.abs(down[np.ix_(rest, rest)] - oracle)) <= 1e-8

    def test_eliminated_row_col_exact_zero(self, rng):
        hinv = linalg.sym_inverse(random_spd(rng, 6))
        out = linalg.obs_downdate(hinv, 4)
        assert not out[4, :].any() and not out[:, 4].any()

    def test_commutes_across_order(self, rng):
        hinv = linalg.sym_inverse(random_spd(rng, 8))
        ab = linalg.obs_downdate(linalg.obs_downdate(hinv, 2), 5)
        ba = linalg.obs_downdate(linalg.obs_downdate(hinv, 5), 2)
        assert np.max(np.abs(ab - ba)) <= 1e-9

    def test_singular_pivot(self):
        hinv = np.eye(3)
        hinv[1, 1] = 1e-13
        with pytest.raises(SingularPivotError):
            linalg.obs_downdate(hinv, 1)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), pair=st.tuples(st.integers(0, 5), st.integers(0, 5)))
def test_downdate_commutativity_property(seed, pair):
    m1, m2 = pair
    if m1 == m2:
        return
    h = random_spd(np.random.default_rng(seed), 6)
    hinv = linalg.sym_inverse(h)
    ab = linalg.obs_downdate(linalg.obs_downdate(hinv, m1), m2)
    ba = linalg.obs_downdate(linalg.obs_downdate(hinv, m2), m1)
    assert np.max(np.abs(ab - ba)) <= 1e-9
