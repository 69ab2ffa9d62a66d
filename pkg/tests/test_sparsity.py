"""Mask construction, application, enforcement, and N:M structure."""

import numpy as np
import pytest

from prunelab.errors import ContractError, DimensionError, PatternError
from prunelab.optim import AdamW
from prunelab.sparsity import (
    SemiStructured,
    SparsityMask,
    Unstructured,
    apply_mask,
    build_mask,
    enforce_mask,
    magnitude_scores,
    parse_pattern,
    sparsity_of,
)
from prunelab.tensor import Parameter


def nm_group_counts(mask: SparsityMask, m: int) -> np.ndarray:
    rows, cols = mask.shape
    return mask.values.reshape(rows, cols // m, m).sum(axis=2)


class TestMagnitudeScores:
    def test_absolute_value(self):
        w = np.array([[-3.0, 1.0], [2.0, -4.0]])
        assert np.array_equal(magnitude_scores(w), [[3.0, 1.0], [2.0, 4.0]])

    def test_all_zero(self):
        assert np.array_equal(magnitude_scores(np.zeros((3, 3))), np.zeros((3, 3)))

    def test_row_permutation_equivariance(self, rng):
        w = rng.standard_normal((6, 5))
        perm = rng.permutation(6)
        assert np.array_equal(magnitude_scores(w)[perm], magnitude_scores(w[perm]))

    def test_requires_2d(self):
        with pytest.raises(DimensionError):
            magnitude_scores(np.zeros(5))


class TestBuildMask:
    def test_top2_of_4(self):
        mask = build_mask(np.array([[3.0, 1.0], [2.0, 4.0]]), Unstructured(0.5))
        assert mask.values.tolist() == [[1, 0], [0, 1]]

    def test_semistructured_1_2(self):
        mask = build_mask(np.array([[5.0, 2.0, 0.1, 7.0]]), SemiStructured(1, 2))
        assert mask.values.tolist() == [[1, 0, 0, 1]]

    def test_tie_rule_keeps_lower_flat_index(self):
        mask = build_mask(np.ones((2, 2)), Unstructured(0.5))
        assert mask.values.tolist() == [[1, 1], [0, 0]]

    def test_unstructured_zero_count_exact(self, rng):
        for s in (0.3, 0.5, 0.62, 0.8):
            scores = rng.random((13, 17))
            mask = build_mask(scores, Unstructured(s))
            assert (mask.values == 0).sum() == round(s * scores.size)

    def test_row_grouping_counts_per_row(self, rng):
        scores = rng.random((9, 20))
        mask = build_mask(scores, Unstructured(0.4), grouping="row")
        assert np.all((mask.values == 0).sum(axis=1) == round(0.4 * 20))

    def test_nm_structure_exhaustive(self, rng):
        for n, m in ((2, 4), (4, 8), (1, 2)):
            scores = rng.random((12, 16))
            mask = build_mask(scores, SemiStructured(n, m))
            assert np.all(nm_group_counts(mask, m) == n)

    def test_nm_sparsity_exactly_half(self, rng):
        for n, m in ((2, 4), (4, 8)):
            mask = build_mask(rng.random((8, 32)), SemiStructured(n, m))
            assert sparsity_of(mask) == 0.5

    def test_2_4_mask_satisfies_4_8_constraint(self, rng):
        for _ in range(10):
            mask = build_mask(rng.random((6, 24)), SemiStructured(2, 4))
            assert np.all(nm_group_counts(mask, 8) == 4)

    def test_indivisible_dimension_rejected(self):
        with pytest.raises(PatternError):
            build_mask(np.ones((2, 6)), SemiStructured(2, 4))

    def test_invalid_patterns(self):
        with pytest.raises(PatternError):
            Unstructured(1.0)
        with pytest.raises(PatternError):
            SemiStructured(4, 4)

    def test_nonfinite_scores_rejected(self):
        scores = np.ones((2, 2))
        scores[0, 0] = np.nan
        with pytest.raises(ContractError):
            build_mask(scores, Unstructured(0.5))


class TestApplyMask:
    def test_hadamard(self):
        w = np.array([[1.0, 2.0], [3.0, 4.0]])
        mask = SparsityMask(np.array([[1, 0], [0, 1]], dtype=np.uint8), Unstructured(0.5))
        assert apply_mask(w, mask).tolist() == [[1.0, 0.0], [0.0, 4.0]]

    def test_all_ones_identity(self, rng):
        w = rng.standard_normal((3, 4))
        mask = SparsityMask(np.ones((3, 4), dtype=np.uint8), Unstructured(0.0))
        assert np.array_equal(apply_mask(w, mask), w)

    def test_zeros_only_grow(self, rng):
        w = rng.standard_normal((6, 6))
        w[0, :] = 0.0
        mask = build_mask(rng.random((6, 6)), Unstructured(0.5))
        sparsity_after = float((apply_mask(w, mask) == 0).mean())
        assert sparsity_after >= sparsity_of(mask)

    def test_shape_mismatch(self):
        mask = SparsityMask(np.ones((2, 2), dtype=np.uint8), Unstructured(0.0))
        with pytest.raises(DimensionError):
            apply_mask(np.ones((2, 3)), mask)


class TestEnforceMask:
    def test_masked_coordinates_exactly_zero_after_step(self, rng):
        p = Parameter(rng.standard_normal((5, 4)).astype(np.float32), "linear-weight")
        mask = build_mask(rng.random((5, 4)), Unstructured(0.5))
        enforce_mask(p, mask)
        opt = AdamW([p])
        p.grad = rng.standard_normal((5, 4)).astype(np.float32)
        opt.step(0.1)
        assert np.all(p.data[mask.values == 0] == 0.0)

    def test_support_never_grows_over_many_steps(self, rng):
        p = Parameter(rng.standard_normal((6, 6)).astype(np.float32), "linear-weight")
        mask = build_mask(rng.random((6, 6)), Unstructured(0.4))
        enforce_mask(p, mask)
        opt = AdamW([p])
        support = mask.values.astype(bool)
        for _ in range(1000):
            p.grad = rng.standard_normal((6, 6)).astype(np.float32)
            opt.step(0.05)
            assert not np.any(p.data[~support] != 0.0)

    def test_unregistered_param_unaffected(self, rng):
        p = Parameter(rng.standard_normal((3, 3)).astype(np.float32), "linear-weight")
        opt = AdamW([p])
        p.grad = np.ones((3, 3), dtype=np.float32)
        opt.step(0.1)
        assert np.all(p.data != 0.0)

    def test_double_registration_rejected(self, rng):
        p = Parameter(rng.standard_normal((4, 4)).astype(np.float32), "linear-weight")
        mask = build_mask(rng.random((4, 4)), Unstructured(0.5))
        enforce_mask(p, mask)
        with pytest.raises(ContractError):
            enforce_mask(p, mask)

    def test_enforcement_idempotent(self, rng):
        w = rng.standard_normal((4, 4))
        mask = build_mask(rng.random((4, 4)), Unstructured(0.5))
        once = apply_mask(w, mask)
        assert np.array_equal(apply_mask(once, mask), once)


class TestSparsityOf:
    def test_half(self):
        assert sparsity_of(np.array([[1, 0], [0, 1]], dtype=np.uint8)) == 0.5

    def test_all_ones(self):
        assert sparsity_of(np.ones((3, 3), dtype=np.uint8)) == 0.0

    def test_non_binary_rejected(self):
        with pytest.raises(ContractError):
            sparsity_of(np.array([[0.5, 1.0]]))


class TestParsePattern:
    def test_forms(self):
        assert parse_pattern("0.5") == Unstructured(0.5)
        assert parse_pattern("s=0.3") == Unstructured(0.3)
        assert parse_pattern("2:4") == SemiStructured(2, 4)
