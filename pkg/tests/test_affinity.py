import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protomatch.affinity import (
    COSINE,
    DistanceMatrix,
    cosine_distance_matrix,
    jaccard_distance_matrix,
    k_reciprocal_neighbors,
)
from protomatch.errors import ParameterError

from oracles import brute_force_jaccard


def on_circle(angles):
    """Unit vectors in the plane at the given angles."""
    a = np.asarray(angles, dtype=np.float64)
    return np.stack([np.cos(a), np.sin(a)], axis=1)


def two_blob_points(radius=0.01, separation=1.5):
    """Two 3-point blobs whose across-blob cosine distance is `separation`."""
    theta = np.arccos(1.0 - separation)
    offsets = np.array([-radius, 0.0, radius])
    return on_circle(np.concatenate([offsets, theta + offsets]))


class TestCosineDistance:
    def test_identical_orthogonal_antipodal(self):
        x = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        d = cosine_distance_matrix(x).values
        assert d[0, 1] == pytest.approx(0.0, abs=1e-12)
        assert d[0, 2] == pytest.approx(1.0, abs=1e-12)
        assert d[0, 3] == pytest.approx(2.0, abs=1e-12)

    def test_symmetric_zero_diagonal(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(12, 5))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        d = cosine_distance_matrix(x).values
        np.testing.assert_array_equal(d, d.T)
        np.testing.assert_array_equal(np.diag(d), np.zeros(12))
        assert d.min() >= 0.0 and d.max() <= 2.0


def line_distance(points):
    p = np.asarray(points, dtype=np.float64)
    return DistanceMatrix(np.abs(p[:, None] - p[None, :]), kind=COSINE)


class TestKReciprocal:
    def test_equidistant_triangle(self):
        d = DistanceMatrix(np.array([[0, 1, 1], [1, 0, 1], [1, 1, 0]], dtype=float), COSINE)
        for i in range(3):
            got = set(k_reciprocal_neighbors(d, i, 2).tolist())
            assert got == {0, 1, 2} - {i}

    def test_four_point_line_hand_enumeration(self):
        # points 0, 1, 2.1, 3.3: kNN(k=1) chains are 0<->1, 2.1->1, 3.3->2.1,
        # so only the mutual 0<->1 link survives the reciprocal test.
        d = line_distance([0.0, 1.0, 2.1, 3.3])
        assert k_reciprocal_neighbors(d, 0, 1).tolist() == [1]
        assert k_reciprocal_neighbors(d, 1, 1).tolist() == [0]
        assert k_reciprocal_neighbors(d, 2, 1).tolist() == []
        assert k_reciprocal_neighbors(d, 3, 1).tolist() == []

    def test_k_equals_n_minus_one(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(6, 4))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        d = cosine_distance_matrix(x)
        for i in range(6):
            assert set(k_reciprocal_neighbors(d, i, 5).tolist()) == set(range(6)) - {i}

    def test_k_too_large(self):
        d = line_distance([0.0, 1.0])
        with pytest.raises(ParameterError):
            k_reciprocal_neighbors(d, 0, 2)


class TestJaccardDistance:
    def test_duplicates_have_zero_distance(self):
        x = on_circle([0.0, 0.0, 0.7, 1.4, 2.1])
        base = cosine_distance_matrix(x)
        jac = jaccard_distance_matrix(base, k1=2, k2=2).values
        assert jac[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_disjoint_membership_sets_give_one(self):
        x = two_blob_points()
        base = cosine_distance_matrix(x)
        jac = jaccard_distance_matrix(base, k1=1, k2=1, expansion=False, query_expansion=False).values
        # blobs of 3 with k1=1: membership support never leaves the blob
        assert jac[0, 3] == pytest.approx(1.0, abs=1e-12)
        assert jac[2, 5] == pytest.approx(1.0, abs=1e-12)

    def test_two_blob_construction_matches_oracle(self):
        x = two_blob_points()
        base = cosine_distance_matrix(x)
        jac = jaccard_distance_matrix(base, k1=2, k2=1).values
        expected = brute_force_jaccard(base.values, k1=2, k2=1)
        np.testing.assert_allclose(jac, expected, atol=1e-12)
        within = [jac[i, j] for i in range(3) for j in range(3) if i != j]
        within += [jac[i, j] for i in range(3, 6) for j in range(3, 6) if i != j]
        across = [jac[i, j] for i in range(3) for j in range(3, 6)]
        assert max(within) < min(across)

    def test_oracle_agreement_random(self):
        rng = np.random.default_rng(17)
        for trial in range(8):
            n = int(rng.integers(5, 14))
            x = rng.normal(size=(n, 4))
            x /= np.linalg.norm(x, axis=1, keepdims=True)
            base = cosine_distance_matrix(x)
            k1 = int(rng.integers(1, n - 1))
            k2 = int(rng.integers(1, k1 + 1))
            expansion = bool(rng.integers(2))
            qe = bool(rng.integers(2))
            got = jaccard_distance_matrix(base, k1=k1, k2=k2, expansion=expansion, query_expansion=qe).values
            want = brute_force_jaccard(base.values, k1=k1, k2=k2, expansion=expansion, query_expansion=qe)
            np.testing.assert_allclose(got, want, atol=1e-12)

    @given(seed=st.integers(0, 2**31), n=st.integers(3, 12))
    @settings(max_examples=30, deadline=None)
    def test_invariants(self, seed, n):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, 3))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        jac = jaccard_distance_matrix(cosine_distance_matrix(x), k1=min(3, n - 1), k2=2).values
        assert jac.min() >= 0.0 and jac.max() <= 1.0
        np.testing.assert_array_equal(np.diag(jac), np.zeros(n))
        np.testing.assert_array_equal(jac, jac.T)

    def test_k2_greater_than_k1_rejected(self):
        d = cosine_distance_matrix(on_circle([0.0, 1.0, 2.0]))
        with pytest.raises(ParameterError):
            jaccard_distance_matrix(d, k1=1, k2=2)

    def test_blob_separation_property_default_params(self):
        rng = np.random.default_rng(2)
        blob_a = rng.normal(scale=0.01, size=(8, 4)) + np.array([1.0, 0, 0, 0])
        blob_b = rng.normal(scale=0.01, size=(8, 4)) + np.array([0, 1.0, 0, 0])
        x = np.vstack([blob_a, blob_b])
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        jac = jaccard_distance_matrix(cosine_distance_matrix(x), k1=5, k2=2).values
        within = max(jac[i, j] for i in range(8) for j in range(8) if i != j)
        across = min(jac[i, j] for i in range(8) for j in range(8, 16))
        assert within < across
