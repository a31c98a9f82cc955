from __future__ import annotations

import math

import numpy as np
import pytest

from expertspec import numerics as nx
from oracles import matvec, softmax as softmax_ref, splitmix64_reference


class TestRng:
    def test_matches_reference_splitmix(self):
        assert nx.Rng(42).next_u64(16).tolist() == splitmix64_reference(42, 16)

    def test_counter_mode_continues_stream(self):
        a = nx.Rng(9)
        first = a.next_u64(5).tolist() + a.next_u64(3).tolist()
        assert first == nx.Rng(9).next_u64(8).tolist()

    def test_same_seed_bit_identical_normals(self):
        x = nx.Rng(3).normal((40, 7), 0.5)
        y = nx.Rng(3).normal((40, 7), 0.5)
        assert x.dtype == np.float32
        assert x.tobytes() == y.tobytes()

    def test_normal_moments(self):
        z = nx.Rng(11).normal((200_000,)).astype(np.float64)
        assert abs(z.mean()) < 0.01
        assert abs(z.std() - 1.0) < 0.01

    def test_uniform_range_and_integers(self):
        u = nx.Rng(1).uniform(10_000)
        assert u.min() >= 0 and u.max() < 1
        ints = nx.Rng(1).integers(7, 10_000)
        assert set(ints.tolist()) == set(range(7))

    def test_derived_seeds_independent_of_other_labels(self):
        assert nx.derive_seed(5, "a") == nx.derive_seed(5, "a")
        assert nx.derive_seed(5, "a") != nx.derive_seed(5, "b")
        assert nx.derive_seed(5, "a") != nx.derive_seed(6, "a")


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_array_equal(nx.softmax([0, 0, 0, 0]), [0.25] * 4)

    def test_large_logits_do_not_overflow(self):
        p = nx.softmax([1000.0, 0.0])
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p, [1.0, 0.0], atol=1e-6)

    def test_against_double_oracle(self):
        np.testing.assert_allclose(nx.softmax([2.0, 1.0, 0.0]), softmax_ref([2.0, 1.0, 0.0]), atol=1e-6)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            nx.softmax([])

    def test_softmax64_rows(self, rng):
        x = rng.normal(size=(5, 9)) * 20
        p = nx.softmax64(x)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(p[2], softmax_ref(x[2].tolist()), atol=1e-12)


class TestTopK:
    def test_basic(self):
        ids, vals = nx.top_k([5, 1, 9], 1)
        assert ids.tolist() == [2] and vals.tolist() == [9]

    def test_ties_lower_index_first(self):
        ids, vals = nx.top_k([3, 3, 3], 2)
        assert ids.tolist() == [0, 1] and vals.tolist() == [3, 3]

    def test_random_vector_vs_sort(self, rng):
        v = rng.normal(size=128).astype(np.float32)
        ids, _ = nx.top_k(v, 8)
        assert ids.tolist() == sorted(range(128), key=lambda i: (-v[i], i))[:8]

    @pytest.mark.parametrize("k", [0, 4])
    def test_k_out_of_range(self, k):
        with pytest.raises(ValueError):
            nx.top_k([1, 2, 3], k)


class TestRmsNorm:
    def test_unit_vector(self):
        np.testing.assert_allclose(nx.rms_norm([1, 1, 1, 1], np.ones(4), 1e-12), [1, 1, 1, 1], atol=1e-6)

    def test_zero_stays_zero(self):
        assert not np.any(nx.rms_norm(np.zeros(5), np.full(5, 3.0), 0.0))

    def test_hand_value(self):
        out = nx.rms_norm([3, 4], [1, 1], 0.0)
        np.testing.assert_allclose(out, [3 / math.sqrt(12.5), 4 / math.sqrt(12.5)], rtol=1e-6)

    def test_errors(self):
        with pytest.raises(ValueError):
            nx.rms_norm([1, 2], [1, 1, 1], 1e-6)
        with pytest.raises(ValueError):
            nx.rms_norm([1, 2], [1, 1], -1.0)


class TestActivations:
    def test_silu_values(self):
        assert nx.silu(np.float32(0.0)) == 0.0
        assert abs(float(nx.silu(np.float32(30.0))) - 30.0) < 1e-6
        assert abs(float(nx.sigmoid(np.float64(1.0))) - 1 / (1 + math.exp(-1))) < 1e-12
        assert abs(float(nx.sigmoid(np.float32(1.0))) - 0.7310585786) < 1e-6

    def test_no_overflow_far_out(self):
        x = np.array([-1e4, -100, 100, 1e4], dtype=np.float32)
        y = nx.silu(x)
        assert np.all(np.isfinite(y))
        assert y[0] == 0 and y[-1] == 1e4


class TestCosineKl:
    def test_cosine(self):
        v = np.array([0.3, -2.0, 5.0])
        assert nx.cosine_similarity(v, v) == pytest.approx(1.0)
        assert nx.cosine_similarity(v, -v) == pytest.approx(-1.0)
        assert nx.cosine_similarity([1, 0], [1, 1]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)
        with pytest.raises(ValueError):
            nx.cosine_similarity([0, 0], [1, 0])
        with pytest.raises(ValueError):
            nx.cosine_similarity([1, 0], [1, 0, 0])

    def test_kl(self, rng):
        p = rng.dirichlet(np.ones(16))
        q = rng.dirichlet(np.ones(16))
        assert nx.kl_divergence(p, p) == 0.0
        assert nx.kl_divergence([1, 0], [0.5, 0.5]) == pytest.approx(math.log(2))
        ref = sum(a * math.log(a / b) for a, b in zip(p, q))
        assert nx.kl_divergence(p, q) == pytest.approx(ref, abs=1e-5)

    def test_kl_rejects_bad_inputs(self):
        with pytest.raises(ValueError, match="support"):
            nx.kl_divergence([0.5, 0.5], [1.0, 0.0])
        with pytest.raises(ValueError):
            nx.kl_divergence([0.6, 0.6], [0.5, 0.5])


class TestLinear:
    def test_identity_and_bias(self, rng):
        x = rng.normal(size=6).astype(np.float32)
        np.testing.assert_array_equal(nx.linear(np.eye(6), x, np.zeros(6)), x)
        b = rng.normal(size=3).astype(np.float32)
        np.testing.assert_array_equal(nx.linear(np.zeros((3, 6)), x, b), b)

    def test_vs_triple_loop(self, rng):
        W = rng.normal(size=(8, 4)).astype(np.float32)
        x = rng.normal(size=4).astype(np.float32)
        np.testing.assert_allclose(nx.linear(W, x), matvec(W, x), atol=1e-5)

    def test_mismatch_is_an_error(self):
        with pytest.raises(ValueError, match="dim mismatch"):
            nx.linear(np.zeros((3, 4)), np.zeros(5))
        with pytest.raises(ValueError, match="dim mismatch"):
            nx.linear(np.zeros((3, 4)), np.zeros(4), np.zeros(2))
