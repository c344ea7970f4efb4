import numpy as np
import pytest
import torch

from pairseg.affinity import (
    affinity_map,
    check_affinity,
    dar_combine,
    dar_refine,
    reverse_affinity,
)
from pairseg.errors import DegenerateRowError, ShapeError, SingularFeatureError


def rand_affinity(rng: np.random.Generator, n: int) -> torch.Tensor:
    raw = rng.random((n, n)) + 0.05
    return torch.from_numpy(raw / raw.sum(axis=1, keepdims=True))


def rand_prob(rng: np.random.Generator, n: int, c: int) -> torch.Tensor:
    raw = rng.random((n, c)) + 0.05
    return torch.from_numpy(raw / raw.sum(axis=1, keepdims=True))


class TestAffinityMap:
    def test_identical_features_give_uniform_rows(self):
        f = torch.ones((4, 3), dtype=torch.float64) * 2.5
        p = affinity_map(f)
        assert torch.allclose(p, torch.full((4, 4), 0.25, dtype=torch.float64))

    def test_orthogonal_pair(self):
        # cosine 0 -> shifted weight 0.5; self weight 1; row [1, .5]/1.5
        f = torch.eye(2, dtype=torch.float64)
        p = affinity_map(f)
        expected = torch.tensor([[2 / 3, 1 / 3], [1 / 3, 2 / 3]], dtype=torch.float64)
        assert torch.allclose(p, expected)

    def test_rows_sum_to_one_random(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n, d = rng.integers(2, 9), rng.integers(1, 6)
            f = torch.from_numpy(rng.normal(size=(n, d)) + 0.01)
            p = affinity_map(f)
            assert torch.allclose(p.sum(dim=-1), torch.ones(n, dtype=torch.float64),
                                  atol=1e-12)
            assert p.min() >= 0 and p.max() <= 1

    def test_zero_norm_feature_rejected(self):
        f = torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
        with pytest.raises(SingularFeatureError):
            affinity_map(f)

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(4)
        f = torch.from_numpy(rng.normal(size=(3, 5, 2)))
        batched = affinity_map(f)
        for b in range(3):
            assert torch.allclose(batched[b], affinity_map(f[b]))

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(5)
        f = torch.from_numpy(rng.normal(size=(6, 4)))
        perm = torch.from_numpy(rng.permutation(6))
        p = affinity_map(f)
        p_perm = affinity_map(f[perm])
        assert torch.allclose(p_perm, p[perm][:, perm])


class TestReverseAffinity:
    def test_symmetric_fixed_point(self):
        p = torch.full((2, 2), 0.5, dtype=torch.float64)
        assert torch.allclose(reverse_affinity(p), p)

    def test_hand_normalization(self):
        p = torch.tensor([[0.9, 0.1], [0.3, 0.7]], dtype=torch.float64)
        expected = torch.tensor([[0.1, 0.9], [0.7, 0.3]], dtype=torch.float64)
        assert torch.allclose(reverse_affinity(p), expected)

    def test_output_is_valid_affinity(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            p = rand_affinity(rng, int(rng.integers(2, 8)))
            check_affinity(reverse_affinity(p))

    def test_single_pixel_degenerate(self):
        p = torch.ones((1, 1), dtype=torch.float64)
        with pytest.raises(DegenerateRowError):
            reverse_affinity(p)

    def test_invalid_rows_rejected(self):
        with pytest.raises(ShapeError):
            reverse_affinity(torch.tensor([[0.9, 0.9], [0.1, 0.1]], dtype=torch.float64))


class TestDar:
    def test_hand_example(self):
        q = torch.tensor([[0.8, 0.2], [0.4, 0.6]], dtype=torch.float64)
        p_aff = torch.tensor([[0.6, 0.4], [0.4, 0.6]], dtype=torch.float64)
        expected = torch.tensor([[0.84, 0.16], [0.36, 0.64]], dtype=torch.float64)
        assert torch.allclose(dar_combine(q, p_aff), expected, atol=1e-12)
        refined = dar_refine(q, p_aff)
        assert torch.allclose(refined, expected, atol=1e-9)

    def test_constant_map_fixed_point(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n, c = int(rng.integers(2, 10)), int(rng.integers(2, 6))
            p_aff = rand_affinity(rng, n)
            u = rand_prob(rng, 1, c).repeat(n, 1)
            out = dar_combine(u, p_aff)
            assert (out - u).abs().max() < 1e-12

    def test_identity_affinity_sharpens(self):
        # P' = I makes P'_re uniform off-diagonal; the refinement moves each
        # pixel away from the mean of the other pixels
        rng = np.random.default_rng(8)
        q = rand_prob(rng, 3, 4)
        p_aff = torch.eye(3, dtype=torch.float64)
        refined = dar_refine(q, p_aff)
        p_re = reverse_affinity(p_aff)
        push = q - torch.matmul(p_re, q)
        raw = dar_combine(q, p_aff)
        assert torch.allclose(raw - q, 0.5 * push, atol=1e-12)
        assert torch.allclose(refined.sum(dim=-1), torch.ones(3, dtype=torch.float64))
        # direction check: entries above the other-pixel mean grow
        grows = (raw - q) > 0
        above = push > 0
        assert torch.equal(grows, above)

    def test_output_on_simplex(self):
        rng = np.random.default_rng(9)
        for _ in range(30):
            n, c = int(rng.integers(2, 9)), int(rng.integers(2, 5))
            refined = dar_refine(rand_prob(rng, n, c), rand_affinity(rng, n))
            assert refined.min() >= 0
            assert torch.allclose(refined.sum(dim=-1),
                                  torch.ones(n, dtype=torch.float64), atol=1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(10)
        q = rand_prob(rng, 5, 3)
        p_aff = rand_affinity(rng, 5)
        perm = torch.from_numpy(rng.permutation(5))
        a = dar_refine(q, p_aff)[perm]
        b = dar_refine(q[perm], p_aff[perm][:, perm])
        assert torch.allclose(a, b, atol=1e-12)

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(11)
        q = torch.stack([rand_prob(rng, 4, 3) for _ in range(3)])
        p_aff = torch.stack([rand_affinity(rng, 4) for _ in range(3)])
        batched = dar_refine(q, p_aff)
        for b in range(3):
            assert torch.allclose(batched[b], dar_refine(q[b], p_aff[b]))

    def test_size_mismatch(self):
        rng = np.random.default_rng(12)
        with pytest.raises(ShapeError):
            dar_combine(rand_prob(rng, 3, 2), rand_affinity(rng, 4))

    def test_gradients_flow_to_features_and_probs(self):
        # a plain .sum() would be constant (rows renormalize to 1), so weight
        # the entries to get a non-degenerate objective
        rng = np.random.default_rng(13)
        f = torch.from_numpy(rng.normal(size=(4, 3))).requires_grad_(True)
        q = rand_prob(rng, 4, 2).requires_grad_(True)
        w = torch.from_numpy(rng.normal(size=(4, 2)))
        out = (dar_refine(q, affinity_map(f)) * w).sum()
        out.backward()
        assert torch.isfinite(f.grad).all()
        assert torch.isfinite(q.grad).all()
        assert f.grad.abs().sum() > 0
        assert q.grad.abs().sum() > 0
