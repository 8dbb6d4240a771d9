import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semfeat.geometry import apply_homography
from semfeat.losses import (
    LossConfig,
    PROB_FLOOR,
    PairSets,
    descriptor_loss,
    hardest_negatives,
    keypoint_loss,
    mine_pairs,
    segmentation_loss,
    total_loss,
)
from semfeat.synthgen import TransformRanges, sample_transform, transform_homography

from conftest import grad_rel_error

LOG2 = math.log(2)


class TestKeypointLoss:
    def test_single_pixel_half(self):
        assert keypoint_loss(torch.tensor([[0.5]]), torch.tensor([[1.0]])).item() == pytest.approx(0.6931, abs=1e-4)

    def test_two_by_two_negatives(self):
        assert keypoint_loss(torch.full((2, 2), 0.5), torch.zeros(2, 2)).item() == pytest.approx(2.7726, abs=1e-4)

    def test_perfect_prediction_near_zero(self):
        g = (torch.rand(8, 8) > 0.8).double()
        bound = 64 * -math.log(1 - PROB_FLOOR)
        assert 0 <= keypoint_loss(g.clone(), g).item() <= bound + 1e-12

    def test_mean_and_mask(self):
        p, g = torch.full((2, 2), 0.5), torch.zeros(2, 2)
        assert keypoint_loss(p, g, reduction="mean").item() == pytest.approx(LOG2)
        mask = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
        assert keypoint_loss(p, g, mask=mask).item() == pytest.approx(LOG2)

    def test_pos_weight_scales_positive_term(self):
        assert keypoint_loss(torch.tensor([0.5]), torch.tensor([1.0]), pos_weight=3.0).item() == pytest.approx(3 * LOG2)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            keypoint_loss(torch.zeros(2, 2), torch.zeros(2, 3))

    def test_gradient(self):
        rng = np.random.default_rng(0)
        p = torch.tensor(rng.uniform(0.05, 0.95, (8, 8)), requires_grad=True)
        g = torch.tensor((rng.random((8, 8)) > 0.7).astype(float))
        assert grad_rel_error(lambda: keypoint_loss(p, g), {"p": p})["p"] <= 1e-3


class TestSegmentationLoss:
    def test_uniform_four_classes(self):
        y = torch.tensor([[[1.0, 0, 0, 0]]])
        assert segmentation_loss(torch.full((1, 1, 4), 0.25), y).item() == pytest.approx(1.3863, abs=1e-4)

    def test_additive_over_pixels(self):
        y = torch.tensor([[[1.0, 0, 0, 0]], [[0, 0, 1.0, 0]]])
        assert segmentation_loss(torch.full((2, 1, 4), 0.25), y).item() == pytest.approx(2.7726, abs=1e-4)

    def test_perfect_prediction(self):
        y = torch.nn.functional.one_hot(torch.randint(0, 5, (6, 6)), 5).double()
        assert segmentation_loss(y.clone(), y).item() == pytest.approx(0.0, abs=36 * 2e-7)

    def test_rejects_non_one_hot(self):
        with pytest.raises(ValueError, match="one-hot"):
            segmentation_loss(torch.full((1, 1, 3), 1 / 3), torch.tensor([[[1.0, 1.0, 0.0]]]))

    def test_class_dim_first(self):
        y = torch.nn.functional.one_hot(torch.randint(0, 4, (1, 3, 3)), 4).double()
        p = torch.softmax(torch.randn(1, 3, 3, 4, dtype=torch.float64), -1)
        a = segmentation_loss(p, y)
        b = segmentation_loss(p.permute(0, 3, 1, 2), y.permute(0, 3, 1, 2), class_dim=1)
        assert a.item() == pytest.approx(b.item())

    def test_gradient(self):
        rng = np.random.default_rng(1)
        logits = torch.tensor(rng.normal(size=(8, 8, 4)), requires_grad=True)
        y = torch.nn.functional.one_hot(torch.tensor(rng.integers(0, 4, (8, 8))), 4).double()
        fn = lambda: segmentation_loss(torch.softmax(logits, -1), y)  # noqa: E731
        assert grad_rel_error(fn, {"logits": logits})["logits"] <= 1e-3


def _unit_map(rng, h=6, w=6, d=8):
    x = rng.normal(size=(h, w, d))
    return torch.tensor(x / np.linalg.norm(x, axis=-1, keepdims=True))


def _pairs(pos_a, pos_b, neg_a=(), neg_b=()):
    arr = lambda v: np.asarray(v, dtype=np.int64).reshape(-1, 2)  # noqa: E731
    return PairSets(arr(pos_a), arr(pos_b), arr(neg_a), arr(neg_b))


class TestDescriptorLoss:
    def test_identical_positives_inactive(self):
        d = _unit_map(np.random.default_rng(0))
        pairs = _pairs([[0, 0], [3, 2], [5, 5]], [[0, 0], [3, 2], [5, 5]])
        assert descriptor_loss(d, d.clone(), pairs, 0.9, 0.2).item() == 0.0

    def _basis_maps(self, sim: float):
        a = torch.zeros(1, 2, 2, dtype=torch.float64)
        b = torch.zeros(1, 2, 2, dtype=torch.float64)
        a[0, 0] = torch.tensor([1.0, 0.0])
        b[0, 1] = torch.tensor([sim, math.sqrt(1 - sim**2)], dtype=torch.float64)
        b[0, 0] = torch.tensor([1.0, 0.0])
        return a, b

    def test_negative_hinge_boundary(self):
        a, b = self._basis_maps(0.2)
        assert descriptor_loss(a, b, _pairs([], [], [[0, 0]], [[1, 0]]), 0.9, 0.2).item() == pytest.approx(0.0, abs=1e-12)
        a, b = self._basis_maps(0.5)
        assert descriptor_loss(a, b, _pairs([], [], [[0, 0]], [[1, 0]]), 0.9, 0.2).item() == pytest.approx(0.3, abs=1e-4)

    def test_orthogonal_positive(self):
        a, b = self._basis_maps(0.0)
        assert descriptor_loss(a, b, _pairs([[0, 0]], [[1, 0]]), 0.9, 0.2).item() == pytest.approx(0.9, abs=1e-4)

    def test_matches_explicit_sum(self):
        rng = np.random.default_rng(2)
        a, b = _unit_map(rng), _unit_map(rng)
        pa, pb, na, nb = (rng.integers(0, 6, (7, 2)) for _ in range(4))
        expected = sum(max(0, 0.9 - float(a[y1, x1] @ b[y2, x2])) for (x1, y1), (x2, y2) in zip(pa, pb))
        expected += sum(max(0, float(a[y1, x1] @ b[y2, x2]) - 0.2) for (x1, y1), (x2, y2) in zip(na, nb))
        assert descriptor_loss(a, b, _pairs(pa, pb, na, nb), 0.9, 0.2).item() == pytest.approx(expected)

    def test_mean_divides_each_term(self):
        rng = np.random.default_rng(3)
        a, b = _unit_map(rng), _unit_map(rng)
        p = _pairs(rng.integers(0, 6, (4, 2)), rng.integers(0, 6, (4, 2)), rng.integers(0, 6, (2, 2)), rng.integers(0, 6, (2, 2)))
        pos_only = descriptor_loss(a, b, PairSets(p.pos_a, p.pos_b, p.neg_a[:0], p.neg_b[:0]), 0.9, 0.2)
        neg_only = descriptor_loss(a, b, PairSets(p.pos_a[:0], p.pos_b[:0], p.neg_a, p.neg_b), 0.9, 0.2)
        mean = descriptor_loss(a, b, p, 0.9, 0.2, reduction="mean")
        assert mean.item() == pytest.approx(pos_only.item() / 4 + neg_only.item() / 2)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(4)
        a, b = _unit_map(rng), _unit_map(rng)
        p = _pairs(*(rng.integers(0, 6, (8, 2)) for _ in range(4)))
        perm = rng.permutation(8)
        q = PairSets(p.pos_a[perm], p.pos_b[perm], p.neg_a[perm[::-1]], p.neg_b[perm[::-1]])
        assert descriptor_loss(a, b, p, 0.9, 0.2).item() == pytest.approx(descriptor_loss(a, b, q, 0.9, 0.2).item(), abs=1e-12)

    def test_out_of_bounds(self):
        d = _unit_map(np.random.default_rng(5))
        with pytest.raises(IndexError):
            descriptor_loss(d, d, _pairs([[6, 0]], [[0, 0]]), 0.9, 0.2)

    def test_gradient(self):
        rng = np.random.default_rng(6)
        raw_a = torch.tensor(rng.normal(size=(6, 6, 8)), requires_grad=True)
        raw_b = torch.tensor(rng.normal(size=(6, 6, 8)), requires_grad=True)
        p = _pairs(*(rng.integers(0, 6, (8, 2)) for _ in range(4)))

        def fn():
            return descriptor_loss(raw_a / raw_a.norm(dim=-1, keepdim=True), raw_b / raw_b.norm(dim=-1, keepdim=True), p, 0.9, 0.2)

        # hinge kinks are measure-zero; this seed keeps every similarity away from both margins
        errs = grad_rel_error(fn, {"a": raw_a, "b": raw_b}, samples=40)
        assert max(errs.values()) <= 1e-3, errs


class TestMinePairs:
    def test_identity(self):
        p = mine_pairs(np.eye(3), (16, 16), LossConfig(pairs_per_image=64), seed=0)
        assert len(p.pos_a) == 64 and np.array_equal(p.pos_a, p.pos_b)

    def test_translation_discards_out_of_bounds(self):
        H = np.array([[1.0, 0, 10], [0, 1, 0], [0, 0, 1]])
        p = mine_pairs(H, (32, 32), LossConfig(pairs_per_image=128), seed=1)
        assert np.array_equal(p.pos_b, p.pos_a + [10, 0])
        assert p.pos_b[:, 0].max() <= 31 and p.pos_a[:, 0].max() <= 21

    def test_deterministic(self):
        H = transform_homography(sample_transform(TransformRanges(), 3))
        a, b = (mine_pairs(H, (64, 64), LossConfig(), seed=(1, 2, 3)) for _ in range(2))
        assert all(np.array_equal(getattr(a, f), getattr(b, f)) for f in ("pos_a", "pos_b", "neg_a", "neg_b"))

    def test_singular_homography(self):
        with pytest.raises(ValueError):
            mine_pairs(np.zeros((3, 3)), (8, 8), LossConfig(), seed=0)

    @settings(max_examples=1000, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_reprojection_bounds(self, seed):
        cfg = LossConfig(pairs_per_image=64)
        H = transform_homography(sample_transform(TransformRanges(), seed))
        p = mine_pairs(H, (64, 64), cfg, seed)
        assert np.linalg.norm(apply_homography(H, p.pos_a) - p.pos_b, axis=1).max(initial=0) <= cfg.eps_pos
        assert np.linalg.norm(apply_homography(H, p.neg_a) - p.neg_b, axis=1).min(initial=np.inf) > cfg.eps_neg

    def test_hardest_negatives_respect_distance(self):
        rng = np.random.default_rng(7)
        a, b = _unit_map(rng, 16, 16), _unit_map(rng, 16, 16)
        anchors = rng.integers(0, 16, (10, 2))
        neg = hardest_negatives(a, b, anchors, np.eye(3), eps_neg=4.0, pool=256)
        assert (np.linalg.norm(neg - anchors, axis=1) > 4.0).all()


class TestTotalAndConfig:
    def test_zero_weights(self):
        assert total_loss(1.0, 2.0, 3.0, LossConfig(weight_kp=0, weight_desc=0, weight_seg=0)) == 0

    def test_unit_weights(self):
        assert total_loss(1.0, 2.0, 3.0, LossConfig()) == 6

    @given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10))
    def test_linear_in_weights(self, a, b, c):
        one = total_loss(1.0, 2.0, 3.0, LossConfig(weight_kp=a, weight_desc=b, weight_seg=c))
        two = total_loss(1.0, 2.0, 3.0, LossConfig(weight_kp=2 * a, weight_desc=2 * b, weight_seg=2 * c))
        assert two == pytest.approx(2 * one)

    @pytest.mark.parametrize("kw", [dict(weight_kp=-1), dict(margin_pos=0.0), dict(margin_neg=1.0), dict(eps_pos=8, eps_neg=8)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            LossConfig(**kw)
