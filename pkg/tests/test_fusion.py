import math

import numpy as np
import pytest
import torch

from discover.ensemble import AugmentParams, BackboneSpec, EnsembleClassifier
from discover.fusion import (EnsemblePrediction, bce_loss, fuse,
                             second_branch_forward)
from test_ensemble import ConstLogits, _const_ensemble


def _sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


class TestFuse:
    def test_neutral_element(self):
        rng = np.random.default_rng(0)
        p1 = torch.tensor(rng.uniform(0.01, 0.99, size=(20, 4)))
        fused = fuse(p1, torch.full_like(p1, 0.5))
        assert torch.allclose(fused, p1, atol=1e-6)

    def test_closed_form_sixteen_seventeenths(self):
        fused = fuse(torch.tensor([0.8]), torch.tensor([0.8]))
        assert abs(float(fused) - 16.0 / 17.0) < 1e-6

    def test_commutative(self):
        rng = np.random.default_rng(1)
        a = torch.tensor(rng.uniform(0.01, 0.99, size=12))
        b = torch.tensor(rng.uniform(0.01, 0.99, size=12))
        assert torch.allclose(fuse(a, b), fuse(b, a), atol=1e-12)

    def test_extremes_clamped_finite(self):
        fused = fuse(torch.tensor([0.0, 1.0]), torch.tensor([0.5, 0.5]))
        assert torch.isfinite(fused).all()
        assert 0.0 < float(fused.min()) and float(fused.max()) < 1.0


class TestBceLoss:
    def test_perfect_prediction_near_zero(self):
        targets = torch.tensor([[1.0, 1.0, 0.0, 0.0]])
        loss = bce_loss(targets.clone(), targets)
        assert 0 <= float(loss) <= 4 * abs(math.log(1 - 1e-7))

    def test_uniform_prediction_is_ln2(self):
        loss = bce_loss(torch.full((3, 4), 0.5), torch.tensor(
            [[1.0, 0, 0, 0], [1, 1, 0, 0], [0, 0, 0, 0]]))
        assert abs(float(loss) - math.log(2)) < 1e-9

    def test_ordinal_penalty_scales_with_grade_error(self):
        # true grade 2; predictions decode to grades 3 and 4
        target = torch.tensor([[1.0, 1.0, 0.0, 0.0]])
        off_by_one = torch.tensor([[1.0, 1.0, 1.0, 0.0]])
        off_by_two = torch.tensor([[1.0, 1.0, 1.0, 1.0]])
        l1 = float(bce_loss(off_by_one, target))
        l2 = float(bce_loss(off_by_two, target))
        assert l2 == pytest.approx(2 * l1, rel=1e-6)

    def test_decomposes_into_per_cutoff_terms(self):
        rng = np.random.default_rng(2)
        p = torch.tensor(rng.uniform(0.05, 0.95, size=(6, 4)))
        y = torch.tensor(rng.integers(0, 2, size=(6, 4)).astype(float))
        per_cutoff = [float(bce_loss(p[:, n], y[:, n])) for n in range(4)]
        assert float(bce_loss(p, y)) == pytest.approx(np.mean(per_cutoff), abs=1e-9)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            bce_loss(torch.zeros(0, 4), torch.zeros(0, 4))


class TestSecondBranch:
    def test_single_member_collapse(self):
        torch.manual_seed(0)
        clf = EnsembleClassifier([BackboneSpec(width=4)]).eval()
        slices = torch.rand(4, 3, 12, 10)
        with torch.no_grad():
            p2 = second_branch_forward(slices, clf)
            expected = torch.stack([
                torch.sigmoid(clf.members[0](slices[n:n + 1])[0, n]) for n in range(4)])
        assert torch.allclose(p2, expected, atol=1e-6)

    def test_zero_logits_give_half(self):
        clf = _const_ensemble([0.0] * 4, [0.0] * 4)
        p2 = second_branch_forward(torch.rand(4, 3, 8, 8), clf)
        assert torch.allclose(p2, torch.full((4,), 0.5), atol=1e-7)

    def test_output_n_depends_only_on_slice_n(self):
        torch.manual_seed(1)
        clf = EnsembleClassifier([BackboneSpec(width=4), BackboneSpec(width=6)]).eval()
        slices = torch.rand(4, 3, 12, 10)
        swapped = slices.clone()
        swapped[[0, 1]] = slices[[1, 0]]
        with torch.no_grad():
            p2 = second_branch_forward(slices, clf)
            p2_swapped = second_branch_forward(swapped, clf)
        assert not torch.allclose(p2[:2], p2_swapped[:2])
        assert torch.allclose(p2[2:], p2_swapped[2:], atol=1e-7)

    def test_eq8_hand_composition_with_mask_and_augs(self):
        torch.manual_seed(2)
        clf = EnsembleClassifier(
            [BackboneSpec(width=4), BackboneSpec(width=4), BackboneSpec(width=6)]).eval()
        slices = torch.rand(4, 3, 10, 10)
        mask = np.array([True, False, True])
        rng = np.random.default_rng(3)
        from discover.ensemble import AugmentConfig, apply_transform
        augs = [[AugmentConfig().sample(rng) for _ in range(4)] for _ in range(3)]
        with torch.no_grad():
            p2 = second_branch_forward(slices, clf, mask=mask, augs=augs)
            by_hand = torch.empty(4)
            for n in range(4):
                logits = [clf.members[k](apply_transform(slices[n:n + 1], augs[k][n]))[0, n]
                          for k in (0, 2)]
                by_hand[n] = torch.sigmoid(torch.stack(logits).mean())
        assert torch.allclose(p2, by_hand, atol=1e-6)

    def test_batched_form(self):
        torch.manual_seed(3)
        clf = EnsembleClassifier([BackboneSpec(width=4)]).eval()
        batch = torch.rand(2, 4, 3, 8, 8)
        with torch.no_grad():
            p2 = second_branch_forward(batch, clf)
            singles = torch.stack([second_branch_forward(batch[i], clf) for i in range(2)])
        assert p2.shape == (2, 4)
        assert torch.allclose(p2, singles, atol=1e-6)


class TestPrediction:
    def test_json_shape_and_grade_decoding(self):
        pred = EnsemblePrediction(p1=np.array([0.9, 0.8, 0.3, 0.1]),
                                  p=np.array([0.9, 0.7, 0.6, 0.2]),
                                  p2=np.array([0.8, 0.6, 0.7, 0.4]),
                                  z_indices=np.array([1, 2, 3, 4]))
        data = pred.to_json()
        assert data["grade"] == 3
        assert data["z_indices"] == [1, 2, 3, 4]
        assert len(data["p"]) == 4

    def test_c1_only_prediction(self):
        p1 = np.array([0.2, 0.1, 0.05, 0.01])
        pred = EnsemblePrediction(p1=p1, p=p1)
        data = pred.to_json()
        assert data["p2"] is None and data["grade"] == 0
