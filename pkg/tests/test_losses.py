import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dualpath import functional as F
from dualpath.autograd import Parameter, Tensor, backward
from dualpath.errors import LabelIndexError, NumericError, ParameterError, SamplingError
from dualpath.losses import (
    STAGE1,
    STAGE2,
    LossWeights,
    QuadBatch,
    combined_loss,
    cosine_similarity,
    instance_loss,
    negative_indices,
    ranking_loss,
    ranking_loss_from_similarities,
    sample_negatives,
)
from dualpath.nn import Linear
from dualpath.optim import sgd_momentum_step, zero_grad


def _unit(angle):
    return np.array([np.cos(angle), np.sin(angle)])


def _quad(ia, ta, in_, tn):
    rows = [Tensor(np.atleast_2d(v)) for v in (ia, ta, in_, tn)]
    return QuadBatch(*rows, np.array([0]), np.array([1]), np.array([1]))


finite_vectors = arrays(np.float64, 5, elements=st.floats(-10, 10)).filter(lambda v: np.linalg.norm(v) > 1e-3)


class TestCosine:
    @settings(max_examples=50, deadline=None)
    @given(finite_vectors, finite_vectors, st.floats(0.01, 100))
    def test_properties(self, v, w, alpha):
        assert cosine_similarity(v, v) == pytest.approx(1.0)
        assert cosine_similarity(v, -v) == pytest.approx(-1.0)
        assert cosine_similarity(alpha * v, w) == pytest.approx(cosine_similarity(v, w), abs=1e-12)
        assert -1.0 <= cosine_similarity(v, w) <= 1.0

    def test_zero_norm(self):
        with pytest.raises(NumericError):
            cosine_similarity(np.zeros(3), np.ones(3))


class TestRankingLoss:
    def test_hand_example(self):
        assert ranking_loss_from_similarities([0.9], [0.1], [0.2], 1.0).item() == pytest.approx(0.5)

    def test_hand_example_from_vectors(self):
        theta = np.arccos(0.9)
        ia, ta = _unit(0.0), _unit(theta)
        tn = _unit(np.arccos(0.1))
        in_ = _unit(theta + np.arccos(0.2))
        assert ranking_loss(_quad(ia, ta, in_, tn), 1.0).item() == pytest.approx(0.5, abs=1e-12)

    def test_margins_satisfied(self):
        v = np.array([1.0, 0.0])
        assert ranking_loss(_quad(v, v, -v, -v), 1.0).item() == 0.0

    def test_equidistant_gives_twice_margin(self):
        v = np.array([1.0, 2.0])
        assert ranking_loss(_quad(v, v, v, v), 0.7).item() == pytest.approx(1.4)

    def test_negative_sharing_anchor_class(self):
        t = Tensor(np.ones((1, 2)))
        with pytest.raises(SamplingError):
            QuadBatch(t, t, t, t, np.array([0]), np.array([0]), np.array([1]))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 3), elements=st.floats(-1, 1)), st.floats(0.0, 2.0))
    def test_nonnegative_and_zero_iff_satisfied(self, sims, margin):
        pos, neg_t, neg_i = sims
        value = ranking_loss_from_similarities(pos, neg_t, neg_i, margin).item()
        assert value >= 0
        satisfied = np.all(pos - neg_t >= margin) and np.all(pos - neg_i >= margin)
        assert (value == 0) == satisfied


class TestInstanceLoss:
    def test_symmetric_two_class(self):
        f = Tensor([[1.0, 0.0], [2.0, 0.0]])
        w = Tensor([[0.0, 0.0], [1.0, 1.0]])  # columns orthogonal to both features
        v, t = instance_loss(f, f, [0, 1], w)
        assert v.item() == pytest.approx(np.log(2)) and t.item() == pytest.approx(np.log(2))

    def test_saturated(self):
        w = Tensor(np.eye(2))
        f = Tensor([[500.0, 0.0]])
        v, t = instance_loss(f, f, [0], w)
        assert v.item() < 1e-12 and t.item() < 1e-12

    def test_class_out_of_range(self):
        with pytest.raises(LabelIndexError):
            instance_loss(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))), [2], Tensor(np.eye(2)))

    def test_logit_shift_invariance(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((4, 3))
        labels = [0, 2, 1, 1]
        a = F.softmax_cross_entropy(Tensor(logits), labels).item()
        b = F.softmax_cross_entropy(Tensor(logits + rng.standard_normal(3)[0]), labels).item()
        assert a == pytest.approx(b, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, 3, elements=st.floats(-3, 3)), st.floats(1.0, 10.0))
    def test_scaling_correct_feature_never_hurts(self, f, alpha):
        w = np.random.default_rng(1).standard_normal((3, 4))
        label = int(np.argmax(f @ w))
        base, _ = instance_loss(Tensor(f[None]), Tensor(f[None]), [label], Tensor(w))
        scaled, _ = instance_loss(Tensor(alpha * f[None]), Tensor(f[None]), [label], Tensor(w))
        assert scaled.item() <= base.item() + 1e-12

    def test_shared_boundary_separates_both_modalities(self):
        # two groups, image and text samples mapped to D=2 by separate linear maps
        rng = np.random.default_rng(0)
        centres = rng.standard_normal((2, 6)) * 2
        labels = np.repeat([0, 1], 10)
        x_img = centres[labels] + 0.3 * rng.standard_normal((20, 6))
        x_txt = centres[labels][:, ::-1] + 0.3 * rng.standard_normal((20, 6))
        img_map = Linear(6, 2, rng=rng, dtype=np.float64)
        txt_map = Linear(6, 2, rng=rng, dtype=np.float64)
        w = Parameter(rng.standard_normal((2, 2)) * 0.1)
        params = [*img_map.parameters(), *txt_map.parameters(), w]
        for _ in range(200):
            zero_grad(params)
            v, t = instance_loss(img_map(Tensor(x_img)), txt_map(Tensor(x_txt)), labels, w)
            backward(F.add(v, t))
            sgd_momentum_step(params, 0.05, 0.9)
        direction = w.data[:, 0] - w.data[:, 1]
        for feats in (img_map(Tensor(x_img)).data, txt_map(Tensor(x_txt)).data):
            side = feats @ direction > 0
            np.testing.assert_array_equal(side, labels == 0)


class TestCombinedLoss:
    def test_presets(self):
        assert STAGE1.as_tuple() == (0, 1, 1) and STAGE2.as_tuple() == (1, 1, 1)

    def test_exact_sum(self):
        assert combined_loss(0.5, 0.7, 0.6, STAGE2).item() == pytest.approx(1.8, abs=1e-15)

    def test_weighted_sum(self):
        assert combined_loss(2.0, 3.0, 5.0, LossWeights(0.5, 2.0, 0.1)).item() == pytest.approx(7.5)

    def test_stage1_ignores_rank(self):
        assert combined_loss(123.0, 0.7, 0.6, STAGE1).item() == combined_loss(None, 0.7, 0.6, STAGE1).item()

    def test_all_zero(self):
        assert combined_loss(1.0, 2.0, 3.0, LossWeights(0, 0, 0)).item() == 0.0

    def test_negative_weight(self):
        with pytest.raises(ParameterError):
            LossWeights(1.0, -0.1, 1.0)

    def test_gradient_is_weighted_sum(self):
        rng = np.random.default_rng(3)
        feats = rng.standard_normal((4, 3))
        w = rng.standard_normal((3, 3))
        labels = np.array([0, 1, 2, 0])
        weights = LossWeights(0.0, 0.3, 1.7)

        def grads(fn):
            x = Tensor(feats, requires_grad=True)
            backward(fn(x))
            return x.grad

        total = grads(lambda x: combined_loss(None, *instance_loss(x, x, labels, Tensor(w)), weights))
        parts = [grads(lambda x, i=i: instance_loss(x, x, labels, Tensor(w))[i]) for i in (0, 1)]
        np.testing.assert_allclose(total, 0.3 * parts[0] + 1.7 * parts[1], atol=1e-12)


class TestNegatives:
    def test_two_groups_forced(self):
        neg_i, neg_t = negative_indices([4, 9], "random", np.random.default_rng(0))
        assert list(neg_i) == [1, 0] and list(neg_t) == [1, 0]

    def test_hardest_picks_most_similar(self):
        sim = np.array([[0.9, 0.1, 0.8], [0.0, 0.9, 0.0], [0.0, 0.0, 0.9]])
        _, neg_t = negative_indices([0, 1, 2], "hardest", similarity=sim)
        assert neg_t[0] == 2

    def test_hardest_image_direction(self):
        sim = np.array([[0.9, 0.3], [0.7, 0.9]])
        neg_i, _ = negative_indices([0, 1], "hardest", similarity=sim)
        # caption 0 is closest (among other groups) to image 1
        assert neg_i[0] == 1

    def test_uniform_over_candidates(self):
        rng = np.random.default_rng(7)
        counts = np.zeros(5, dtype=int)
        for _ in range(10_000):
            counts[negative_indices([0, 1, 2, 3, 4], "random", rng)[0][0]] += 1
        assert counts[0] == 0
        assert np.all(np.abs(counts[1:] - 2500) <= 150)

    def test_own_group_excluded(self):
        rng = np.random.default_rng(0)
        ids = np.array([0, 0, 0, 1])
        for _ in range(50):
            neg_i, neg_t = negative_indices(ids, "random", rng)
            assert np.all(ids[neg_i] != ids) and np.all(ids[neg_t] != ids)

    def test_single_class(self):
        with pytest.raises(SamplingError):
            negative_indices([3, 3, 3], "random", np.random.default_rng(0))

    @pytest.mark.parametrize("strategy", ["random", "hardest"])
    def test_sample_negatives_builds_valid_batch(self, strategy):
        rng = np.random.default_rng(0)
        f_img = Tensor(rng.standard_normal((6, 4)))
        f_txt = Tensor(rng.standard_normal((6, 4)))
        quad = sample_negatives(f_img, f_txt, [0, 1, 1, 2, 3, 3], strategy, rng)
        assert np.all(quad.neg_text_ids != quad.anchor_ids)
        assert quad.f_In.shape == quad.f_Tn.shape == (6, 4)
